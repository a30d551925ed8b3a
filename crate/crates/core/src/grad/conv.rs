//! Image kernels for the convolution, pooling and upsampling graph ops.
//! Layout is `[batch, channels, height, width]` throughout.

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub(crate) struct ConvGeometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
    oh: usize,
    ow: usize,
}

fn dims4(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    match t.shape() {
        [a, b, c, d] => Ok([*a, *b, *c, *d]),
        s => Err(Error::contract(op, format!("expected rank-4 tensor, got {:?}", s))),
    }
}

impl ConvGeometry {
    pub(crate) fn infer(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, same: bool) -> Result<Self> {
        let [batch, cin, h, wd] = dims4("conv2d", x)?;
        let [cout, kcin, kh, kw] = dims4("conv2d", w)?;
        if kcin != cin || b.shape() != [cout] || stride == 0 {
            return Err(Error::contract(
                "conv2d",
                format!(
                    "input {:?}, kernel {:?}, bias {:?}, stride {}",
                    x.shape(),
                    w.shape(),
                    b.shape(),
                    stride
                ),
            ));
        }
        let (oh, ow, pad_top, pad_left) = if same {
            let oh = h.div_ceil(stride);
            let ow = wd.div_ceil(stride);
            let ph = ((oh - 1) * stride + kh).saturating_sub(h);
            let pw = ((ow - 1) * stride + kw).saturating_sub(wd);
            (oh, ow, ph / 2, pw / 2)
        } else {
            if kh > h || kw > wd {
                return Err(Error::contract(
                    "conv2d",
                    format!("kernel {}x{} larger than input {}x{}", kh, kw, h, wd),
                ));
            }
            ((h - kh) / stride + 1, (wd - kw) / stride + 1, 0, 0)
        };
        Ok(ConvGeometry {
            batch,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            stride,
            pad_top,
            pad_left,
            oh,
            ow,
        })
    }

    /// Input coordinate for output `o` and kernel tap `k`, if inside the image.
    #[inline]
    fn src(&self, o: usize, k: usize, pad: usize, limit: usize) -> Option<usize> {
        let p = (o * self.stride + k) as isize - pad as isize;
        (p >= 0 && (p as usize) < limit).then_some(p as usize)
    }
}

pub(crate) fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, g: &ConvGeometry) -> Tensor {
    let mut out = vec![0.0; g.batch * g.cout * g.oh * g.ow];
    let (xd, wd) = (x.data(), w.data());
    for n in 0..g.batch {
        for o in 0..g.cout {
            let obase = (n * g.cout + o) * g.oh * g.ow;
            out[obase..obase + g.oh * g.ow].fill(b.data()[o]);
            for c in 0..g.cin {
                let xbase = (n * g.cin + c) * g.h * g.w;
                let wbase = (o * g.cin + c) * g.kh * g.kw;
                for u in 0..g.kh {
                    for v in 0..g.kw {
                        let wt = wd[wbase + u * g.kw + v];
                        for i in 0..g.oh {
                            let Some(si) = g.src(i, u, g.pad_top, g.h) else { continue };
                            let row = xbase + si * g.w;
                            let orow = obase + i * g.ow;
                            for j in 0..g.ow {
                                if let Some(sj) = g.src(j, v, g.pad_left, g.w) {
                                    out[orow + j] += wt * xd[row + sj];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.batch, g.cout, g.oh, g.ow], out).expect("conv output shape")
}

pub(crate) fn conv2d_backward(x: &Tensor, w: &Tensor, up: &Tensor, g: &ConvGeometry) -> (Tensor, Tensor, Tensor) {
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(w.shape());
    let mut gb = vec![0.0; g.cout];
    let (xd, wd, ud) = (x.data(), w.data(), up.data());
    for n in 0..g.batch {
        for (o, gbo) in gb.iter_mut().enumerate() {
            let obase = (n * g.cout + o) * g.oh * g.ow;
            *gbo += ud[obase..obase + g.oh * g.ow].iter().sum::<f64>();
            for c in 0..g.cin {
                let xbase = (n * g.cin + c) * g.h * g.w;
                let wbase = (o * g.cin + c) * g.kh * g.kw;
                for u in 0..g.kh {
                    for v in 0..g.kw {
                        let wt = wd[wbase + u * g.kw + v];
                        let mut acc = 0.0;
                        for i in 0..g.oh {
                            let Some(si) = g.src(i, u, g.pad_top, g.h) else { continue };
                            let row = xbase + si * g.w;
                            let orow = obase + i * g.ow;
                            for j in 0..g.ow {
                                if let Some(sj) = g.src(j, v, g.pad_left, g.w) {
                                    let uv = ud[orow + j];
                                    acc += uv * xd[row + sj];
                                    gx.data_mut()[row + sj] += uv * wt;
                                }
                            }
                        }
                        gw.data_mut()[wbase + u * g.kw + v] += acc;
                    }
                }
            }
        }
    }
    (gx, gw, Tensor::vector(gb))
}

pub(crate) fn max_pool_forward(x: &Tensor, size: usize) -> Result<(Tensor, Vec<usize>)> {
    let [n, c, h, w] = dims4("max_pool2d", x)?;
    if size == 0 || size > h || size > w {
        return Err(Error::contract(
            "max_pool2d",
            format!("window {} for {}x{} input", size, h, w),
        ));
    }
    let (oh, ow) = (h / size, w / size);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let xd = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + i * size * w + j * size;
                for u in 0..size {
                    for v in 0..size {
                        let idx = base + (i * size + u) * w + j * size + v;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, argmax))
}

/// Source taps `(lo, hi, frac)` for each output coordinate of a bilinear resize.
fn taps(input: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..input * factor)
        .map(|o| {
            let s = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

pub(crate) fn upsample_forward(x: &Tensor, factor: usize) -> Result<Tensor> {
    let [n, c, h, w] = dims4("upsample_bilinear", x)?;
    if factor == 0 || h == 0 || w == 0 {
        return Err(Error::contract("upsample_bilinear", "zero factor or empty input"));
    }
    let (ty, tx) = (taps(h, factor), taps(w, factor));
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![0.0; n * c * oh * ow];
    let xd = x.data();
    for plane in 0..n * c {
        let src = &xd[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[i * ow + j] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub(crate) fn upsample_backward(x: &Tensor, up: &Tensor, factor: usize) -> Tensor {
    let [n, c, h, w] = dims4("upsample_bilinear", x).expect("validated in forward");
    let (ty, tx) = (taps(h, factor), taps(w, factor));
    let (oh, ow) = (h * factor, w * factor);
    let mut g = Tensor::zeros(x.shape());
    let ud = up.data();
    for plane in 0..n * c {
        let gsrc = &mut g.data_mut()[plane * h * w..(plane + 1) * h * w];
        let u = &ud[plane * oh * ow..(plane + 1) * oh * ow];
        for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                let uv = u[i * ow + j];
                gsrc[y0 * w + x0] += uv * (1.0 - fy) * (1.0 - fx);
                gsrc[y0 * w + x1] += uv * (1.0 - fy) * fx;
                gsrc[y1 * w + x0] += uv * fy * (1.0 - fx);
                gsrc[y1 * w + x1] += uv * fy * fx;
            }
        }
    }
    g
}
