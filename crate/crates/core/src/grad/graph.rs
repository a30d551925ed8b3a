use std::collections::BTreeMap;

use super::conv::{self, ConvGeometry};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Square,
    Abs,
    Cbrt,
    Atan,
    Neg,
}

impl Unary {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::Sigmoid => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
            Unary::Tanh => x.tanh(),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Square => x * x,
            Unary::Abs => x.abs(),
            Unary::Cbrt => x.cbrt(),
            Unary::Atan => x.atan(),
            Unary::Neg => -x,
        }
    }

    /// d(out)/d(in) given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Square => 2.0 * x,
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            // The cube root has a vertical tangent at zero; report zero there.
            Unary::Cbrt => {
                if y == 0.0 {
                    0.0
                } else {
                    1.0 / (3.0 * y * y)
                }
            }
            Unary::Atan => 1.0 / (1.0 + x * x),
            Unary::Neg => -1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Min,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
            Binary::Min => "minimum",
        }
    }
}

/// An operation whose forward pass and vector-Jacobian product live outside
/// the built-in catalog (quantum circuits, for example).
pub trait CustomOp: Send {
    fn name(&self) -> &'static str;

    /// Computes the output and may cache whatever `backward` needs.
    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor>;

    /// Gradients with respect to each input, given the upstream gradient of the output.
    fn backward(&self, inputs: &[&Tensor], upstream: &Tensor) -> Result<Vec<Tensor>>;
}

enum Op {
    Leaf,
    Affine { x: usize, w: usize, b: usize },
    Conv2d { x: usize, w: usize, b: usize, geom: ConvGeometry },
    MaxPool { x: usize, argmax: Vec<usize> },
    Upsample { x: usize, factor: usize },
    Unary { x: usize, kind: Unary },
    Clip { x: usize, lo: f64, hi: f64 },
    Softmax { x: usize },
    Sum { x: usize },
    Mean { x: usize },
    SumLast { x: usize },
    Binary { a: usize, b: usize, kind: Binary },
    Scale { x: usize, c: f64 },
    AddScalar { x: usize },
    Gather { x: usize, idx: Vec<usize> },
    Reshape { x: usize },
    Columns { x: usize, start: usize },
    Custom { inputs: Vec<usize>, op: Box<dyn CustomOp> },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Affine { x, w, b } | Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::Binary { a, b, .. } => vec![*a, *b],
            Op::Custom { inputs, .. } => inputs.clone(),
            Op::MaxPool { x, .. }
            | Op::Upsample { x, .. }
            | Op::Unary { x, .. }
            | Op::Clip { x, .. }
            | Op::Softmax { x }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::SumLast { x }
            | Op::Scale { x, .. }
            | Op::AddScalar { x }
            | Op::Gather { x, .. }
            | Op::Reshape { x }
            | Op::Columns { x, .. } => vec![*x],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    param: Option<String>,
    /// Some parameter lies upstream of this node.
    needs_grad: bool,
}

/// Define-by-run differentiation graph. Nodes are appended in evaluation
/// order, so creation order is a valid topological order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, usize>,
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    per_node: Vec<Option<Tensor>>,
    by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient for a named parameter.
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    /// Gradient with respect to any node, `None` when the loss does not reach
    /// it or no parameter lies upstream of it.
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.per_node.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn by_name(&self) -> &BTreeMap<String, Tensor> {
        &self.by_name
    }

    pub fn into_named(self) -> BTreeMap<String, Tensor> {
        self.by_name
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::contract(
            op,
            format!("shape mismatch {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = op.inputs().iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            param: None,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A named trainable leaf. Registering the same name twice is an error.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<Var> {
        if self.params.contains_key(name) {
            return Err(Error::contract("param", format!("duplicate parameter {name}")));
        }
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].param = Some(name.to_string());
        self.nodes[v.0].needs_grad = true;
        self.params.insert(name.to_string(), v.0);
        Ok(v)
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    /// Fully connected layer: `x @ w + b` for `x` of shape `[batch, in]` or `[in]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if wv.rank() != 2 || bv.rank() != 1 || bv.shape()[0] != wv.shape()[1] {
            return Err(Error::contract(
                "affine",
                format!("weight {:?} / bias {:?} incompatible", wv.shape(), bv.shape()),
            ));
        }
        let (fan_in, fan_out) = (wv.shape()[0], wv.shape()[1]);
        let (batch, out_shape) = match xv.shape() {
            [n] if *n == fan_in => (1, vec![fan_out]),
            [bs, n] if *n == fan_in => (*bs, vec![*bs, fan_out]),
            s => {
                return Err(Error::contract(
                    "affine",
                    format!("input {:?} does not match weight {:?}", s, wv.shape()),
                ))
            }
        };
        let (xd, wd, bd) = (xv.data(), wv.data(), bv.data());
        let mut out = vec![0.0; batch * fan_out];
        for r in 0..batch {
            let row = &mut out[r * fan_out..(r + 1) * fan_out];
            row.copy_from_slice(bd);
            for i in 0..fan_in {
                let xi = xd[r * fan_in + i];
                if xi == 0.0 {
                    continue;
                }
                let wrow = &wd[i * fan_out..(i + 1) * fan_out];
                for (o, w) in row.iter_mut().zip(wrow) {
                    *o += xi * w;
                }
            }
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::Affine { x: x.0, w: w.0, b: b.0 }))
    }

    /// 2-D convolution over `[batch, channels, height, width]` with a
    /// `[out, in, kh, kw]` kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, same: bool) -> Result<Var> {
        let geom = ConvGeometry::infer(self.value(x), self.value(w), self.value(b), stride, same)?;
        let value = conv::conv2d_forward(self.value(x), self.value(w), self.value(b), &geom);
        Ok(self.push(value, Op::Conv2d { x: x.0, w: w.0, b: b.0, geom }))
    }

    /// Non-overlapping max pooling with window and stride `size`.
    pub fn max_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let (value, argmax) = conv::max_pool_forward(self.value(x), size)?;
        Ok(self.push(value, Op::MaxPool { x: x.0, argmax }))
    }

    /// Bilinear upsampling by an integer factor (half-pixel centers, edge clamped).
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        let value = conv::upsample_forward(self.value(x), factor)?;
        Ok(self.push(value, Op::Upsample { x: x.0, factor }))
    }

    /// Transposed convolution realized as bilinear upsampling then a same-padded convolution.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, factor: usize) -> Result<Var> {
        let up = self.upsample_bilinear(x, factor)?;
        self.conv2d(up, w, b, 1, true)
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let value = self.value(x).map(|v| kind.apply(v));
        self.push(value, Op::Unary { x: x.0, kind })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Log)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }

    pub fn cbrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Cbrt)
    }

    pub fn atan(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Atan)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Neg)
    }

    pub fn clip(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo.is_nan() || hi.is_nan() || lo > hi {
            return Err(Error::contract("clip", format!("empty range [{lo}, {hi}]")));
        }
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        Ok(self.push(value, Op::Clip { x: x.0, lo, hi }))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let k = *xv
            .shape()
            .last()
            .ok_or_else(|| Error::contract("softmax", "scalar input"))?;
        if k == 0 {
            return Err(Error::contract("softmax", "empty last axis"));
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(k) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Softmax { x: x.0 }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x: x.0 })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::contract("mean", "empty tensor"));
        }
        let s = xv.data().iter().sum::<f64>() / xv.len() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mean { x: x.0 }))
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (k, lead) = match xv.shape().split_last() {
            Some((k, lead)) if *k > 0 => (*k, lead.to_vec()),
            _ => return Err(Error::contract("sum_last", format!("bad shape {:?}", xv.shape()))),
        };
        let data = xv.data().chunks(k).map(|r| r.iter().sum()).collect();
        let value = Tensor::new(lead, data)?;
        Ok(self.push(value, Op::SumLast { x: x.0 }))
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
            Binary::Min => x.min(y),
        };
        let value = if av.shape() == bv.shape() {
            let d = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(av.shape().to_vec(), d)?
        } else if bv.len() == 1 {
            let y = bv.data()[0];
            av.map(|x| f(x, y))
        } else if av.len() == 1 {
            let x = av.data()[0];
            bv.map(|y| f(x, y))
        } else {
            return Err(Error::contract(
                kind.name(),
                format!("shapes {:?} and {:?} do not broadcast", av.shape(), bv.shape()),
            ));
        };
        Ok(self.push(value, Op::Binary { a: a.0, b: b.0, kind }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Div)
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Min)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale { x: x.0, c })
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v + c);
        self.push(value, Op::AddScalar { x: x.0 })
    }

    /// Picks `x[i, idx[i]]` from a `[batch, k]` tensor.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, k) = match xv.shape() {
            [r, k] => (*r, *k),
            s => return Err(Error::contract("gather", format!("expected rank 2, got {:?}", s))),
        };
        if idx.len() != rows || idx.iter().any(|&i| i >= k) {
            return Err(Error::contract(
                "gather",
                format!("{} indices for {:?}", idx.len(), xv.shape()),
            ));
        }
        let d = idx.iter().enumerate().map(|(r, &i)| xv.data()[r * k + i]).collect();
        let value = Tensor::vector(d);
        Ok(self.push(value, Op::Gather { x: x.0, idx: idx.to_vec() }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        Ok(self.push(value, Op::Reshape { x: x.0 }))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn columns(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let k = *xv.shape().last().unwrap_or(&0);
        if start + len > k || len == 0 {
            return Err(Error::contract(
                "columns",
                format!("range {}..{} outside last axis of {:?}", start, start + len, xv.shape()),
            ));
        }
        let data = xv
            .data()
            .chunks(k)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Columns { x: x.0, start }))
    }

    pub fn custom(&mut self, inputs: &[Var], mut op: Box<dyn CustomOp>) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let value = op.forward(&values)?;
        let inputs = inputs.iter().map(|v| v.0).collect();
        Ok(self.push(value, Op::Custom { inputs, op }))
    }

    /// Reverse sweep from a scalar node. Every registered parameter receives a
    /// gradient, zero when the loss does not depend on it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                grads[idx] = None;
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            for (input, g) in self.vjp(idx, &upstream)? {
                if !self.nodes[input].needs_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            grads[idx] = Some(upstream);
        }

        let mut by_name = BTreeMap::new();
        for (name, &i) in &self.params {
            let g = grads[i]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(self.nodes[i].value.shape()));
            by_name.insert(name.clone(), g);
        }
        Ok(Gradients {
            per_node: grads,
            by_name,
        })
    }

    fn vjp(&self, idx: usize, up: &Tensor) -> Result<Vec<(usize, Tensor)>> {
        let node = &self.nodes[idx];
        let val = |i: usize| &self.nodes[i].value;
        let out = &node.value;
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Affine { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (fan_in, fan_out) = (wv.shape()[0], wv.shape()[1]);
                let batch = xv.len() / fan_in;
                let (xd, wd, ud) = (xv.data(), wv.data(), up.data());
                let want_x = self.nodes[*x].needs_grad;
                let mut gx = vec![0.0; xv.len()];
                let mut gw = vec![0.0; wv.len()];
                let mut gb = vec![0.0; fan_out];
                for r in 0..batch {
                    let urow = &ud[r * fan_out..(r + 1) * fan_out];
                    for (g, u) in gb.iter_mut().zip(urow) {
                        *g += u;
                    }
                    for i in 0..fan_in {
                        let wrow = &wd[i * fan_out..(i + 1) * fan_out];
                        if want_x {
                            gx[r * fan_in + i] = wrow.iter().zip(urow).map(|(a, b)| a * b).sum();
                        }
                        let xi = xd[r * fan_in + i];
                        if xi != 0.0 {
                            let gwrow = &mut gw[i * fan_out..(i + 1) * fan_out];
                            for (g, u) in gwrow.iter_mut().zip(urow) {
                                *g += xi * u;
                            }
                        }
                    }
                }
                vec![
                    (*x, Tensor::new(xv.shape().to_vec(), gx)?),
                    (*w, Tensor::new(wv.shape().to_vec(), gw)?),
                    (*b, Tensor::vector(gb)),
                ]
            }
            Op::Conv2d { x, w, b, geom } => {
                let (gx, gw, gb) = conv::conv2d_backward(val(*x), val(*w), up, geom);
                vec![(*x, gx), (*w, gw), (*b, gb)]
            }
            Op::MaxPool { x, argmax } => {
                let mut g = Tensor::zeros(val(*x).shape());
                let gd = g.data_mut();
                for (&src, &u) in argmax.iter().zip(up.data()) {
                    gd[src] += u;
                }
                vec![(*x, g)]
            }
            Op::Upsample { x, factor } => vec![(*x, conv::upsample_backward(val(*x), up, *factor))],
            Op::Unary { x, kind } => {
                let xv = val(*x);
                let d = xv
                    .data()
                    .iter()
                    .zip(out.data())
                    .zip(up.data())
                    .map(|((&xi, &yi), &u)| u * kind.derivative(xi, yi))
                    .collect();
                vec![(*x, Tensor::new(xv.shape().to_vec(), d)?)]
            }
            Op::Clip { x, lo, hi } => {
                let xv = val(*x);
                let d = xv
                    .data()
                    .iter()
                    .zip(up.data())
                    .map(|(&xi, &u)| if xi >= *lo && xi <= *hi { u } else { 0.0 })
                    .collect();
                vec![(*x, Tensor::new(xv.shape().to_vec(), d)?)]
            }
            Op::Softmax { x } => {
                let k = *out.shape().last().unwrap();
                let mut d = vec![0.0; out.len()];
                for ((drow, yrow), urow) in d
                    .chunks_mut(k)
                    .zip(out.data().chunks(k))
                    .zip(up.data().chunks(k))
                {
                    let dot: f64 = yrow.iter().zip(urow).map(|(a, b)| a * b).sum();
                    for ((dv, y), u) in drow.iter_mut().zip(yrow).zip(urow) {
                        *dv = y * (u - dot);
                    }
                }
                vec![(*x, Tensor::new(out.shape().to_vec(), d)?)]
            }
            Op::Sum { x } => vec![(*x, Tensor::full(val(*x).shape(), up.data()[0]))],
            Op::Mean { x } => {
                let xv = val(*x);
                vec![(*x, Tensor::full(xv.shape(), up.data()[0] / xv.len() as f64))]
            }
            Op::SumLast { x } => {
                let xv = val(*x);
                let k = *xv.shape().last().unwrap();
                let d = up.data().iter().flat_map(|&u| std::iter::repeat_n(u, k)).collect();
                vec![(*x, Tensor::new(xv.shape().to_vec(), d)?)]
            }
            Op::Binary { a, b, kind } => self.binary_vjp(*a, *b, *kind, up)?,
            Op::Scale { x, c } => vec![(*x, up.map(|u| u * c))],
            Op::AddScalar { x } => vec![(*x, up.clone())],
            Op::Gather { x, idx } => {
                let xv = val(*x);
                let k = xv.shape()[1];
                let mut g = Tensor::zeros(xv.shape());
                for (r, (&i, &u)) in idx.iter().zip(up.data()).enumerate() {
                    g.data_mut()[r * k + i] += u;
                }
                vec![(*x, g)]
            }
            Op::Reshape { x } => vec![(*x, up.reshaped(val(*x).shape())?)],
            Op::Columns { x, start } => {
                let xv = val(*x);
                let k = *xv.shape().last().unwrap();
                let len = *out.shape().last().unwrap();
                let mut g = Tensor::zeros(xv.shape());
                for (grow, urow) in g.data_mut().chunks_mut(k).zip(up.data().chunks(len)) {
                    grow[*start..start + len].copy_from_slice(urow);
                }
                vec![(*x, g)]
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&i| val(i)).collect();
                let gs = op.backward(&values, up)?;
                if gs.len() != inputs.len() {
                    return Err(Error::contract(
                        "custom",
                        format!("{} returned {} gradients for {} inputs", op.name(), gs.len(), inputs.len()),
                    ));
                }
                for (g, v) in gs.iter().zip(&values) {
                    same_shape(op.name(), g, v)?;
                }
                inputs.iter().copied().zip(gs).collect()
            }
        })
    }

    fn binary_vjp(&self, a: usize, b: usize, kind: Binary, up: &Tensor) -> Result<Vec<(usize, Tensor)>> {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        let n = up.len();
        let at = |i: usize| if av.len() == 1 { av.data()[0] } else { av.data()[i] };
        let bt = |i: usize| if bv.len() == 1 { bv.data()[0] } else { bv.data()[i] };
        let mut ga = vec![0.0; n];
        let mut gb = vec![0.0; n];
        for i in 0..n {
            let u = up.data()[i];
            let (x, y) = (at(i), bt(i));
            let (da, db) = match kind {
                Binary::Add => (1.0, 1.0),
                Binary::Sub => (1.0, -1.0),
                Binary::Mul => (y, x),
                Binary::Div => (1.0 / y, -x / (y * y)),
                Binary::Min => {
                    if x <= y {
                        (1.0, 0.0)
                    } else {
                        (0.0, 1.0)
                    }
                }
            };
            ga[i] = u * da;
            gb[i] = u * db;
        }
        let reduce = |g: Vec<f64>, like: &Tensor| -> Result<Tensor> {
            if like.len() == n && like.shape() == up.shape() {
                Tensor::new(like.shape().to_vec(), g)
            } else {
                Ok(Tensor::full(like.shape(), g.iter().sum()))
            }
        };
        Ok(vec![(a, reduce(ga, av)?), (b, reduce(gb, bv)?)])
    }
}
