//! Classical networks: dense and convolutional autoencoders, the critic and
//! the all-classical CNN baseline policy.
//!
//! Every network is a [`Stack`] of layers over flat per-sample inputs
//! (`[B, D]`); image layers reshape to `[B, C, H, W]` internally. Parameter
//! names are `<prefix>.<layer>.w` / `.b`, so the prefix doubles as the
//! optimizer group.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{mse, Bindings, Graph, Optimizer, ParamSet, Tensor, Unary, Var};

pub const IMAGE_SIDE: usize = 48;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Linear,
    Relu,
    Sigmoid,
    Tanh,
}

/// One layer of a [`Stack`]. Convolutions use "same" padding.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Dense { units: usize, act: Activation },
    Conv { channels: usize, kernel: usize, stride: usize, act: Activation },
    MaxPool(usize),
    /// Bilinear upsampling by an integer factor.
    Upsample(usize),
    Flatten,
    /// `[C, H, W]` view of a flat sample.
    Unflatten([usize; 3]),
}

/// A sequential network with named parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Stack {
    prefix: String,
    input: Vec<usize>,
    layers: Vec<LayerSpec>,
}

fn shape_err(prefix: &str, layer: usize, detail: String) -> Error {
    Error::Config(format!("{prefix} layer {layer}: {detail}"))
}

impl Stack {
    /// Validates that every layer accepts its input shape.
    pub fn new(prefix: &str, input: Vec<usize>, layers: Vec<LayerSpec>) -> Result<Self> {
        let s = Stack {
            prefix: prefix.to_string(),
            input,
            layers,
        };
        s.shapes()?;
        Ok(s)
    }

    /// Per-sample shape after each layer, starting with the input.
    fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut out = vec![self.input.clone()];
        for (i, l) in self.layers.iter().enumerate() {
            let cur = out.last().unwrap();
            let next = match (l, cur.as_slice()) {
                (LayerSpec::Dense { units, .. }, [_]) => vec![*units],
                (LayerSpec::Conv { channels, stride, .. }, [_, h, w]) if *stride > 0 => {
                    vec![*channels, h.div_ceil(*stride), w.div_ceil(*stride)]
                }
                (LayerSpec::MaxPool(p), [c, h, w]) if *p > 0 && p <= h && p <= w => vec![*c, h / p, w / p],
                (LayerSpec::Upsample(f), [c, h, w]) if *f > 0 => vec![*c, h * f, w * f],
                (LayerSpec::Flatten, s) => vec![s.iter().product()],
                (LayerSpec::Unflatten(dims), [n]) if dims.iter().product::<usize>() == *n => dims.to_vec(),
                (l, s) => return Err(shape_err(&self.prefix, i, format!("{l:?} cannot take input {s:?}"))),
            };
            out.push(next);
        }
        Ok(out)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.shapes().expect("validated at construction").pop().unwrap()
    }

    fn param_shapes(&self) -> Vec<(String, Vec<usize>, usize, usize)> {
        let shapes = self.shapes().expect("validated at construction");
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            let inp = &shapes[i];
            match l {
                LayerSpec::Dense { units, .. } => {
                    out.push((format!("{}.{i}.w", self.prefix), vec![inp[0], *units], inp[0], *units));
                    out.push((format!("{}.{i}.b", self.prefix), vec![*units], 0, 0));
                }
                LayerSpec::Conv { channels, kernel, .. } => {
                    let k2 = kernel * kernel;
                    out.push((
                        format!("{}.{i}.w", self.prefix),
                        vec![*channels, inp[0], *kernel, *kernel],
                        inp[0] * k2,
                        channels * k2,
                    ));
                    out.push((format!("{}.{i}.b", self.prefix), vec![*channels], 0, 0));
                }
                _ => {}
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s, _, _)| s.iter().product::<usize>()).sum()
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(&self, rng: &mut ChaCha8Rng) -> ParamSet {
        let mut p = ParamSet::new();
        for (name, shape, fan_in, fan_out) in self.param_shapes() {
            let n = shape.iter().product();
            let data = if fan_in == 0 {
                vec![0.0; n]
            } else {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-limit..limit)).collect()
            };
            p.insert(name, Tensor::new(shape, data).expect("shape product"));
        }
        p
    }

    /// Applies the stack to `x: [B, prod(input)]` and returns `[B, prod(output)]`.
    pub fn forward(&self, g: &mut Graph, b: &Bindings, x: Var) -> Result<Var> {
        let shapes = self.shapes()?;
        let batch = match g.value(x).shape() {
            [n, d] if *d == shapes[0].iter().product::<usize>() => *n,
            s => {
                return Err(Error::contract(
                    "network input",
                    format!("{} expects [B, {}], got {:?}", self.prefix, shapes[0].iter().product::<usize>(), s),
                ))
            }
        };
        let with_batch = |s: &[usize]| -> Vec<usize> { std::iter::once(batch).chain(s.iter().copied()).collect() };
        let mut h = g.reshape(x, &with_batch(&shapes[0]))?;
        for (i, l) in self.layers.iter().enumerate() {
            h = match l {
                LayerSpec::Dense { act, .. } => {
                    let y = g.affine(h, b.get(&format!("{}.{i}.w", self.prefix))?, b.get(&format!("{}.{i}.b", self.prefix))?)?;
                    activate(g, y, *act)
                }
                LayerSpec::Conv { stride, act, .. } => {
                    let y = g.conv2d(
                        h,
                        b.get(&format!("{}.{i}.w", self.prefix))?,
                        b.get(&format!("{}.{i}.b", self.prefix))?,
                        *stride,
                        true,
                    )?;
                    activate(g, y, *act)
                }
                LayerSpec::MaxPool(p) => g.max_pool2d(h, *p)?,
                LayerSpec::Upsample(f) => g.upsample_bilinear(h, *f)?,
                LayerSpec::Flatten | LayerSpec::Unflatten(_) => g.reshape(h, &with_batch(&shapes[i + 1]))?,
            };
        }
        let out: usize = shapes.last().unwrap().iter().product();
        g.reshape(h, &[batch, out])
    }

    /// Eager evaluation without gradients. Dense-only stacks skip the graph
    /// and reproduce its arithmetic exactly.
    pub fn eval(&self, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
        if self.layers.iter().all(|l| matches!(l, LayerSpec::Dense { .. })) {
            return self.eval_dense(params, x);
        }
        let mut g = Graph::new();
        let b = params.bind(&mut g, |_| false)?;
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, &b, xv)?;
        Ok(g.value(y).clone())
    }
}

impl Stack {
    fn eval_dense(&self, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
        let d_in = self.input.iter().product::<usize>();
        let batch = match x.shape() {
            [n, d] if *d == d_in => *n,
            s => return Err(Error::contract("network input", format!("{} expects [B, {d_in}], got {s:?}", self.prefix))),
        };
        let mut h = x.data().to_vec();
        let mut width = d_in;
        for (i, l) in self.layers.iter().enumerate() {
            let LayerSpec::Dense { units, act } = l else { unreachable!() };
            let w = params.require(&format!("{}.{i}.w", self.prefix))?.data();
            let b = params.require(&format!("{}.{i}.b", self.prefix))?.data();
            if w.len() != width * units || b.len() != *units {
                return Err(Error::contract("affine", format!("{}.{i} parameters do not match layer shape", self.prefix)));
            }
            let mut out = vec![0.0; batch * units];
            for r in 0..batch {
                let row = &mut out[r * units..(r + 1) * units];
                row.copy_from_slice(b);
                for k in 0..width {
                    let xk = h[r * width + k];
                    if xk == 0.0 {
                        continue;
                    }
                    for (o, wv) in row.iter_mut().zip(&w[k * units..(k + 1) * units]) {
                        *o += xk * wv;
                    }
                }
                if let Some(u) = act.unary() {
                    row.iter_mut().for_each(|v| *v = u.apply(*v));
                }
            }
            h = out;
            width = *units;
        }
        Tensor::new(vec![batch, width], h)
    }
}

impl Activation {
    fn unary(self) -> Option<Unary> {
        match self {
            Activation::Linear => None,
            Activation::Relu => Some(Unary::Relu),
            Activation::Sigmoid => Some(Unary::Sigmoid),
            Activation::Tanh => Some(Unary::Tanh),
        }
    }
}

fn activate(g: &mut Graph, x: Var, act: Activation) -> Var {
    match act.unary() {
        None => x,
        Some(u) => g.unary(x, u),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConvArch {
    /// Two 3×3 convolutions with 4×4 max-pooling and a dense latent layer;
    /// mirrored by bilinear upsampling and convolutions in the decoder.
    /// Encoder/decoder sizes are 172/221 at latent 6 and 210/257 at latent 8.
    #[default]
    Pooled,
    /// Four stride-2 3×3 convolutions with channels [2, 4, 8, 8], mirrored by
    /// four bilinear-upsample-then-convolve stages with channels [8, 8, 4, 2].
    Strided,
}

/// Autoencoder architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AeConfig {
    /// Sigmoid encoder `input → hidden… → latent`; decoder mirrors the hidden
    /// widths with sigmoid and ends in a linear layer.
    Dense {
        input_dim: usize,
        hidden: Vec<usize>,
        latent_dim: usize,
    },
    /// 48×48 single-channel images, sigmoid latent, relu elsewhere.
    Conv {
        latent_dim: usize,
        #[serde(default)]
        arch: ConvArch,
    },
}

impl AeConfig {
    /// Single `Dense(2)` sigmoid encoder: 10 encoder / 12 decoder parameters.
    pub fn small_dense(input_dim: usize) -> Self {
        AeConfig::Dense {
            input_dim,
            hidden: vec![],
            latent_dim: 2,
        }
    }

    /// `Dense(8) → Dense(2)` sigmoid encoder: 58 encoder / 60 decoder parameters.
    pub fn large_dense(input_dim: usize) -> Self {
        AeConfig::Dense {
            input_dim,
            hidden: vec![8],
            latent_dim: 2,
        }
    }

    pub fn conv(latent_dim: usize) -> Self {
        AeConfig::Conv {
            latent_dim,
            arch: ConvArch::Pooled,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            AeConfig::Dense { input_dim, .. } => *input_dim,
            AeConfig::Conv { .. } => IMAGE_SIDE * IMAGE_SIDE,
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            AeConfig::Dense { latent_dim, .. } | AeConfig::Conv { latent_dim, .. } => *latent_dim,
        }
    }

    /// Default pretraining minibatch size: 16 for dense, 32 for convolutional.
    pub fn default_batch_size(&self) -> usize {
        match self {
            AeConfig::Dense { .. } => 16,
            AeConfig::Conv { .. } => 32,
        }
    }

    pub fn build(&self) -> Result<Autoencoder> {
        use Activation::*;
        use LayerSpec::*;
        let l = self.latent_dim();
        if l == 0 || l >= self.input_dim() {
            return Err(Error::Config(format!(
                "latent dimension {l} must lie in 1..{}",
                self.input_dim()
            )));
        }
        let (enc, dec) = match self {
            AeConfig::Dense { input_dim, hidden, .. } => {
                let mut enc: Vec<LayerSpec> = hidden.iter().map(|&u| Dense { units: u, act: Sigmoid }).collect();
                enc.push(Dense { units: l, act: Sigmoid });
                let mut dec: Vec<LayerSpec> = hidden.iter().rev().map(|&u| Dense { units: u, act: Sigmoid }).collect();
                dec.push(Dense {
                    units: *input_dim,
                    act: Linear,
                });
                (
                    Stack::new("encoder", vec![*input_dim], enc)?,
                    Stack::new("decoder", vec![l], dec)?,
                )
            }
            AeConfig::Conv { arch, .. } => {
                let conv = |channels, stride, act| Conv {
                    channels,
                    kernel: 3,
                    stride,
                    act,
                };
                let (enc, dec) = match arch {
                    ConvArch::Pooled => (
                        vec![
                            Unflatten([1, IMAGE_SIDE, IMAGE_SIDE]),
                            conv(2, 1, Relu),
                            MaxPool(4),
                            conv(2, 1, Relu),
                            MaxPool(4),
                            Flatten,
                            Dense { units: l, act: Sigmoid },
                        ],
                        vec![
                            Dense { units: 18, act: Relu },
                            Unflatten([2, 3, 3]),
                            Upsample(4),
                            conv(2, 1, Relu),
                            Upsample(4),
                            conv(2, 1, Relu),
                            conv(1, 1, Linear),
                            Flatten,
                        ],
                    ),
                    ConvArch::Strided => {
                        let mut enc = vec![Unflatten([1, IMAGE_SIDE, IMAGE_SIDE])];
                        enc.extend([2, 4, 8, 8].map(|c| conv(c, 2, Relu)));
                        enc.extend([Flatten, Dense { units: l, act: Sigmoid }]);
                        let mut dec = vec![Dense { units: 72, act: Relu }, Unflatten([8, 3, 3])];
                        for c in [8, 8, 4, 2] {
                            dec.extend([Upsample(2), conv(c, 1, Relu)]);
                        }
                        dec.extend([conv(1, 1, Linear), Flatten]);
                        (enc, dec)
                    }
                };
                (
                    Stack::new("encoder", vec![IMAGE_SIDE * IMAGE_SIDE], enc)?,
                    Stack::new("decoder", vec![l], dec)?,
                )
            }
        };
        Ok(Autoencoder {
            config: self.clone(),
            encoder: enc,
            decoder: dec,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Autoencoder {
    config: AeConfig,
    pub encoder: Stack,
    pub decoder: Stack,
}

impl Autoencoder {
    pub fn config(&self) -> &AeConfig {
        &self.config
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim()
    }

    pub fn init(&self, rng: &mut ChaCha8Rng) -> ParamSet {
        let mut p = self.encoder.init(rng);
        p.extend(self.decoder.init(rng));
        p
    }

    pub fn encode(&self, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
        self.encoder.eval(params, x)
    }

    pub fn decode(&self, params: &ParamSet, z: &Tensor) -> Result<Tensor> {
        self.decoder.eval(params, z)
    }

    pub fn reconstruct(&self, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
        self.decode(params, &self.encode(params, x)?)
    }

    /// Graph nodes `(z, x̂)` for a batch.
    pub fn forward(&self, g: &mut Graph, b: &Bindings, x: Var) -> Result<(Var, Var)> {
        let z = self.encoder.forward(g, b, x)?;
        let xh = self.decoder.forward(g, b, z)?;
        Ok((z, xh))
    }
}

/// Mean of squared elementwise differences.
pub fn ae_loss(g: &mut Graph, x: Var, x_hat: Var) -> Result<Var> {
    mse(g, x, x_hat)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CriticInput {
    /// The encoder's latent vector (detached unless configured otherwise).
    #[default]
    Latent,
    /// The raw observation.
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriticConfig {
    #[serde(default)]
    pub input: CriticInput,
    #[serde(default = "default_critic_hidden")]
    pub hidden: Vec<usize>,
}

fn default_critic_hidden() -> Vec<usize> {
    vec![64, 64]
}

impl Default for CriticConfig {
    fn default() -> Self {
        CriticConfig {
            input: CriticInput::Latent,
            hidden: default_critic_hidden(),
        }
    }
}

impl CriticConfig {
    /// Tanh hidden layers and a scalar linear output over `input_dim` features.
    pub fn build(&self, input_dim: usize) -> Result<Stack> {
        let mut layers: Vec<LayerSpec> = self
            .hidden
            .iter()
            .map(|&u| LayerSpec::Dense {
                units: u,
                act: Activation::Tanh,
            })
            .collect();
        layers.push(LayerSpec::Dense {
            units: 1,
            act: Activation::Linear,
        });
        Stack::new("critic", vec![input_dim], layers)
    }
}

/// Fully classical CNN policy: three 3×3 relu convolutions with channels
/// [8, 4, 3] and max-pooling 4, 2, 2, then a relu hidden layer and 4 logits.
/// Total parameters `487 + 32·hidden`.
pub fn cnn_policy(hidden: usize, n_actions: usize) -> Result<Stack> {
    use Activation::*;
    use LayerSpec::*;
    let conv = |channels| Conv {
        channels,
        kernel: 3,
        stride: 1,
        act: Relu,
    };
    Stack::new(
        "policy",
        vec![IMAGE_SIDE * IMAGE_SIDE],
        vec![
            Unflatten([1, IMAGE_SIDE, IMAGE_SIDE]),
            conv(8),
            MaxPool(4),
            conv(4),
            MaxPool(2),
            conv(3),
            MaxPool(2),
            Flatten,
            Dense { units: hidden, act: Relu },
            Dense {
                units: n_actions,
                act: Linear,
            },
        ],
    )
}

/// Hidden width whose CNN parameter count is closest to `target`.
pub fn cnn_hidden_for_budget(target: usize, n_actions: usize) -> Result<usize> {
    let base = cnn_policy(1, n_actions)?.param_count();
    let per = cnn_policy(2, n_actions)?.param_count() - base;
    let h = ((target as f64 - base as f64) / per as f64 + 1.0).round().max(1.0);
    Ok(h as usize)
}

/// Keras-style piecewise-constant learning rate: `values[i]` applies while the
/// epoch is above `boundaries[i−1]` and at most `boundaries[i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PiecewiseConstant {
    pub boundaries: Vec<usize>,
    pub values: Vec<f64>,
}

impl Default for PiecewiseConstant {
    fn default() -> Self {
        PiecewiseConstant {
            boundaries: vec![250, 500, 750, 1000, 1250, 1500],
            values: vec![0.05, 0.01, 0.005, 0.001, 0.0005, 0.0001, 0.00005],
        }
    }
}

impl PiecewiseConstant {
    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.boundaries.len() + 1 || self.boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "schedule needs increasing boundaries and one more value than boundaries".into(),
            ));
        }
        Ok(())
    }

    pub fn at(&self, epoch: usize) -> f64 {
        let i = self.boundaries.iter().take_while(|&&b| epoch > b).count();
        self.values[i]
    }
}

/// Observations stacked row-wise: `n` samples of per-sample `shape`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    shape: Vec<usize>,
    data: Vec<f64>,
}

const DATASET_MAGIC: &[u8; 8] = b"LQRLDS01";
const DTYPE_F64_LE: u32 = 1;

impl Dataset {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let d: usize = shape.iter().product();
        if d == 0 || !data.len().is_multiple_of(d) {
            return Err(Error::contract(
                "dataset",
                format!("{} values do not tile sample shape {:?}", data.len(), shape),
            ));
        }
        Ok(Dataset { shape, data })
    }

    pub fn from_rows(shape: Vec<usize>, rows: &[Vec<f64>]) -> Result<Self> {
        Dataset::new(shape, rows.concat())
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dim(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.data[i * d..(i + 1) * d]
    }

    /// `[len(idx), dim]` batch of the selected rows.
    pub fn batch(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * self.dim());
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor::new(vec![idx.len(), self.dim()], data).expect("rows have dim values")
    }

    /// Binary layout (little endian): 8-byte magic `LQRLDS01`, `u32` dtype
    /// code (1 = f64), `u32` rank `r`, `u64` sample count, `r × u64` sample
    /// shape, then `count·prod(shape)` f64 values row-major.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 8 * self.data.len());
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DTYPE_F64_LE.to_le_bytes());
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for &s in &self.shape {
            out.extend_from_slice(&(s as u64).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let err = |reason: &str| Error::Parse {
            path: origin.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| err("truncated header"))?;
        if &magic != DATASET_MAGIC {
            return Err(err("not a dataset file"));
        }
        let mut u32b = [0u8; 4];
        let mut u64b = [0u8; 8];
        r.read_exact(&mut u32b).map_err(|_| err("truncated header"))?;
        if u32::from_le_bytes(u32b) != DTYPE_F64_LE {
            return Err(err("unsupported dtype"));
        }
        r.read_exact(&mut u32b).map_err(|_| err("truncated header"))?;
        let rank = u32::from_le_bytes(u32b) as usize;
        r.read_exact(&mut u64b).map_err(|_| err("truncated header"))?;
        let count = u64::from_le_bytes(u64b) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut u64b).map_err(|_| err("truncated header"))?;
            shape.push(u64::from_le_bytes(u64b) as usize);
        }
        let n = count
            .checked_mul(shape.iter().product())
            .ok_or_else(|| err("size overflow"))?;
        if r.len() != n * 8 {
            return Err(err(&format!("expected {} payload bytes, found {}", n * 8, r.len())));
        }
        let data = r
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Dataset::new(shape, data).map_err(|e| err(&e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::runner::io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Dataset::from_bytes(&bytes, path)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainOptions {
    pub epochs: usize,
    /// Defaults to the architecture's batch size when absent.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub schedule: PiecewiseConstant,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions {
            epochs: 2000,
            batch_size: None,
            schedule: PiecewiseConstant::default(),
        }
    }
}

/// Result of [`pretrain_ae`].
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub params: ParamSet,
    /// Mean minibatch reconstruction loss per epoch.
    pub losses: Vec<f64>,
}

/// Trains encoder and decoder on reconstruction MSE with Adam and the
/// piecewise-constant schedule, one shuffled pass over the data per epoch.
pub fn pretrain_ae(ae: &Autoencoder, data: &Dataset, opts: &PretrainOptions, seed: u64) -> Result<Pretrained> {
    pretrain_from(ae, ae.init(&mut ChaCha8Rng::seed_from_u64(seed)), data, opts, seed, |_, _| {})
}

/// [`pretrain_ae`] from given initial parameters, calling `progress(epoch, loss)`.
pub fn pretrain_from(
    ae: &Autoencoder,
    mut params: ParamSet,
    data: &Dataset,
    opts: &PretrainOptions,
    seed: u64,
    mut progress: impl FnMut(usize, f64),
) -> Result<Pretrained> {
    if data.is_empty() {
        return Err(Error::Config("pretraining dataset is empty".into()));
    }
    if data.dim() != ae.input_dim() {
        return Err(Error::contract(
            "pretrain_ae",
            format!("dataset samples have {} values, autoencoder expects {}", data.dim(), ae.input_dim()),
        ));
    }
    opts.schedule.validate()?;
    let bs = opts.batch_size.unwrap_or_else(|| ae.config().default_batch_size()).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut opt = Optimizer::adam(opts.schedule.at(0));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        opt.set_lr(opts.schedule.at(epoch));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for idx in order.chunks(bs) {
            let mut g = Graph::new();
            let b = params.bind(&mut g, |_| true)?;
            let x = g.constant(data.batch(idx));
            let (_, xh) = ae.forward(&mut g, &b, x)?;
            let loss = ae_loss(&mut g, x, xh)?;
            let lv = g.value(loss).item()?;
            if !lv.is_finite() {
                return Err(Error::NonFiniteLoss {
                    update: epoch,
                    diagnostics: "autoencoder reconstruction loss".into(),
                });
            }
            opt.step(&mut params, g.backward(loss)?.by_name())?;
            total += lv;
            batches += 1;
        }
        let mean = total / batches as f64;
        progress(epoch, mean);
        losses.push(mean);
    }
    Ok(Pretrained { params, losses })
}

/// Writes a per-epoch loss history as `epoch,loss` CSV.
pub fn write_loss_history(path: &Path, losses: &[f64]) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "epoch,loss").expect("in-memory write");
    for (i, l) in losses.iter().enumerate() {
        writeln!(buf, "{i},{l}").expect("in-memory write");
    }
    crate::runner::io::write_atomic(path, &buf)
}
