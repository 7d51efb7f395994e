//! Layer kinds with their forward and backward passes.
//!
//! Activations are `N x C x H x W` (or `N x F` for dense layers), row-major.
//! Every backward pass accumulates into the parameter gradients it is given
//! and returns one gradient per input.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::attention::{self, AttentionCache};
use super::tensor::{gemm, MatMut, MatRef, Scalar, Tensor};
use crate::{Error, Result};

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

/// Serializable description of a layer: kind plus hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Graph entry; `shape` excludes the batch dimension.
    Input { shape: Vec<usize> },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    #[serde(rename = "maxpool2d")]
    MaxPool2d { size: usize },
    #[serde(rename = "avgpool2d")]
    AvgPool2d { size: usize },
    #[serde(rename = "batchnorm")]
    BatchNorm { channels: usize },
    Relu,
    Sigmoid,
    Dense { in_features: usize, out_features: usize },
    #[serde(rename = "upsample2d")]
    Upsample2d { factor: usize },
    /// Joins inputs along `axis` (1 = channels, 2 = height).
    Concat { axis: usize },
    /// Elementwise sum, or mean when `average` is set.
    Add { average: bool },
    Slice { axis: usize, start: usize, len: usize },
    /// Per-sample reshape.
    Reshape { shape: Vec<usize> },
    /// Multi-head scaled dot-product attention with a residual connection.
    /// One input: self-attention over its spatial positions. Two inputs:
    /// the first attends over the second.
    Attention { dim: usize, heads: usize },
    /// Learned `dim x tokens` array broadcast over the batch of its input.
    LearnedTokens { dim: usize, tokens: usize },
    /// conv-bn-relu-conv-bn plus a skip connection, then relu. The skip is a
    /// strided 1x1 convolution when the shape changes.
    ResidualBlock {
        in_channels: usize,
        out_channels: usize,
        stride: usize,
    },
    /// VAE reparameterization `z = mu + exp(logvar / 2) * eps` over inputs
    /// `(mu, logvar)`.
    Sampling,
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Input { .. } => "input",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::MaxPool2d { .. } => "maxpool2d",
            LayerSpec::AvgPool2d { .. } => "avgpool2d",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::Relu => "relu",
            LayerSpec::Sigmoid => "sigmoid",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Upsample2d { .. } => "upsample2d",
            LayerSpec::Concat { .. } => "concat",
            LayerSpec::Add { .. } => "add",
            LayerSpec::Slice { .. } => "slice",
            LayerSpec::Reshape { .. } => "reshape",
            LayerSpec::Attention { .. } => "attention",
            LayerSpec::LearnedTokens { .. } => "learned_tokens",
            LayerSpec::ResidualBlock { .. } => "residual_block",
            LayerSpec::Sampling => "sampling",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("{}: {m}", self.kind_name())));
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => {
                if kernel % 2 == 0 {
                    return bad(format!("kernel {kernel} must be odd"));
                }
                if stride == 0 || in_channels == 0 || out_channels == 0 {
                    return bad("stride and channels must be positive".into());
                }
            }
            LayerSpec::MaxPool2d { size } | LayerSpec::AvgPool2d { size } | LayerSpec::Upsample2d { factor: size } => {
                if size == 0 {
                    return bad("size must be positive".into());
                }
            }
            LayerSpec::BatchNorm { channels } if channels == 0 => return bad("no channels".into()),
            LayerSpec::Dense {
                in_features,
                out_features,
            } if in_features == 0 || out_features == 0 => return bad("features must be positive".into()),
            LayerSpec::Concat { axis } | LayerSpec::Slice { axis, .. } if axis == 0 => {
                return bad("cannot operate on the batch axis".into())
            }
            LayerSpec::Attention { dim, heads } => {
                if heads == 0 || dim == 0 || dim % heads != 0 {
                    return bad(format!("dim {dim} not divisible into {heads} heads"));
                }
            }
            LayerSpec::LearnedTokens { dim, tokens } if dim == 0 || tokens == 0 => {
                return bad("empty token array".into())
            }
            LayerSpec::ResidualBlock {
                in_channels,
                out_channels,
                stride,
            } if in_channels == 0 || out_channels == 0 || stride == 0 => {
                return bad("channels and stride must be positive".into())
            }
            _ => {}
        }
        Ok(())
    }

    /// Number of inputs accepted, as `(min, max)`.
    pub fn arity(&self) -> (usize, usize) {
        match self {
            LayerSpec::Input { .. } => (0, 0),
            LayerSpec::Concat { .. } | LayerSpec::Add { .. } => (1, usize::MAX),
            LayerSpec::Attention { .. } => (1, 2),
            LayerSpec::Sampling => (2, 2),
            _ => (1, 1),
        }
    }

    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![
                ("weight", vec![out_channels, in_channels, kernel, kernel]),
                ("bias", vec![out_channels]),
            ],
            LayerSpec::BatchNorm { channels } => vec![("gamma", vec![channels]), ("beta", vec![channels])],
            LayerSpec::Dense {
                in_features,
                out_features,
            } => vec![
                ("weight", vec![out_features, in_features]),
                ("bias", vec![out_features]),
            ],
            LayerSpec::Attention { dim, .. } => vec![
                ("wq", vec![dim, dim]),
                ("wk", vec![dim, dim]),
                ("wv", vec![dim, dim]),
                ("wo", vec![dim, dim]),
            ],
            LayerSpec::LearnedTokens { dim, tokens } => vec![("tokens", vec![dim, tokens])],
            LayerSpec::ResidualBlock {
                in_channels,
                out_channels,
                stride,
            } => {
                let mut v = vec![
                    ("conv1.weight", vec![out_channels, in_channels, 3, 3]),
                    ("conv1.bias", vec![out_channels]),
                    ("bn1.gamma", vec![out_channels]),
                    ("bn1.beta", vec![out_channels]),
                    ("conv2.weight", vec![out_channels, out_channels, 3, 3]),
                    ("conv2.bias", vec![out_channels]),
                    ("bn2.gamma", vec![out_channels]),
                    ("bn2.beta", vec![out_channels]),
                ];
                if in_channels != out_channels || stride != 1 {
                    v.push(("skip.weight", vec![out_channels, in_channels, 1, 1]));
                    v.push(("skip.bias", vec![out_channels]));
                }
                v
            }
            _ => Vec::new(),
        }
    }

    /// Non-trainable state (batchnorm running statistics).
    pub fn buffer_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            LayerSpec::BatchNorm { channels } => {
                vec![("running_mean", vec![channels]), ("running_var", vec![channels])]
            }
            LayerSpec::ResidualBlock { out_channels, .. } => vec![
                ("bn1.running_mean", vec![out_channels]),
                ("bn1.running_var", vec![out_channels]),
                ("bn2.running_mean", vec![out_channels]),
                ("bn2.running_var", vec![out_channels]),
            ],
            _ => Vec::new(),
        }
    }

    /// Initial parameter values: Kaiming-uniform weights, zero biases,
    /// unit batchnorm scale.
    pub fn init_params<T: Scalar>(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor<T>> {
        self.param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data: Vec<T> = if name.ends_with("gamma") {
                    vec![T::one(); n]
                } else if name.ends_with("bias") || name.ends_with("beta") {
                    vec![T::zero(); n]
                } else {
                    let (fan_in, gain) = match self {
                        LayerSpec::Attention { dim, .. } => (*dim, 3.0),
                        LayerSpec::LearnedTokens { .. } => (1, 0.01),
                        _ => (shape[1..].iter().product::<usize>(), 6.0),
                    };
                    let bound = (gain / fan_in as f64).sqrt();
                    (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect()
                };
                Tensor::from_vec(&shape, data).expect("shape matches data")
            })
            .collect()
    }

    pub fn init_buffers<T: Scalar>(&self) -> Vec<Tensor<T>> {
        self.buffer_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let v = if name.ends_with("var") { T::one() } else { T::zero() };
                Tensor::full(&shape, v)
            })
            .collect()
    }

    /// Per-sample output shape for per-sample input shapes.
    pub fn output_shape(&self, name: &str, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        let (lo, hi) = self.arity();
        if inputs.len() < lo || inputs.len() > hi {
            return Err(Error::shape(name, format!("expects {lo}..={hi} inputs, got {}", inputs.len())));
        }
        let err = |m: String| Err(Error::shape(name, m));
        let chw = |s: &[usize]| -> Result<(usize, usize, usize)> {
            match *s {
                [c, h, w] => Ok((c, h, w)),
                _ => Err(Error::shape(name, format!("expected C x H x W input, got {s:?}"))),
            }
        };
        match self {
            LayerSpec::Input { shape } => Ok(shape.clone()),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let (c, h, w) = chw(inputs[0])?;
                if c != *in_channels {
                    return err(format!("expected {in_channels} channels, got {c}"));
                }
                if h + 2 * padding < *kernel || w + 2 * padding < *kernel {
                    return err(format!("{h}x{w} input smaller than kernel {kernel}"));
                }
                let ho = (h + 2 * padding - kernel) / stride + 1;
                let wo = (w + 2 * padding - kernel) / stride + 1;
                Ok(vec![*out_channels, ho, wo])
            }
            LayerSpec::MaxPool2d { size } | LayerSpec::AvgPool2d { size } => {
                let (c, h, w) = chw(inputs[0])?;
                if h < *size || w < *size {
                    return err(format!("{h}x{w} input smaller than pool {size}"));
                }
                Ok(vec![c, h / size, w / size])
            }
            LayerSpec::Upsample2d { factor } => {
                let (c, h, w) = chw(inputs[0])?;
                Ok(vec![c, h * factor, w * factor])
            }
            LayerSpec::BatchNorm { channels } => {
                if inputs[0].first() != Some(channels) {
                    return err(format!("expected {channels} channels, got {:?}", inputs[0]));
                }
                Ok(inputs[0].to_vec())
            }
            LayerSpec::Relu | LayerSpec::Sigmoid => Ok(inputs[0].to_vec()),
            LayerSpec::Dense {
                in_features,
                out_features,
            } => {
                if inputs[0] != [*in_features] {
                    return err(format!("expected [{in_features}], got {:?}", inputs[0]));
                }
                Ok(vec![*out_features])
            }
            LayerSpec::Concat { axis } => {
                let a = axis - 1;
                let first = inputs[0];
                if a >= first.len() {
                    return err(format!("axis {axis} out of range for {first:?}"));
                }
                let mut out = first.to_vec();
                out[a] = 0;
                for s in inputs {
                    if s.len() != first.len() || s.iter().enumerate().any(|(i, &d)| i != a && d != first[i]) {
                        return err(format!("cannot concat {s:?} with {first:?} on axis {axis}"));
                    }
                    out[a] += s[a];
                }
                Ok(out)
            }
            LayerSpec::Add { .. } => {
                if inputs.iter().any(|s| *s != inputs[0]) {
                    return err(format!("mismatched shapes {inputs:?}"));
                }
                Ok(inputs[0].to_vec())
            }
            LayerSpec::Slice { axis, start, len } => {
                let a = axis - 1;
                let s = inputs[0];
                if a >= s.len() || start + len > s[a] || *len == 0 {
                    return err(format!("slice {start}+{len} on axis {axis} out of range for {s:?}"));
                }
                let mut out = s.to_vec();
                out[a] = *len;
                Ok(out)
            }
            LayerSpec::Reshape { shape } => {
                if shape.iter().product::<usize>() != inputs[0].iter().product::<usize>() {
                    return err(format!("cannot reshape {:?} to {shape:?}", inputs[0]));
                }
                Ok(shape.clone())
            }
            LayerSpec::Attention { dim, .. } => {
                for s in inputs {
                    let (c, _, _) = chw(s)?;
                    if c != *dim {
                        return err(format!("token dim {c} != {dim}"));
                    }
                }
                Ok(inputs[0].to_vec())
            }
            LayerSpec::LearnedTokens { dim, tokens } => Ok(vec![*dim, *tokens, 1]),
            LayerSpec::ResidualBlock {
                in_channels,
                out_channels,
                stride,
            } => {
                let (c, h, w) = chw(inputs[0])?;
                if c != *in_channels {
                    return err(format!("expected {in_channels} channels, got {c}"));
                }
                Ok(vec![*out_channels, (h + 2 - 3) / stride + 1, (w + 2 - 3) / stride + 1])
            }
            LayerSpec::Sampling => {
                if inputs[0] != inputs[1] || inputs[0].len() != 1 {
                    return err(format!("mu/logvar shapes {:?} {:?}", inputs[0], inputs[1]));
                }
                Ok(inputs[0].to_vec())
            }
        }
    }
}

/// Forward-pass settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Mode {
    /// Batchnorm uses batch statistics in training and running averages
    /// otherwise.
    pub training: bool,
    /// Seed for reparameterization noise; `None` sets the noise to zero.
    pub noise_seed: Option<u64>,
}

impl Mode {
    pub const EVAL: Mode = Mode {
        training: false,
        noise_seed: None,
    };

    pub fn train(noise_seed: u64) -> Self {
        Mode {
            training: true,
            noise_seed: Some(noise_seed),
        }
    }
}

#[derive(Debug, Clone)]
pub struct NormCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    training: bool,
}

#[derive(Debug, Clone)]
pub struct ResidualCache<T> {
    bn1: NormCache<T>,
    r1: Tensor<T>,
    bn2: NormCache<T>,
    pre: Tensor<T>,
}

/// Values retained from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub enum Cache<T> {
    None,
    Argmax(Vec<usize>),
    Norm(NormCache<T>),
    Attention(Box<AttentionCache<T>>),
    Residual(Box<ResidualCache<T>>),
    Noise(Vec<T>),
}

pub struct ForwardOut<T> {
    pub output: Tensor<T>,
    pub cache: Cache<T>,
    /// Replacement buffers (running statistics) after a training pass.
    pub buffers: Option<Vec<Tensor<T>>>,
}

fn dims4(t: &Tensor<impl Scalar>) -> (usize, usize, usize, usize) {
    match *t.shape() {
        [n, c, h, w] => (n, c, h, w),
        [n, c] => (n, c, 1, 1),
        _ => panic!("unexpected activation shape {:?}", t.shape()),
    }
}

/// Output columns `lo..hi` whose input column `ow * stride + kj - pad` lies
/// inside `0..w`.
fn valid_cols(w: usize, wo: usize, kj: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > kj { (pad - kj).div_ceil(stride) } else { 0 };
    let hi = if w + pad > kj { ((w + pad - kj - 1) / stride + 1).min(wo) } else { 0 };
    (lo.min(hi), hi)
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    col: &mut [T],
) {
    let hw = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let (lo, hi) = valid_cols(w, wo, kj, stride, pad);
                for oh in 0..ho {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    let line = &mut dst[oh * wo..(oh + 1) * wo];
                    if ih < 0 || ih >= h as isize || lo == hi {
                        line.fill(T::zero());
                        continue;
                    }
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    let src = &plane[ih as usize * w..(ih as usize + 1) * w];
                    let first = lo * stride + kj - pad;
                    if stride == 1 {
                        line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (d, v) in line[lo..hi].iter_mut().zip(src[first..].iter().step_by(stride)) {
                            *d = *v;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let hw = ho * wo;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &col[row * hw..(row + 1) * hw];
                let (lo, hi) = valid_cols(w, wo, kj, stride, pad);
                if lo == hi {
                    continue;
                }
                for oh in 0..ho {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let first = lo * stride + kj - pad;
                    let dst = &mut plane[ih as usize * w + first..(ih as usize + 1) * w];
                    let line = &src[oh * wo + lo..oh * wo + hi];
                    for (d, v) in dst.iter_mut().step_by(stride).zip(line) {
                        *d += *v;
                    }
                }
            }
        }
    }
}

fn conv_out(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

fn conv2d_forward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>, stride: usize, pad: usize) -> Tensor<T> {
    let (n, c, h, w) = dims4(x);
    let (o, k) = (weight.shape()[0], weight.shape()[2]);
    let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(w, k, stride, pad));
    let (ckk, hw) = (c * k * k, ho * wo);
    let mut out = Tensor::zeros(&[n, o, ho, wo]);
    let direct = k == 1 && stride == 1 && pad == 0;
    let mut col = if direct { Vec::new() } else { vec![T::zero(); ckk * hw] };
    for s in 0..n {
        let xs = x.sample(s);
        let b_mat = if direct {
            MatRef::new(xs, ckk, hw)
        } else {
            im2col(xs, c, h, w, k, stride, pad, ho, wo, &mut col);
            MatRef::new(&col, ckk, hw)
        };
        let dst = &mut out.data_mut()[s * o * hw..(s + 1) * o * hw];
        for (oc, line) in dst.chunks_exact_mut(hw).enumerate() {
            line.fill(bias.data()[oc]);
        }
        gemm(T::one(), MatRef::new(weight.data(), o, ckk), b_mat, T::one(), MatMut::new(dst, o, hw));
    }
    out
}

fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    dweight: &mut Tensor<T>,
    dbias: &mut Tensor<T>,
) -> Tensor<T> {
    let (n, c, h, w) = dims4(x);
    let (o, k) = (weight.shape()[0], weight.shape()[2]);
    let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(w, k, stride, pad));
    let (ckk, hw) = (c * k * k, ho * wo);
    let mut dx = Tensor::zeros(x.shape());
    let direct = k == 1 && stride == 1 && pad == 0;
    let mut col = vec![T::zero(); ckk * hw];
    let mut dcol = vec![T::zero(); ckk * hw];
    for s in 0..n {
        let dys = dy.sample(s);
        for (oc, line) in dys.chunks_exact(hw).enumerate() {
            dbias.data_mut()[oc] += line.iter().copied().sum::<T>();
        }
        let xs = x.sample(s);
        if !direct {
            im2col(xs, c, h, w, k, stride, pad, ho, wo, &mut col);
        }
        let col_mat = if direct { MatRef::new(xs, ckk, hw) } else { MatRef::new(&col, ckk, hw) };
        gemm(
            T::one(),
            MatRef::new(dys, o, hw),
            col_mat.t(),
            T::one(),
            MatMut::new(dweight.data_mut(), o, ckk),
        );
        let dxs = &mut dx.data_mut()[s * c * h * w..(s + 1) * c * h * w];
        if direct {
            gemm(
                T::one(),
                MatRef::new(weight.data(), o, ckk).t(),
                MatRef::new(dys, o, hw),
                T::zero(),
                MatMut::new(dxs, ckk, hw),
            );
        } else {
            gemm(
                T::one(),
                MatRef::new(weight.data(), o, ckk).t(),
                MatRef::new(dys, o, hw),
                T::zero(),
                MatMut::new(&mut dcol, ckk, hw),
            );
            col2im(&dcol, c, h, w, k, stride, pad, ho, wo, dxs);
        }
    }
    dx
}

fn batchnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: &[Tensor<T>],
    training: bool,
) -> (Tensor<T>, NormCache<T>, Option<Vec<Tensor<T>>>) {
    let (n, c, h, w) = dims4(x);
    let hw = h * w;
    let m = (n * hw) as f64;
    let eps = T::of(BN_EPS);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    if training {
        for ch in 0..c {
            let mut s = 0.0;
            for b in 0..n {
                s += x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().map(|v| v.f64()).sum::<f64>();
            }
            let mu = s / m;
            let mut ss = 0.0;
            for b in 0..n {
                ss += x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                    .iter()
                    .map(|v| (v.f64() - mu).powi(2))
                    .sum::<f64>();
            }
            mean[ch] = T::of(mu);
            var[ch] = T::of(ss / m);
        }
    } else {
        mean.copy_from_slice(running[0].data());
        var.copy_from_slice(running[1].data());
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = Tensor::zeros(x.shape());
    for b in 0..n {
        for ch in 0..c {
            let range = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            let (g, bt, mu, is) = (gamma.data()[ch], beta.data()[ch], mean[ch], inv_std[ch]);
            for i in range {
                let xh = (x.data()[i] - mu) * is;
                xhat[i] = xh;
                out.data_mut()[i] = g * xh + bt;
            }
        }
    }
    let updated = training.then(|| {
        let mom = T::of(BN_MOMENTUM);
        let keep = T::one() - mom;
        let rm = running[0].data().iter().zip(&mean).map(|(&r, &v)| mom * r + keep * v).collect();
        let rv = running[1].data().iter().zip(&var).map(|(&r, &v)| mom * r + keep * v).collect();
        vec![
            Tensor::from_vec(&[c], rm).expect("channel vector"),
            Tensor::from_vec(&[c], rv).expect("channel vector"),
        ]
    });
    (
        out,
        NormCache {
            xhat,
            inv_std,
            training,
        },
        updated,
    )
}

fn batchnorm_backward<T: Scalar>(
    dy: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &NormCache<T>,
    dgamma: &mut Tensor<T>,
    dbeta: &mut Tensor<T>,
) -> Tensor<T> {
    let (n, c, h, w) = dims4(dy);
    let hw = h * w;
    let m = T::of((n * hw) as f64);
    let mut dx = Tensor::zeros(dy.shape());
    for ch in 0..c {
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for b in 0..n {
            for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                sum_dy += dy.data()[i];
                sum_dy_xhat += dy.data()[i] * cache.xhat[i];
            }
        }
        dgamma.data_mut()[ch] += sum_dy_xhat;
        dbeta.data_mut()[ch] += sum_dy;
        let g = gamma.data()[ch];
        let is = cache.inv_std[ch];
        for b in 0..n {
            for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                dx.data_mut()[i] = if cache.training {
                    g * is / m * (m * dy.data()[i] - sum_dy - cache.xhat[i] * sum_dy_xhat)
                } else {
                    g * is * dy.data()[i]
                };
            }
        }
    }
    dx
}

fn relu_mask<T: Scalar>(dy: &Tensor<T>, y: &Tensor<T>) -> Tensor<T> {
    let data = dy
        .data()
        .iter()
        .zip(y.data())
        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(dy.shape(), data).expect("same shape")
}

fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Splits a per-sample shape around `axis` (1-based including batch) into
/// `(outer, axis_len, inner)` with the batch folded into `outer`.
fn around_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn noise_for<T: Scalar>(seed: u64, len: usize) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| T::of(rng.sample::<f64, _>(StandardNormal))).collect()
}

fn residual_forward<T: Scalar>(
    stride: usize,
    params: &[Tensor<T>],
    buffers: &[Tensor<T>],
    x: &Tensor<T>,
    training: bool,
) -> ForwardOut<T> {
    let h1 = conv2d_forward(x, &params[0], &params[1], stride, 1);
    let (b1, bn1, up1) = batchnorm_forward(&h1, &params[2], &params[3], &buffers[0..2], training);
    let r1 = relu(&b1);
    let h2 = conv2d_forward(&r1, &params[4], &params[5], 1, 1);
    let (mut pre, bn2, up2) = batchnorm_forward(&h2, &params[6], &params[7], &buffers[2..4], training);
    if params.len() > 8 {
        pre.add_assign(&conv2d_forward(x, &params[8], &params[9], stride, 0));
    } else {
        pre.add_assign(x);
    }
    let output = relu(&pre);
    let buffers = match (up1, up2) {
        (Some(mut a), Some(b)) => {
            a.extend(b);
            Some(a)
        }
        _ => None,
    };
    ForwardOut {
        output,
        cache: Cache::Residual(Box::new(ResidualCache {
            bn1,
            r1,
            bn2,
            pre,
        })),
        buffers,
    }
}

fn residual_backward<T: Scalar>(
    stride: usize,
    params: &[Tensor<T>],
    x: &Tensor<T>,
    cache: &ResidualCache<T>,
    dy: &Tensor<T>,
    grads: &mut [Tensor<T>],
) -> Tensor<T> {
    let dpre = relu_mask(dy, &cache.pre);
    let (g_head, g_tail) = grads.split_at_mut(8);
    let mut dx = if params.len() > 8 {
        let (dw, db) = g_tail.split_at_mut(1);
        conv2d_backward(x, &params[8], &dpre, stride, 0, &mut dw[0], &mut db[0])
    } else {
        dpre.clone()
    };
    let (g01, g2) = g_head.split_at_mut(4);
    let (g45, g67) = g2.split_at_mut(2);
    let (g6, g7) = g67.split_at_mut(1);
    let dh2 = batchnorm_backward(&dpre, &params[6], &cache.bn2, &mut g6[0], &mut g7[0]);
    let (g4, g5) = g45.split_at_mut(1);
    let dr1 = conv2d_backward(&cache.r1, &params[4], &dh2, 1, 1, &mut g4[0], &mut g5[0]);
    let db1 = relu_mask(&dr1, &cache.r1);
    let (g0, g1) = g01.split_at_mut(2);
    let (g2a, g3a) = g1.split_at_mut(1);
    let dh1 = batchnorm_backward(&db1, &params[2], &cache.bn1, &mut g2a[0], &mut g3a[0]);
    let (gw, gb) = g0.split_at_mut(1);
    dx.add_assign(&conv2d_backward(x, &params[0], &dh1, stride, 1, &mut gw[0], &mut gb[0]));
    dx
}

/// Runs one layer forward. `noise_seed` is only consulted by sampling.
pub fn forward<T: Scalar>(
    spec: &LayerSpec,
    params: &[Tensor<T>],
    buffers: &[Tensor<T>],
    inputs: &[&Tensor<T>],
    mode: Mode,
    node_index: usize,
) -> Result<ForwardOut<T>> {
    let plain = |output| {
        Ok(ForwardOut {
            output,
            cache: Cache::None,
            buffers: None,
        })
    };
    let x = inputs.first().copied();
    match spec {
        LayerSpec::Input { .. } => Err(Error::State("input nodes are not evaluated".into())),
        LayerSpec::Conv2d { stride, padding, .. } => {
            plain(conv2d_forward(x.unwrap(), &params[0], &params[1], *stride, *padding))
        }
        LayerSpec::MaxPool2d { size } | LayerSpec::AvgPool2d { size } => {
            let x = x.unwrap();
            let (n, c, h, w) = dims4(x);
            let (ho, wo) = (h / size, w / size);
            let mut out = Tensor::zeros(&[n, c, ho, wo]);
            let is_max = matches!(spec, LayerSpec::MaxPool2d { .. });
            let mut arg = Vec::with_capacity(if is_max { out.len() } else { 0 });
            let scale = T::one() / T::of((size * size) as f64);
            for p in 0..n * c {
                let plane = &x.data()[p * h * w..(p + 1) * h * w];
                for i in 0..ho {
                    for j in 0..wo {
                        let mut best = (T::neg_infinity(), 0usize);
                        let mut sum = T::zero();
                        for di in 0..*size {
                            for dj in 0..*size {
                                let idx = (i * size + di) * w + j * size + dj;
                                let v = plane[idx];
                                sum += v;
                                if v > best.0 {
                                    best = (v, idx);
                                }
                            }
                        }
                        let o = p * ho * wo + i * wo + j;
                        if is_max {
                            out.data_mut()[o] = best.0;
                            arg.push(p * h * w + best.1);
                        } else {
                            out.data_mut()[o] = sum * scale;
                        }
                    }
                }
            }
            Ok(ForwardOut {
                output: out,
                cache: if is_max { Cache::Argmax(arg) } else { Cache::None },
                buffers: None,
            })
        }
        LayerSpec::BatchNorm { .. } => {
            let (output, cache, buffers) = batchnorm_forward(x.unwrap(), &params[0], &params[1], buffers, mode.training);
            Ok(ForwardOut {
                output,
                cache: Cache::Norm(cache),
                buffers,
            })
        }
        LayerSpec::Relu => plain(relu(x.unwrap())),
        LayerSpec::Sigmoid => plain(x.unwrap().map(|v| T::one() / (T::one() + (-v).exp()))),
        LayerSpec::Dense { in_features, out_features } => {
            let x = x.unwrap();
            let n = x.batch();
            let mut out = Tensor::zeros(&[n, *out_features]);
            for row in out.data_mut().chunks_exact_mut(*out_features) {
                row.copy_from_slice(params[1].data());
            }
            gemm(
                T::one(),
                MatRef::new(x.data(), n, *in_features),
                MatRef::new(params[0].data(), *out_features, *in_features).t(),
                T::one(),
                MatMut::new(out.data_mut(), n, *out_features),
            );
            plain(out)
        }
        LayerSpec::Upsample2d { factor } => {
            let x = x.unwrap();
            let (n, c, h, w) = dims4(x);
            let f = *factor;
            let (ho, wo) = (h * f, w * f);
            let mut out = Tensor::zeros(&[n, c, ho, wo]);
            for p in 0..n * c {
                let src = &x.data()[p * h * w..(p + 1) * h * w];
                let dst = &mut out.data_mut()[p * ho * wo..(p + 1) * ho * wo];
                for i in 0..ho {
                    for j in 0..wo {
                        dst[i * wo + j] = src[(i / f) * w + j / f];
                    }
                }
            }
            plain(out)
        }
        LayerSpec::Concat { axis } => {
            let mut shape = inputs[0].shape().to_vec();
            shape[*axis] = inputs.iter().map(|t| t.shape()[*axis]).sum();
            let (outer, total, inner) = around_axis(&shape, *axis);
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for t in inputs {
                    let (_, len, _) = around_axis(t.shape(), *axis);
                    data.extend_from_slice(&t.data()[o * len * inner..(o + 1) * len * inner]);
                }
            }
            plain(Tensor::from_vec(&shape, data)?)
        }
        LayerSpec::Add { average } => {
            let mut out = inputs[0].clone();
            for t in &inputs[1..] {
                out.add_assign(t);
            }
            if *average {
                out.scale(T::one() / T::of(inputs.len() as f64));
            }
            plain(out)
        }
        LayerSpec::Slice { axis, start, len } => {
            let x = x.unwrap();
            let (outer, full, inner) = around_axis(x.shape(), *axis);
            let mut shape = x.shape().to_vec();
            shape[*axis] = *len;
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * full + start) * inner;
                data.extend_from_slice(&x.data()[base..base + len * inner]);
            }
            plain(Tensor::from_vec(&shape, data)?)
        }
        LayerSpec::Reshape { shape } => {
            let x = x.unwrap();
            let mut full = vec![x.batch()];
            full.extend_from_slice(shape);
            plain(x.clone().reshape(&full)?)
        }
        LayerSpec::Attention { heads, .. } => {
            let ctx = inputs.get(1).copied();
            let (output, cache) = attention::forward(inputs[0], ctx, params, *heads);
            Ok(ForwardOut {
                output,
                cache: Cache::Attention(Box::new(cache)),
                buffers: None,
            })
        }
        LayerSpec::LearnedTokens { dim, tokens } => {
            let n = x.unwrap().batch();
            let mut data = Vec::with_capacity(n * dim * tokens);
            for _ in 0..n {
                data.extend_from_slice(params[0].data());
            }
            plain(Tensor::from_vec(&[n, *dim, *tokens, 1], data)?)
        }
        LayerSpec::ResidualBlock { stride, .. } => Ok(residual_forward(*stride, params, buffers, x.unwrap(), mode.training)),
        LayerSpec::Sampling => {
            let (mu, logvar) = (inputs[0], inputs[1]);
            let eps: Vec<T> = match mode.noise_seed {
                Some(seed) => noise_for(seed ^ (node_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15), mu.len()),
                None => vec![T::zero(); mu.len()],
            };
            let half = T::of(0.5);
            let data = mu
                .data()
                .iter()
                .zip(logvar.data())
                .zip(&eps)
                .map(|((&m, &lv), &e)| m + (half * lv).exp() * e)
                .collect();
            Ok(ForwardOut {
                output: Tensor::from_vec(mu.shape(), data)?,
                cache: Cache::Noise(eps),
                buffers: None,
            })
        }
    }
}

/// Backward pass for one layer; returns gradients for each input.
pub fn backward<T: Scalar>(
    spec: &LayerSpec,
    params: &[Tensor<T>],
    inputs: &[&Tensor<T>],
    output: &Tensor<T>,
    cache: &Cache<T>,
    dy: &Tensor<T>,
    grads: &mut [Tensor<T>],
) -> Vec<Tensor<T>> {
    let x = inputs.first().copied();
    match spec {
        LayerSpec::Input { .. } => Vec::new(),
        LayerSpec::Conv2d { stride, padding, .. } => {
            let (dw, db) = grads.split_at_mut(1);
            vec![conv2d_backward(x.unwrap(), &params[0], dy, *stride, *padding, &mut dw[0], &mut db[0])]
        }
        LayerSpec::MaxPool2d { .. } => {
            let mut dx = Tensor::zeros(x.unwrap().shape());
            if let Cache::Argmax(arg) = cache {
                for (&src, &g) in arg.iter().zip(dy.data()) {
                    dx.data_mut()[src] += g;
                }
            }
            vec![dx]
        }
        LayerSpec::AvgPool2d { size } => {
            let x = x.unwrap();
            let (n, c, h, w) = dims4(x);
            let (ho, wo) = (h / size, w / size);
            let scale = T::one() / T::of((size * size) as f64);
            let mut dx = Tensor::zeros(x.shape());
            for p in 0..n * c {
                for i in 0..ho * size {
                    for j in 0..wo * size {
                        dx.data_mut()[p * h * w + i * w + j] = dy.data()[p * ho * wo + (i / size) * wo + j / size] * scale;
                    }
                }
            }
            vec![dx]
        }
        LayerSpec::BatchNorm { .. } => {
            let Cache::Norm(nc) = cache else {
                unreachable!("batchnorm cache")
            };
            let (dg, db) = grads.split_at_mut(1);
            vec![batchnorm_backward(dy, &params[0], nc, &mut dg[0], &mut db[0])]
        }
        LayerSpec::Relu => vec![relu_mask(dy, output)],
        LayerSpec::Sigmoid => {
            let data = dy
                .data()
                .iter()
                .zip(output.data())
                .map(|(&g, &s)| g * s * (T::one() - s))
                .collect();
            vec![Tensor::from_vec(dy.shape(), data).expect("same shape")]
        }
        LayerSpec::Dense { in_features, out_features } => {
            let x = x.unwrap();
            let n = x.batch();
            let (dw, db) = grads.split_at_mut(1);
            gemm(
                T::one(),
                MatRef::new(dy.data(), n, *out_features).t(),
                MatRef::new(x.data(), n, *in_features),
                T::one(),
                MatMut::new(dw[0].data_mut(), *out_features, *in_features),
            );
            for row in dy.data().chunks_exact(*out_features) {
                for (b, &g) in db[0].data_mut().iter_mut().zip(row) {
                    *b += g;
                }
            }
            let mut dx = Tensor::zeros(x.shape());
            gemm(
                T::one(),
                MatRef::new(dy.data(), n, *out_features),
                MatRef::new(params[0].data(), *out_features, *in_features),
                T::zero(),
                MatMut::new(dx.data_mut(), n, *in_features),
            );
            vec![dx]
        }
        LayerSpec::Upsample2d { factor } => {
            let x = x.unwrap();
            let (n, c, h, w) = dims4(x);
            let f = *factor;
            let (ho, wo) = (h * f, w * f);
            let mut dx = Tensor::zeros(x.shape());
            for p in 0..n * c {
                let src = &dy.data()[p * ho * wo..(p + 1) * ho * wo];
                let dst = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
                for i in 0..ho {
                    for j in 0..wo {
                        dst[(i / f) * w + j / f] += src[i * wo + j];
                    }
                }
            }
            vec![dx]
        }
        LayerSpec::Concat { axis } => {
            let (outer, total, inner) = around_axis(dy.shape(), *axis);
            let mut offset = 0;
            inputs
                .iter()
                .map(|t| {
                    let (_, len, _) = around_axis(t.shape(), *axis);
                    let mut data = Vec::with_capacity(t.len());
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        data.extend_from_slice(&dy.data()[base..base + len * inner]);
                    }
                    offset += len;
                    Tensor::from_vec(t.shape(), data).expect("input shape")
                })
                .collect()
        }
        LayerSpec::Add { average } => {
            let mut g = dy.clone();
            if *average {
                g.scale(T::one() / T::of(inputs.len() as f64));
            }
            vec![g; inputs.len()]
        }
        LayerSpec::Slice { axis, start, len } => {
            let x = x.unwrap();
            let (outer, full, inner) = around_axis(x.shape(), *axis);
            let mut dx = Tensor::zeros(x.shape());
            for o in 0..outer {
                let base = (o * full + start) * inner;
                dx.data_mut()[base..base + len * inner].copy_from_slice(&dy.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![dx]
        }
        LayerSpec::Reshape { .. } => {
            vec![dy.clone().reshape(x.unwrap().shape()).expect("same size")]
        }
        LayerSpec::Attention { heads, .. } => {
            let Cache::Attention(ac) = cache else {
                unreachable!("attention cache")
            };
            let ctx = inputs.get(1).copied();
            let (dx, dctx) = attention::backward(inputs[0], ctx, params, *heads, ac, dy, grads);
            let mut out = vec![dx];
            out.extend(dctx);
            out
        }
        LayerSpec::LearnedTokens { .. } => {
            let per = grads[0].len();
            for s in dy.data().chunks_exact(per) {
                for (g, &v) in grads[0].data_mut().iter_mut().zip(s) {
                    *g += v;
                }
            }
            vec![Tensor::zeros(x.unwrap().shape())]
        }
        LayerSpec::ResidualBlock { stride, .. } => {
            let Cache::Residual(rc) = cache else {
                unreachable!("residual cache")
            };
            vec![residual_backward(*stride, params, x.unwrap(), rc, dy, grads)]
        }
        LayerSpec::Sampling => {
            let Cache::Noise(eps) = cache else {
                unreachable!("sampling cache")
            };
            let half = T::of(0.5);
            let dlogvar = dy
                .data()
                .iter()
                .zip(inputs[1].data())
                .zip(eps)
                .map(|((&g, &lv), &e)| g * e * half * (half * lv).exp())
                .collect();
            vec![
                dy.clone(),
                Tensor::from_vec(dy.shape(), dlogvar).expect("same shape"),
            ]
        }
    }
}
