//! Operation kinds: shape functions plus forward and backward kernels.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;

use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use super::tensor::{Scalar, Tensor};

/// User-supplied operation evaluated in `f64`.
///
/// Graphs running in `f32` convert at the boundary, so a custom op is exact
/// only in the 64-bit mode. Mostly useful for tests and experiments.
pub trait CustomOp: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;
    fn shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>, String>;
    fn forward(&self, inputs: &[&Tensor<f64>]) -> Tensor<f64>;
    /// Gradients with respect to every input, in input order.
    fn backward(&self, inputs: &[&Tensor<f64>], grad_out: &Tensor<f64>) -> Vec<Tensor<f64>>;
}

#[derive(Clone, Debug)]
pub enum OpKind {
    /// Inputs: x `[N,C,H,W]`, weight `[O,C,k,k]`, optional bias `[O]`.
    Conv2d {
        stride: usize,
        pad: usize,
    },
    /// 3×3 convolution with stride 2 and padding 1; same inputs as `Conv2d`.
    DownsampleConv,
    /// Inputs: x `[..., I]`, weight `[O, I]`, optional bias `[O]`.
    Linear,
    /// Inputs: x `[N,C,...]`, gamma `[C]`, beta `[C]`.
    GroupNorm {
        groups: usize,
        eps: f64,
    },
    /// Normalizes the last axis. Inputs: x, gamma `[D]`, beta `[D]`.
    LayerNorm {
        eps: f64,
    },
    Silu,
    /// Splits the last axis in half and returns `a * gelu(gate)`.
    Geglu,
    /// Softmax over the last axis.
    Softmax,
    /// Multi-head scaled dot-product attention over q `[N,L,C]`, k and v `[N,M,C]`.
    Attention {
        heads: usize,
    },
    ConcatChannels,
    UpsampleNearest2x,
    Add,
    /// Adds a per-channel vector `[N,C]` to a feature map `[N,C,H,W]`.
    AddChannel,
    Scale(f64),
    /// `[N,C,H,W] -> [N,H*W,C]`
    ToTokens,
    /// `[N,H*W,C] -> [N,C,H,W]`
    FromTokens {
        h: usize,
        w: usize,
    },
    /// Gathers rows of a table `[V,D]` into `[1,L,D]`.
    EmbedLookup {
        ids: Vec<usize>,
    },
    /// Mean squared difference of two tensors, a `[1]` scalar.
    MseReduce,
    Custom(Arc<dyn CustomOp>),
}

fn conv_geometry(kind: &OpKind) -> Option<(usize, usize)> {
    match kind {
        OpKind::Conv2d { stride, pad } => Some((*stride, *pad)),
        OpKind::DownsampleConv => Some((2, 1)),
        _ => None,
    }
}

impl OpKind {
    pub fn name(&self) -> &str {
        match self {
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::DownsampleConv => "downsample_conv",
            OpKind::Linear => "linear",
            OpKind::GroupNorm { .. } => "group_norm",
            OpKind::LayerNorm { .. } => "layer_norm",
            OpKind::Silu => "silu",
            OpKind::Geglu => "geglu",
            OpKind::Softmax => "softmax",
            OpKind::Attention { .. } => "scaled_dot_product_attention",
            OpKind::ConcatChannels => "concat_channels",
            OpKind::UpsampleNearest2x => "upsample_nearest2x",
            OpKind::Add => "add",
            OpKind::AddChannel => "add_channel",
            OpKind::Scale(_) => "scale",
            OpKind::ToTokens => "to_tokens",
            OpKind::FromTokens { .. } => "from_tokens",
            OpKind::EmbedLookup { .. } => "embed_lookup",
            OpKind::MseReduce => "mse_reduce",
            OpKind::Custom(op) => op.name(),
        }
    }

    /// Output dims for the given input dims.
    pub fn infer_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>, String> {
        let arity = |lo: usize, hi: usize| -> Result<(), String> {
            if inputs.len() < lo || inputs.len() > hi {
                Err(format!(
                    "{} takes {lo}..={hi} inputs, got {}",
                    self.name(),
                    inputs.len()
                ))
            } else {
                Ok(())
            }
        };
        match self {
            OpKind::Conv2d { .. } | OpKind::DownsampleConv => {
                arity(2, 3)?;
                let (stride, pad) = conv_geometry(self).unwrap();
                let (x, w) = (inputs[0], inputs[1]);
                if x.len() != 4 || w.len() != 4 {
                    return Err(format!("conv expects 4-d input and weight, got {x:?} and {w:?}"));
                }
                if matches!(self, OpKind::DownsampleConv) && (w[2] != 3 || w[3] != 3) {
                    return Err(format!("downsample conv needs a 3x3 kernel, got {w:?}"));
                }
                if x[1] != w[1] {
                    return Err(format!("input channels {} != weight channels {}", x[1], w[1]));
                }
                if let Some(b) = inputs.get(2) {
                    if *b != [w[0]] {
                        return Err(format!("bias {b:?} does not match {} outputs", w[0]));
                    }
                }
                if stride == 0 || x[2] + 2 * pad < w[2] || x[3] + 2 * pad < w[3] {
                    return Err(format!("kernel {w:?} does not fit input {x:?}"));
                }
                let ho = (x[2] + 2 * pad - w[2]) / stride + 1;
                let wo = (x[3] + 2 * pad - w[3]) / stride + 1;
                Ok(vec![x[0], w[0], ho, wo])
            }
            OpKind::Linear => {
                arity(2, 3)?;
                let (x, w) = (inputs[0], inputs[1]);
                if x.is_empty() || w.len() != 2 || *x.last().unwrap() != w[1] {
                    return Err(format!("linear input {x:?} incompatible with weight {w:?}"));
                }
                if let Some(b) = inputs.get(2) {
                    if *b != [w[0]] {
                        return Err(format!("bias {b:?} does not match {} outputs", w[0]));
                    }
                }
                let mut out = x.to_vec();
                *out.last_mut().unwrap() = w[0];
                Ok(out)
            }
            OpKind::GroupNorm { groups, .. } => {
                arity(3, 3)?;
                let x = inputs[0];
                if x.len() < 2 {
                    return Err(format!("group norm input {x:?} has no channel axis"));
                }
                if *groups == 0 || x[1] % groups != 0 {
                    return Err(format!("{} channels not divisible into {groups} groups", x[1]));
                }
                if inputs[1] != [x[1]] || inputs[2] != [x[1]] {
                    return Err("affine parameters must be [C]".into());
                }
                Ok(x.to_vec())
            }
            OpKind::LayerNorm { .. } => {
                arity(3, 3)?;
                let x = inputs[0];
                let d = *x.last().ok_or("layer norm of a scalar")?;
                if inputs[1] != [d] || inputs[2] != [d] {
                    return Err("affine parameters must match the last axis".into());
                }
                Ok(x.to_vec())
            }
            OpKind::Silu | OpKind::Softmax | OpKind::Scale(_) => {
                arity(1, 1)?;
                Ok(inputs[0].to_vec())
            }
            OpKind::Geglu => {
                arity(1, 1)?;
                let mut out = inputs[0].to_vec();
                let last = out.last_mut().ok_or("geglu of a scalar")?;
                if *last % 2 != 0 {
                    return Err(format!("geglu needs an even last axis, got {last}"));
                }
                *last /= 2;
                Ok(out)
            }
            OpKind::Attention { heads } => {
                arity(3, 3)?;
                let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
                if q.len() != 3 || k.len() != 3 || v.len() != 3 {
                    return Err("attention expects [N,L,C] operands".into());
                }
                if k != v || q[0] != k[0] || q[2] != k[2] {
                    return Err(format!("attention operands {q:?} {k:?} {v:?} disagree"));
                }
                if *heads == 0 || q[2] % heads != 0 {
                    return Err(format!("{} channels not divisible into {heads} heads", q[2]));
                }
                Ok(q.to_vec())
            }
            OpKind::ConcatChannels => {
                arity(2, 2)?;
                let (a, b) = (inputs[0], inputs[1]);
                if a.len() != 4 || b.len() != 4 || a[0] != b[0] || a[2..] != b[2..] {
                    return Err(format!("cannot concatenate {a:?} with {b:?}"));
                }
                Ok(vec![a[0], a[1] + b[1], a[2], a[3]])
            }
            OpKind::UpsampleNearest2x => {
                arity(1, 1)?;
                let x = inputs[0];
                if x.len() != 4 {
                    return Err(format!("upsample expects [N,C,H,W], got {x:?}"));
                }
                Ok(vec![x[0], x[1], 2 * x[2], 2 * x[3]])
            }
            OpKind::Add => {
                arity(2, 2)?;
                if inputs[0] != inputs[1] {
                    return Err(format!("add of {:?} and {:?}", inputs[0], inputs[1]));
                }
                Ok(inputs[0].to_vec())
            }
            OpKind::AddChannel => {
                arity(2, 2)?;
                let (x, v) = (inputs[0], inputs[1]);
                if x.len() < 2 || v != [x[0], x[1]] {
                    return Err(format!("channel vector {v:?} does not fit {x:?}"));
                }
                Ok(x.to_vec())
            }
            OpKind::ToTokens => {
                arity(1, 1)?;
                let x = inputs[0];
                if x.len() != 4 {
                    return Err(format!("to_tokens expects [N,C,H,W], got {x:?}"));
                }
                Ok(vec![x[0], x[2] * x[3], x[1]])
            }
            OpKind::FromTokens { h, w } => {
                arity(1, 1)?;
                let x = inputs[0];
                if x.len() != 3 || x[1] != h * w {
                    return Err(format!("from_tokens {h}x{w} cannot take {x:?}"));
                }
                Ok(vec![x[0], x[2], *h, *w])
            }
            OpKind::EmbedLookup { ids } => {
                arity(1, 1)?;
                let t = inputs[0];
                if t.len() != 2 {
                    return Err(format!("embedding table must be [V,D], got {t:?}"));
                }
                if ids.is_empty() {
                    return Err("empty id sequence".into());
                }
                if let Some(bad) = ids.iter().find(|&&i| i >= t[0]) {
                    return Err(format!("id {bad} outside vocabulary of {}", t[0]));
                }
                Ok(vec![1, ids.len(), t[1]])
            }
            OpKind::MseReduce => {
                arity(2, 2)?;
                if inputs[0] != inputs[1] {
                    return Err(format!("mse of {:?} and {:?}", inputs[0], inputs[1]));
                }
                Ok(vec![1])
            }
            OpKind::Custom(op) => op.shape(inputs),
        }
    }

    pub fn forward<T: Scalar>(&self, x: &[&Tensor<T>], out_dims: &[usize]) -> Tensor<T> {
        match self {
            OpKind::Conv2d { .. } | OpKind::DownsampleConv => {
                let (stride, pad) = conv_geometry(self).unwrap();
                conv_forward(x[0], x[1], x.get(2).copied(), stride, pad, out_dims)
            }
            OpKind::Linear => linear_forward(x[0], x[1], x.get(2).copied(), out_dims),
            OpKind::GroupNorm { groups, eps } => group_norm_forward(x[0], x[1], x[2], *groups, *eps),
            OpKind::LayerNorm { eps } => layer_norm_forward(x[0], x[1], x[2], *eps),
            OpKind::Silu => silu_forward(x[0]),
            OpKind::Geglu => geglu_forward(x[0], out_dims),
            OpKind::Softmax => softmax_forward(x[0]),
            OpKind::Attention { heads } => attention_forward(x[0], x[1], x[2], *heads),
            OpKind::ConcatChannels => concat_forward(x[0], x[1], out_dims),
            OpKind::UpsampleNearest2x => upsample_forward(x[0], out_dims),
            OpKind::Add => x[0].add(x[1]).expect("validated shapes"),
            OpKind::AddChannel => add_channel_forward(x[0], x[1]),
            OpKind::Scale(s) => x[0].scale(T::from_f64(*s)),
            OpKind::ToTokens => {
                let d = x[0].dims();
                transpose_cs(x[0], d[0], d[1], d[2] * d[3], out_dims)
            }
            OpKind::FromTokens { .. } => {
                let d = x[0].dims();
                transpose_cs(x[0], d[0], d[1], d[2], out_dims)
            }
            OpKind::EmbedLookup { ids } => {
                let d = x[0].dims()[1];
                let table = x[0].data();
                let mut out = Vec::with_capacity(ids.len() * d);
                for &i in ids {
                    out.extend_from_slice(&table[i * d..(i + 1) * d]);
                }
                Tensor::from_parts(out_dims.to_vec(), out)
            }
            OpKind::MseReduce => {
                let n = x[0].len();
                let mut acc = T::zero();
                for (&a, &b) in x[0].data().iter().zip(x[1].data()) {
                    let d = a - b;
                    acc = acc + d * d;
                }
                Tensor::scalar(acc / T::from_f64(n as f64))
            }
            OpKind::Custom(op) => {
                let xs: Vec<Tensor<f64>> = x.iter().map(|t| t.cast()).collect();
                let refs: Vec<&Tensor<f64>> = xs.iter().collect();
                op.forward(&refs).cast()
            }
        }
    }

    /// Gradients of the inputs flagged in `need`; others come back `None`.
    pub fn backward<T: Scalar>(
        &self,
        x: &[&Tensor<T>],
        y: &Tensor<T>,
        dy: &Tensor<T>,
        need: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let mut out: Vec<Option<Tensor<T>>> = vec![None; x.len()];
        match self {
            OpKind::Conv2d { .. } | OpKind::DownsampleConv => {
                let (stride, pad) = conv_geometry(self).unwrap();
                let (dx, dw, db) = conv_backward(x[0], x[1], dy, stride, pad, need);
                out[0] = dx;
                out[1] = dw;
                if x.len() > 2 {
                    out[2] = db;
                }
            }
            OpKind::Linear => {
                let (dx, dw, db) = linear_backward(x[0], x[1], dy, need);
                out[0] = dx;
                out[1] = dw;
                if x.len() > 2 {
                    out[2] = db;
                }
            }
            OpKind::GroupNorm { groups, eps } => {
                let (dx, dg, db) = group_norm_backward(x[0], x[1], dy, *groups, *eps);
                out = vec![Some(dx), Some(dg), Some(db)];
            }
            OpKind::LayerNorm { eps } => {
                let (dx, dg, db) = layer_norm_backward(x[0], x[1], dy, *eps);
                out = vec![Some(dx), Some(dg), Some(db)];
            }
            OpKind::Silu => {
                out[0] = Some(silu_backward(x[0], dy));
            }
            OpKind::Geglu => out[0] = Some(geglu_backward(x[0], dy)),
            OpKind::Softmax => {
                out[0] = Some(softmax_backward(y, dy));
            }
            OpKind::Attention { heads } => {
                let (dq, dk, dv) = attention_backward(x[0], x[1], x[2], dy, *heads);
                out = vec![Some(dq), Some(dk), Some(dv)];
            }
            OpKind::ConcatChannels => {
                let (a, b) = concat_backward(x[0], x[1], dy);
                out = vec![Some(a), Some(b)];
            }
            OpKind::UpsampleNearest2x => out[0] = Some(upsample_backward(x[0], dy)),
            OpKind::Add => out = vec![Some(dy.clone()), Some(dy.clone())],
            OpKind::AddChannel => {
                let d = x[0].dims();
                let (n, c) = (d[0], d[1]);
                let s = x[0].len() / (n * c);
                let dv: Vec<T> = dy
                    .data()
                    .chunks(s)
                    .map(|ch| ch.iter().fold(T::zero(), |a, &v| a + v))
                    .collect();
                out = vec![Some(dy.clone()), Some(Tensor::from_parts(vec![n, c], dv))];
            }
            OpKind::Scale(s) => out[0] = Some(dy.scale(T::from_f64(*s))),
            OpKind::ToTokens => {
                let d = x[0].dims();
                out[0] = Some(transpose_cs(dy, d[0], d[2] * d[3], d[1], d));
            }
            OpKind::FromTokens { .. } => {
                let d = x[0].dims();
                out[0] = Some(transpose_cs(dy, d[0], d[2], d[1], d));
            }
            OpKind::EmbedLookup { ids } => {
                let d = x[0].dims()[1];
                let mut g = vec![T::zero(); x[0].len()];
                for (l, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        g[i * d + j] = g[i * d + j] + dy.data()[l * d + j];
                    }
                }
                out[0] = Some(Tensor::from_parts(x[0].dims().to_vec(), g));
            }
            OpKind::MseReduce => {
                let scale = T::from_f64(2.0) * dy.data()[0] / T::from_f64(x[0].len() as f64);
                let da = x[0].zip_map(x[1], |a, b| (a - b) * scale).unwrap();
                out = vec![Some(da.clone()), Some(da.map(|v| -v))];
            }
            OpKind::Custom(op) => {
                let xs: Vec<Tensor<f64>> = x.iter().map(|t| t.cast()).collect();
                let refs: Vec<&Tensor<f64>> = xs.iter().collect();
                let gs = op.backward(&refs, &dy.cast());
                out = gs.into_iter().map(|g| Some(g.cast())).collect();
            }
        }
        for (o, &n) in out.iter_mut().zip(need) {
            if !n {
                *o = None;
            }
        }
        out
    }

    /// Multiply-add count of one forward evaluation, times two.
    ///
    /// Only contraction ops (convolution, linear, attention) are counted.
    pub fn flops(&self, inputs: &[&[usize]], out: &[usize]) -> u64 {
        match self {
            OpKind::Conv2d { .. } | OpKind::DownsampleConv => {
                let w = inputs[1];
                2 * (w[1] * w[2] * w[3]) as u64 * out.iter().product::<usize>() as u64
            }
            OpKind::Linear => {
                let w = inputs[1];
                2 * w[1] as u64 * out.iter().product::<usize>() as u64
            }
            OpKind::Attention { .. } => {
                let (q, k) = (inputs[0], inputs[1]);
                // scores plus weighted sum of values
                4 * (q[0] * q[1] * k[1] * q[2]) as u64
            }
            _ => 0,
        }
    }
}

/// Logistic function over a slice.
fn sigmoid_in_place<T: Scalar>(v: &mut [T]) {
    v.iter_mut().for_each(|x| *x = -*x);
    T::exp_in_place(v);
    v.iter_mut().for_each(|x| *x = T::one() / (T::one() + *x));
}

fn silu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut s = x.data().to_vec();
    sigmoid_in_place(&mut s);
    s.iter_mut().zip(x.data()).for_each(|(sv, &xv)| *sv = xv * *sv);
    Tensor::from_parts(x.dims().to_vec(), s)
}

fn silu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut s = x.data().to_vec();
    sigmoid_in_place(&mut s);
    for ((sv, &xv), &g) in s.iter_mut().zip(x.data()).zip(dy.data()) {
        *sv = g * (*sv * (T::one() + xv * (T::one() - *sv)));
    }
    Tensor::from_parts(x.dims().to_vec(), s)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh(c·(g + a·g³)) for each gate value, through `exp`.
fn gelu_tanh<T: Scalar>(g: &[T]) -> Vec<T> {
    let c = T::from_f64(2.0 * GELU_C);
    let a = T::from_f64(GELU_A);
    let mut u: Vec<T> = g.iter().map(|&v| c * (v + a * v * v * v)).collect();
    T::exp_in_place(&mut u);
    let two = T::from_f64(2.0);
    u.iter_mut().for_each(|e| *e = T::one() - two / (T::one() + *e));
    u
}

/// Output columns `ox` whose input column `ox·stride + kj − pad` lies in `0..w`.
fn valid_cols(kj: usize, stride: usize, pad: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kj).div_ceil(stride).min(wo);
    let hi = if w + pad > kj {
        ((w + pad - kj - 1) / stride + 1).min(wo)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn im2col<T: Scalar>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    cols: &mut [T],
) {
    let p = ho * wo;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * p;
                let (lo, hi) = valid_cols(kj, stride, pad, w, wo);
                for oy in 0..ho {
                    let dst = &mut cols[row + oy * wo..row + (oy + 1) * wo];
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    if stride == 1 {
                        let ix0 = lo + kj - pad;
                        dst[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                    } else {
                        for ox in lo..hi {
                            dst[ox] = src[ox * stride + kj - pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(
    cols: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    dx: &mut [T],
) {
    let p = ho * wo;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * p;
                let (lo, hi) = valid_cols(kj, stride, pad, w, wo);
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    let src = &cols[row + oy * wo..row + (oy + 1) * wo];
                    let dst = &mut dx[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for ox in lo..hi {
                        let ix = ox * stride + kj - pad;
                        dst[ix] = dst[ix] + src[ox];
                    }
                }
            }
        }
    }
}

fn is_pointwise(kh: usize, kw: usize, stride: usize, pad: usize) -> bool {
    kh == 1 && kw == 1 && stride == 1 && pad == 0
}

fn conv_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
    out_dims: &[usize],
) -> Tensor<T> {
    let xd = x.dims();
    let wd = w.dims();
    let (n, c, h, wi) = (xd[0], xd[1], xd[2], xd[3]);
    let (o, kh, kw) = (wd[0], wd[2], wd[3]);
    let (ho, wo) = (out_dims[2], out_dims[3]);
    let p = ho * wo;
    let ck = c * kh * kw;
    let mut out = vec![T::zero(); n * o * p];
    let mut cols = vec![T::zero(); if is_pointwise(kh, kw, stride, pad) { 0 } else { ck * p }];
    for ni in 0..n {
        let xn = &x.data()[ni * c * h * wi..(ni + 1) * c * h * wi];
        let on = &mut out[ni * o * p..(ni + 1) * o * p];
        let src: &[T] = if cols.is_empty() {
            xn
        } else {
            im2col(xn, (c, h, wi), (kh, kw), stride, pad, (ho, wo), &mut cols);
            &cols
        };
        gemm_nn(w.data(), src, on, o, ck, p);
        if let Some(b) = b {
            for (oi, row) in on.chunks_mut(p).enumerate() {
                let bv = b.data()[oi];
                row.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    }
    Tensor::from_parts(out_dims.to_vec(), out)
}

type Grads3<T> = (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>);

fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need: &[bool],
) -> Grads3<T> {
    let xd = x.dims();
    let wd = w.dims();
    let (n, c, h, wi) = (xd[0], xd[1], xd[2], xd[3]);
    let (o, kh, kw) = (wd[0], wd[2], wd[3]);
    let (ho, wo) = (dy.dims()[2], dy.dims()[3]);
    let p = ho * wo;
    let ck = c * kh * kw;
    let pointwise = is_pointwise(kh, kw, stride, pad);
    let need_x = need[0];
    let need_w = need[1];
    let need_b = need.get(2).copied().unwrap_or(false);

    let mut dx = if need_x { vec![T::zero(); x.len()] } else { Vec::new() };
    let mut dw = if need_w { vec![T::zero(); w.len()] } else { Vec::new() };
    let mut cols = vec![T::zero(); if pointwise { 0 } else { ck * p }];
    let mut dcols = vec![T::zero(); if need_x && !pointwise { ck * p } else { 0 }];
    for ni in 0..n {
        let xn = &x.data()[ni * c * h * wi..(ni + 1) * c * h * wi];
        let dyn_ = &dy.data()[ni * o * p..(ni + 1) * o * p];
        if need_w {
            let src: &[T] = if pointwise {
                xn
            } else {
                im2col(xn, (c, h, wi), (kh, kw), stride, pad, (ho, wo), &mut cols);
                &cols
            };
            gemm_nt(dyn_, src, &mut dw, o, p, ck);
        }
        if need_x {
            let dxn = &mut dx[ni * c * h * wi..(ni + 1) * c * h * wi];
            if pointwise {
                gemm_tn(w.data(), dyn_, dxn, ck, o, p);
            } else {
                dcols.iter_mut().for_each(|v| *v = T::zero());
                gemm_tn(w.data(), dyn_, &mut dcols, ck, o, p);
                col2im(&dcols, (c, h, wi), (kh, kw), stride, pad, (ho, wo), dxn);
            }
        }
    }
    let db = need_b.then(|| {
        let mut db = vec![T::zero(); o];
        for ni in 0..n {
            for (oi, acc) in db.iter_mut().enumerate() {
                let row = &dy.data()[(ni * o + oi) * p..(ni * o + oi + 1) * p];
                *acc = row.iter().fold(*acc, |a, &v| a + v);
            }
        }
        Tensor::from_parts(vec![o], db)
    });
    (
        need_x.then(|| Tensor::from_parts(xd.to_vec(), dx)),
        need_w.then(|| Tensor::from_parts(wd.to_vec(), dw)),
        db,
    )
}

fn linear_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, out_dims: &[usize]) -> Tensor<T> {
    let (o, i) = (w.dims()[0], w.dims()[1]);
    let m = x.len() / i;
    let mut y = vec![T::zero(); m * o];
    gemm_nt(x.data(), w.data(), &mut y, m, i, o);
    if let Some(b) = b {
        for row in y.chunks_mut(o) {
            for (v, &bv) in row.iter_mut().zip(b.data()) {
                *v = *v + bv;
            }
        }
    }
    Tensor::from_parts(out_dims.to_vec(), y)
}

fn linear_backward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, dy: &Tensor<T>, need: &[bool]) -> Grads3<T> {
    let (o, i) = (w.dims()[0], w.dims()[1]);
    let m = x.len() / i;
    let dx = need[0].then(|| {
        let mut dx = vec![T::zero(); m * i];
        gemm_nn(dy.data(), w.data(), &mut dx, m, o, i);
        Tensor::from_parts(x.dims().to_vec(), dx)
    });
    let dw = need[1].then(|| {
        let mut dw = vec![T::zero(); o * i];
        gemm_tn(dy.data(), x.data(), &mut dw, o, m, i);
        Tensor::from_parts(vec![o, i], dw)
    });
    let db = need.get(2).copied().unwrap_or(false).then(|| {
        let mut db = vec![T::zero(); o];
        for row in dy.data().chunks(o) {
            for (a, &v) in db.iter_mut().zip(row) {
                *a = *a + v;
            }
        }
        Tensor::from_parts(vec![o], db)
    });
    (dx, dw, db)
}

/// Mean and inverse standard deviation of a slice, accumulated in f64.
fn moments<T: Scalar>(xs: &[T], eps: f64) -> (T, T) {
    let n = xs.len() as f64;
    let mean = xs.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let var = xs
        .iter()
        .map(|v| {
            let d = v.as_f64() - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (T::from_f64(mean), T::from_f64(1.0 / (var + eps).sqrt()))
}

fn group_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    groups: usize,
    eps: f64,
) -> Tensor<T> {
    let d = x.dims();
    let (n, c) = (d[0], d[1]);
    let s = x.len() / (n * c);
    let cpg = c / groups;
    let mut out = vec![T::zero(); x.len()];
    out.par_chunks_mut(cpg * s)
        .zip(x.data().par_chunks(cpg * s))
        .enumerate()
        .for_each(|(ng, (o, xs))| {
            let g = ng % groups;
            let (mean, inv) = moments(xs, eps);
            for ci in 0..cpg {
                let ch = g * cpg + ci;
                let (ga, be) = (gamma.data()[ch], beta.data()[ch]);
                for j in 0..s {
                    let k = ci * s + j;
                    o[k] = (xs[k] - mean) * inv * ga + be;
                }
            }
        });
    Tensor::from_parts(d.to_vec(), out)
}

fn norm_backward_row<T: Scalar>(xhat: &[T], dxhat: &[T], inv: T, dx: &mut [T]) {
    let n = T::from_f64(xhat.len() as f64);
    let sum_d = dxhat.iter().fold(T::zero(), |a, &v| a + v);
    let sum_dx = dxhat.iter().zip(xhat).fold(T::zero(), |a, (&d, &h)| a + d * h);
    for ((o, &d), &h) in dx.iter_mut().zip(dxhat).zip(xhat) {
        *o = inv / n * (n * d - sum_d - h * sum_dx);
    }
}

fn group_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
    groups: usize,
    eps: f64,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = x.dims();
    let (n, c) = (d[0], d[1]);
    let s = x.len() / (n * c);
    let cpg = c / groups;
    let mut dx = vec![T::zero(); x.len()];
    // per (batch, group): partial gamma/beta sums for each channel of the group
    let partials: Vec<(Vec<T>, Vec<T>)> = dx
        .par_chunks_mut(cpg * s)
        .zip(x.data().par_chunks(cpg * s))
        .zip(dy.data().par_chunks(cpg * s))
        .enumerate()
        .map(|(ng, ((dxs, xs), dys))| {
            let g = ng % groups;
            let (mean, inv) = moments(xs, eps);
            let xhat: Vec<T> = xs.iter().map(|&v| (v - mean) * inv).collect();
            let mut dxhat = vec![T::zero(); xs.len()];
            let mut dg = vec![T::zero(); cpg];
            let mut db = vec![T::zero(); cpg];
            for ci in 0..cpg {
                let ga = gamma.data()[g * cpg + ci];
                for j in 0..s {
                    let k = ci * s + j;
                    dxhat[k] = dys[k] * ga;
                    dg[ci] = dg[ci] + dys[k] * xhat[k];
                    db[ci] = db[ci] + dys[k];
                }
            }
            norm_backward_row(&xhat, &dxhat, inv, dxs);
            (dg, db)
        })
        .collect();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (ng, (dg, db)) in partials.iter().enumerate() {
        let g = ng % groups;
        for ci in 0..cpg {
            dgamma[g * cpg + ci] = dgamma[g * cpg + ci] + dg[ci];
            dbeta[g * cpg + ci] = dbeta[g * cpg + ci] + db[ci];
        }
    }
    (
        Tensor::from_parts(d.to_vec(), dx),
        Tensor::from_parts(vec![c], dgamma),
        Tensor::from_parts(vec![c], dbeta),
    )
}

fn layer_norm_forward<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Tensor<T> {
    let d = *x.dims().last().unwrap();
    let mut out = vec![T::zero(); x.len()];
    for (o, xs) in out.chunks_mut(d).zip(x.data().chunks(d)) {
        let (mean, inv) = moments(xs, eps);
        for j in 0..d {
            o[j] = (xs[j] - mean) * inv * gamma.data()[j] + beta.data()[j];
        }
    }
    Tensor::from_parts(x.dims().to_vec(), out)
}

fn layer_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
    eps: f64,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = *x.dims().last().unwrap();
    let mut dx = vec![T::zero(); x.len()];
    let mut dg = vec![T::zero(); d];
    let mut db = vec![T::zero(); d];
    let mut xhat = vec![T::zero(); d];
    let mut dxhat = vec![T::zero(); d];
    for ((dxs, xs), dys) in dx.chunks_mut(d).zip(x.data().chunks(d)).zip(dy.data().chunks(d)) {
        let (mean, inv) = moments(xs, eps);
        for j in 0..d {
            xhat[j] = (xs[j] - mean) * inv;
            dxhat[j] = dys[j] * gamma.data()[j];
            dg[j] = dg[j] + dys[j] * xhat[j];
            db[j] = db[j] + dys[j];
        }
        norm_backward_row(&xhat, &dxhat, inv, dxs);
    }
    (
        Tensor::from_parts(x.dims().to_vec(), dx),
        Tensor::from_parts(vec![d], dg),
        Tensor::from_parts(vec![d], db),
    )
}

/// Sum in eight interleaved lanes, combined pairwise; fixed order, so deterministic.
fn lane_sum<T: Scalar>(xs: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let mut chunks = xs.chunks_exact(8);
    for c in &mut chunks {
        for (a, &v) in acc.iter_mut().zip(c) {
            *a = *a + v;
        }
    }
    for (a, &v) in acc.iter_mut().zip(chunks.remainder()) {
        *a = *a + v;
    }
    ((acc[0] + acc[4]) + (acc[2] + acc[6])) + ((acc[1] + acc[5]) + (acc[3] + acc[7]))
}

fn lane_max<T: Scalar>(xs: &[T]) -> T {
    let mut acc = [T::neg_infinity(); 8];
    let mut chunks = xs.chunks_exact(8);
    for c in &mut chunks {
        for (a, &v) in acc.iter_mut().zip(c) {
            *a = a.max(v);
        }
    }
    for (a, &v) in acc.iter_mut().zip(chunks.remainder()) {
        *a = a.max(v);
    }
    acc.iter().fold(T::neg_infinity(), |a, &v| a.max(v))
}

fn softmax_rows<T: Scalar>(data: &mut [T], width: usize) {
    for row in data.chunks_mut(width) {
        let m = lane_max(row);
        row.iter_mut().for_each(|v| *v = *v - m);
        T::exp_in_place(row);
        let inv = T::one() / lane_sum(row);
        row.iter_mut().for_each(|v| *v = *v * inv);
    }
}

fn softmax_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let d = *x.dims().last().unwrap();
    let mut out = x.data().to_vec();
    softmax_rows(&mut out, d);
    Tensor::from_parts(x.dims().to_vec(), out)
}

fn softmax_backward_rows<T: Scalar>(p: &[T], dp: &mut [T], width: usize) {
    for (pr, dr) in p.chunks(width).zip(dp.chunks_mut(width)) {
        let mut acc = [T::zero(); 8];
        for (i, (&x, &y)) in pr.iter().zip(dr.iter()).enumerate() {
            acc[i % 8] = acc[i % 8] + x * y;
        }
        let dot = lane_sum(&acc);
        for (d, &pv) in dr.iter_mut().zip(pr) {
            *d = pv * (*d - dot);
        }
    }
}

fn softmax_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let d = *y.dims().last().unwrap();
    let mut dx = dy.data().to_vec();
    softmax_backward_rows(y.data(), &mut dx, d);
    Tensor::from_parts(y.dims().to_vec(), dx)
}

/// Splits rows of `2f` into value and gate halves.
fn geglu_halves<T: Scalar>(x: &[T], f: usize) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / (2 * f);
    let mut a = Vec::with_capacity(rows * f);
    let mut g = Vec::with_capacity(rows * f);
    for row in x.chunks(2 * f) {
        a.extend_from_slice(&row[..f]);
        g.extend_from_slice(&row[f..]);
    }
    (a, g)
}

fn geglu_forward<T: Scalar>(x: &Tensor<T>, out_dims: &[usize]) -> Tensor<T> {
    let f = *out_dims.last().unwrap();
    let (a, g) = geglu_halves(x.data(), f);
    let th = gelu_tanh(&g);
    let half = T::from_f64(0.5);
    let out = a
        .iter()
        .zip(&g)
        .zip(&th)
        .map(|((&a, &g), &t)| a * (half * g * (T::one() + t)))
        .collect();
    Tensor::from_parts(out_dims.to_vec(), out)
}

fn geglu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let f = *dy.dims().last().unwrap();
    let (a, g) = geglu_halves(x.data(), f);
    let th = gelu_tanh(&g);
    let c = T::from_f64(GELU_C);
    let ca = T::from_f64(3.0 * GELU_A);
    let half = T::from_f64(0.5);
    let mut dx = vec![T::zero(); x.len()];
    for (r, drow) in dx.chunks_mut(2 * f).enumerate() {
        for j in 0..f {
            let i = r * f + j;
            let (av, gv, t, d) = (a[i], g[i], th[i], dy.data()[i]);
            let gelu = half * gv * (T::one() + t);
            let grad = half * (T::one() + t) + half * gv * (T::one() - t * t) * c * (T::one() + ca * gv * gv);
            drow[j] = d * gelu;
            drow[f + j] = d * av * grad;
        }
    }
    Tensor::from_parts(x.dims().to_vec(), dx)
}

/// Copies head `h` of `[L, C]` rows into a contiguous `[L, d]` block.
fn gather_head<T: Scalar>(src: &[T], rows: usize, c: usize, h: usize, d: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * d);
    for r in 0..rows {
        out.extend_from_slice(&src[r * c + h * d..r * c + (h + 1) * d]);
    }
    out
}

fn scatter_head<T: Scalar>(dst: &mut [T], block: &[T], rows: usize, c: usize, h: usize, d: usize) {
    for r in 0..rows {
        dst[r * c + h * d..r * c + (h + 1) * d].copy_from_slice(&block[r * d..(r + 1) * d]);
    }
}

struct HeadProbs<T> {
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    p: Vec<T>,
}

fn head_probs<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    ni: usize,
    h: usize,
    heads: usize,
) -> HeadProbs<T> {
    let (l, c) = (q.dims()[1], q.dims()[2]);
    let m = k.dims()[1];
    let d = c / heads;
    let qn = &q.data()[ni * l * c..(ni + 1) * l * c];
    let kn = &k.data()[ni * m * c..(ni + 1) * m * c];
    let vn = &v.data()[ni * m * c..(ni + 1) * m * c];
    let qh = gather_head(qn, l, c, h, d);
    let kh = gather_head(kn, m, c, h, d);
    let vh = gather_head(vn, m, c, h, d);
    let mut s = vec![T::zero(); l * m];
    gemm_nt(&qh, &kh, &mut s, l, d, m);
    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    s.iter_mut().for_each(|x| *x = *x * scale);
    softmax_rows(&mut s, m);
    HeadProbs {
        q: qh,
        k: kh,
        v: vh,
        p: s,
    }
}

fn attention_forward<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, heads: usize) -> Tensor<T> {
    let (n, l, c) = (q.dims()[0], q.dims()[1], q.dims()[2]);
    let m = k.dims()[1];
    let d = c / heads;
    let blocks: Vec<Vec<T>> = (0..n * heads)
        .into_par_iter()
        .map(|idx| {
            let (ni, h) = (idx / heads, idx % heads);
            let hp = head_probs(q, k, v, ni, h, heads);
            let mut o = vec![T::zero(); l * d];
            gemm_nn(&hp.p, &hp.v, &mut o, l, m, d);
            o
        })
        .collect();
    let mut out = vec![T::zero(); n * l * c];
    for (idx, block) in blocks.iter().enumerate() {
        let (ni, h) = (idx / heads, idx % heads);
        scatter_head(&mut out[ni * l * c..(ni + 1) * l * c], block, l, c, h, d);
    }
    Tensor::from_parts(q.dims().to_vec(), out)
}

fn attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    dy: &Tensor<T>,
    heads: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, l, c) = (q.dims()[0], q.dims()[1], q.dims()[2]);
    let m = k.dims()[1];
    let d = c / heads;
    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    let blocks: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..n * heads)
        .into_par_iter()
        .map(|idx| {
            let (ni, h) = (idx / heads, idx % heads);
            let hp = head_probs(q, k, v, ni, h, heads);
            let dyn_ = &dy.data()[ni * l * c..(ni + 1) * l * c];
            let doh = gather_head(dyn_, l, c, h, d);
            let mut dv = vec![T::zero(); m * d];
            gemm_tn(&hp.p, &doh, &mut dv, m, l, d);
            let mut ds = vec![T::zero(); l * m];
            gemm_nt(&doh, &hp.v, &mut ds, l, d, m);
            softmax_backward_rows(&hp.p, &mut ds, m);
            ds.iter_mut().for_each(|x| *x = *x * scale);
            let mut dq = vec![T::zero(); l * d];
            gemm_nn(&ds, &hp.k, &mut dq, l, m, d);
            let mut dk = vec![T::zero(); m * d];
            gemm_tn(&ds, &hp.q, &mut dk, m, l, d);
            (dq, dk, dv)
        })
        .collect();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    for (idx, (bq, bk, bv)) in blocks.iter().enumerate() {
        let (ni, h) = (idx / heads, idx % heads);
        scatter_head(&mut dq[ni * l * c..(ni + 1) * l * c], bq, l, c, h, d);
        scatter_head(&mut dk[ni * m * c..(ni + 1) * m * c], bk, m, c, h, d);
        scatter_head(&mut dv[ni * m * c..(ni + 1) * m * c], bv, m, c, h, d);
    }
    (
        Tensor::from_parts(q.dims().to_vec(), dq),
        Tensor::from_parts(k.dims().to_vec(), dk),
        Tensor::from_parts(v.dims().to_vec(), dv),
    )
}

fn concat_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, out_dims: &[usize]) -> Tensor<T> {
    let n = a.dims()[0];
    let (sa, sb) = (a.len() / n, b.len() / n);
    let mut out = Vec::with_capacity(a.len() + b.len());
    for ni in 0..n {
        out.extend_from_slice(&a.data()[ni * sa..(ni + 1) * sa]);
        out.extend_from_slice(&b.data()[ni * sb..(ni + 1) * sb]);
    }
    Tensor::from_parts(out_dims.to_vec(), out)
}

fn concat_backward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, dy: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let n = a.dims()[0];
    let (sa, sb) = (a.len() / n, b.len() / n);
    let mut da = Vec::with_capacity(a.len());
    let mut db = Vec::with_capacity(b.len());
    for row in dy.data().chunks(sa + sb) {
        da.extend_from_slice(&row[..sa]);
        db.extend_from_slice(&row[sa..]);
    }
    (
        Tensor::from_parts(a.dims().to_vec(), da),
        Tensor::from_parts(b.dims().to_vec(), db),
    )
}

fn upsample_forward<T: Scalar>(x: &Tensor<T>, out_dims: &[usize]) -> Tensor<T> {
    let (h, w) = (x.dims()[2], x.dims()[3]);
    let mut out = Vec::with_capacity(x.len() * 4);
    for plane in x.data().chunks(h * w) {
        for i in 0..2 * h {
            let row = &plane[(i / 2) * w..(i / 2 + 1) * w];
            for &v in row {
                out.push(v);
                out.push(v);
            }
        }
    }
    Tensor::from_parts(out_dims.to_vec(), out)
}

fn upsample_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (x.dims()[2], x.dims()[3]);
    let mut dx = vec![T::zero(); x.len()];
    for (plane, dplane) in dx.chunks_mut(h * w).zip(dy.data().chunks(4 * h * w)) {
        for i in 0..h {
            for j in 0..w {
                let r0 = 2 * i * 2 * w + 2 * j;
                let r1 = r0 + 2 * w;
                plane[i * w + j] = dplane[r0] + dplane[r0 + 1] + dplane[r1] + dplane[r1 + 1];
            }
        }
    }
    Tensor::from_parts(x.dims().to_vec(), dx)
}

fn add_channel_forward<T: Scalar>(x: &Tensor<T>, v: &Tensor<T>) -> Tensor<T> {
    let (n, c) = (x.dims()[0], x.dims()[1]);
    let s = x.len() / (n * c);
    let mut out = x.data().to_vec();
    for (k, plane) in out.chunks_mut(s).enumerate() {
        let b = v.data()[k];
        plane.iter_mut().for_each(|p| *p = *p + b);
    }
    Tensor::from_parts(x.dims().to_vec(), out)
}

/// Transposes the trailing two axes of `[n, r, c]` into `[n, c, r]`.
fn transpose_cs<T: Scalar>(x: &Tensor<T>, n: usize, r: usize, c: usize, out_dims: &[usize]) -> Tensor<T> {
    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        let src = &x.data()[ni * r * c..(ni + 1) * r * c];
        let dst = &mut out[ni * r * c..(ni + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    Tensor::from_parts(out_dims.to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(dims.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn conv_all_ones_center_is_nine() {
        let x = Tensor::<f64>::full(&[1, 1, 4, 4], 1.0);
        let w = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let kind = OpKind::Conv2d { stride: 1, pad: 1 };
        let dims = kind.infer_shape(&[x.dims(), w.dims()]).unwrap();
        assert_eq!(dims, vec![1, 1, 4, 4]);
        let y = kind.forward(&[&x, &w], &dims);
        // interior pixels see the full 3x3 window, corners 4, edges 6
        assert_eq!(y.data()[5], 9.0);
        assert_eq!(y.data()[10], 9.0);
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data()[1], 6.0);
    }

    #[test]
    fn downsample_halves_resolution() {
        let kind = OpKind::DownsampleConv;
        assert_eq!(
            kind.infer_shape(&[&[2, 3, 8, 8], &[5, 3, 3, 3], &[5]]).unwrap(),
            vec![2, 5, 4, 4]
        );
        assert!(kind.infer_shape(&[&[2, 3, 8, 8], &[5, 3, 1, 1]]).is_err());
    }

    #[test]
    fn linear_identity() {
        let x = t(&[1, 2], &[1.0, 2.0]);
        let w = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let y = OpKind::Linear.forward(&[&x, &w], &[1, 2]);
        assert_eq!(y.data(), &[1.0, 2.0]);
    }

    #[test]
    fn silu_of_zero_is_zero() {
        let y = OpKind::Silu.forward(&[&t(&[1], &[0.0])], &[1]);
        assert_eq!(y.data(), &[0.0]);
    }

    #[test]
    fn softmax_is_shift_invariant_and_normalized() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 1001.0, 1002.0, 1003.0]);
        let y = OpKind::Softmax.forward(&[&x], &[2, 3]);
        let (a, b) = y.data().split_at(3);
        for (u, v) in a.iter().zip(b) {
            assert!((u - v).abs() < 1e-12);
        }
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn group_norm_normalizes_each_group() {
        let x = Tensor::<f64>::from_fn(&[1, 4, 2, 2], |i| (i as f64).powi(2));
        let g = Tensor::<f64>::full(&[4], 1.0);
        let b = Tensor::<f64>::zeros(&[4]);
        let y = OpKind::GroupNorm { groups: 2, eps: 1e-5 }.forward(&[&x, &g, &b], &[1, 4, 2, 2]);
        for grp in y.data().chunks(8) {
            let mean: f64 = grp.iter().sum::<f64>() / 8.0;
            let var: f64 = grp.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn mse_gradient_of_square() {
        let x = t(&[1], &[3.0]);
        let z = t(&[1], &[0.0]);
        let y = OpKind::MseReduce.forward(&[&x, &z], &[1]);
        assert_eq!(y.data(), &[9.0]);
        let g = OpKind::MseReduce.backward(&[&x, &z], &y, &Tensor::scalar(1.0), &[true, false]);
        assert_eq!(g[0].as_ref().unwrap().data(), &[6.0]);
        assert!(g[1].is_none());
    }

    #[test]
    fn tokens_round_trip() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 2, 2], |i| i as f64);
        let tk = OpKind::ToTokens.forward(&[&x], &[2, 4, 3]);
        assert_eq!(tk.data()[1], 4.0);
        let back = OpKind::FromTokens { h: 2, w: 2 }.forward(&[&tk], &[2, 3, 2, 2]);
        assert!(back.bit_eq(&x));
    }

    #[test]
    fn upsample_repeats_pixels() {
        let x = t(&[1, 1, 1, 2], &[1.0, 2.0]);
        let y = OpKind::UpsampleNearest2x.forward(&[&x], &[1, 1, 2, 4]);
        assert_eq!(y.data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn shape_errors_are_reported() {
        assert!(OpKind::Linear.infer_shape(&[&[1, 3], &[2, 2]]).is_err());
        assert!(OpKind::ConcatChannels
            .infer_shape(&[&[1, 3, 4, 4], &[1, 3, 2, 2]])
            .is_err());
        assert!(OpKind::Attention { heads: 3 }
            .infer_shape(&[&[1, 4, 8], &[1, 2, 8], &[1, 2, 8]])
            .is_err());
        assert!(OpKind::EmbedLookup { ids: vec![5] }.infer_shape(&[&[4, 2]]).is_err());
    }
}
