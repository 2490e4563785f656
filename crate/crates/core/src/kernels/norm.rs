//! Channel-wise and global layer normalization over `[C, L]` feature maps.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Added to the variance inside the square root.
pub const NORM_EPS: f64 = 1e-8;

/// Which region the normalization moments are pooled over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    /// Moments per channel, pooled over time.
    Channelwise,
    /// Moments pooled over channels and time.
    Global,
}

/// Values retained from the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct NormCache {
    /// Pre-affine normalized input.
    pub normalized: Tensor,
    /// `1 / sqrt(var + eps)` for each pooled region.
    pub inv_std: Vec<f64>,
}

fn pools(kind: NormKind, channels: usize, len: usize) -> (usize, usize) {
    match kind {
        NormKind::Channelwise => (channels, len),
        NormKind::Global => (1, channels * len),
    }
}

fn check(y: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<(usize, usize)> {
    let (c, l) = match y.shape() {
        [c, l] if *l > 0 => (*c, *l),
        s => return Err(invalid(format!("layer norm input must be [C, L>=1], got {s:?}"))),
    };
    if gain.shape() != [c] || bias.shape() != [c] {
        return Err(invalid(format!(
            "layer norm gain/bias must be [{c}], got {:?} / {:?}",
            gain.shape(),
            bias.shape()
        )));
    }
    Ok((c, l))
}

/// Normalizes `y`, then applies the per-channel affine map.
pub fn layer_norm(y: &Tensor, gain: &Tensor, bias: &Tensor, kind: NormKind) -> Result<(Tensor, NormCache)> {
    let (c, l) = check(y, gain, bias)?;
    let (npools, width) = pools(kind, c, l);
    let mut normalized = Tensor::zeros(y.shape());
    let mut inv_std = Vec::with_capacity(npools);
    for p in 0..npools {
        let src = &y.data()[p * width..(p + 1) * width];
        let mean = src.iter().sum::<f64>() / width as f64;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        inv_std.push(inv);
        for (o, v) in normalized.data_mut()[p * width..(p + 1) * width].iter_mut().zip(src) {
            *o = (v - mean) * inv;
        }
    }
    let mut out = normalized.clone();
    for ch in 0..c {
        let (gv, bv) = (gain.data()[ch], bias.data()[ch]);
        out.row_mut(ch).iter_mut().for_each(|v| *v = *v * gv + bv);
    }
    out.ensure_finite("layer norm")?;
    Ok((out, NormCache { normalized, inv_std }))
}

pub fn channelwise_layer_norm(y: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    layer_norm(y, gain, bias, NormKind::Channelwise).map(|(t, _)| t)
}

pub fn global_layer_norm(y: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    layer_norm(y, gain, bias, NormKind::Global).map(|(t, _)| t)
}

/// Gradients of [`layer_norm`]: `(d_input, d_gain, d_bias)`.
pub fn layer_norm_backward(
    cache: &NormCache,
    gain: &Tensor,
    grad_out: &Tensor,
    kind: NormKind,
) -> Result<(Tensor, Tensor, Tensor)> {
    let xhat = &cache.normalized;
    if grad_out.shape() != xhat.shape() {
        return Err(invalid("layer norm upstream gradient shape mismatch"));
    }
    let (c, l) = (xhat.dim(0), xhat.dim(1));
    let mut d_gain = Tensor::zeros(&[c]);
    let mut d_bias = Tensor::zeros(&[c]);
    // gradient w.r.t. the pre-affine normalized values
    let mut dxhat = Tensor::zeros(xhat.shape());
    for ch in 0..c {
        let g = grad_out.row(ch);
        let xh = xhat.row(ch);
        d_gain.data_mut()[ch] = g.iter().zip(xh).map(|(a, b)| a * b).sum();
        d_bias.data_mut()[ch] = g.iter().sum();
        let gv = gain.data()[ch];
        dxhat.row_mut(ch).iter_mut().zip(g).for_each(|(d, gi)| *d = gi * gv);
    }
    let (npools, width) = pools(kind, c, l);
    let mut d_input = Tensor::zeros(xhat.shape());
    for p in 0..npools {
        let range = p * width..(p + 1) * width;
        let dx = &dxhat.data()[range.clone()];
        let xh = &xhat.data()[range.clone()];
        let n = width as f64;
        let mean_d = dx.iter().sum::<f64>() / n;
        let mean_dx = dx.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
        let inv = cache.inv_std[p];
        for ((o, d), x) in d_input.data_mut()[range].iter_mut().zip(dx).zip(xh) {
            *o = inv * (d - mean_d - x * mean_dx);
        }
    }
    Ok((d_input, d_gain, d_bias))
}
