//! Pointwise nonlinearities, nearest-neighbour upsampling and the
//! cross-source softmax.

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Tensor {
    Tensor::from_fn(x.shape(), |i| if x.data()[i] > 0.0 { grad_out.data()[i] } else { 0.0 })
}

fn check_prelu(y: &Tensor, slopes: &Tensor) -> Result<(usize, usize)> {
    match y.shape() {
        [c, l] if slopes.shape() == [*c] => Ok((*c, *l)),
        s => Err(invalid(format!(
            "prelu input {s:?} does not match slopes {:?}",
            slopes.shape()
        ))),
    }
}

/// `max(0, y) + a_c * min(0, y)` with one slope per channel.
pub fn prelu(y: &Tensor, slopes: &Tensor) -> Result<Tensor> {
    let (c, _) = check_prelu(y, slopes)?;
    let mut out = y.clone();
    for ch in 0..c {
        let a = slopes.data()[ch];
        out.row_mut(ch).iter_mut().for_each(|v| {
            if *v < 0.0 {
                *v *= a
            }
        });
    }
    out.ensure_finite("prelu")?;
    Ok(out)
}

/// Gradients of [`prelu`]: `(d_input, d_slopes)`.
pub fn prelu_backward(y: &Tensor, slopes: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    let (c, _) = check_prelu(y, slopes)?;
    let mut d_input = grad_out.clone();
    let mut d_slopes = Tensor::zeros(&[c]);
    for ch in 0..c {
        let a = slopes.data()[ch];
        let mut acc = 0.0;
        for (d, &v) in d_input.row_mut(ch).iter_mut().zip(y.row(ch)) {
            if v < 0.0 {
                acc += *d * v;
                *d *= a;
            }
        }
        d_slopes.data_mut()[ch] = acc;
    }
    Ok((d_input, d_slopes))
}

/// Nearest-neighbour interpolation along time: `out[i, j] = u[i, j / factor]`.
pub fn nearest_upsample(u: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(invalid("upsampling factor must be >= 1"));
    }
    let (c, l) = u.as_matrix()?;
    let mut out = Tensor::zeros(&[c, l * factor]);
    for ch in 0..c {
        let src = &u.data()[ch * l..(ch + 1) * l];
        for (chunk, &v) in out.row_mut(ch).chunks_exact_mut(factor).zip(src) {
            chunk.fill(v);
        }
    }
    Ok(out)
}

/// Backward pass of [`nearest_upsample`]: sums each length-`factor` span.
pub fn nearest_upsample_backward(grad_out: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(invalid("upsampling factor must be >= 1"));
    }
    let (c, lm) = grad_out.as_matrix()?;
    if lm % factor != 0 {
        return Err(invalid(format!("gradient length {lm} is not a multiple of {factor}")));
    }
    let l = lm / factor;
    Ok(Tensor::from_fn(&[c, l], |i| {
        let (ch, j) = (i / l, i % l);
        grad_out.data()[ch * lm + j * factor..ch * lm + (j + 1) * factor].iter().sum()
    }))
}

/// Softmax across sources for a stacked `[N * C, L]` tensor whose source `i`
/// occupies channel rows `i*C .. (i+1)*C`.
pub fn softmax_stacked(z: &Tensor, sources: usize) -> Result<Tensor> {
    let (rows, l) = z.as_matrix()?;
    if sources == 0 || rows % sources != 0 {
        return Err(invalid(format!("{rows} channels cannot be split into {sources} sources")));
    }
    let block = rows / sources * l;
    let zd = z.data();
    let mut out = Tensor::zeros(z.shape());
    let od = out.data_mut();
    for p in 0..block {
        let max = (0..sources).map(|s| zd[s * block + p]).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for s in 0..sources {
            let e = (zd[s * block + p] - max).exp();
            od[s * block + p] = e;
            total += e;
        }
        for s in 0..sources {
            od[s * block + p] /= total;
        }
    }
    out.ensure_finite("softmax")?;
    Ok(out)
}

/// Backward pass of [`softmax_stacked`] given its output.
pub fn softmax_stacked_backward(masks: &Tensor, grad_out: &Tensor, sources: usize) -> Tensor {
    let block = masks.len() / sources;
    let (m, g) = (masks.data(), grad_out.data());
    let mut out = Tensor::zeros(masks.shape());
    let od = out.data_mut();
    for p in 0..block {
        let inner: f64 = (0..sources).map(|s| m[s * block + p] * g[s * block + p]).sum();
        for s in 0..sources {
            let i = s * block + p;
            od[i] = m[i] * (g[i] - inner);
        }
    }
    out
}

/// Softmax across a list of equally shaped logit tensors, one per source.
pub fn softmax_over_sources(z: &[Tensor]) -> Result<Vec<Tensor>> {
    let first = z.first().ok_or_else(|| invalid("softmax needs at least one source"))?;
    if z.iter().any(|t| t.shape() != first.shape()) {
        return Err(invalid("softmax sources must share one shape"));
    }
    let n = z.len();
    let mut stacked = Vec::with_capacity(first.len() * n);
    z.iter().for_each(|t| stacked.extend_from_slice(t.data()));
    let stacked = Tensor::from_vec(&[n, first.len()], stacked)?;
    let masks = softmax_stacked(&stacked, n)?;
    Ok((0..n)
        .map(|s| Tensor::from_vec(first.shape(), masks.row(s).to_vec()).expect("same element count"))
        .collect())
}
