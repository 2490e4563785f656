//! Scale-invariant SDR, the permutation-invariant loss and SI-SDR improvement.

use std::f64::consts::LN_10;

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Magnitude of the clamp applied to every SI-SDR value, in dB.
pub const SI_SDR_CLAMP_DB: f64 = 60.0;

/// Floor on the residual energy relative to the target energy; yields the
/// +60 dB ceiling.
const DEN_FLOOR: f64 = 1e-6;

/// Largest source count [`pit_loss`] enumerates.
pub const PIT_MAX_SOURCES: usize = 4;

fn check_pair(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(invalid(format!(
            "reference has {} samples, estimate has {}",
            reference.len(),
            estimate.len()
        )));
    }
    if reference.is_empty() {
        return Err(invalid("empty signals"));
    }
    let energy: f64 = reference.iter().map(|v| v * v).sum();
    if energy == 0.0 {
        return Err(invalid("reference is identically zero"));
    }
    if !energy.is_finite() || !estimate.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("si_sdr input".into()));
    }
    Ok(energy)
}

/// SI-SDR in dB and its gradient with respect to `estimate`.
pub fn si_sdr_with_grad(reference: &[f64], estimate: &[f64]) -> Result<(f64, Vec<f64>)> {
    let energy = check_pair(reference, estimate)?;
    let cross: f64 = reference.iter().zip(estimate).map(|(s, e)| s * e).sum();
    let alpha = cross / energy;
    let target = alpha * alpha * energy;
    let residual: f64 = reference.iter().zip(estimate).map(|(s, e)| (alpha * s - e).powi(2)).sum();
    if target == 0.0 {
        return Ok((-SI_SDR_CLAMP_DB, vec![0.0; estimate.len()]));
    }
    let floor = DEN_FLOOR * target;
    if residual <= floor {
        // at or past the ceiling the value is constant
        return Ok((SI_SDR_CLAMP_DB, vec![0.0; estimate.len()]));
    }
    let value = 10.0 * (target / residual).log10();
    if value <= -SI_SDR_CLAMP_DB {
        return Ok((-SI_SDR_CLAMP_DB, vec![0.0; estimate.len()]));
    }
    // residual = |e|^2 - target, with d target / de = 2 alpha s
    let k = 10.0 / LN_10;
    let grad = reference
        .iter()
        .zip(estimate)
        .map(|(s, e)| {
            let dt = 2.0 * alpha * s;
            k * (dt / target - (2.0 * e - dt) / residual)
        })
        .collect();
    Ok((value, grad))
}

/// Scale-invariant signal-to-distortion ratio in dB, clamped to ±60.
pub fn si_sdr(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    si_sdr_with_grad(reference, estimate).map(|(v, _)| v)
}

/// SI-SDR gain of `estimate` over using the `mixture` itself.
pub fn si_sdri(reference: &[f64], estimate: &[f64], mixture: &[f64]) -> Result<f64> {
    Ok(si_sdr(reference, estimate)? - si_sdr(reference, mixture)?)
}

/// Outcome of the permutation-invariant loss.
#[derive(Debug, Clone)]
pub struct PitResult {
    /// Negated mean SI-SDR under the best assignment.
    pub loss: f64,
    /// `best_permutation[j]` is the estimate assigned to reference `j`.
    pub best_permutation: Vec<usize>,
    /// SI-SDR of each reference against its assigned estimate, in reference order.
    pub per_source_si_sdr: Vec<f64>,
    /// Gradient of `loss` with respect to the estimates, `[N, T]`.
    pub grad: Tensor,
}

/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for rest in permutations(n - 1) {
        for pos in 0..n {
            let mut p: Vec<usize> = rest.iter().map(|&v| if v >= pos { v + 1 } else { v }).collect();
            p.insert(0, pos);
            out.push(p);
        }
    }
    out.sort();
    out
}

/// Negative mean SI-SDR under the best reference-to-estimate assignment.
/// Both tensors are `[N, T]`.
pub fn pit_loss(references: &Tensor, estimates: &Tensor) -> Result<PitResult> {
    if references.rank() != 2 || references.shape() != estimates.shape() {
        return Err(invalid(format!(
            "references {:?} and estimates {:?} must both be [N, T]",
            references.shape(),
            estimates.shape()
        )));
    }
    let n = references.dim(0);
    if n == 0 {
        return Err(invalid("no sources"));
    }
    if n > PIT_MAX_SOURCES {
        return Err(Error::Unsupported(format!(
            "permutation search over {n} sources; at most {PIT_MAX_SOURCES} are enumerated"
        )));
    }
    // pair[j][i]: reference j against estimate i
    let pair = (0..n)
        .map(|j| (0..n).map(|i| si_sdr_with_grad(references.row(j), estimates.row(i))).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let mut best: Option<(f64, Vec<usize>)> = None;
    for p in permutations(n) {
        let mean = p.iter().enumerate().map(|(j, &i)| pair[j][i].0).sum::<f64>() / n as f64;
        if best.as_ref().is_none_or(|(b, _)| mean > *b) {
            best = Some((mean, p));
        }
    }
    let (mean, perm) = best.expect("at least one permutation");
    let t = references.dim(1);
    let mut grad = Tensor::zeros(&[n, t]);
    for (j, &i) in perm.iter().enumerate() {
        for (g, d) in grad.row_mut(i).iter_mut().zip(&pair[j][i].1) {
            *g = -d / n as f64;
        }
    }
    Ok(PitResult {
        loss: -mean,
        per_source_si_sdr: perm.iter().enumerate().map(|(j, &i)| pair[j][i].0).collect(),
        best_permutation: perm,
        grad,
    })
}
