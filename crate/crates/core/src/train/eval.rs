//! PIT-aligned SI-SDRi evaluation over a mixture stream.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{MixtureItem, StreamSpec};
use crate::error::{invalid, Result};
use crate::metrics::{pit_loss, si_sdri};
use crate::model::Model;
use crate::tensor::Tensor;

/// Scores of one mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemScore {
    pub index: usize,
    pub snr_db: f64,
    /// Estimate index assigned to each reference.
    pub permutation: Vec<usize>,
    /// SI-SDRi per reference, in dB.
    pub si_sdri: Vec<f64>,
    /// Mean over references.
    pub mean_si_sdri: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub items: Vec<ItemScore>,
    pub mean_si_sdri: f64,
    pub median_si_sdri: f64,
}

impl EvalReport {
    pub fn from_items(items: Vec<ItemScore>) -> Result<Self> {
        if items.is_empty() {
            return Err(invalid("nothing to evaluate"));
        }
        let mut sorted: Vec<f64> = items.iter().map(|i| i.mean_si_sdri).collect();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) };
        let mean = sorted.iter().sum::<f64>() / n as f64;
        Ok(Self { items, mean_si_sdri: mean, median_si_sdri: median })
    }

    /// One line per item, then the aggregates.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:>6} {:>8} {:>12} {:>10}", "item", "snr_db", "permutation", "si_sdri");
        for it in &self.items {
            let perm: Vec<String> = it.permutation.iter().map(|p| (p + 1).to_string()).collect();
            let _ = writeln!(s, "{:>6} {:>8.3} {:>12} {:>10.3}", it.index, it.snr_db, perm.join(","), it.mean_si_sdri);
        }
        let _ = writeln!(s, "items {}", self.items.len());
        let _ = writeln!(s, "mean_si_sdri {:.4}", self.mean_si_sdri);
        let _ = writeln!(s, "median_si_sdri {:.4}", self.median_si_sdri);
        s
    }
}

/// Scores estimates `[N, T]` against references `[N, T]` and the mixture `[T]`.
pub fn score_estimates(index: usize, snr_db: f64, references: &Tensor, estimates: &Tensor, mixture: &Tensor) -> Result<ItemScore> {
    let pit = pit_loss(references, estimates)?;
    let si_sdri = pit
        .best_permutation
        .iter()
        .enumerate()
        .map(|(j, &i)| si_sdri(references.row(j), estimates.row(i), mixture.data()))
        .collect::<Result<Vec<_>>>()?;
    let mean = si_sdri.iter().sum::<f64>() / si_sdri.len() as f64;
    Ok(ItemScore { index, snr_db, permutation: pit.best_permutation, si_sdri, mean_si_sdri: mean })
}

/// Evaluates `separate` on items of `spec` (taken from `epoch`).
pub fn evaluate_with<F>(spec: &StreamSpec, epoch: u64, separate: F) -> Result<EvalReport>
where
    F: Fn(&MixtureItem) -> Result<Tensor> + Sync,
{
    spec.validate()?;
    let items = (0..spec.n_mixtures)
        .into_par_iter()
        .map(|i| {
            let item = spec.item(epoch, i)?;
            let est = separate(&item)?;
            score_estimates(i, item.snr_db, &item.sources, &est, &item.mixture)
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_items(items)
}

/// Evaluates a model on the items of `spec` at `epoch`.
pub fn evaluate(model: &Model, spec: &StreamSpec, epoch: u64) -> Result<EvalReport> {
    if model.config().num_sources != 2 {
        return Err(invalid(format!(
            "model separates {} sources but mixtures have 2",
            model.config().num_sources
        )));
    }
    evaluate_with(spec, epoch, |item| Ok(model.separate(&item.mixture)?.sources))
}
