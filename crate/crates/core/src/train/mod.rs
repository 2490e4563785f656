//! Training loop, evaluation, checkpoints and gradient-check suites.

pub mod checkpoint;
pub mod eval;
pub mod gradcheck;

use std::path::PathBuf;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamState, Gradients, LrSchedule, ParamStore, Recorder};
use crate::cost::{count_flops, Convention};
use crate::data::{Corpus, SourceKind, SourceSet, Split, StreamSpec};
use crate::error::{invalid, Error, Result};
use crate::metrics::pit_loss;
use crate::model::{forward_graph, Layers, Model, ModelConfig};
use crate::rng;
use crate::tensor::Tensor;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
pub use eval::{evaluate, evaluate_with, score_estimates, EvalReport, ItemScore};

/// Backward passes cost about twice the forward pass.
pub const TRAIN_FLOPS_PER_FORWARD: u64 = 3;

/// Loss of one mixture `[T]` against references `[N, T]` and the gradient
/// of that loss for every parameter.
pub fn pit_gradients(
    config: &ModelConfig,
    layers: &Layers,
    store: &ParamStore,
    mixture: &Tensor,
    references: &Tensor,
) -> Result<(f64, Gradients)> {
    let t = mixture.len();
    let mut rec = Recorder::new(store);
    let x = rec.input(mixture.clone().reshape(&[1, t])?);
    let fwd = forward_graph(config, layers, &mut rec, &x)?;
    let mut est = Vec::with_capacity(config.num_sources * t);
    for s in &fwd.sources {
        est.extend_from_slice(rec.tape().value(*s).data());
    }
    let pit = pit_loss(references, &Tensor::from_vec(&[config.num_sources, t], est)?)?;
    if !pit.loss.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let grads = (0..config.num_sources)
        .map(|i| Tensor::from_vec(&[1, t], pit.grad.row(i).to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let mut tape = rec.into_tape();
    let loss = tape.scalar_function(&fwd.sources, pit.loss, grads)?;
    Ok((pit.loss, tape.backward(loss)?))
}

/// Training hyperparameters and data settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub mixtures_per_epoch: usize,
    pub segment_seconds: f64,
    pub rate: u32,
    pub snr_range: (f64, f64),
    pub source_kinds: Vec<SourceKind>,
    pub validation_items: usize,
    pub lr: LrSchedule,
    pub seed: u64,
    /// Reuse epoch 0's mixtures in every epoch.
    pub fixed_train_set: bool,
    /// Passes over the epoch's mixtures per epoch.
    pub passes_per_epoch: usize,
    /// Validate on the training mixtures instead of a separate stream.
    pub validate_on_train: bool,
    pub flop_convention: Convention,
    /// Where to write a checkpoint if training hits a non-finite value.
    pub emergency_checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 4,
            mixtures_per_epoch: 300,
            segment_seconds: 4.0,
            rate: 8000,
            snr_range: (-5.0, 5.0),
            source_kinds: SourceKind::ALL.to_vec(),
            validation_items: 32,
            lr: LrSchedule::default(),
            seed: 0,
            fixed_train_set: false,
            passes_per_epoch: 1,
            validate_on_train: false,
            flop_convention: Convention::MacsAs2,
            emergency_checkpoint: None,
        }
    }
}

impl TrainConfig {
    /// Overfitting run: 8 fixed tone-bank / filtered-noise mixtures of
    /// 0.25 s, 100 steps per epoch, 20 epochs (2000 steps), validated on
    /// the same mixtures.
    pub fn overfit_demo() -> Self {
        Self {
            epochs: 20,
            batch_size: 4,
            mixtures_per_epoch: 8,
            segment_seconds: 0.25,
            source_kinds: vec![SourceKind::ToneBank, SourceKind::FilteredNoise],
            validation_items: 8,
            fixed_train_set: true,
            passes_per_epoch: 50,
            validate_on_train: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.passes_per_epoch == 0 {
            return Err(invalid("passes_per_epoch must be >= 1"));
        }
        if self.validation_items == 0 && !self.validate_on_train {
            return Err(invalid("validation_items must be >= 1"));
        }
        if !(self.lr.initial > 0.0) || !(self.lr.factor > 0.0) {
            return Err(invalid("learning rate and decay factor must be positive"));
        }
        self.train_stream(None).validate()
    }

    fn sources(&self, corpus: Option<Arc<Corpus>>) -> SourceSet {
        match corpus {
            Some(c) => SourceSet::Corpus(c),
            None => SourceSet::Synthetic { kinds: self.source_kinds.clone(), rate: self.rate },
        }
    }

    pub fn train_stream(&self, corpus: Option<Arc<Corpus>>) -> StreamSpec {
        StreamSpec {
            sources: self.sources(corpus),
            n_mixtures: self.mixtures_per_epoch,
            batch_size: self.batch_size,
            segment_seconds: self.segment_seconds,
            snr_range: self.snr_range,
            seed: self.seed,
            split: Split::Train,
        }
    }

    /// The fixed validation stream; always read at epoch 0.
    pub fn validation_stream(&self, corpus: Option<Arc<Corpus>>) -> StreamSpec {
        if self.validate_on_train {
            return self.train_stream(corpus);
        }
        StreamSpec {
            n_mixtures: self.validation_items,
            split: Split::Validation,
            ..self.train_stream(corpus)
        }
    }

    fn stream_epoch(&self, epoch: usize) -> u64 {
        if self.fixed_train_set {
            0
        } else {
            epoch as u64
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// Completed epochs, starting at 1.
    pub epoch: usize,
    /// Optimizer steps so far.
    pub steps: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub val_si_sdri: f64,
    pub cumulative_flops: u64,
    pub step_losses: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    /// Checkpoint with the highest validation SI-SDRi and that score.
    pub best: Option<(Checkpoint, f64)>,
    pub log: Vec<EpochLog>,
}

/// Seed used for the initial weights of a run.
pub fn init_seed(seed: u64) -> u64 {
    rng::derive(seed, &[rng::label("init")])
}

/// Trains a freshly initialized model.
pub fn train(
    config: &ModelConfig,
    tc: &TrainConfig,
    corpus: Option<Arc<Corpus>>,
    on_epoch: &mut dyn FnMut(&EpochLog) -> Result<()>,
) -> Result<TrainOutcome> {
    let model = Model::new(config.clone(), init_seed(tc.seed))?;
    let start = Checkpoint::new(model, AdamState::new(tc.lr.lr(0)), 0);
    resume(start, tc, corpus, on_epoch)
}

/// Continues training from `start` until `tc.epochs` epochs are complete.
/// With the same `tc`, the trajectory matches an uninterrupted run.
pub fn resume(
    start: Checkpoint,
    tc: &TrainConfig,
    corpus: Option<Arc<Corpus>>,
    on_epoch: &mut dyn FnMut(&EpochLog) -> Result<()>,
) -> Result<TrainOutcome> {
    tc.validate()?;
    let Checkpoint { config, epoch, params, mut optimizer } = start;
    if config.num_sources != 2 {
        return Err(invalid(format!("training mixes 2 sources; the config separates {}", config.num_sources)));
    }
    let mut model = Model::from_params(config.clone(), params)?;
    let train_spec = tc.train_stream(corpus.clone());
    let val_spec = tc.validation_stream(corpus);
    let samples = train_spec.segment_samples();
    let forward_flops = count_flops(&config, samples, tc.flop_convention)?.total_flops;
    let mut cumulative_flops = optimizer.step * tc.batch_size as u64 * TRAIN_FLOPS_PER_FORWARD * forward_flops;
    let mut log = Vec::new();
    let mut best: Option<(Checkpoint, f64)> = None;

    for e in epoch as usize..tc.epochs {
        optimizer.lr = tc.lr.lr(e);
        let mut step_losses = Vec::new();
        for _ in 0..tc.passes_per_epoch {
            for batch in train_spec.epoch(tc.stream_epoch(e))? {
                let batch = batch?;
                let layers = model.layers();
                let results = (0..batch.len())
                    .into_par_iter()
                    .map(|b| pit_gradients(&config, layers, model.params(), &batch.mixture(b)?, &batch.item_sources(b)?))
                    .collect::<Vec<_>>();
                let step = (|| -> Result<f64> {
                    let mut loss = 0.0;
                    let mut total: Option<Gradients> = None;
                    for r in results {
                        let (l, g) = r?;
                        loss += l;
                        match &mut total {
                            None => total = Some(g),
                            Some(t) => {
                                for (name, grad) in g {
                                    match t.get_mut(&name) {
                                        Some(acc) => acc.add_assign(&grad)?,
                                        None => {
                                            t.insert(name, grad);
                                        }
                                    }
                                }
                            }
                        }
                    }
                    let scale = 1.0 / batch.len() as f64;
                    let mut total = total.ok_or_else(|| Error::Internal("empty batch".into()))?;
                    total.values_mut().for_each(|g| g.scale_in_place(scale));
                    let loss = loss * scale;
                    if !loss.is_finite() {
                        return Err(Error::NonFinite("training loss".into()));
                    }
                    model.params_mut().accumulate(&total)?;
                    adam_step(model.params_mut(), &mut optimizer)?;
                    Ok(loss)
                })();
                match step {
                    Ok(loss) => step_losses.push(loss),
                    Err(err) => {
                        if let Some(path) = &tc.emergency_checkpoint {
                            let mut params = model.params().clone();
                            params.zero_grad();
                            let ck = Checkpoint { config: config.clone(), epoch: e as u64, params, optimizer: optimizer.clone() };
                            save_checkpoint(path, &ck)?;
                        }
                        return Err(err);
                    }
                }
                cumulative_flops += batch.len() as u64 * TRAIN_FLOPS_PER_FORWARD * forward_flops;
            }
        }
        let val = evaluate(&model, &val_spec, 0)?.mean_si_sdri;
        let entry = EpochLog {
            epoch: e + 1,
            steps: optimizer.step,
            lr: optimizer.lr,
            train_loss: step_losses.iter().sum::<f64>() / step_losses.len() as f64,
            val_si_sdri: val,
            cumulative_flops,
            step_losses,
        };
        on_epoch(&entry)?;
        log.push(entry);
        let snapshot = || Checkpoint {
            config: config.clone(),
            epoch: (e + 1) as u64,
            params: model.params().clone(),
            optimizer: optimizer.clone(),
        };
        if best.as_ref().is_none_or(|(_, b)| val > *b) {
            best = Some((snapshot(), val));
        }
    }
    let last = Checkpoint { config: config.clone(), epoch: tc.epochs.max(epoch as usize) as u64, params: model.into_params(), optimizer };
    Ok(TrainOutcome { last, best, log })
}

/// Separates a whole waveform with a model; a thin convenience used by the CLI.
pub fn separate_waveform(model: &Model, samples: &[f64]) -> Result<Tensor> {
    let x = Tensor::from_vec(&[samples.len()], samples.to_vec())?;
    Ok(model.separate(&x)?.sources)
}
