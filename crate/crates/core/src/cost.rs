//! Analytic parameter, FLOP and activation-memory accounting, plus a
//! wall-clock benchmark.
//!
//! Counts come from running the real forward graph through a shape-only
//! executor, so the layer inventory cannot drift from the network.

use std::cell::Cell;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::rc::Rc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvLayer, Exec, NormLayer, Recorder};
use crate::error::{invalid, Error, Result};
use crate::kernels::ConvSpec;
use crate::model::{forward_graph, param_specs, Layers, Model, ModelConfig};
use crate::rng;
use crate::tensor::Tensor;

/// Bytes per stored value.
pub const VALUE_BYTES: u64 = 8;

/// How multiply-accumulates are converted to FLOPs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Convention {
    #[serde(rename = "macs_as_1")]
    MacsAs1,
    #[serde(rename = "macs_as_2")]
    MacsAs2,
}

impl Convention {
    pub fn multiplier(self) -> u64 {
        match self {
            Convention::MacsAs1 => 1,
            Convention::MacsAs2 => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Convention::MacsAs1 => "macs_as_1",
            Convention::MacsAs2 => "macs_as_2",
        }
    }
}

impl std::str::FromStr for Convention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "macs_as_1" => Ok(Convention::MacsAs1),
            "macs_as_2" => Ok(Convention::MacsAs2),
            _ => Err(invalid(format!("unknown convention {s:?}; expected macs_as_1 or macs_as_2"))),
        }
    }
}

/// Elementary operations charged per output element of each non-MAC op.
pub const OP_COSTS: &[(&str, u64)] = &[
    ("bias", 1),
    ("norm", 8),
    ("prelu", 4),
    ("relu", 1),
    ("add", 1),
    ("mul", 1),
    ("softmax", 5),
    ("upsample", 0),
    ("pad", 0),
    ("trim", 0),
    ("slice", 0),
];

fn op_cost(kind: &str) -> u64 {
    OP_COSTS.iter().find(|(k, _)| *k == kind).map_or(0, |(_, c)| *c)
}

/// Multiply-accumulates of a convolution producing `out_len` frames.
pub fn conv_macs(spec: &ConvSpec, out_len: usize) -> u64 {
    (spec.out_channels * (spec.in_channels / spec.groups) * spec.kernel * out_len) as u64
}

/// Multiply-accumulates of a transposed convolution reading `in_len` frames.
pub fn conv_transpose_macs(spec: &ConvSpec, in_len: usize) -> u64 {
    (spec.in_channels * (spec.out_channels / spec.groups) * spec.kernel * in_len) as u64
}

/// Cost of one named layer. Repeated anonymous ops in a scope are merged.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub kind: String,
    pub params: usize,
    pub macs: u64,
    /// Non-MAC elementary operations.
    pub additive: u64,
    pub flops: u64,
    /// Bytes of the outputs this layer produces.
    pub activation_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemoryMode {
    Inference,
    Training,
}

impl std::str::FromStr for MemoryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inference" => Ok(MemoryMode::Inference),
            "training" => Ok(MemoryMode::Training),
            _ => Err(invalid(format!("unknown memory mode {s:?}; expected inference or training"))),
        }
    }
}

/// Device memory estimate in bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEstimate {
    pub mode: MemoryMode,
    pub batch: usize,
    pub parameter_bytes: u64,
    pub gradient_bytes: u64,
    pub optimizer_bytes: u64,
    /// Peak live activations (inference) or all retained ones (training).
    pub activation_bytes: u64,
    pub total_bytes: u64,
}

/// Per-layer and total resource accounting for one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub config: ModelConfig,
    pub convention: Convention,
    /// Input samples `T`; zero for parameter-only reports.
    pub samples: usize,
    /// Encoded frames `L`.
    pub frames: usize,
    pub layers: Vec<LayerCost>,
    pub total_params: usize,
    pub total_macs: u64,
    pub total_additive: u64,
    pub total_flops: u64,
    pub memory: Option<MemoryEstimate>,
}

impl CostReport {
    fn from_layers(config: &ModelConfig, convention: Convention, samples: usize, layers: Vec<LayerCost>) -> Self {
        Self {
            config: config.clone(),
            convention,
            samples,
            frames: if samples == 0 { 0 } else { config.encoded_len(samples) },
            total_params: layers.iter().map(|l| l.params).sum(),
            total_macs: layers.iter().map(|l| l.macs).sum(),
            total_additive: layers.iter().map(|l| l.additive).sum(),
            total_flops: layers.iter().map(|l| l.flops).sum(),
            layers,
            memory: None,
        }
    }

    /// Total FLOPs under either convention.
    pub fn flops_under(&self, convention: Convention) -> u64 {
        convention.multiplier() * self.total_macs + self.total_additive
    }

    /// Line-oriented report: a header, one line per layer, then totals.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# convention {}", self.convention.name());
        let costs: Vec<String> = OP_COSTS.iter().map(|(k, c)| format!("{k}={c}")).collect();
        let _ = writeln!(s, "# additive ops per output element: {}", costs.join(" "));
        let _ = writeln!(s, "# samples {} frames {}", self.samples, self.frames);
        let _ = writeln!(s, "{:<40} {:<12} {:>10} {:>14} {:>12} {:>14} {:>14}", "layer", "kind", "params", "macs", "additive", "flops", "act_bytes");
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{:<40} {:<12} {:>10} {:>14} {:>12} {:>14} {:>14}",
                l.name, l.kind, l.params, l.macs, l.additive, l.flops, l.activation_bytes
            );
        }
        let _ = writeln!(s, "total params {}", self.total_params);
        let _ = writeln!(s, "total macs {}", self.total_macs);
        let _ = writeln!(s, "total flops macs_as_1 {}", self.flops_under(Convention::MacsAs1));
        let _ = writeln!(s, "total flops macs_as_2 {}", self.flops_under(Convention::MacsAs2));
        if let Some(m) = &self.memory {
            let mode = match m.mode {
                MemoryMode::Inference => "inference",
                MemoryMode::Training => "training",
            };
            let _ = writeln!(
                s,
                "memory {mode} batch {} params {} grads {} optimizer {} activations {} total {}",
                m.batch, m.parameter_bytes, m.gradient_bytes, m.optimizer_bytes, m.activation_bytes, m.total_bytes
            );
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Parameter counts grouped by layer, from the layer shapes alone.
pub fn count_params(config: &ModelConfig) -> Result<CostReport> {
    config.validate()?;
    let mut order: Vec<String> = Vec::new();
    let mut counts: HashMap<String, usize> = HashMap::new();
    for spec in param_specs(config) {
        let layer = spec.name.rsplit_once('/').map_or(spec.name.as_str(), |(l, _)| l).to_string();
        let n: usize = spec.shape.iter().product();
        if !counts.contains_key(&layer) {
            order.push(layer.clone());
        }
        *counts.entry(layer).or_default() += n;
    }
    let layers = order
        .into_iter()
        .map(|name| LayerCost {
            params: counts[&name],
            name,
            kind: "params".into(),
            macs: 0,
            additive: 0,
            flops: 0,
            activation_bytes: 0,
        })
        .collect();
    Ok(CostReport::from_layers(config, Convention::MacsAs1, 0, layers))
}

#[derive(Debug, Default)]
struct Tracker {
    live: Cell<u64>,
    peak: Cell<u64>,
    retained: Cell<u64>,
}

impl Tracker {
    fn alloc(&self, bytes: u64, workspace: u64) {
        self.live.set(self.live.get() + bytes);
        self.peak.set(self.peak.get().max(self.live.get() + workspace));
        self.retained.set(self.retained.get() + bytes + workspace);
    }
}

/// A shape whose bytes count as live until it is dropped.
#[derive(Debug)]
struct Sym {
    shape: Vec<usize>,
    bytes: u64,
    tracker: Rc<Tracker>,
}

impl Drop for Sym {
    fn drop(&mut self) {
        self.tracker.live.set(self.tracker.live.get() - self.bytes);
    }
}

struct Symbolic {
    tracker: Rc<Tracker>,
    sizes: HashMap<String, usize>,
    seen: HashSet<String>,
    scope: String,
    index: HashMap<String, usize>,
    layers: Vec<LayerCost>,
    multiplier: u64,
}

impl Symbolic {
    fn new(config: &ModelConfig, convention: Convention) -> Self {
        Self {
            tracker: Rc::new(Tracker::default()),
            sizes: param_specs(config).into_iter().map(|s| (s.name, s.shape.iter().product())).collect(),
            seen: HashSet::new(),
            scope: String::new(),
            index: HashMap::new(),
            layers: Vec::new(),
            multiplier: convention.multiplier(),
        }
    }

    fn value(&self, shape: Vec<usize>, workspace: u64) -> Sym {
        let bytes = VALUE_BYTES * shape.iter().product::<usize>() as u64;
        self.tracker.alloc(bytes, workspace);
        Sym { shape, bytes, tracker: Rc::clone(&self.tracker) }
    }

    fn params(&mut self, names: &[&str]) -> Result<usize> {
        let mut n = 0;
        for name in names {
            let size = *self.sizes.get(*name).ok_or_else(|| Error::Internal(format!("unknown parameter {name}")))?;
            if self.seen.insert(name.to_string()) {
                n += size;
            }
        }
        Ok(n)
    }

    fn record(&mut self, name: String, kind: &str, params: usize, macs: u64, additive: u64, out: &Sym) {
        let i = *self.index.entry(name.clone()).or_insert_with(|| {
            self.layers.push(LayerCost {
                name,
                kind: kind.to_string(),
                params: 0,
                macs: 0,
                additive: 0,
                flops: 0,
                activation_bytes: 0,
            });
            self.layers.len() - 1
        });
        let l = &mut self.layers[i];
        l.params += params;
        l.macs += macs;
        l.additive += additive;
        l.flops += self.multiplier * macs + additive;
        l.activation_bytes += out.bytes;
    }

    /// Records an elementwise op producing `shape`.
    fn elementwise(&mut self, kind: &str, shape: Vec<usize>, workspace: u64) -> Sym {
        let out = self.value(shape, workspace);
        let n = out.shape.iter().product::<usize>() as u64;
        self.record(format!("{}/{kind}", self.scope), kind, 0, 0, op_cost(kind) * n, &out);
        out
    }

    fn conv(&mut self, layer: &ConvLayer, shape: Vec<usize>, macs: u64) -> Result<Sym> {
        let mut names = vec![layer.weight.as_str()];
        names.extend(layer.bias.as_deref());
        let params = self.params(&names)?;
        let out = self.value(shape, 0);
        let bias = if layer.bias.is_some() { out.shape.iter().product::<usize>() as u64 } else { 0 };
        let name = layer.weight.trim_end_matches("/W").to_string();
        self.record(name, "conv", params, macs, bias, &out);
        Ok(out)
    }

    fn check_channels(x: &Sym, c: usize) -> Result<()> {
        if x.shape.len() == 2 && x.shape[0] == c {
            Ok(())
        } else {
            Err(invalid(format!("expected {c} channels, got shape {:?}", x.shape)))
        }
    }
}

impl Exec for Symbolic {
    type Value = Sym;

    fn shape<'a>(&'a self, v: &'a Sym) -> &'a [usize] {
        &v.shape
    }

    fn parameter(&mut self, name: &str) -> Result<Sym> {
        let n = *self.sizes.get(name).ok_or_else(|| Error::Internal(format!("unknown parameter {name}")))?;
        Ok(Sym { shape: vec![n], bytes: 0, tracker: Rc::clone(&self.tracker) })
    }

    fn enter(&mut self, scope: &str) {
        self.scope = scope.to_string();
    }

    fn conv1d(&mut self, x: &Sym, layer: &ConvLayer) -> Result<Sym> {
        let spec = layer.spec;
        Self::check_channels(x, spec.in_channels)?;
        let l = spec.output_len(x.shape[1]);
        if l == 0 {
            return Err(invalid(format!("{} frames is too short for {}", x.shape[1], layer.weight)));
        }
        self.conv(layer, vec![spec.out_channels, l], conv_macs(&spec, l))
    }

    fn conv_transpose1d(&mut self, x: &Sym, layer: &ConvLayer) -> Result<Sym> {
        let spec = layer.spec;
        Self::check_channels(x, spec.in_channels)?;
        let l = x.shape[1];
        self.conv(layer, vec![spec.out_channels, l * spec.stride], conv_transpose_macs(&spec, l))
    }

    fn norm(&mut self, x: &Sym, layer: &NormLayer) -> Result<Sym> {
        let params = self.params(&[&layer.gain, &layer.bias])?;
        // the kernel also builds a normalized copy of the same size
        let out = self.value(x.shape.clone(), x.bytes);
        let n = out.shape.iter().product::<usize>() as u64;
        self.record(layer.gain.trim_end_matches("/gain").to_string(), "norm", params, 0, op_cost("norm") * n, &out);
        Ok(out)
    }

    fn prelu(&mut self, x: &Sym, slopes: &str) -> Result<Sym> {
        let params = self.params(&[slopes])?;
        let out = self.value(x.shape.clone(), 0);
        let n = out.shape.iter().product::<usize>() as u64;
        self.record(slopes.to_string(), "prelu", params, 0, op_cost("prelu") * n, &out);
        Ok(out)
    }

    fn relu(&mut self, x: &Sym) -> Result<Sym> {
        Ok(self.elementwise("relu", x.shape.clone(), 0))
    }

    fn add(&mut self, a: &Sym, b: &Sym) -> Result<Sym> {
        if a.shape != b.shape {
            return Err(invalid(format!("add: shapes {:?} and {:?} differ", a.shape, b.shape)));
        }
        Ok(self.elementwise("add", a.shape.clone(), 0))
    }

    fn mul(&mut self, a: &Sym, b: &Sym) -> Result<Sym> {
        if a.shape != b.shape {
            return Err(invalid(format!("mul: shapes {:?} and {:?} differ", a.shape, b.shape)));
        }
        Ok(self.elementwise("mul", a.shape.clone(), 0))
    }

    fn upsample(&mut self, x: &Sym, factor: usize) -> Result<Sym> {
        Ok(self.elementwise("upsample", vec![x.shape[0], x.shape[1] * factor], 0))
    }

    fn pad_time(&mut self, x: &Sym, extra: usize) -> Result<Sym> {
        Ok(self.elementwise("pad", vec![x.shape[0], x.shape[1] + extra], 0))
    }

    fn trim_time(&mut self, x: &Sym, len: usize) -> Result<Sym> {
        if len > x.shape[1] {
            return Err(invalid(format!("trim to {len} frames of a {}-frame value", x.shape[1])));
        }
        Ok(self.elementwise("trim", vec![x.shape[0], len], 0))
    }

    fn slice_channels(&mut self, x: &Sym, start: usize, count: usize) -> Result<Sym> {
        if start + count > x.shape[0] {
            return Err(invalid(format!("channels {start}..{} of {}", start + count, x.shape[0])));
        }
        Ok(self.elementwise("slice", vec![count, x.shape[1]], 0))
    }

    fn softmax_sources(&mut self, x: &Sym, _sources: usize) -> Result<Sym> {
        Ok(self.elementwise("softmax", x.shape.clone(), 0))
    }
}

struct Traced {
    layers: Vec<LayerCost>,
    peak: u64,
    retained: u64,
}

fn trace(config: &ModelConfig, samples: usize, convention: Convention) -> Result<Traced> {
    config.validate()?;
    if samples < config.enc_kernel {
        return Err(invalid(format!("{samples} samples is fewer than the encoder kernel {}", config.enc_kernel)));
    }
    let layers = Layers::new(config);
    let mut ex = Symbolic::new(config, convention);
    let x = ex.value(vec![1, samples], 0);
    let out = forward_graph(config, &layers, &mut ex, &x)?;
    drop((out, x));
    Ok(Traced { layers: ex.layers, peak: ex.tracker.peak.get(), retained: ex.tracker.retained.get() })
}

/// Per-layer MACs, FLOPs and output bytes of one forward pass over `samples`.
pub fn count_flops(config: &ModelConfig, samples: usize, convention: Convention) -> Result<CostReport> {
    let t = trace(config, samples, convention)?;
    Ok(CostReport::from_layers(config, convention, samples, t.layers))
}

/// Adds a memory estimate to the FLOP report. Inference charges the
/// parameters plus the largest set of simultaneously live activations
/// for a single item; training charges parameters, gradients, both Adam
/// moments and every activation the tape retains, for each batch item.
pub fn estimate_memory(config: &ModelConfig, samples: usize, batch: usize, mode: MemoryMode) -> Result<CostReport> {
    if batch == 0 {
        return Err(invalid("batch must be >= 1"));
    }
    let t = trace(config, samples, Convention::MacsAs2)?;
    let mut report = CostReport::from_layers(config, Convention::MacsAs2, samples, t.layers);
    let parameter_bytes = VALUE_BYTES * report.total_params as u64;
    let memory = match mode {
        MemoryMode::Inference => MemoryEstimate {
            mode,
            batch,
            parameter_bytes,
            gradient_bytes: 0,
            optimizer_bytes: 0,
            activation_bytes: batch as u64 * t.peak,
            total_bytes: parameter_bytes + batch as u64 * t.peak,
        },
        MemoryMode::Training => {
            let activation_bytes = batch as u64 * t.retained;
            MemoryEstimate {
                mode,
                batch,
                parameter_bytes,
                gradient_bytes: parameter_bytes,
                optimizer_bytes: 2 * parameter_bytes,
                activation_bytes,
                total_bytes: 4 * parameter_bytes + activation_bytes,
            }
        }
    };
    report.memory = Some(memory);
    Ok(report)
}

/// Wall-clock timings in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub samples: Vec<f64>,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl Timing {
    fn from_samples(samples: Vec<f64>) -> Self {
        let mut sorted = samples.clone();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) };
        Self { median, min: sorted[0], max: sorted[n - 1], samples }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub input_samples: usize,
    pub repetitions: usize,
    pub forward: Timing,
    pub forward_backward: Option<Timing>,
}

/// Times `repetitions` forward passes (and optionally forward plus
/// backward) on a fixed pseudo-random input, single-threaded.
pub fn bench(model: &Model, samples: usize, repetitions: usize, backward: bool) -> Result<BenchReport> {
    if repetitions < 3 {
        return Err(invalid(format!("repetitions must be >= 3, got {repetitions}")));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Internal(format!("thread pool: {e}")))?;
    let mut r = rng::stream(0, &[rng::label("bench")]);
    let x = Tensor::from_fn(&[samples], |_| rand::Rng::random_range(&mut r, -1.0..1.0));
    pool.install(|| {
        let mut fwd = Vec::with_capacity(repetitions);
        for _ in 0..repetitions {
            let start = Instant::now();
            model.separate(&x)?;
            fwd.push(start.elapsed().as_secs_f64());
        }
        let forward_backward = if backward {
            let mut times = Vec::with_capacity(repetitions);
            for _ in 0..repetitions {
                let start = Instant::now();
                let mut rec = Recorder::new(model.params());
                let out = model.record(&mut rec, &x)?;
                let mut tape = rec.into_tape();
                // loss = sum of all source samples
                let value = out.sources.iter().map(|&s| tape.value(s).sum()).sum();
                let grads = out.sources.iter().map(|&s| Tensor::full(tape.value(s).shape(), 1.0)).collect();
                let loss = tape.scalar_function(&out.sources, value, grads)?;
                tape.backward(loss)?;
                times.push(start.elapsed().as_secs_f64());
            }
            Some(Timing::from_samples(times))
        } else {
            None
        };
        Ok(BenchReport {
            input_samples: samples,
            repetitions,
            forward: Timing::from_samples(fwd),
            forward_backward,
        })
    })
}

/// Parameter totals keyed by top-level component, for summaries.
pub fn params_by_component(report: &CostReport) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for l in &report.layers {
        let component = l.name.split('/').next().unwrap_or("").to_string();
        *out.entry(component).or_default() += l.params;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::preset;

    #[test]
    fn hand_counted_conv_macs() {
        let spec = ConvSpec::new(2, 3, 3, 1);
        assert_eq!(conv_macs(&spec, 8), 144);
    }

    #[test]
    fn flop_conventions_differ_by_macs() {
        let cfg = ModelConfig::tiny();
        let r1 = count_flops(&cfg, 4000, Convention::MacsAs1).unwrap();
        let r2 = count_flops(&cfg, 4000, Convention::MacsAs2).unwrap();
        assert_eq!(r2.total_flops, 2 * r1.total_macs + r1.total_additive);
        assert_eq!(r1.total_flops, r1.flops_under(Convention::MacsAs1));
        assert_eq!(r1.total_flops, r1.layers.iter().map(|l| l.flops).sum::<u64>());
    }

    #[test]
    fn traced_params_match_closed_form() {
        for name in ["1.0x", "ablation-row-2", "tiny"] {
            let cfg = preset(name).unwrap();
            let a = count_params(&cfg).unwrap().total_params;
            let b = count_flops(&cfg, 8000, Convention::MacsAs1).unwrap().total_params;
            assert_eq!(a, b, "{name}");
        }
    }

    #[test]
    fn training_memory_exceeds_four_parameter_copies() {
        let cfg = ModelConfig::tiny();
        let r = estimate_memory(&cfg, 2000, 2, MemoryMode::Training).unwrap();
        let m = r.memory.unwrap();
        assert!(m.total_bytes >= 4 * VALUE_BYTES * r.total_params as u64);
        let inf = estimate_memory(&cfg, 2000, 1, MemoryMode::Inference).unwrap().memory.unwrap();
        assert!(inf.total_bytes >= VALUE_BYTES * r.total_params as u64);
        assert!(inf.activation_bytes < m.activation_bytes);
    }

    #[test]
    fn short_input_rejected() {
        assert!(count_flops(&ModelConfig::tiny(), 10, Convention::MacsAs1).is_err());
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(Timing::from_samples(vec![3.0, 1.0, 2.0]).median, 2.0);
        assert_eq!(Timing::from_samples(vec![4.0, 1.0, 2.0, 3.0]).median, 2.5);
    }
}
