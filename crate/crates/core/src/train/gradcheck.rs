//! Finite-difference checks of every differentiable operation and of the
//! whole network under the training loss.

use rand::Rng;
use serde::Serialize;

use crate::autodiff::{check_gradients, ConvLayer, Exec, GradCheckReport, Gradients, Infer, NormLayer, ParamStore, Recorder, FD_STEP};
use crate::data::{make_mixture, synth_source, SourceKind};
use crate::error::Result;
use crate::kernels::{ConvSpec, NormKind};
use crate::metrics::pit_loss;
use crate::model::{forward_graph, Layers, Model, ModelConfig};
use crate::rng;
use crate::tensor::Tensor;
use crate::train::pit_gradients;

/// Tolerance for single operations.
pub const KERNEL_TOLERANCE: f64 = 1e-6;
/// Tolerance for the end-to-end network.
pub const MODEL_TOLERANCE: f64 = 1e-5;

/// One operation under test. The input is the parameter `x`.
#[derive(Debug, Clone)]
enum Case {
    Conv(ConvLayer),
    ConvTranspose(ConvLayer),
    Norm(NormLayer),
    Prelu,
    Relu,
    Upsample(usize),
    Softmax(usize),
    PadTrim,
    Slice,
    AddMul,
}

impl Case {
    fn apply<E: Exec>(&self, ex: &mut E) -> Result<E::Value> {
        let x = ex.parameter("x")?;
        match self {
            Case::Conv(l) => ex.conv1d(&x, l),
            Case::ConvTranspose(l) => ex.conv_transpose1d(&x, l),
            Case::Norm(l) => ex.norm(&x, l),
            Case::Prelu => ex.prelu(&x, "slopes"),
            Case::Relu => ex.relu(&x),
            Case::Upsample(f) => ex.upsample(&x, *f),
            Case::Softmax(n) => ex.softmax_sources(&x, *n),
            Case::PadTrim => {
                let p = ex.pad_time(&x, 3)?;
                ex.trim_time(&p, 5)
            }
            Case::Slice => ex.slice_channels(&x, 1, 2),
            Case::AddMul => {
                let y = ex.parameter("y")?;
                let s = ex.add(&x, &y)?;
                ex.mul(&s, &x)
            }
        }
    }
}

fn uniform(shape: &[usize], r: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

/// Uniform values kept at least 0.05 away from zero, so kinks at the
/// origin stay outside the finite-difference stencil.
fn away_from_zero(shape: &[usize], r: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = r.random_range(0.05..1.0);
        if r.random_bool(0.5) { v } else { -v }
    })
}

fn conv_case(name: &str, spec: ConvSpec, len: usize, transposed: bool, r: &mut impl Rng) -> Result<(String, Case, ParamStore)> {
    let layer = ConvLayer::new("op", spec);
    let mut store = ParamStore::new();
    store.insert("x", uniform(&[spec.in_channels, len], r))?;
    let w = if transposed { spec.transpose_weight_shape() } else { spec.weight_shape() };
    store.insert(layer.weight.clone(), uniform(&w, r))?;
    if let Some(b) = &layer.bias {
        store.insert(b.clone(), uniform(&[spec.out_channels], r))?;
    }
    let case = if transposed { Case::ConvTranspose(layer) } else { Case::Conv(layer) };
    Ok((name.to_string(), case, store))
}

fn cases(seed: u64) -> Result<Vec<(String, Case, ParamStore)>> {
    let mut r = rng::stream(seed, &[rng::label("kernel-gradcheck")]);
    let mut out = vec![
        conv_case("conv1d", ConvSpec::new(3, 4, 5, 2), 13, false, &mut r)?,
        conv_case("conv1d-grouped", ConvSpec::new(4, 6, 3, 1).with_groups(2), 9, false, &mut r)?,
        conv_case("conv1d-pointwise", ConvSpec::pointwise(5, 3), 7, false, &mut r)?,
        conv_case("conv1d-even-kernel", ConvSpec::new(2, 2, 4, 3).without_bias(), 11, false, &mut r)?,
        conv_case("depthwise", ConvSpec::depthwise(3, 5, 2), 16, false, &mut r)?,
        conv_case("depthwise-stride1", ConvSpec::depthwise(2, 5, 1), 8, false, &mut r)?,
        conv_case("conv-transpose1d", ConvSpec::new(3, 2, 4, 3), 7, true, &mut r)?,
        conv_case("conv-transpose1d-encoder-shape", ConvSpec::new(4, 1, 21, 10), 5, true, &mut r)?,
    ];
    for (name, kind) in [("norm-channelwise", NormKind::Channelwise), ("norm-global", NormKind::Global)] {
        let layer = NormLayer::new("op", kind);
        let mut s = ParamStore::new();
        s.insert("x", uniform(&[4, 9], &mut r))?;
        s.insert(layer.gain.clone(), uniform(&[4], &mut r))?;
        s.insert(layer.bias.clone(), uniform(&[4], &mut r))?;
        out.push((name.into(), Case::Norm(layer), s));
    }
    let mut s = ParamStore::new();
    s.insert("x", away_from_zero(&[3, 10], &mut r))?;
    s.insert("slopes", uniform(&[3], &mut r))?;
    out.push(("prelu".into(), Case::Prelu, s));
    let mut s = ParamStore::new();
    s.insert("x", away_from_zero(&[3, 10], &mut r))?;
    out.push(("relu".into(), Case::Relu, s));
    let mut s = ParamStore::new();
    s.insert("x", uniform(&[2, 5], &mut r))?;
    out.push(("upsample".into(), Case::Upsample(2), s));
    let mut s = ParamStore::new();
    s.insert("x", uniform(&[6, 5], &mut r))?;
    out.push(("softmax-sources".into(), Case::Softmax(3), s));
    let mut s = ParamStore::new();
    s.insert("x", uniform(&[2, 7], &mut r))?;
    out.push(("pad-trim".into(), Case::PadTrim, s));
    let mut s = ParamStore::new();
    s.insert("x", uniform(&[4, 3], &mut r))?;
    out.push(("slice-channels".into(), Case::Slice, s));
    let mut s = ParamStore::new();
    s.insert("x", uniform(&[2, 6], &mut r))?;
    s.insert("y", uniform(&[2, 6], &mut r))?;
    out.push(("add-mul".into(), Case::AddMul, s));
    Ok(out)
}

/// Result of one named check.
#[derive(Debug, Clone, Serialize)]
pub struct NamedReport {
    pub name: String,
    pub report: GradCheckReport,
}

/// Checks every operation through a random linear functional of its output.
pub fn kernel_suite(seed: u64) -> Result<Vec<NamedReport>> {
    let mut out = Vec::new();
    for (name, case, store) in cases(seed)? {
        let shape = case.apply(&mut Infer::new(&store))?.shape().to_vec();
        let mut r = rng::stream(seed, &[rng::label(&name), rng::label("projection")]);
        let proj = uniform(&shape, &mut r);
        let mut rec = Recorder::new(&store);
        let y = case.apply(&mut rec)?;
        let p = rec.input(proj.clone());
        let m = rec.mul(&y, &p)?;
        let mut tape = rec.into_tape();
        let loss = tape.sum(m);
        let analytic = tape.backward(loss)?;
        let report = check_gradients(
            &store,
            |s| Ok(case.apply(&mut Infer::new(s))?.dot(&proj)),
            &analytic,
            FD_STEP,
            KERNEL_TOLERANCE,
        )?;
        out.push(NamedReport { name, report });
    }
    let pit = pit_case(seed)?;
    out.push(pit);
    Ok(out)
}

/// Gradient of the permutation-invariant loss with respect to the estimates.
fn pit_case(seed: u64) -> Result<NamedReport> {
    let mut r = rng::stream(seed, &[rng::label("pit-gradcheck")]);
    let refs = uniform(&[2, 32], &mut r);
    let mut store = ParamStore::new();
    // estimates correlated with swapped references, away from the clamps
    let mut est = uniform(&[2, 32], &mut r);
    for t in 0..32 {
        est.row_mut(0)[t] = 0.5 * est.row(0)[t] + refs.row(1)[t];
        est.row_mut(1)[t] = 0.5 * est.row(1)[t] + refs.row(0)[t];
    }
    store.insert("estimates", est.clone())?;
    let analytic: Gradients = [("estimates".to_string(), pit_loss(&refs, &est)?.grad)].into_iter().collect();
    let report = check_gradients(
        &store,
        |s| Ok(pit_loss(&refs, s.get("estimates")?)?.loss),
        &analytic,
        FD_STEP,
        KERNEL_TOLERANCE,
    )?;
    Ok(NamedReport { name: "pit-loss".into(), report })
}

/// Checks every parameter of a freshly initialized network for `config`
/// under the permutation-invariant loss on one synthetic mixture.
pub fn model_check(config: &ModelConfig, seed: u64, samples: usize) -> Result<NamedReport> {
    let model = Model::new(config.clone(), seed)?;
    let rate = 8000;
    let seconds = samples as f64 / rate as f64;
    let a = synth_source(SourceKind::ToneBank, rng::derive(seed, &[1]), seconds * 1.25, rate)?;
    let b = synth_source(SourceKind::FilteredNoise, rng::derive(seed, &[2]), seconds * 1.25, rate)?;
    let item = make_mixture(&a, &b, 0.0, seconds, seed)?;
    let layers = Layers::new(config);
    let (_, analytic) = pit_gradients(config, &layers, model.params(), &item.mixture, &item.sources)?;
    let x = item.mixture.clone().reshape(&[1, item.mixture.len()])?;
    let loss = |s: &ParamStore| -> Result<f64> {
        let fwd = forward_graph(config, &layers, &mut Infer::new(s), &x)?;
        let mut est = Vec::with_capacity(config.num_sources * samples);
        fwd.sources.iter().for_each(|t| est.extend_from_slice(t.data()));
        Ok(pit_loss(&item.sources, &Tensor::from_vec(&[config.num_sources, samples], est)?)?.loss)
    };
    let report = check_gradients(model.params(), loss, &analytic, FD_STEP, MODEL_TOLERANCE)?;
    Ok(NamedReport { name: "model".into(), report })
}

/// Kernel suite plus the end-to-end check on the smallest configuration.
pub fn full_suite(seed: u64) -> Result<Vec<NamedReport>> {
    let mut out = kernel_suite(seed)?;
    out.push(model_check(&ModelConfig::gradcheck_tiny(), seed, 320)?);
    Ok(out)
}
