//! Encoder, multi-resolution block stack, mask estimation and decoders.
//!
//! The forward pass is generic over [`Exec`], so the same code serves
//! inference ([`Infer`]) and training ([`Recorder`]).

use rand::Rng;

use crate::autodiff::{ConvLayer, Exec, Infer, NodeId, NormLayer, ParamStore, Recorder};
use crate::error::{invalid, Error, Result};
use crate::kernels::ConvSpec;
use crate::model::config::{MaskActivation, ModelConfig, PreluPlacement};
use crate::rng;
use crate::tensor::Tensor;

/// Initial PReLU slope.
pub const PRELU_INIT: f64 = 0.25;

/// Parameter names of one multi-resolution block.
#[derive(Debug, Clone)]
pub struct BlockLayers {
    pub prefix: String,
    pub expand: ConvLayer,
    pub expand_norm: NormLayer,
    pub expand_prelu: String,
    /// Full-resolution depth-wise stage followed by the strided ones.
    pub levels: Vec<(ConvLayer, NormLayer, String)>,
    pub fuse_norm: NormLayer,
    pub fuse_prelu: String,
    pub contract: ConvLayer,
    pub out_norm: NormLayer,
    pub out_prelu: String,
}

/// Parameter names of the whole network, in execution order.
#[derive(Debug, Clone)]
pub struct Layers {
    pub encoder: ConvLayer,
    pub in_norm: NormLayer,
    pub in_proj: ConvLayer,
    pub blocks: Vec<BlockLayers>,
    pub mask: ConvLayer,
    pub decoders: Vec<ConvLayer>,
}

impl Layers {
    pub fn new(cfg: &ModelConfig) -> Self {
        let norm = cfg.norm_kind;
        let (c_e, c_io, c_x) = (cfg.enc_channels, cfg.block_io_channels, cfg.block_expanded_channels);
        let blocks = (0..cfg.num_blocks)
            .map(|b| {
                let p = format!("separator/block{b:02}");
                let mut levels = vec![(
                    ConvLayer::new(&format!("{p}/level0/conv"), ConvSpec::depthwise(c_x, cfg.block_kernel, 1)),
                    NormLayer::new(&format!("{p}/level0/norm"), norm),
                    format!("{p}/level0/prelu"),
                )];
                for i in 1..=cfg.resampling_depth {
                    levels.push((
                        ConvLayer::new(
                            &format!("{p}/down{i}/conv"),
                            ConvSpec::depthwise(c_x, cfg.block_kernel, cfg.block_stride),
                        ),
                        NormLayer::new(&format!("{p}/down{i}/norm"), norm),
                        format!("{p}/down{i}/prelu"),
                    ));
                }
                BlockLayers {
                    prefix: p.clone(),
                    expand: ConvLayer::new(&format!("{p}/expand/conv"), ConvSpec::pointwise(c_io, c_x)),
                    expand_norm: NormLayer::new(&format!("{p}/expand/norm"), norm),
                    expand_prelu: format!("{p}/expand/prelu"),
                    levels,
                    fuse_norm: NormLayer::new(&format!("{p}/fuse/norm"), norm),
                    fuse_prelu: format!("{p}/fuse/prelu"),
                    contract: ConvLayer::new(&format!("{p}/fuse/conv"), ConvSpec::pointwise(c_x, c_io)),
                    out_norm: NormLayer::new(&format!("{p}/fuse/out_norm"), norm),
                    out_prelu: format!("{p}/out_prelu"),
                }
            })
            .collect();
        Self {
            encoder: ConvLayer::new("encoder/conv", ConvSpec::new(1, c_e, cfg.enc_kernel, cfg.enc_stride())),
            in_norm: NormLayer::new("separator/in_norm", norm),
            in_proj: ConvLayer::new("separator/in_proj", ConvSpec::pointwise(c_e, c_io)),
            blocks,
            mask: ConvLayer::new("separator/mask", ConvSpec::pointwise(c_io, cfg.num_sources * c_e)),
            decoders: (0..cfg.num_decoders)
                .map(|i| ConvLayer::new(&format!("decoder/{i}"), ConvSpec::new(c_e, 1, cfg.enc_kernel, cfg.enc_stride())))
                .collect(),
        }
    }
}

/// How a parameter tensor is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    Constant(f64),
}

/// Name, shape and initializer of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn conv_specs(out: &mut Vec<ParamSpec>, layer: &ConvLayer, transposed: bool) {
    let spec = layer.spec;
    let shape = if transposed { spec.transpose_weight_shape() } else { spec.weight_shape() };
    // fan-in of one output value: the second weight axis times the kernel
    let bound = (1.0 / (shape[1] * shape[2]) as f64).sqrt();
    out.push(ParamSpec { name: layer.weight.clone(), shape: shape.to_vec(), init: Init::Uniform(bound) });
    if let Some(b) = &layer.bias {
        out.push(ParamSpec { name: b.clone(), shape: vec![spec.out_channels], init: Init::Uniform(bound) });
    }
}

fn norm_specs(out: &mut Vec<ParamSpec>, layer: &NormLayer, channels: usize) {
    out.push(ParamSpec { name: layer.gain.clone(), shape: vec![channels], init: Init::Constant(1.0) });
    out.push(ParamSpec { name: layer.bias.clone(), shape: vec![channels], init: Init::Constant(0.0) });
}

fn prelu_spec(out: &mut Vec<ParamSpec>, name: &str, channels: usize) {
    out.push(ParamSpec { name: name.to_string(), shape: vec![channels], init: Init::Constant(PRELU_INIT) });
}

/// Every parameter tensor the network for `cfg` owns.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let layers = Layers::new(cfg);
    let (c_e, c_io, c_x) = (cfg.enc_channels, cfg.block_io_channels, cfg.block_expanded_channels);
    let mut out = Vec::new();
    conv_specs(&mut out, &layers.encoder, false);
    norm_specs(&mut out, &layers.in_norm, c_e);
    conv_specs(&mut out, &layers.in_proj, false);
    for b in &layers.blocks {
        conv_specs(&mut out, &b.expand, false);
        norm_specs(&mut out, &b.expand_norm, c_x);
        prelu_spec(&mut out, &b.expand_prelu, c_x);
        for (conv, norm, prelu) in &b.levels {
            conv_specs(&mut out, conv, false);
            norm_specs(&mut out, norm, c_x);
            prelu_spec(&mut out, prelu, c_x);
        }
        norm_specs(&mut out, &b.fuse_norm, c_x);
        let fuse_width = match cfg.contraction_prelu {
            PreluPlacement::BeforeContraction => c_x,
            PreluPlacement::AfterContraction => c_io,
        };
        prelu_spec(&mut out, &b.fuse_prelu, fuse_width);
        conv_specs(&mut out, &b.contract, false);
        norm_specs(&mut out, &b.out_norm, c_io);
        prelu_spec(&mut out, &b.out_prelu, c_io);
    }
    conv_specs(&mut out, &layers.mask, false);
    for d in &layers.decoders {
        conv_specs(&mut out, d, true);
    }
    out
}

/// Applies `conv`, `norm` and `prelu` in sequence, releasing intermediates.
fn conv_norm_prelu<E: Exec>(
    ex: &mut E,
    x: &E::Value,
    conv: &ConvLayer,
    norm: &NormLayer,
    prelu: &str,
) -> Result<E::Value> {
    let a = ex.conv1d(x, conv)?;
    let b = ex.norm(&a, norm)?;
    drop(a);
    ex.prelu(&b, prelu)
}

fn expect_shape(got: &[usize], want: &[usize], stage: &str) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(Error::Internal(format!("{stage}: shape {got:?}, expected {want:?}")))
    }
}

/// Waveform `[1, T]` to non-negative frames `[C_E, ceil(T / stride)]`.
pub fn encode_graph<E: Exec>(cfg: &ModelConfig, layers: &Layers, ex: &mut E, x: &E::Value) -> Result<E::Value> {
    let t = ex.shape(x)[1];
    if t < cfg.enc_kernel {
        return Err(invalid(format!("input has {t} samples, fewer than the encoder kernel {}", cfg.enc_kernel)));
    }
    ex.enter("encoder");
    let frames = cfg.encoded_len(t);
    let padded = ex.pad_time(x, frames * cfg.enc_stride() - t)?;
    let conv = ex.conv1d(&padded, &layers.encoder)?;
    drop(padded);
    let out = ex.relu(&conv)?;
    expect_shape(ex.shape(&out), &[cfg.enc_channels, frames], "encoder")?;
    Ok(out)
}

/// One multi-resolution block; the output has the input's shape.
pub fn block_graph<E: Exec>(cfg: &ModelConfig, b: &BlockLayers, ex: &mut E, y: E::Value) -> Result<E::Value> {
    let shape = ex.shape(&y).to_vec();
    if shape[1] % cfg.resampling_factor() != 0 {
        return Err(Error::Internal(format!(
            "block input length {} is not a multiple of {}",
            shape[1],
            cfg.resampling_factor()
        )));
    }
    ex.enter(&b.prefix);
    let q = conv_norm_prelu(ex, &y, &b.expand, &b.expand_norm, &b.expand_prelu)?;
    let mut levels = Vec::with_capacity(b.levels.len());
    levels.push(conv_norm_prelu(ex, &q, &b.levels[0].0, &b.levels[0].1, &b.levels[0].2)?);
    drop(q);
    for (conv, norm, prelu) in &b.levels[1..] {
        let next = conv_norm_prelu(ex, levels.last().expect("non-empty"), conv, norm, prelu)?;
        levels.push(next);
    }
    let mut u = levels.pop().expect("non-empty");
    while let Some(d) = levels.pop() {
        let up = ex.upsample(&u, cfg.block_stride)?;
        drop(u);
        u = ex.add(&d, &up)?;
    }
    let n = ex.norm(&u, &b.fuse_norm)?;
    drop(u);
    let contracted = match cfg.contraction_prelu {
        PreluPlacement::BeforeContraction => {
            let a = ex.prelu(&n, &b.fuse_prelu)?;
            drop(n);
            ex.conv1d(&a, &b.contract)?
        }
        PreluPlacement::AfterContraction => {
            let c = ex.conv1d(&n, &b.contract)?;
            drop(n);
            ex.prelu(&c, &b.fuse_prelu)?
        }
    };
    let o = ex.norm(&contracted, &b.out_norm)?;
    drop(contracted);
    let r = ex.add(&y, &o)?;
    drop((y, o));
    let out = ex.prelu(&r, &b.out_prelu)?;
    expect_shape(ex.shape(&out), &shape, "block")?;
    Ok(out)
}

/// Encoded frames to stacked masks `[N * C_E, L]`.
pub fn separator_graph<E: Exec>(cfg: &ModelConfig, layers: &Layers, ex: &mut E, vx: &E::Value) -> Result<E::Value> {
    let frames = ex.shape(vx)[1];
    ex.enter("separator");
    let n = ex.norm(vx, &layers.in_norm)?;
    let mut y = ex.conv1d(&n, &layers.in_proj)?;
    drop(n);
    let padded = cfg.padded_len(frames);
    if padded > frames {
        let p = ex.pad_time(&y, padded - frames)?;
        drop(y);
        y = p;
    }
    for b in &layers.blocks {
        y = block_graph(cfg, b, ex, y)?;
    }
    ex.enter("separator");
    if padded > frames {
        let t = ex.trim_time(&y, frames)?;
        drop(y);
        y = t;
    }
    let z = ex.conv1d(&y, &layers.mask)?;
    drop(y);
    let masks = match cfg.mask_activation {
        MaskActivation::Softmax => ex.softmax_sources(&z, cfg.num_sources)?,
        MaskActivation::Relu => ex.relu(&z)?,
    };
    expect_shape(ex.shape(&masks), &[cfg.num_sources * cfg.enc_channels, frames], "separator")?;
    Ok(masks)
}

/// Masked latent `[C_E, L]` to a waveform `[1, samples]`.
pub fn decode_graph<E: Exec>(
    cfg: &ModelConfig,
    layers: &Layers,
    ex: &mut E,
    latent: &E::Value,
    source: usize,
    samples: usize,
) -> Result<E::Value> {
    let decoder = layers
        .decoders
        .get(if cfg.num_decoders == 1 { 0 } else { source })
        .ok_or_else(|| invalid(format!("source index {source} out of range")))?;
    ex.enter(decoder.weight.trim_end_matches("/W"));
    let full = ex.conv_transpose1d(latent, decoder)?;
    let out = ex.trim_time(&full, samples)?;
    drop(full);
    Ok(out)
}

/// Every intermediate a caller may want from one forward pass.
#[derive(Debug)]
pub struct Forward<V> {
    pub encoded: V,
    pub masks: Vec<V>,
    pub sources: Vec<V>,
}

/// Full pipeline for a waveform `[1, T]`.
pub fn forward_graph<E: Exec>(cfg: &ModelConfig, layers: &Layers, ex: &mut E, x: &E::Value) -> Result<Forward<E::Value>> {
    let samples = ex.shape(x)[1];
    let encoded = encode_graph(cfg, layers, ex, x)?;
    let stacked = separator_graph(cfg, layers, ex, &encoded)?;
    let c_e = cfg.enc_channels;
    let masks = (0..cfg.num_sources)
        .map(|i| ex.slice_channels(&stacked, i * c_e, c_e))
        .collect::<Result<Vec<_>>>()?;
    drop(stacked);
    let mut sources = Vec::with_capacity(cfg.num_sources);
    for (i, m) in masks.iter().enumerate() {
        ex.enter("masking");
        let latent = ex.mul(&encoded, m)?;
        sources.push(decode_graph(cfg, layers, ex, &latent, i, samples)?);
    }
    Ok(Forward { encoded, masks, sources })
}

/// Estimated sources, masks and encoded mixture of one separation.
#[derive(Debug, Clone)]
pub struct SeparationOutput {
    /// `[N, T]`
    pub sources: Tensor,
    /// `N` tensors of shape `[C_E, L]`.
    pub masks: Vec<Tensor>,
    /// `[C_E, L]`
    pub encoded: Tensor,
}

/// Accepts `[T]` or `[1, T]` and returns `[1, T]`.
fn as_waveform(x: &Tensor) -> Result<Tensor> {
    match x.shape() {
        [t] => x.clone().reshape(&[1, *t]),
        [1, _] => Ok(x.clone()),
        s => Err(invalid(format!("expected a mono waveform [T] or [1, T], got {s:?}"))),
    }
}

/// A configured network and its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    layers: Layers,
    params: ParamStore,
}

impl Model {
    /// Builds a network with seeded random weights. Each tensor draws from
    /// its own stream keyed by `(seed, name)`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for spec in param_specs(&config) {
            let value = match spec.init {
                Init::Constant(v) => Tensor::full(&spec.shape, v),
                Init::Uniform(bound) => {
                    let mut r = rng::stream(seed, &[rng::label(&spec.name)]);
                    Tensor::from_fn(&spec.shape, |_| r.random_range(-bound..=bound))
                }
            };
            params.insert(spec.name, value)?;
        }
        Ok(Self { layers: Layers::new(&config), config, params })
    }

    /// Wraps existing parameters after checking them against `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != params.len() {
            return Err(invalid(format!(
                "config needs {} parameter tensors, got {}",
                specs.len(),
                params.len()
            )));
        }
        for spec in &specs {
            let t = params.get(&spec.name)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(invalid(format!(
                    "parameter {} has shape {:?}, config needs {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
        }
        Ok(Self { layers: Layers::new(&config), config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &Layers {
        &self.layers
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.element_count()
    }

    /// Encoder output `[C_E, ceil(T / stride)]` for a waveform.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let x = as_waveform(x)?;
        encode_graph(&self.config, &self.layers, &mut Infer::new(&self.params), &x)
    }

    /// Runs block `index` on a `[C_io, L]` feature map.
    pub fn uconvblock(&self, index: usize, y: &Tensor) -> Result<Tensor> {
        let b = self
            .layers
            .blocks
            .get(index)
            .ok_or_else(|| invalid(format!("block index {index} out of range")))?;
        block_graph(&self.config, b, &mut Infer::new(&self.params), y.clone())
    }

    /// One mask `[C_E, L]` per source for encoded frames.
    pub fn separator(&self, encoded: &Tensor) -> Result<Vec<Tensor>> {
        let stacked = separator_graph(&self.config, &self.layers, &mut Infer::new(&self.params), encoded)?;
        let c_e = self.config.enc_channels;
        let mut ex = Infer::new(&self.params);
        (0..self.config.num_sources).map(|i| ex.slice_channels(&stacked, i * c_e, c_e)).collect()
    }

    /// Decodes a masked latent for `source` into `samples` samples.
    pub fn decode(&self, latent: &Tensor, source: usize, samples: usize) -> Result<Tensor> {
        let frames = latent.dim(1);
        if samples > frames * self.config.enc_stride() {
            return Err(invalid(format!("{frames} frames cannot produce {samples} samples")));
        }
        let out = decode_graph(&self.config, &self.layers, &mut Infer::new(&self.params), latent, source, samples)?;
        out.reshape(&[samples])
    }

    /// Separates a mono waveform `[T]` into `[N, T]` estimates.
    pub fn separate(&self, x: &Tensor) -> Result<SeparationOutput> {
        let x = as_waveform(x)?;
        let samples = x.dim(1);
        let fwd = forward_graph(&self.config, &self.layers, &mut Infer::new(&self.params), &x)?;
        let mut data = Vec::with_capacity(self.config.num_sources * samples);
        fwd.sources.iter().for_each(|s| data.extend_from_slice(s.data()));
        Ok(SeparationOutput {
            sources: Tensor::from_vec(&[self.config.num_sources, samples], data)?,
            masks: fwd.masks,
            encoded: fwd.encoded,
        })
    }

    /// Records a forward pass for training. The waveform enters as a
    /// constant input node.
    pub fn record(&self, rec: &mut Recorder<'_>, x: &Tensor) -> Result<Forward<NodeId>> {
        let x = rec.input(as_waveform(x)?);
        forward_graph(&self.config, &self.layers, rec, &x)
    }
}
