//! Reverse-mode differentiation over the tensor kernels.
//!
//! A forward pass is written once against the [`Exec`] trait. Running it
//! with [`Infer`] computes plain tensors and frees intermediates as soon as
//! they go out of scope; running it with [`Recorder`] appends every
//! operation to a [`Tape`] whose [`Tape::backward`] replays the kernels'
//! backward passes in reverse order.

use std::collections::HashMap;

use crate::autodiff::params::{Gradients, ParamStore};
use crate::error::{invalid, Error, Result};
use crate::kernels::{self, ConvSpec, NormCache, NormKind};
use crate::tensor::Tensor;

/// A convolution layer whose weights live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub weight: String,
    pub bias: Option<String>,
    pub spec: ConvSpec,
}

impl ConvLayer {
    /// Layer named `prefix` with parameters `prefix/W` and, if the spec has
    /// a bias, `prefix/b`.
    pub fn new(prefix: &str, spec: ConvSpec) -> Self {
        Self {
            weight: format!("{prefix}/W"),
            bias: spec.bias.then(|| format!("{prefix}/b")),
            spec,
        }
    }
}

/// A layer normalization whose gain and bias live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct NormLayer {
    pub gain: String,
    pub bias: String,
    pub kind: NormKind,
}

impl NormLayer {
    pub fn new(prefix: &str, kind: NormKind) -> Self {
        Self { gain: format!("{prefix}/gain"), bias: format!("{prefix}/bias"), kind }
    }
}

/// Operations a forward pass can be written against.
pub trait Exec {
    type Value;

    fn shape<'a>(&'a self, v: &'a Self::Value) -> &'a [usize];
    /// A parameter from the store as a value.
    fn parameter(&mut self, name: &str) -> Result<Self::Value>;
    /// Names the part of the network the following operations belong to.
    fn enter(&mut self, _scope: &str) {}
    fn conv1d(&mut self, x: &Self::Value, layer: &ConvLayer) -> Result<Self::Value>;
    fn conv_transpose1d(&mut self, x: &Self::Value, layer: &ConvLayer) -> Result<Self::Value>;
    fn norm(&mut self, x: &Self::Value, layer: &NormLayer) -> Result<Self::Value>;
    fn prelu(&mut self, x: &Self::Value, slopes: &str) -> Result<Self::Value>;
    fn relu(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn upsample(&mut self, x: &Self::Value, factor: usize) -> Result<Self::Value>;
    /// Appends `extra` zero frames on the right of the time axis.
    fn pad_time(&mut self, x: &Self::Value, extra: usize) -> Result<Self::Value>;
    /// Keeps the first `len` frames of the time axis.
    fn trim_time(&mut self, x: &Self::Value, len: usize) -> Result<Self::Value>;
    fn slice_channels(&mut self, x: &Self::Value, start: usize, count: usize) -> Result<Self::Value>;
    /// Softmax across `sources` equal channel blocks of a stacked tensor.
    fn softmax_sources(&mut self, x: &Self::Value, sources: usize) -> Result<Self::Value>;
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(invalid(format!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape())))
    }
}

fn add_tensors(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "add")?;
    let mut out = a.clone();
    out.add_assign(b)?;
    out.ensure_finite("add")?;
    Ok(out)
}

fn mul_tensors(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "mul")?;
    let out = Tensor::from_fn(a.shape(), |i| a.data()[i] * b.data()[i]);
    out.ensure_finite("mul")?;
    Ok(out)
}

fn pad_tensor(x: &Tensor, extra: usize) -> Result<Tensor> {
    let (c, l) = x.as_matrix()?;
    let mut out = Tensor::zeros(&[c, l + extra]);
    for ch in 0..c {
        out.row_mut(ch)[..l].copy_from_slice(&x.data()[ch * l..(ch + 1) * l]);
    }
    Ok(out)
}

fn trim_tensor(x: &Tensor, len: usize) -> Result<Tensor> {
    let (c, l) = x.as_matrix()?;
    if len > l {
        return Err(invalid(format!("cannot trim length {l} to {len}")));
    }
    Ok(Tensor::from_fn(&[c, len], |i| x.data()[(i / len) * l + i % len]))
}

fn slice_tensor(x: &Tensor, start: usize, count: usize) -> Result<Tensor> {
    let (c, l) = x.as_matrix()?;
    if start + count > c {
        return Err(invalid(format!("channel slice {start}+{count} exceeds {c}")));
    }
    Tensor::from_vec(&[count, l], x.data()[start * l..(start + count) * l].to_vec())
}

fn conv_params<'a>(store: &'a ParamStore, layer: &ConvLayer) -> Result<(&'a Tensor, Option<&'a Tensor>)> {
    let w = store.get(&layer.weight)?;
    let b = layer.bias.as_deref().map(|n| store.get(n)).transpose()?;
    Ok((w, b))
}

/// Plain forward evaluation against a parameter store.
pub struct Infer<'s> {
    store: &'s ParamStore,
}

impl<'s> Infer<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self { store }
    }
}

impl Exec for Infer<'_> {
    type Value = Tensor;

    fn shape<'a>(&'a self, v: &'a Tensor) -> &'a [usize] {
        v.shape()
    }

    fn parameter(&mut self, name: &str) -> Result<Tensor> {
        Ok(self.store.get(name)?.clone())
    }

    fn conv1d(&mut self, x: &Tensor, layer: &ConvLayer) -> Result<Tensor> {
        let (w, b) = conv_params(self.store, layer)?;
        kernels::conv1d(x, &layer.spec, w, b)
    }

    fn conv_transpose1d(&mut self, x: &Tensor, layer: &ConvLayer) -> Result<Tensor> {
        let (w, b) = conv_params(self.store, layer)?;
        kernels::conv_transpose1d(x, &layer.spec, w, b)
    }

    fn norm(&mut self, x: &Tensor, layer: &NormLayer) -> Result<Tensor> {
        let g = self.store.get(&layer.gain)?;
        let b = self.store.get(&layer.bias)?;
        kernels::layer_norm(x, g, b, layer.kind).map(|(t, _)| t)
    }

    fn prelu(&mut self, x: &Tensor, slopes: &str) -> Result<Tensor> {
        kernels::prelu(x, self.store.get(slopes)?)
    }

    fn relu(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(kernels::relu(x))
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        add_tensors(a, b)
    }

    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        mul_tensors(a, b)
    }

    fn upsample(&mut self, x: &Tensor, factor: usize) -> Result<Tensor> {
        kernels::nearest_upsample(x, factor)
    }

    fn pad_time(&mut self, x: &Tensor, extra: usize) -> Result<Tensor> {
        pad_tensor(x, extra)
    }

    fn trim_time(&mut self, x: &Tensor, len: usize) -> Result<Tensor> {
        trim_tensor(x, len)
    }

    fn slice_channels(&mut self, x: &Tensor, start: usize, count: usize) -> Result<Tensor> {
        slice_tensor(x, start, count)
    }

    fn softmax_sources(&mut self, x: &Tensor, sources: usize) -> Result<Tensor> {
        kernels::softmax_stacked(x, sources)
    }
}

/// Index of a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(String),
    Conv1d { x: NodeId, w: NodeId, b: Option<NodeId>, spec: ConvSpec },
    ConvTranspose1d { x: NodeId, w: NodeId, b: Option<NodeId>, spec: ConvSpec },
    Norm { x: NodeId, gain: NodeId, bias: NodeId, kind: NormKind, cache: NormCache },
    Prelu { x: NodeId, slopes: NodeId },
    Relu { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Upsample { x: NodeId, factor: usize },
    PadTime { x: NodeId },
    TrimTime { x: NodeId },
    Slice { x: NodeId, start: usize },
    Softmax { x: NodeId, sources: usize },
    Sum { x: NodeId },
    Scale { x: NodeId, factor: f64 },
    /// Scalar function of several nodes whose gradients were computed when
    /// the value was.
    Scalar { inputs: Vec<NodeId>, grads: Vec<Tensor> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// The recorded sequence of a forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Records a constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let v = self.value(x).map(|v| v * factor);
        self.push(v, Op::Scale { x, factor })
    }

    /// Records a scalar `value` that depends on `inputs` with the given
    /// partial derivatives (one tensor per input, same shape as the input).
    pub fn scalar_function(&mut self, inputs: &[NodeId], value: f64, grads: Vec<Tensor>) -> Result<NodeId> {
        if inputs.len() != grads.len() {
            return Err(invalid("one gradient per input is required"));
        }
        for (id, g) in inputs.iter().zip(&grads) {
            same_shape(self.value(*id), g, "scalar function gradient")?;
        }
        if !value.is_finite() {
            return Err(Error::NonFinite("scalar function value".into()));
        }
        Ok(self.push(Tensor::scalar(value), Op::Scalar { inputs: inputs.to_vec(), grads }))
    }

    /// Backpropagates from a scalar `loss` node and returns the gradient of
    /// every parameter the loss depends on.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let seed = Tensor::full(self.value(loss).shape(), 1.0);
        self.backward_from(loss, seed)
    }

    /// Backpropagates `seed` (the gradient of some scalar w.r.t. `node`).
    pub fn backward_from(&mut self, node: NodeId, seed: Tensor) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::InvalidState(
                "backward already ran on this tape; record a new forward pass".into(),
            ));
        }
        same_shape(self.value(node), &seed, "backward seed")?;
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[node.0] = Some(seed);
        let mut out = Gradients::new();

        for id in (0..=node.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let val = |n: NodeId| &self.nodes[n.0].value;
            let mut send = |n: NodeId, t: Tensor| -> Result<()> {
                match &mut grads[n.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot => {
                        *slot = Some(t);
                        Ok(())
                    }
                }
            };
            match &node.op {
                Op::Input => {}
                Op::Param(name) => match out.get_mut(name) {
                    Some(acc) => acc.add_assign(&g)?,
                    None => {
                        out.insert(name.clone(), g);
                    }
                },
                Op::Conv1d { x, w, b, spec } => {
                    let cg = kernels::conv1d_backward(val(*x), spec, val(*w), &g)?;
                    send(*x, cg.input)?;
                    send(*w, cg.weight)?;
                    if let (Some(b), Some(gb)) = (b, cg.bias) {
                        send(*b, gb)?;
                    }
                }
                Op::ConvTranspose1d { x, w, b, spec } => {
                    let cg = kernels::conv_transpose1d_backward(val(*x), spec, val(*w), &g)?;
                    send(*x, cg.input)?;
                    send(*w, cg.weight)?;
                    if let (Some(b), Some(gb)) = (b, cg.bias) {
                        send(*b, gb)?;
                    }
                }
                Op::Norm { x, gain, bias, kind, cache } => {
                    let (dx, dg, db) = kernels::layer_norm_backward(cache, val(*gain), &g, *kind)?;
                    send(*x, dx)?;
                    send(*gain, dg)?;
                    send(*bias, db)?;
                }
                Op::Prelu { x, slopes } => {
                    let (dx, da) = kernels::prelu_backward(val(*x), val(*slopes), &g)?;
                    send(*x, dx)?;
                    send(*slopes, da)?;
                }
                Op::Relu { x } => send(*x, kernels::relu_backward(val(*x), &g))?,
                Op::Add { a, b } => {
                    send(*a, g.clone())?;
                    send(*b, g)?;
                }
                Op::Mul { a, b } => {
                    send(*a, mul_tensors(&g, val(*b))?)?;
                    send(*b, mul_tensors(&g, val(*a))?)?;
                }
                Op::Upsample { x, factor } => send(*x, kernels::nearest_upsample_backward(&g, *factor)?)?,
                Op::PadTime { x } => {
                    let len = val(*x).dim(1);
                    send(*x, trim_tensor(&g, len)?)?;
                }
                Op::TrimTime { x } => {
                    let extra = val(*x).dim(1) - g.dim(1);
                    send(*x, pad_tensor(&g, extra)?)?;
                }
                Op::Slice { x, start } => {
                    let src = val(*x);
                    let mut full = Tensor::zeros(src.shape());
                    let l = src.dim(1);
                    full.data_mut()[start * l..start * l + g.len()].copy_from_slice(g.data());
                    send(*x, full)?;
                }
                Op::Softmax { x, sources } => {
                    send(*x, kernels::softmax_stacked_backward(&node.value, &g, *sources))?;
                }
                Op::Sum { x } => {
                    let gv = g.data()[0];
                    send(*x, Tensor::full(val(*x).shape(), gv))?;
                }
                Op::Scale { x, factor } => send(*x, g.map(|v| v * factor))?,
                Op::Scalar { inputs, grads: partials } => {
                    let gv = g.data()[0];
                    for (n, p) in inputs.iter().zip(partials) {
                        send(*n, p.map(|v| v * gv))?;
                    }
                }
            }
        }
        for (name, g) in &out {
            g.ensure_finite(&format!("gradient of {name}"))?;
        }
        Ok(out)
    }

    /// [`Tape::backward`], then adds the gradients into `store`.
    pub fn backward_into(&mut self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        store.accumulate(&grads)
    }
}

/// Records a forward pass on a [`Tape`], reading parameters from a store.
pub struct Recorder<'s> {
    store: &'s ParamStore,
    tape: Tape,
    params: HashMap<String, NodeId>,
}

impl<'s> Recorder<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self { store, tape: Tape::new(), params: HashMap::new() }
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.tape.input(value)
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn tape_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }

    pub fn into_tape(self) -> Tape {
        self.tape
    }

    fn param(&mut self, name: &str) -> Result<NodeId> {
        if let Some(id) = self.params.get(name) {
            return Ok(*id);
        }
        let value = self.store.get(name)?.clone();
        let id = self.tape.push(value, Op::Param(name.to_string()));
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    fn conv_nodes(&mut self, layer: &ConvLayer) -> Result<(NodeId, Option<NodeId>)> {
        let w = self.param(&layer.weight)?;
        let b = layer.bias.as_deref().map(|n| self.param(n)).transpose()?;
        Ok((w, b))
    }
}

impl Exec for Recorder<'_> {
    type Value = NodeId;

    fn shape<'a>(&'a self, v: &'a NodeId) -> &'a [usize] {
        self.tape.value(*v).shape()
    }

    fn parameter(&mut self, name: &str) -> Result<NodeId> {
        self.param(name)
    }

    fn conv1d(&mut self, x: &NodeId, layer: &ConvLayer) -> Result<NodeId> {
        let (w, b) = self.conv_nodes(layer)?;
        let t = &self.tape;
        let y = kernels::conv1d(t.value(*x), &layer.spec, t.value(w), b.map(|b| t.value(b)))?;
        Ok(self.tape.push(y, Op::Conv1d { x: *x, w, b, spec: layer.spec }))
    }

    fn conv_transpose1d(&mut self, x: &NodeId, layer: &ConvLayer) -> Result<NodeId> {
        let (w, b) = self.conv_nodes(layer)?;
        let t = &self.tape;
        let y = kernels::conv_transpose1d(t.value(*x), &layer.spec, t.value(w), b.map(|b| t.value(b)))?;
        Ok(self.tape.push(y, Op::ConvTranspose1d { x: *x, w, b, spec: layer.spec }))
    }

    fn norm(&mut self, x: &NodeId, layer: &NormLayer) -> Result<NodeId> {
        let gain = self.param(&layer.gain)?;
        let bias = self.param(&layer.bias)?;
        let t = &self.tape;
        let (y, cache) = kernels::layer_norm(t.value(*x), t.value(gain), t.value(bias), layer.kind)?;
        Ok(self.tape.push(y, Op::Norm { x: *x, gain, bias, kind: layer.kind, cache }))
    }

    fn prelu(&mut self, x: &NodeId, slopes: &str) -> Result<NodeId> {
        let slopes = self.param(slopes)?;
        let y = kernels::prelu(self.tape.value(*x), self.tape.value(slopes))?;
        Ok(self.tape.push(y, Op::Prelu { x: *x, slopes }))
    }

    fn relu(&mut self, x: &NodeId) -> Result<NodeId> {
        let y = kernels::relu(self.tape.value(*x));
        Ok(self.tape.push(y, Op::Relu { x: *x }))
    }

    fn add(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let y = add_tensors(self.tape.value(*a), self.tape.value(*b))?;
        Ok(self.tape.push(y, Op::Add { a: *a, b: *b }))
    }

    fn mul(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let y = mul_tensors(self.tape.value(*a), self.tape.value(*b))?;
        Ok(self.tape.push(y, Op::Mul { a: *a, b: *b }))
    }

    fn upsample(&mut self, x: &NodeId, factor: usize) -> Result<NodeId> {
        let y = kernels::nearest_upsample(self.tape.value(*x), factor)?;
        Ok(self.tape.push(y, Op::Upsample { x: *x, factor }))
    }

    fn pad_time(&mut self, x: &NodeId, extra: usize) -> Result<NodeId> {
        let y = pad_tensor(self.tape.value(*x), extra)?;
        Ok(self.tape.push(y, Op::PadTime { x: *x }))
    }

    fn trim_time(&mut self, x: &NodeId, len: usize) -> Result<NodeId> {
        let y = trim_tensor(self.tape.value(*x), len)?;
        Ok(self.tape.push(y, Op::TrimTime { x: *x }))
    }

    fn slice_channels(&mut self, x: &NodeId, start: usize, count: usize) -> Result<NodeId> {
        let y = slice_tensor(self.tape.value(*x), start, count)?;
        Ok(self.tape.push(y, Op::Slice { x: *x, start }))
    }

    fn softmax_sources(&mut self, x: &NodeId, sources: usize) -> Result<NodeId> {
        let y = kernels::softmax_stacked(self.tape.value(*x), sources)?;
        Ok(self.tape.push(y, Op::Softmax { x: *x, sources }))
    }
}
