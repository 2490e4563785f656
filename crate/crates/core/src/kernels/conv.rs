//! Direct 1-D convolution, grouped/depth-wise convolution and transposed
//! convolution, each with its backward pass.
//!
//! # Layout
//!
//! * input:  `[in_channels, length]`
//! * weight: `[out_channels, in_channels / groups, kernel]` for `conv1d`;
//!   `[in_channels, out_channels / groups, kernel]` for `conv_transpose1d`
//!   (the weight of the convolution it is the adjoint of)
//! * bias:   `[out_channels]`
//!
//! Padding is "same"-style zeros: `(K - 1) / 2` on the left and `K / 2` on
//! the right, and a stride-`S` convolution over `L_in` samples produces
//! exactly `L_in / S` outputs (integer division). The kernel is applied as
//! a cross-correlation: `y[c, l] = b[c] + sum_{j,k} W[c, j, k] * x[j, S*l + k - pad_left]`.

use matrixmultiply::dgemm;

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Shape parameters of a convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Ordinary (single group) convolution with bias.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self { in_channels, out_channels, kernel, stride, groups: 1, bias: true }
    }

    /// Kernel-1, stride-1 channel mixing.
    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::new(in_channels, out_channels, 1, 1)
    }

    /// Depth-wise convolution: one filter per channel.
    pub fn depthwise(channels: usize, kernel: usize, stride: usize) -> Self {
        Self { groups: channels, ..Self::new(channels, channels, kernel, stride) }
    }

    pub fn with_groups(self, groups: usize) -> Self {
        Self { groups, ..self }
    }

    pub fn without_bias(self) -> Self {
        Self { bias: false, ..self }
    }

    pub fn pad_left(&self) -> usize {
        (self.kernel - 1) / 2
    }

    pub fn pad_right(&self) -> usize {
        self.kernel / 2
    }

    /// Output length of the forward convolution.
    pub fn output_len(&self, input_len: usize) -> usize {
        input_len / self.stride
    }

    /// Weight shape when used as a forward convolution.
    pub fn weight_shape(&self) -> [usize; 3] {
        [self.out_channels, self.in_channels / self.groups, self.kernel]
    }

    /// Weight shape when used as a transposed convolution mapping
    /// `in_channels -> out_channels`.
    pub fn transpose_weight_shape(&self) -> [usize; 3] {
        [self.in_channels, self.out_channels / self.groups, self.kernel]
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(invalid("convolution needs at least one input and output channel"));
        }
        if self.kernel == 0 {
            return Err(invalid("kernel size must be >= 1"));
        }
        if self.stride == 0 {
            return Err(invalid("stride must be >= 1"));
        }
        if self.groups == 0
            || self.in_channels % self.groups != 0
            || self.out_channels % self.groups != 0
        {
            return Err(invalid(format!(
                "groups {} must divide in_channels {} and out_channels {}",
                self.groups, self.in_channels, self.out_channels
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let [a, b, c] = self.weight_shape();
        a * b * c + if self.bias { self.out_channels } else { 0 }
    }
}

/// Gradients of a convolution with respect to its input, weight and bias.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

/// Geometry of the underlying forward convolution `x[cin, lin] -> y[cout, lout]`.
#[derive(Debug, Clone, Copy)]
struct Geometry {
    cin: usize,
    cout: usize,
    kernel: usize,
    stride: usize,
    groups: usize,
    lin: usize,
    lout: usize,
    pad: usize,
}

impl Geometry {
    fn forward(spec: &ConvSpec, lin: usize) -> Self {
        Self {
            cin: spec.in_channels,
            cout: spec.out_channels,
            kernel: spec.kernel,
            stride: spec.stride,
            groups: spec.groups,
            lin,
            lout: spec.output_len(lin),
            pad: spec.pad_left(),
        }
    }

    /// The forward convolution whose adjoint is the transposed `spec`.
    fn transposed(spec: &ConvSpec, lout: usize) -> Self {
        Self {
            cin: spec.out_channels,
            cout: spec.in_channels,
            kernel: spec.kernel,
            stride: spec.stride,
            groups: spec.groups,
            lin: lout * spec.stride,
            lout,
            pad: spec.pad_left(),
        }
    }

    fn cin_per_group(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_per_group(&self) -> usize {
        self.cout / self.groups
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.groups == 1
    }

    /// Range of output positions `l` for which tap `k` reads inside the input,
    /// together with the signed input offset `k - pad`.
    fn tap_range(&self, k: usize) -> (usize, usize, isize) {
        let off = k as isize - self.pad as isize;
        let s = self.stride as isize;
        let lo = if off < 0 { ((-off) + s - 1) / s } else { 0 };
        let hi_excl = (self.lin as isize - 1 - off).div_euclid(s) + 1;
        let hi = hi_excl.clamp(0, self.lout as isize) as usize;
        (lo as usize, hi.max(lo as usize), off)
    }

    fn input_channel(&self, co: usize, j: usize) -> usize {
        (co / self.cout_per_group()) * self.cin_per_group() + j
    }
}

/// `y += conv(x)` without bias.
fn forward_accumulate(g: &Geometry, x: &[f64], w: &[f64], y: &mut [f64]) {
    if g.is_pointwise() {
        // y[cout, L] += W[cout, cin] * x[cin, L]
        unsafe {
            dgemm(
                g.cout, g.cin, g.lout, 1.0,
                w.as_ptr(), g.cin as isize, 1,
                x.as_ptr(), g.lin as isize, 1,
                1.0,
                y.as_mut_ptr(), g.lout as isize, 1,
            );
        }
        return;
    }
    let cin_g = g.cin_per_group();
    for co in 0..g.cout {
        let yrow = &mut y[co * g.lout..(co + 1) * g.lout];
        for j in 0..cin_g {
            let ci = g.input_channel(co, j);
            let xrow = &x[ci * g.lin..(ci + 1) * g.lin];
            for k in 0..g.kernel {
                let wv = w[(co * cin_g + j) * g.kernel + k];
                let (lo, hi, off) = g.tap_range(k);
                if hi == lo {
                    continue;
                }
                if g.stride == 1 {
                    let start = (lo as isize + off) as usize;
                    let xs = &xrow[start..start + (hi - lo)];
                    for (yv, xv) in yrow[lo..hi].iter_mut().zip(xs) {
                        *yv += wv * xv;
                    }
                } else {
                    for (l, yv) in yrow.iter_mut().enumerate().take(hi).skip(lo) {
                        *yv += wv * xrow[(l as isize * g.stride as isize + off) as usize];
                    }
                }
            }
        }
    }
}

/// `dx += conv^T(gy)`: the adjoint of `forward_accumulate` in `x`.
fn adjoint_accumulate(g: &Geometry, gy: &[f64], w: &[f64], dx: &mut [f64]) {
    if g.is_pointwise() {
        // dx[cin, L] += W^T[cin, cout] * gy[cout, L]
        unsafe {
            dgemm(
                g.cin, g.cout, g.lout, 1.0,
                w.as_ptr(), 1, g.cin as isize,
                gy.as_ptr(), g.lout as isize, 1,
                1.0,
                dx.as_mut_ptr(), g.lin as isize, 1,
            );
        }
        return;
    }
    let cin_g = g.cin_per_group();
    for co in 0..g.cout {
        let grow = &gy[co * g.lout..(co + 1) * g.lout];
        for j in 0..cin_g {
            let ci = g.input_channel(co, j);
            let dxrow = &mut dx[ci * g.lin..(ci + 1) * g.lin];
            for k in 0..g.kernel {
                let wv = w[(co * cin_g + j) * g.kernel + k];
                let (lo, hi, off) = g.tap_range(k);
                if hi == lo {
                    continue;
                }
                if g.stride == 1 {
                    let start = (lo as isize + off) as usize;
                    let xs = &mut dxrow[start..start + (hi - lo)];
                    for (xv, gv) in xs.iter_mut().zip(&grow[lo..hi]) {
                        *xv += wv * gv;
                    }
                } else {
                    for (l, gv) in grow.iter().enumerate().take(hi).skip(lo) {
                        dxrow[(l as isize * g.stride as isize + off) as usize] += wv * gv;
                    }
                }
            }
        }
    }
}

/// `dw += d<gy, conv_w(x)>/dw`.
fn weight_grad_accumulate(g: &Geometry, x: &[f64], gy: &[f64], dw: &mut [f64]) {
    if g.is_pointwise() {
        // dW[cout, cin] += gy[cout, L] * x^T[L, cin]
        unsafe {
            dgemm(
                g.cout, g.lout, g.cin, 1.0,
                gy.as_ptr(), g.lout as isize, 1,
                x.as_ptr(), 1, g.lin as isize,
                1.0,
                dw.as_mut_ptr(), g.cin as isize, 1,
            );
        }
        return;
    }
    let cin_g = g.cin_per_group();
    for co in 0..g.cout {
        let grow = &gy[co * g.lout..(co + 1) * g.lout];
        for j in 0..cin_g {
            let ci = g.input_channel(co, j);
            let xrow = &x[ci * g.lin..(ci + 1) * g.lin];
            for k in 0..g.kernel {
                let (lo, hi, off) = g.tap_range(k);
                if hi == lo {
                    continue;
                }
                let acc: f64 = if g.stride == 1 {
                    let start = (lo as isize + off) as usize;
                    grow[lo..hi].iter().zip(&xrow[start..]).map(|(a, b)| a * b).sum()
                } else {
                    (lo..hi)
                        .map(|l| grow[l] * xrow[(l as isize * g.stride as isize + off) as usize])
                        .sum()
                };
                dw[(co * cin_g + j) * g.kernel + k] += acc;
            }
        }
    }
}

fn add_bias(y: &mut Tensor, b: &Tensor) {
    let len = y.dim(1);
    for (c, &bv) in b.data().iter().enumerate() {
        y.data_mut()[c * len..(c + 1) * len].iter_mut().for_each(|v| *v += bv);
    }
}

fn bias_grad(gy: &Tensor) -> Tensor {
    let (c, len) = (gy.dim(0), gy.dim(1));
    Tensor::from_fn(&[c], |i| gy.data()[i * len..(i + 1) * len].iter().sum())
}

fn check_rank2(t: &Tensor, what: &str, channels: usize) -> Result<usize> {
    match t.shape() {
        [c, l] if *c == channels => {
            if *l == 0 {
                Err(invalid(format!("{what} has zero length")))
            } else {
                Ok(*l)
            }
        }
        s => Err(invalid(format!("{what} must have shape [{channels}, L], got {s:?}"))),
    }
}

fn check_params(spec: &ConvSpec, w: &Tensor, b: Option<&Tensor>, wshape: [usize; 3], bias_len: usize) -> Result<()> {
    spec.validate()?;
    if w.shape() != wshape {
        return Err(invalid(format!("weight shape {:?}, expected {wshape:?}", w.shape())));
    }
    match (spec.bias, b) {
        (true, Some(b)) if b.shape() == [bias_len] => Ok(()),
        (true, Some(b)) => Err(invalid(format!("bias shape {:?}, expected [{bias_len}]", b.shape()))),
        (true, None) => Err(invalid("spec declares a bias but none was given")),
        (false, Some(_)) => Err(invalid("spec declares no bias but one was given")),
        (false, None) => Ok(()),
    }
}

/// Forward 1-D convolution `[C_in, L_in] -> [C, L_in / S]`.
pub fn conv1d(x: &Tensor, spec: &ConvSpec, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    check_params(spec, w, b, spec.weight_shape(), spec.out_channels)?;
    let lin = check_rank2(x, "conv1d input", spec.in_channels)?;
    let g = Geometry::forward(spec, lin);
    if g.lout == 0 {
        return Err(invalid(format!("input length {lin} is shorter than stride {}", spec.stride)));
    }
    let mut y = Tensor::zeros(&[g.cout, g.lout]);
    forward_accumulate(&g, x.data(), w.data(), y.data_mut());
    if let Some(b) = b {
        add_bias(&mut y, b);
    }
    y.ensure_finite("conv1d")?;
    Ok(y)
}

/// Backward pass of [`conv1d`] given the upstream gradient.
pub fn conv1d_backward(x: &Tensor, spec: &ConvSpec, w: &Tensor, grad_out: &Tensor) -> Result<ConvGrads> {
    let lin = check_rank2(x, "conv1d input", spec.in_channels)?;
    let g = Geometry::forward(spec, lin);
    if grad_out.shape() != [g.cout, g.lout] {
        return Err(invalid(format!(
            "conv1d upstream gradient shape {:?}, expected [{}, {}]",
            grad_out.shape(), g.cout, g.lout
        )));
    }
    let mut input = Tensor::zeros(x.shape());
    adjoint_accumulate(&g, grad_out.data(), w.data(), input.data_mut());
    let mut weight = Tensor::zeros(w.shape());
    weight_grad_accumulate(&g, x.data(), grad_out.data(), weight.data_mut());
    let bias = spec.bias.then(|| bias_grad(grad_out));
    Ok(ConvGrads { input, weight, bias })
}

/// Depth-wise convolution: [`conv1d`] with `groups == in_channels`.
pub fn depthwise_conv1d(x: &Tensor, spec: &ConvSpec, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    if spec.groups != spec.in_channels {
        return Err(invalid(format!(
            "depth-wise convolution needs groups == in_channels ({} != {})",
            spec.groups, spec.in_channels
        )));
    }
    if spec.out_channels % spec.in_channels != 0 {
        return Err(invalid(format!(
            "out_channels {} is not a multiple of in_channels {}",
            spec.out_channels, spec.in_channels
        )));
    }
    conv1d(x, spec, w, b)
}

/// Transposed convolution `[C_in, L] -> [C, L * S]`, the adjoint of
/// [`conv1d`] with weight layout [`ConvSpec::transpose_weight_shape`].
pub fn conv_transpose1d(v: &Tensor, spec: &ConvSpec, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    check_params(spec, w, b, spec.transpose_weight_shape(), spec.out_channels)?;
    let lout = check_rank2(v, "conv_transpose1d input", spec.in_channels)?;
    let g = Geometry::transposed(spec, lout);
    let mut y = Tensor::zeros(&[g.cin, g.lin]);
    adjoint_accumulate(&g, v.data(), w.data(), y.data_mut());
    if let Some(b) = b {
        add_bias(&mut y, b);
    }
    y.ensure_finite("conv_transpose1d")?;
    Ok(y)
}

/// Backward pass of [`conv_transpose1d`].
pub fn conv_transpose1d_backward(v: &Tensor, spec: &ConvSpec, w: &Tensor, grad_out: &Tensor) -> Result<ConvGrads> {
    let lout = check_rank2(v, "conv_transpose1d input", spec.in_channels)?;
    let g = Geometry::transposed(spec, lout);
    if grad_out.shape() != [g.cin, g.lin] {
        return Err(invalid(format!(
            "conv_transpose1d upstream gradient shape {:?}, expected [{}, {}]",
            grad_out.shape(), g.cin, g.lin
        )));
    }
    let mut input = Tensor::zeros(v.shape());
    forward_accumulate(&g, grad_out.data(), w.data(), input.data_mut());
    let mut weight = Tensor::zeros(w.shape());
    weight_grad_accumulate(&g, grad_out.data(), v.data(), weight.data_mut());
    let bias = spec.bias.then(|| bias_grad(grad_out));
    Ok(ConvGrads { input, weight, bias })
}
