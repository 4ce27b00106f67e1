//! Reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every tensor produced during one forward pass and records
//! the op that produced it. [`Tape::backward`] replays the record in reverse
//! and leaves a gradient on every leaf created with `requires_grad`.
//!
//! Ops never broadcast, except tensor-scalar ops and the explicit
//! [`Tape::expand_channels`]. Every forward output is checked for NaN/Inf.

use std::fmt;

use crate::error::{Error, Result};
use crate::kernels::conv::{self, ConvGeometry, ConvGradRequest};
use crate::kernels::norm::{self, GroupStats};
use crate::kernels::upsample;
use crate::tensor::{pairwise_sum, pairwise_sum_by, Tensor};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for ops defined outside this module.
pub trait BackwardRule: Send {
    /// Gradients for each input, given the output gradient. `None` means zero.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &Tensor) -> Result<Vec<Option<Tensor>>>;
}

enum Op {
    Leaf,
    Conv3d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geo: ConvGeometry,
    },
    Upsample {
        input: Var,
        scale: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Sqrt(Var),
    Abs(Var),
    Square(Var),
    GroupNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        stats: GroupStats,
    },
    Softmax(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Concat(Vec<Var>),
    SliceChannels {
        input: Var,
        start: usize,
    },
    ExpandChannels(Var),
    SumAxes {
        input: Var,
        axes: Vec<usize>,
    },
    Reshape(Var),
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn BackwardRule>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv3d { input, weight, bias, .. } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::Upsample { input, .. }
            | Op::SliceChannels { input, .. }
            | Op::SumAxes { input, .. } => vec![*input],
            Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Softplus(x)
            | Op::Sqrt(x)
            | Op::Abs(x)
            | Op::Square(x)
            | Op::Softmax(x)
            | Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::ExpandChannels(x)
            | Op::Reshape(x) => vec![*x],
            Op::GroupNorm { input, gamma, beta, .. } => vec![*input, *gamma, *beta],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::Concat(parts) => parts.clone(),
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Single-owner record of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    consumed: bool,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .field("consumed", &self.consumed)
            .finish()
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("operands share a shape")
}

/// Row-major strides of `shape`.
fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Splits `shape` into kept and reduced axes for [`Tape::sum_axes`].
struct AxisSplit {
    kept_shape: Vec<usize>,
    kept_strides: Vec<usize>,
    reduced_shape: Vec<usize>,
    reduced_strides: Vec<usize>,
}

impl AxisSplit {
    fn new(shape: &[usize], axes: &[usize]) -> Self {
        let st = strides(shape);
        let mut split = AxisSplit {
            kept_shape: vec![],
            kept_strides: vec![],
            reduced_shape: vec![],
            reduced_strides: vec![],
        };
        for (i, (&n, &s)) in shape.iter().zip(&st).enumerate() {
            if axes.contains(&i) {
                split.reduced_shape.push(n);
                split.reduced_strides.push(s);
            } else {
                split.kept_shape.push(n);
                split.kept_strides.push(s);
            }
        }
        split
    }

    fn offset(index: usize, shape: &[usize], strides: &[usize]) -> usize {
        let mut rem = index;
        let mut off = 0;
        for (&n, &s) in shape.iter().zip(strides).rev() {
            off += (rem % n) * s;
            rem /= n;
        }
        off
    }

    fn kept_offset(&self, i: usize) -> usize {
        Self::offset(i, &self.kept_shape, &self.kept_strides)
    }

    fn reduced_offset(&self, i: usize) -> usize {
        Self::offset(i, &self.reduced_shape, &self.reduced_strides)
    }

    fn kept_len(&self) -> usize {
        self.kept_shape.iter().product()
    }

    fn reduced_len(&self) -> usize {
        self.reduced_shape.iter().product()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if `v` is a
    /// `requires_grad` leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    fn push(&mut self, value: Tensor, op: Op, op_name: &'static str) -> Result<Var> {
        if self.consumed {
            return Err(Error::Tape(format!(
                "cannot record {op_name} on a tape whose backward pass already ran"
            )));
        }
        check_finite(op_name, &value)?;
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        let v = self.push(value, Op::Leaf, "leaf")?;
        self.nodes[v.0].requires_grad = requires_grad;
        Ok(v)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let geo = ConvGeometry::new(self.value(input).shape(), self.value(weight).shape(), stride, padding)?;
        let out = conv::forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            &geo,
        )?;
        self.push(out, Op::Conv3d { input, weight, bias, geo }, "conv3d")
    }

    pub fn trilinear_upsample(&mut self, input: Var, scale: usize) -> Result<Var> {
        let out = upsample::forward(self.value(input), scale)?;
        self.push(out, Op::Upsample { input, scale }, "trilinear_upsample")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x), "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), "sigmoid")
    }

    /// `log(1 + exp(x))`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(softplus);
        self.push(out, Op::Softplus(x), "softplus")
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v < 0.0) {
            return Err(Error::invalid("sqrt", "negative input"));
        }
        let out = self.value(x).map(f64::sqrt);
        self.push(out, Op::Sqrt(x), "sqrt")
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::abs);
        self.push(out, Op::Abs(x), "abs")
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v * v);
        self.push(out, Op::Square(x), "square")
    }

    pub fn group_norm(&mut self, input: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::invalid("group_norm", "eps must be positive"));
        }
        let (out, stats) = norm::forward(self.value(input), groups, self.value(gamma), self.value(beta), eps)?;
        self.push(
            out,
            Op::GroupNorm {
                input,
                gamma,
                beta,
                stats,
            },
            "group_norm",
        )
    }

    /// Softmax over axis 1 of an `[N, C, ...]` tensor.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let out = softmax_channels(self.value(x))?;
        self.push(out, Op::Softmax(x), "softmax_channels")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b), "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("div", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x / y);
        self.push(out, Op::Div(a, b), "div")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale(x, factor), "scale")
    }

    pub fn add_scalar(&mut self, x: Var, offset: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v + offset);
        self.push(out, Op::AddScalar(x), "add_scalar")
    }

    /// Concatenates `[N, Ci, D, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_channels", "no inputs"))?;
        let base = self.value(*first).dims5("concat_channels")?;
        let mut channels = 0;
        for &p in parts {
            let d = self.value(p).dims5("concat_channels")?;
            if (d.n, d.d, d.h, d.w) != (base.n, base.d, base.h, base.w) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("non-channel extents differ: {:?} vs {:?}", self.value(p).shape(), self.value(*first).shape()),
                ));
            }
            channels += d.c;
        }
        let spatial = base.spatial();
        let mut data = Vec::with_capacity(base.n * channels * spatial);
        for n in 0..base.n {
            for &p in parts {
                let t = self.value(p);
                let c = t.shape()[1];
                data.extend_from_slice(&t.data()[n * c * spatial..(n + 1) * c * spatial]);
            }
        }
        let out = Tensor::new(vec![base.n, channels, base.d, base.h, base.w], data)?;
        self.push(out, Op::Concat(parts.to_vec()), "concat_channels")
    }

    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let d = self.value(input).dims5("slice_channels")?;
        if len == 0 || start + len > d.c {
            return Err(Error::invalid(
                "slice_channels",
                format!("range {start}..{} outside {} channels", start + len, d.c),
            ));
        }
        let spatial = d.spatial();
        let src = self.value(input).data();
        let mut data = Vec::with_capacity(d.n * len * spatial);
        for n in 0..d.n {
            data.extend_from_slice(&src[(n * d.c + start) * spatial..(n * d.c + start + len) * spatial]);
        }
        let out = Tensor::new(vec![d.n, len, d.d, d.h, d.w], data)?;
        self.push(out, Op::SliceChannels { input, start }, "slice_channels")
    }

    /// Repeats a single-channel `[N, 1, D, H, W]` tensor `channels` times.
    pub fn expand_channels(&mut self, x: Var, channels: usize) -> Result<Var> {
        let d = self.value(x).dims5("expand_channels")?;
        if d.c != 1 || channels == 0 {
            return Err(Error::shape(
                "expand_channels",
                format!("expected one input channel and a positive target, got {} -> {channels}", d.c),
            ));
        }
        let spatial = d.spatial();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(d.n * channels * spatial);
        for n in 0..d.n {
            for _ in 0..channels {
                data.extend_from_slice(&src[n * spatial..(n + 1) * spatial]);
            }
        }
        let out = Tensor::new(vec![d.n, channels, d.d, d.h, d.w], data)?;
        self.push(out, Op::ExpandChannels(x), "expand_channels")
    }

    /// Sums over `axes`, removing them from the shape.
    pub fn sum_axes(&mut self, input: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.value(input).shape().to_vec();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if axes.iter().any(|&a| a >= shape.len()) {
            return Err(Error::invalid("reduce", format!("axes {axes:?} invalid for shape {shape:?}")));
        }
        let split = AxisSplit::new(&shape, &axes);
        let src = self.value(input).data();
        let data: Vec<f64> = (0..split.kept_len())
            .map(|k| {
                let base = split.kept_offset(k);
                pairwise_sum_by(split.reduced_len(), &|r| src[base + split.reduced_offset(r)])
            })
            .collect();
        let out = Tensor::new(split.kept_shape.clone(), data)?;
        self.push(out, Op::SumAxes { input, axes }, "reduce")
    }

    pub fn mean_axes(&mut self, input: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.value(input).shape();
        if axes.iter().any(|&a| a >= shape.len()) {
            return Err(Error::invalid("reduce", format!("axes {axes:?} invalid for shape {shape:?}")));
        }
        let mut uniq = axes.to_vec();
        uniq.sort_unstable();
        uniq.dedup();
        let count: usize = uniq.iter().map(|&a| shape[a]).product();
        let s = self.sum_axes(input, &uniq)?;
        self.scale(s, 1.0 / count as f64)
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(input).ndim()).collect();
        self.sum_axes(input, &axes)
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let n = self.value(input).numel();
        if n == 0 {
            return Err(Error::invalid("reduce", "mean of an empty tensor"));
        }
        let s = self.sum(input)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.push(out, Op::Reshape(x), "reshape")
    }

    /// Records an op whose backward pass is supplied by `rule`.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, rule: Box<dyn BackwardRule>, name: &'static str) -> Result<Var> {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
            name,
        )
    }

    /// Populates gradients of `loss` on every `requires_grad` leaf.
    ///
    /// A tape supports one backward pass; record a fresh forward pass on a
    /// new tape before calling it again.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Tape("backward already ran for this forward pass".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Tape(format!(
                "loss must be a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            let contributions = self.input_grads(node, &g)?;
            for (v, gv) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&gv),
                    slot => *slot = Some(gv),
                }
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn input_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let out = &node.value;
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Conv3d { input, weight, bias, geo } => {
                let want = ConvGradRequest {
                    input: rg(*input),
                    weight: rg(*weight),
                    bias: bias.is_some_and(rg),
                };
                let grads = conv::backward(val(*input), val(*weight), g, geo, want)?;
                let mut v = Vec::new();
                if let Some(gi) = grads.input {
                    v.push((*input, gi));
                }
                if let Some(gw) = grads.weight {
                    v.push((*weight, gw));
                }
                if let (Some(b), Some(gb)) = (bias, grads.bias) {
                    v.push((*b, gb));
                }
                v
            }
            Op::Upsample { input, scale } => {
                vec![(*input, upsample::backward(val(*input).shape(), g, *scale)?)]
            }
            Op::Relu(x) => vec![(*x, zip_map(g, val(*x), |g, x| if x > 0.0 { g } else { 0.0 }))],
            Op::Sigmoid(x) => vec![(*x, zip_map(g, out, |g, y| g * y * (1.0 - y)))],
            Op::Softplus(x) => vec![(*x, zip_map(g, val(*x), |g, x| g * sigmoid(x)))],
            Op::Sqrt(x) => vec![(*x, zip_map(g, out, |g, y| g / (2.0 * y)))],
            Op::Abs(x) => vec![(*x, zip_map(g, val(*x), |g, x| g * sign(x)))],
            Op::Square(x) => vec![(*x, zip_map(g, val(*x), |g, x| 2.0 * g * x))],
            Op::GroupNorm { input, gamma, beta, stats } => {
                let grads = norm::backward(val(*input), val(*gamma), stats, g)?;
                vec![(*input, grads.input), (*gamma, grads.gamma), (*beta, grads.beta)]
            }
            Op::Softmax(x) => vec![(*x, softmax_backward(out, g))],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => vec![(*a, zip_map(g, val(*b), |g, y| g * y)), (*b, zip_map(g, val(*a), |g, x| g * x))],
            Op::Div(a, b) => {
                let ga = zip_map(g, val(*b), |g, y| g / y);
                let gb = zip_map(&zip_map(g, val(*a), |g, x| g * x), val(*b), |gx, y| -gx / (y * y));
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(x, f) => vec![(*x, g.map(|v| v * f))],
            Op::AddScalar(x) => vec![(*x, g.clone())],
            Op::Concat(parts) => {
                let shape = out.shape();
                let (n, spatial) = (shape[0], shape[2..].iter().product::<usize>());
                let total_c = shape[1];
                let mut offset = 0;
                let mut v = Vec::with_capacity(parts.len());
                for &p in parts {
                    let pshape = val(p).shape();
                    let c = pshape[1];
                    let mut data = Vec::with_capacity(n * c * spatial);
                    for s in 0..n {
                        let start = (s * total_c + offset) * spatial;
                        data.extend_from_slice(&g.data()[start..start + c * spatial]);
                    }
                    v.push((p, Tensor::new(pshape.to_vec(), data)?));
                    offset += c;
                }
                v
            }
            Op::SliceChannels { input, start } => {
                let ishape = val(*input).shape();
                let (n, c_in, spatial) = (ishape[0], ishape[1], ishape[2..].iter().product::<usize>());
                let len = out.shape()[1];
                let mut data = vec![0.0; val(*input).numel()];
                for s in 0..n {
                    let dst = (s * c_in + start) * spatial;
                    data[dst..dst + len * spatial]
                        .copy_from_slice(&g.data()[s * len * spatial..(s + 1) * len * spatial]);
                }
                vec![(*input, Tensor::new(ishape.to_vec(), data)?)]
            }
            Op::ExpandChannels(x) => {
                let shape = out.shape();
                let (n, c, spatial) = (shape[0], shape[1], shape[2..].iter().product::<usize>());
                let mut data = Vec::with_capacity(n * spatial);
                for s in 0..n {
                    for i in 0..spatial {
                        data.push(pairwise_sum_by(c, &|ch| g.data()[(s * c + ch) * spatial + i]));
                    }
                }
                vec![(*x, Tensor::new(val(*x).shape().to_vec(), data)?)]
            }
            Op::SumAxes { input, axes } => {
                let shape = val(*input).shape();
                let split = AxisSplit::new(shape, axes);
                let mut data = vec![0.0; val(*input).numel()];
                for k in 0..split.kept_len() {
                    let base = split.kept_offset(k);
                    let gk = g.data()[k];
                    for r in 0..split.reduced_len() {
                        data[base + split.reduced_offset(r)] = gk;
                    }
                }
                vec![(*input, Tensor::new(shape.to_vec(), data)?)]
            }
            Op::Reshape(x) => vec![(*x, g.reshape(val(*x).shape())?)],
            Op::Custom { inputs, rule } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let grads = rule.backward(&ins, out, g)?;
                if grads.len() != inputs.len() {
                    return Err(Error::Tape("custom rule returned the wrong number of gradients".into()));
                }
                inputs
                    .iter()
                    .zip(grads)
                    .filter_map(|(&v, gv)| gv.map(|gv| (v, gv)))
                    .collect()
            }
        })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `(n, c, inner)` for an `[N, C, ...]` shape.
pub(crate) fn channel_layout(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 || shape[1] == 0 {
        return Err(Error::shape(op, format!("expected [N, C>=1, ...], got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

pub(crate) fn softmax_channels(x: &Tensor) -> Result<Tensor> {
    let (n, c, inner) = channel_layout("softmax_channels", x.shape())?;
    let src = x.data();
    let mut out = vec![0.0; x.numel()];
    let mut buf = vec![0.0; c];
    for s in 0..n {
        for i in 0..inner {
            let at = |ch: usize| (s * c + ch) * inner + i;
            let max = (0..c).map(|ch| src[at(ch)]).fold(f64::NEG_INFINITY, f64::max);
            for (ch, b) in buf.iter_mut().enumerate() {
                *b = (src[at(ch)] - max).exp();
            }
            let total = pairwise_sum(&buf);
            for (ch, b) in buf.iter().enumerate() {
                out[at(ch)] = b / total;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn softmax_backward(y: &Tensor, g: &Tensor) -> Tensor {
    let shape = y.shape();
    let (n, c, inner) = (shape[0], shape[1], shape[2..].iter().product::<usize>());
    let mut out = vec![0.0; y.numel()];
    for s in 0..n {
        for i in 0..inner {
            let at = |ch: usize| (s * c + ch) * inner + i;
            let dot = pairwise_sum_by(c, &|ch| y.data()[at(ch)] * g.data()[at(ch)]);
            for ch in 0..c {
                out[at(ch)] = y.data()[at(ch)] * (g.data()[at(ch)] - dot);
            }
        }
    }
    Tensor::new(shape.to_vec(), out).expect("shape preserved")
}
