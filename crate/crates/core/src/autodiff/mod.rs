//! Dense `f64` tensors and a define-by-run tape for reverse-mode differentiation.
//!
//! A [`Tape`] owns every value produced during one forward pass. Leaves enter
//! the tape either as constants or as parameters (`requires_grad`), and every
//! primitive applied to a tape variable appends a node. [`Tape::backward`]
//! replays the recorded rules in reverse to produce [`Gradients`].
//!
//! Only the primitives needed by the VAE, the UNet and their losses are
//! provided; there is no implicit broadcasting apart from [`Primitive::BiasAdd`].

mod kernels;

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use kernels::{col2im, conv_out_extent, conv_transpose_out_extent, gemm, im2col, View, Window};

/// Row-major dense array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dim(format!("extents must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::contract(format!(
                "expected a scalar, got shape {:?}",
                self.shape
            )))
        }
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }
}

/// The primitive operations a tape can record.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Div,
    /// Multiply by a constant.
    Scale(f64),
    /// Add a constant.
    AddScalar(f64),
    /// `[m, k] x [k, n]`.
    MatMul,
    /// Input `[N, C, H, W]`, weight `[O, C, kh, kw]`.
    Conv2d { stride: usize, padding: usize },
    /// Input `[N, C, H, W]`, weight `[C, O, kh, kw]`.
    ConvTranspose2d { stride: usize, padding: usize },
    /// `x: [N, C, ..]` plus `b: [C]` broadcast over every axis but the second.
    BiasAdd,
    Relu,
    Sigmoid,
    Exp,
    Log,
    Square,
    Sum,
    Mean,
    /// Sums away the last axis.
    SumLastAxis,
    Reshape(Vec<usize>),
    /// Concatenates `[N, C_i, H, W]` inputs along the channel axis.
    ConcatChannels,
    /// Non-overlapping `size × size` windows.
    MaxPool2d { size: usize },
    /// Nearest-neighbour upsampling by an integer factor.
    Upsample2d { factor: usize },
}

/// Loose attribute bag for [`Primitive::from_name`].
#[derive(Clone, Debug, Default)]
pub struct Attrs {
    pub stride: Option<usize>,
    pub padding: Option<usize>,
    pub size: Option<usize>,
    pub factor: Option<usize>,
    pub scalar: Option<f64>,
    pub shape: Option<Vec<usize>>,
}

impl Primitive {
    pub fn from_name(name: &str, attrs: &Attrs) -> Result<Self> {
        let need = |v: Option<usize>, what: &str| {
            v.ok_or_else(|| Error::contract(format!("`{name}` requires attribute `{what}`")))
        };
        Ok(match name {
            "add" => Primitive::Add,
            "sub" => Primitive::Sub,
            "mul" => Primitive::Mul,
            "div" => Primitive::Div,
            "scale" => Primitive::Scale(
                attrs
                    .scalar
                    .ok_or_else(|| Error::contract("`scale` requires attribute `scalar`"))?,
            ),
            "add_scalar" => Primitive::AddScalar(
                attrs
                    .scalar
                    .ok_or_else(|| Error::contract("`add_scalar` requires attribute `scalar`"))?,
            ),
            "matmul" => Primitive::MatMul,
            "conv2d" => Primitive::Conv2d {
                stride: attrs.stride.unwrap_or(1),
                padding: attrs.padding.unwrap_or(0),
            },
            "conv_transpose2d" => Primitive::ConvTranspose2d {
                stride: attrs.stride.unwrap_or(1),
                padding: attrs.padding.unwrap_or(0),
            },
            "bias_add" => Primitive::BiasAdd,
            "relu" => Primitive::Relu,
            "sigmoid" => Primitive::Sigmoid,
            "exp" => Primitive::Exp,
            "log" => Primitive::Log,
            "square" => Primitive::Square,
            "sum" => Primitive::Sum,
            "mean" => Primitive::Mean,
            "sum_last_axis" => Primitive::SumLastAxis,
            "reshape" => Primitive::Reshape(
                attrs
                    .shape
                    .clone()
                    .ok_or_else(|| Error::contract("`reshape` requires attribute `shape`"))?,
            ),
            "concat_channels" => Primitive::ConcatChannels,
            "max_pool2d" => Primitive::MaxPool2d {
                size: need(attrs.size, "size")?,
            },
            "upsample2d" => Primitive::Upsample2d {
                factor: need(attrs.factor, "factor")?,
            },
            other => return Err(Error::UnsupportedOp(other.to_string())),
        })
    }

    fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::Scale(_) => "scale",
            Primitive::AddScalar(_) => "add_scalar",
            Primitive::MatMul => "matmul",
            Primitive::Conv2d { .. } => "conv2d",
            Primitive::ConvTranspose2d { .. } => "conv_transpose2d",
            Primitive::BiasAdd => "bias_add",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Square => "square",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::SumLastAxis => "sum_last_axis",
            Primitive::Reshape(_) => "reshape",
            Primitive::ConcatChannels => "concat_channels",
            Primitive::MaxPool2d { .. } => "max_pool2d",
            Primitive::Upsample2d { .. } => "upsample2d",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::Div
            | Primitive::MatMul
            | Primitive::Conv2d { .. }
            | Primitive::ConvTranspose2d { .. }
            | Primitive::BiasAdd => Some(2),
            Primitive::ConcatChannels => None,
            _ => Some(1),
        }
    }
}

/// Handle to a value living on a particular [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Saved {
    None,
    /// Flat input offset of the maximum for every pooled output.
    Argmax(Vec<usize>),
}

#[derive(Debug)]
struct Record {
    prim: Primitive,
    inputs: Vec<usize>,
    saved: Saved,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    record: Option<Record>,
}

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Ordered record of one forward pass. Operands always precede consumers.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant leaf; no gradient is tracked through it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, None)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, None)
    }

    pub fn value(&self, var: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.check(var)?].value)
    }

    pub fn requires_grad(&self, var: Var) -> Result<bool> {
        Ok(self.nodes[self.check(var)?].requires_grad)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, record: Option<Record>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            record,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn check(&self, var: Var) -> Result<usize> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(Error::StaleTape);
        }
        Ok(var.index)
    }

    /// Applies `prim` to `inputs`, recording it when any input requires a gradient.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        if let Some(n) = prim.arity() {
            if inputs.len() != n {
                return Err(Error::contract(format!(
                    "`{}` takes {n} operands, got {}",
                    prim.name(),
                    inputs.len()
                )));
            }
        } else if inputs.is_empty() {
            return Err(Error::contract(format!("`{}` needs operands", prim.name())));
        }
        let idx = inputs
            .iter()
            .map(|&v| self.check(v))
            .collect::<Result<Vec<_>>>()?;
        let values: Vec<&Tensor> = idx.iter().map(|&i| &self.nodes[i].value).collect();
        let (out, saved) = forward(&prim, &values)?;
        let requires_grad = idx.iter().any(|&i| self.nodes[i].requires_grad);
        let record = requires_grad.then_some(Record {
            prim,
            inputs: idx,
            saved,
        });
        Ok(self.push(out, requires_grad, record))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Div, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::Scale(c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::AddScalar(c), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        self.apply(Primitive::Conv2d { stride, padding }, &[x, w])
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        self.apply(Primitive::ConvTranspose2d { stride, padding }, &[x, w])
    }

    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::BiasAdd, &[x, b])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sigmoid, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Exp, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Log, &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Square, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sum, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Mean, &[a])
    }

    pub fn sum_last_axis(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::SumLastAxis, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Primitive::Reshape(shape.to_vec()), &[a])
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(Primitive::ConcatChannels, parts)
    }

    pub fn max_pool2d(&mut self, a: Var, size: usize) -> Result<Var> {
        self.apply(Primitive::MaxPool2d { size }, &[a])
    }

    pub fn upsample2d(&mut self, a: Var, factor: usize) -> Result<Var> {
        self.apply(Primitive::Upsample2d { factor }, &[a])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.check(loss)?;
        let loss_value = &self.nodes[root].value;
        if !loss_value.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[root].requires_grad {
            grads[root] = Some(vec![1.0]);
        }
        for i in (0..=root).rev() {
            let node = &self.nodes[i];
            let Some(record) = &node.record else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = record
                .inputs
                .iter()
                .map(|&j| &self.nodes[j].value)
                .collect();
            let wants: Vec<bool> = record
                .inputs
                .iter()
                .map(|&j| self.nodes[j].requires_grad)
                .collect();
            let local = backward_rule(record, &inputs, &node.value, g, &wants);
            for ((&j, contribution), want) in record.inputs.iter().zip(local).zip(wants) {
                let (Some(c), true) = (contribution, want) else {
                    continue;
                };
                match &mut grads[j] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }
}

/// Gradients of one scalar with respect to the leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to a differentiable leaf; zeros when unreachable.
    pub fn wrt(&self, tape: &Tape, var: Var) -> Result<Tensor> {
        if var.tape != self.tape {
            return Err(Error::StaleTape);
        }
        let i = tape.check(var)?;
        let node = &tape.nodes[i];
        if !node.requires_grad || node.record.is_some() {
            return Err(Error::contract(
                "gradients are only reported for differentiable leaves",
            ));
        }
        let shape = node.value.shape().to_vec();
        Ok(match &self.grads[i] {
            Some(g) => Tensor {
                shape,
                data: g.clone(),
            },
            None => Tensor::zeros(&shape),
        })
    }
}

fn same_shape(prim: &Primitive, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::dim(format!(
            "`{}` operands differ in shape: {:?} vs {:?}",
            prim.name(),
            a.shape,
            b.shape
        )));
    }
    Ok(())
}

fn rank4(prim: &Primitive, t: &Tensor, what: &str) -> Result<[usize; 4]> {
    match t.shape[..] {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::dim(format!(
            "`{}` expects a rank-4 {what}, got {:?}",
            prim.name(),
            t.shape
        ))),
    }
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().map(|&v| f(v)).collect(),
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn conv_window(prim: &Primitive, x: [usize; 4], w: [usize; 4], stride: usize, pad: usize) -> Result<Window> {
    let (oh, ow) = match (
        conv_out_extent(x[2], w[2], stride, pad),
        conv_out_extent(x[3], w[3], stride, pad),
    ) {
        (Some(h), Some(w)) => (h, w),
        _ => {
            return Err(Error::dim(format!(
                "`{}` kernel {}x{} (stride {stride}, padding {pad}) does not fit input {}x{}",
                prim.name(),
                w[2],
                w[3],
                x[2],
                x[3]
            )))
        }
    };
    Ok(Window {
        channels: x[1],
        in_h: x[2],
        in_w: x[3],
        kh: w[2],
        kw: w[3],
        stride,
        pad,
        out_h: oh,
        out_w: ow,
    })
}

/// Window of the convolution that a transposed convolution is the adjoint of.
fn conv_t_window(prim: &Primitive, x: [usize; 4], w: [usize; 4], stride: usize, pad: usize) -> Result<Window> {
    let dims = (
        conv_transpose_out_extent(x[2], w[2], stride, pad),
        conv_transpose_out_extent(x[3], w[3], stride, pad),
    );
    let (Some(oh), Some(ow)) = dims else {
        return Err(Error::dim(format!(
            "`{}` produces an empty output for input {}x{}",
            prim.name(),
            x[2],
            x[3]
        )));
    };
    Ok(Window {
        channels: w[1],
        in_h: oh,
        in_w: ow,
        kh: w[2],
        kw: w[3],
        stride,
        pad,
        out_h: x[2],
        out_w: x[3],
    })
}

fn forward(prim: &Primitive, inputs: &[&Tensor]) -> Result<(Tensor, Saved)> {
    let a = inputs[0];
    let out = match prim {
        Primitive::Add => {
            same_shape(prim, a, inputs[1])?;
            zip(a, inputs[1], |x, y| x + y)
        }
        Primitive::Sub => {
            same_shape(prim, a, inputs[1])?;
            zip(a, inputs[1], |x, y| x - y)
        }
        Primitive::Mul => {
            same_shape(prim, a, inputs[1])?;
            zip(a, inputs[1], |x, y| x * y)
        }
        Primitive::Div => {
            same_shape(prim, a, inputs[1])?;
            if inputs[1].data.iter().any(|&v| v == 0.0) {
                return Err(Error::Numeric("division by zero".into()));
            }
            zip(a, inputs[1], |x, y| x / y)
        }
        Primitive::Scale(c) => map(a, |x| x * c),
        Primitive::AddScalar(c) => map(a, |x| x + c),
        Primitive::MatMul => {
            let b = inputs[1];
            let (&[m, k], &[k2, n]) = (&a.shape[..], &b.shape[..]) else {
                return Err(Error::dim(format!(
                    "`matmul` expects two matrices, got {:?} and {:?}",
                    a.shape, b.shape
                )));
            };
            if k != k2 {
                return Err(Error::dim(format!(
                    "`matmul` inner dimensions differ: {:?} x {:?}",
                    a.shape, b.shape
                )));
            }
            let mut data = vec![0.0; m * n];
            gemm(m, k, n, View::rows(&a.data, k), View::rows(&b.data, n), 0.0, &mut data);
            Tensor {
                shape: vec![m, n],
                data,
            }
        }
        Primitive::Conv2d { stride, padding } => {
            let xs = rank4(prim, a, "input")?;
            let ws = rank4(prim, inputs[1], "weight")?;
            if ws[1] != xs[1] {
                return Err(Error::dim(format!(
                    "`conv2d` weight expects {} input channels, input has {}",
                    ws[1], xs[1]
                )));
            }
            let win = conv_window(prim, xs, ws, *stride, *padding)?;
            let (k, p, o) = (win.col_rows(), win.col_cols(), ws[0]);
            let in_len = xs[1] * xs[2] * xs[3];
            let mut data = vec![0.0; xs[0] * o * p];
            let mut col = vec![0.0; k * p];
            for n in 0..xs[0] {
                im2col(&a.data[n * in_len..(n + 1) * in_len], &win, &mut col);
                gemm(
                    o,
                    k,
                    p,
                    View::rows(&inputs[1].data, k),
                    View::rows(&col, p),
                    0.0,
                    &mut data[n * o * p..(n + 1) * o * p],
                );
            }
            Tensor {
                shape: vec![xs[0], o, win.out_h, win.out_w],
                data,
            }
        }
        Primitive::ConvTranspose2d { stride, padding } => {
            let xs = rank4(prim, a, "input")?;
            let ws = rank4(prim, inputs[1], "weight")?;
            if ws[0] != xs[1] {
                return Err(Error::dim(format!(
                    "`conv_transpose2d` weight expects {} input channels, input has {}",
                    ws[0], xs[1]
                )));
            }
            let win = conv_t_window(prim, xs, ws, *stride, *padding)?;
            let (k2, hw, ci) = (win.col_rows(), win.col_cols(), xs[1]);
            let out_len = win.channels * win.in_h * win.in_w;
            let mut data = vec![0.0; xs[0] * out_len];
            let mut col = vec![0.0; k2 * hw];
            for n in 0..xs[0] {
                gemm(
                    k2,
                    ci,
                    hw,
                    View::t(&inputs[1].data, k2),
                    View::rows(&a.data[n * ci * hw..(n + 1) * ci * hw], hw),
                    0.0,
                    &mut col,
                );
                col2im(&col, &win, &mut data[n * out_len..(n + 1) * out_len]);
            }
            Tensor {
                shape: vec![xs[0], win.channels, win.in_h, win.in_w],
                data,
            }
        }
        Primitive::BiasAdd => {
            let b = inputs[1];
            if a.shape.len() < 2 || b.shape.len() != 1 || b.shape[0] != a.shape[1] {
                return Err(Error::dim(format!(
                    "`bias_add` needs x [N, C, ..] and b [C], got {:?} and {:?}",
                    a.shape, b.shape
                )));
            }
            let inner: usize = a.shape[2..].iter().product();
            let c = a.shape[1];
            let mut out = a.clone();
            for (i, chunk) in out.data.chunks_mut(inner).enumerate() {
                let bias = b.data[i % c];
                chunk.iter_mut().for_each(|v| *v += bias);
            }
            out
        }
        Primitive::Relu => map(a, |x| x.max(0.0)),
        Primitive::Sigmoid => map(a, sigmoid),
        Primitive::Exp => map(a, f64::exp),
        Primitive::Log => {
            if a.data.iter().any(|&v| v <= 0.0) {
                return Err(Error::Numeric("log of a non-positive value".into()));
            }
            map(a, f64::ln)
        }
        Primitive::Square => map(a, |x| x * x),
        Primitive::Sum => Tensor::scalar(a.data.iter().sum()),
        Primitive::Mean => Tensor::scalar(a.data.iter().sum::<f64>() / a.len() as f64),
        Primitive::SumLastAxis => {
            let last = *a.shape.last().unwrap();
            let mut shape = a.shape[..a.shape.len() - 1].to_vec();
            if shape.is_empty() {
                shape.push(1);
            }
            Tensor {
                shape,
                data: a.data.chunks(last).map(|c| c.iter().sum()).collect(),
            }
        }
        Primitive::Reshape(shape) => a.clone().reshaped(shape.clone())?,
        Primitive::ConcatChannels => {
            let first = rank4(prim, a, "input")?;
            let mut channels = 0;
            for t in inputs {
                let s = rank4(prim, t, "input")?;
                if s[0] != first[0] || s[2] != first[2] || s[3] != first[3] {
                    return Err(Error::dim(format!(
                        "`concat_channels` operands disagree: {:?} vs {:?}",
                        a.shape, t.shape
                    )));
                }
                channels += s[1];
            }
            let plane = first[2] * first[3];
            let mut data = Vec::with_capacity(first[0] * channels * plane);
            for n in 0..first[0] {
                for t in inputs {
                    let len = t.shape[1] * plane;
                    data.extend_from_slice(&t.data[n * len..(n + 1) * len]);
                }
            }
            Tensor {
                shape: vec![first[0], channels, first[2], first[3]],
                data,
            }
        }
        Primitive::MaxPool2d { size } => {
            let [n, c, h, w] = rank4(prim, a, "input")?;
            let k = *size;
            if k == 0 || h % k != 0 || w % k != 0 {
                return Err(Error::dim(format!(
                    "`max_pool2d` window {k} does not divide {h}x{w}"
                )));
            }
            let (oh, ow) = (h / k, w / k);
            let mut data = Vec::with_capacity(n * c * oh * ow);
            let mut argmax = Vec::with_capacity(n * c * oh * ow);
            for plane in 0..n * c {
                let base = plane * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = base + (oy * k) * w + ox * k;
                        for dy in 0..k {
                            for dx in 0..k {
                                let at = base + (oy * k + dy) * w + ox * k + dx;
                                // strict comparison keeps the first maximum in scan order
                                if a.data[at] > a.data[best] {
                                    best = at;
                                }
                            }
                        }
                        data.push(a.data[best]);
                        argmax.push(best);
                    }
                }
            }
            return Ok((
                Tensor {
                    shape: vec![n, c, oh, ow],
                    data,
                },
                Saved::Argmax(argmax),
            ));
        }
        Primitive::Upsample2d { factor } => {
            let [n, c, h, w] = rank4(prim, a, "input")?;
            let f = *factor;
            if f == 0 {
                return Err(Error::dim("`upsample2d` factor must be positive"));
            }
            let (oh, ow) = (h * f, w * f);
            let mut data = Vec::with_capacity(n * c * oh * ow);
            for plane in 0..n * c {
                let src = &a.data[plane * h * w..(plane + 1) * h * w];
                for y in 0..oh {
                    let row = &src[(y / f) * w..(y / f + 1) * w];
                    for x in 0..ow {
                        data.push(row[x / f]);
                    }
                }
            }
            Tensor {
                shape: vec![n, c, oh, ow],
                data,
            }
        }
    };
    Ok((out, Saved::None))
}

/// Vector-Jacobian products of one recorded node. Entries for operands that
/// do not require gradients may be `None`.
fn backward_rule(
    record: &Record,
    inputs: &[&Tensor],
    out: &Tensor,
    mut g: Vec<f64>,
    wants: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let a = inputs[0];
    let scaled = |g: &[f64], f: &dyn Fn(usize) -> f64| -> Vec<f64> {
        g.iter().enumerate().map(|(i, &gi)| gi * f(i)).collect()
    };
    // unary elementwise rules scale the incoming buffer in place
    let in_place = |mut g: Vec<f64>, f: &dyn Fn(usize) -> f64| -> Vec<Option<Vec<f64>>> {
        g.iter_mut().enumerate().for_each(|(i, gi)| *gi *= f(i));
        vec![Some(g)]
    };
    match &record.prim {
        Primitive::Add => vec![wants[0].then(|| g.clone()), wants[1].then_some(g)],
        Primitive::Sub => {
            let ga = wants[0].then(|| g.clone());
            g.iter_mut().for_each(|v| *v = -*v);
            vec![ga, wants[1].then_some(g)]
        }
        Primitive::Mul => {
            let b = inputs[1];
            vec![
                wants[0].then(|| scaled(&g, &|i| b.data[i])),
                wants[1].then(|| scaled(&g, &|i| a.data[i])),
            ]
        }
        Primitive::Div => {
            let b = inputs[1];
            vec![
                wants[0].then(|| scaled(&g, &|i| 1.0 / b.data[i])),
                wants[1].then(|| scaled(&g, &|i| -a.data[i] / (b.data[i] * b.data[i]))),
            ]
        }
        Primitive::Scale(c) => in_place(g, &|_| *c),
        Primitive::AddScalar(_) | Primitive::Reshape(_) => vec![Some(g)],
        Primitive::MatMul => {
            let b = inputs[1];
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let ga = wants[0].then(|| {
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, View::rows(&g, n), View::t(&b.data, n), 0.0, &mut ga);
                ga
            });
            let gb = wants[1].then(|| {
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, View::t(&a.data, k), View::rows(&g, n), 0.0, &mut gb);
                gb
            });
            vec![ga, gb]
        }
        Primitive::Conv2d { stride, padding } => {
            let w = inputs[1];
            let xs = [a.shape[0], a.shape[1], a.shape[2], a.shape[3]];
            let ws = [w.shape[0], w.shape[1], w.shape[2], w.shape[3]];
            let win = conv_window(&record.prim, xs, ws, *stride, *padding).expect("validated in forward");
            let (k, p, o) = (win.col_rows(), win.col_cols(), ws[0]);
            let in_len = xs[1] * xs[2] * xs[3];
            let mut gx = wants[0].then(|| vec![0.0; a.len()]);
            let mut gw = wants[1].then(|| vec![0.0; w.len()]);
            let mut col = vec![0.0; k * p];
            for n in 0..xs[0] {
                let gn = &g[n * o * p..(n + 1) * o * p];
                if let Some(gw) = gw.as_mut() {
                    im2col(&a.data[n * in_len..(n + 1) * in_len], &win, &mut col);
                    gemm(o, p, k, View::rows(gn, p), View::t(&col, p), 1.0, gw);
                }
                if let Some(gx) = gx.as_mut() {
                    gemm(k, o, p, View::t(&w.data, k), View::rows(gn, p), 0.0, &mut col);
                    col2im(&col, &win, &mut gx[n * in_len..(n + 1) * in_len]);
                }
            }
            vec![gx, gw]
        }
        Primitive::ConvTranspose2d { stride, padding } => {
            let w = inputs[1];
            let xs = [a.shape[0], a.shape[1], a.shape[2], a.shape[3]];
            let ws = [w.shape[0], w.shape[1], w.shape[2], w.shape[3]];
            let win = conv_t_window(&record.prim, xs, ws, *stride, *padding).expect("validated in forward");
            let (k2, hw, ci) = (win.col_rows(), win.col_cols(), xs[1]);
            let out_len = win.channels * win.in_h * win.in_w;
            let mut gx = wants[0].then(|| vec![0.0; a.len()]);
            let mut gw = wants[1].then(|| vec![0.0; w.len()]);
            let mut gcol = vec![0.0; k2 * hw];
            for n in 0..xs[0] {
                im2col(&g[n * out_len..(n + 1) * out_len], &win, &mut gcol);
                if let Some(gx) = gx.as_mut() {
                    gemm(
                        ci,
                        k2,
                        hw,
                        View::rows(&w.data, k2),
                        View::rows(&gcol, hw),
                        0.0,
                        &mut gx[n * ci * hw..(n + 1) * ci * hw],
                    );
                }
                if let Some(gw) = gw.as_mut() {
                    gemm(
                        ci,
                        hw,
                        k2,
                        View::rows(&a.data[n * ci * hw..(n + 1) * ci * hw], hw),
                        View::t(&gcol, hw),
                        1.0,
                        gw,
                    );
                }
            }
            vec![gx, gw]
        }
        Primitive::BiasAdd => {
            let c = a.shape[1];
            let inner: usize = a.shape[2..].iter().product();
            let gb = wants[1].then(|| {
                let mut gb = vec![0.0; c];
                for (i, chunk) in g.chunks(inner).enumerate() {
                    gb[i % c] += chunk.iter().sum::<f64>();
                }
                gb
            });
            vec![wants[0].then_some(g), gb]
        }
        Primitive::Relu => in_place(g, &|i| if a.data[i] > 0.0 { 1.0 } else { 0.0 }),
        Primitive::Sigmoid => in_place(g, &|i| out.data[i] * (1.0 - out.data[i])),
        Primitive::Exp => in_place(g, &|i| out.data[i]),
        Primitive::Log => in_place(g, &|i| 1.0 / a.data[i]),
        Primitive::Square => in_place(g, &|i| 2.0 * a.data[i]),
        Primitive::Sum => vec![Some(vec![g[0]; a.len()])],
        Primitive::Mean => vec![Some(vec![g[0] / a.len() as f64; a.len()])],
        Primitive::SumLastAxis => {
            let last = *a.shape.last().unwrap();
            vec![Some((0..a.len()).map(|i| g[i / last]).collect())]
        }
        Primitive::ConcatChannels => {
            let n = a.shape[0];
            let plane = a.shape[2] * a.shape[3];
            let total: usize = inputs.iter().map(|t| t.shape[1]).sum();
            let mut offset = 0;
            inputs
                .iter()
                .zip(wants)
                .map(|(t, &want)| {
                    let len = t.shape[1] * plane;
                    let part = want.then(|| {
                        let mut part = Vec::with_capacity(t.len());
                        for b in 0..n {
                            let start = b * total * plane + offset;
                            part.extend_from_slice(&g[start..start + len]);
                        }
                        part
                    });
                    offset += len;
                    part
                })
                .collect()
        }
        Primitive::MaxPool2d { .. } => {
            let Saved::Argmax(argmax) = &record.saved else {
                unreachable!("max_pool2d always saves its argmax")
            };
            let mut ga = vec![0.0; a.len()];
            for (&at, &gi) in argmax.iter().zip(&g) {
                ga[at] += gi;
            }
            vec![Some(ga)]
        }
        Primitive::Upsample2d { factor } => {
            let f = *factor;
            let (h, w) = (a.shape[2], a.shape[3]);
            let (oh, ow) = (h * f, w * f);
            let mut ga = vec![0.0; a.len()];
            for plane in 0..a.shape[0] * a.shape[1] {
                let src = &g[plane * oh * ow..(plane + 1) * oh * ow];
                let dst = &mut ga[plane * h * w..(plane + 1) * h * w];
                for y in 0..oh {
                    for x in 0..ow {
                        dst[(y / f) * w + x / f] += src[y * ow + x];
                    }
                }
            }
            vec![Some(ga)]
        }
    }
}

/// Largest relative disagreement between the tape gradient of `f` at `x`
/// and central differences with step `h`.
///
/// Per element: `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    let eval = |point: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(point);
        let out = f(&mut tape, v)?;
        tape.value(out)?.item()
    };
    let mut tape = Tape::new();
    let leaf = tape.param(x.clone());
    let out = f(&mut tape, leaf)?;
    tape.value(out)?.item()?;
    let analytic = tape.backward(out)?.wrt(&tape, leaf)?;

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data[i] += h;
        let mut minus = x.clone();
        minus.data[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}
