//! Reverse-mode automatic differentiation on a dynamic tape.
//!
//! Every forward pass records its operations on a fresh [`Tape`]; nodes are
//! appended in evaluation order, so the node list is already a topological
//! order and [`Tape::backward`] is a single reverse sweep.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Probabilities below this are clamped inside [`Tape::cross_entropy`].
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kinds of recorded operation, used for reporting and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Constant,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    AddBias,
    Sigmoid,
    Tanh,
    LeakyRelu,
    SoftmaxRows,
    CrossEntropy,
    Sum,
    Conv2d,
    GlobalAvgPool,
    Reshape,
    Concat,
    TimeStep,
    StackTime,
}

impl OpKind {
    pub const DIFFERENTIABLE: [OpKind; 18] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddBias,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::LeakyRelu,
        OpKind::SoftmaxRows,
        OpKind::CrossEntropy,
        OpKind::Sum,
        OpKind::Conv2d,
        OpKind::GlobalAvgPool,
        OpKind::Reshape,
        OpKind::Concat,
        OpKind::TimeStep,
        OpKind::StackTime,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Constant => "constant",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddBias => "add_bias",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::LeakyRelu => "leaky_relu",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::Sum => "sum",
            OpKind::Conv2d => "conv2d",
            OpKind::GlobalAvgPool => "global_average_pool",
            OpKind::Reshape => "reshape",
            OpKind::Concat => "concat",
            OpKind::TimeStep => "time_step",
            OpKind::StackTime => "stack_time",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::DIFFERENTIABLE
            .into_iter()
            .find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Spatial layout of a same-padded NHWC convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub out_height: usize,
    pub out_width: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeometry {
    /// "Same" padding: output size is `ceil(input / stride)`, surplus padding goes bottom/right.
    pub fn same(
        batch: usize,
        height: usize,
        width: usize,
        in_channels: usize,
        kernel: usize,
        out_channels: usize,
        stride: usize,
    ) -> Self {
        let out_height = height.div_ceil(stride);
        let out_width = width.div_ceil(stride);
        let pad_h = ((out_height - 1) * stride + kernel).saturating_sub(height);
        let pad_w = ((out_width - 1) * stride + kernel).saturating_sub(width);
        ConvGeometry {
            batch,
            height,
            width,
            in_channels,
            kernel,
            out_channels,
            stride,
            out_height,
            out_width,
            pad_top: pad_h / 2,
            pad_left: pad_w / 2,
        }
    }

    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }

    fn positions(&self) -> usize {
        self.batch * self.out_height * self.out_width
    }

    /// Calls `f(col_index, input_index)` for every in-bounds patch element of output position `pos`.
    #[inline]
    fn for_each_tap(&self, pos: usize, mut f: impl FnMut(usize, usize)) {
        let per_image = self.out_height * self.out_width;
        let b = pos / per_image;
        let oy = (pos % per_image) / self.out_width;
        let ox = pos % self.out_width;
        for ky in 0..self.kernel {
            let iy = (oy * self.stride + ky) as isize - self.pad_top as isize;
            if iy < 0 || iy >= self.height as isize {
                continue;
            }
            for kx in 0..self.kernel {
                let ix = (ox * self.stride + kx) as isize - self.pad_left as isize;
                if ix < 0 || ix >= self.width as isize {
                    continue;
                }
                let src = ((b * self.height + iy as usize) * self.width + ix as usize)
                    * self.in_channels;
                let col = (ky * self.kernel + kx) * self.in_channels;
                f(col, src);
            }
        }
    }

    fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let patch = self.patch_len();
        let ch = self.in_channels;
        let mut cols = vec![0.0; self.positions() * patch];
        for pos in 0..self.positions() {
            let row = &mut cols[pos * patch..(pos + 1) * patch];
            self.for_each_tap(pos, |col, src| {
                row[col..col + ch].copy_from_slice(&input[src..src + ch]);
            });
        }
        cols
    }

    fn col2im(&self, cols: &[f64], out: &mut [f64]) {
        let patch = self.patch_len();
        let ch = self.in_channels;
        for pos in 0..self.positions() {
            let row = &cols[pos * patch..(pos + 1) * patch];
            self.for_each_tap(pos, |col, src| {
                for c in 0..ch {
                    out[src + c] += row[col + c];
                }
            });
        }
    }
}

enum Op {
    Leaf,
    Constant { zero: bool },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    SoftmaxRows(Var),
    CrossEntropy { pred: Var, targets: Vec<usize> },
    Sum(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeometry,
        cols: Vec<f64>,
    },
    GlobalAvgPool(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    TimeStep { seq: Var, step: usize },
    StackTime(Vec<Var>),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Constant { .. } => OpKind::Constant,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Tanh(_) => OpKind::Tanh,
            Op::LeakyRelu(..) => OpKind::LeakyRelu,
            Op::SoftmaxRows(_) => OpKind::SoftmaxRows,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Sum(_) => OpKind::Sum,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::GlobalAvgPool(_) => OpKind::GlobalAvgPool,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Concat(_) => OpKind::Concat,
            Op::TimeStep { .. } => OpKind::TimeStep,
            Op::StackTime(_) => OpKind::StackTime,
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients produced by one [`Tape::backward`] call, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads[var.0].as_ref()
    }

    /// Gradient of `var`, or zeros if the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Tensor {
        self.grads[var.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[var.0].clone()))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn leaky_relu(z: f64, slope: f64) -> f64 {
    if z >= 0.0 {
        z
    } else {
        slope * z
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &z) in out.iter_mut().zip(row) {
        *o = (z - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Row-wise softmax of a plain tensor viewed as `[rows, row_len]`.
pub fn softmax_rows(z: &Tensor) -> Result<Tensor> {
    if !z.all_finite() {
        return Err(Error::Numeric("softmax_rows: non-finite input".into()));
    }
    let w = z.row_len();
    let mut out = vec![0.0; z.len()];
    for (row, o) in z.data().chunks(w).zip(out.chunks_mut(w)) {
        softmax_row(row, o);
    }
    Tensor::new(z.shape().to_vec(), out)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Flips the sign of every gradient propagated by `kind`. Testing aid for the
    /// gradient-check suite; never set during training.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn kind(&self, var: Var) -> OpKind {
        self.nodes[var.0].op.kind()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let requires_grad = match &op {
            Op::Leaf => true,
            Op::Constant { .. } => false,
            _ => self.inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf | Op::Constant { .. } => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::LeakyRelu(a, _)
            | Op::SoftmaxRows(a)
            | Op::Sum(a)
            | Op::GlobalAvgPool(a)
            | Op::Reshape(a) => vec![*a],
            Op::CrossEntropy { pred, .. } => vec![*pred],
            Op::TimeStep { seq, .. } => vec![*seq],
            Op::Conv2d {
                input, kernel, bias, ..
            } => vec![*input, *kernel, *bias],
            Op::Concat(vs) | Op::StackTime(vs) => vs.clone(),
        }
    }

    fn is_zero(&self, var: Var) -> bool {
        matches!(self.nodes[var.0].op, Op::Constant { zero: true })
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        let zero = value.data().iter().all(|&v| v == 0.0);
        self.push(Op::Constant { zero }, value)
    }

    pub fn zeros(&mut self, shape: impl Into<Vec<usize>>) -> Var {
        self.push(Op::Constant { zero: true }, Tensor::zeros(shape))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        if self.is_zero(a) || self.is_zero(b) {
            let shape = vec![sa[0], sb[1]];
            return Ok(self.zeros(shape));
        }
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(name, ta.shape(), tb.shape()));
        }
        ta.zip_map(tb, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "add", |x, y| x + y)?;
        if self.is_zero(b) {
            return Ok(a);
        }
        if self.is_zero(a) {
            return Ok(b);
        }
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "sub", |x, y| x - y)?;
        if self.is_zero(b) {
            return Ok(a);
        }
        Ok(self.push(Op::Sub(a, b), value))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "mul", |x, y| x * y)?;
        if self.is_zero(a) || self.is_zero(b) {
            let shape = value.shape().to_vec();
            return Ok(self.zeros(shape));
        }
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(Op::Scale(a, factor), value)
    }

    /// Adds `bias` (length n) to every row of `x` viewed as `[rows, n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = tb.len();
        if tb.rank() != 1 || *tx.shape().last().unwrap() != n {
            return Err(Error::dim("add_bias", tx.shape(), tb.shape()));
        }
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        Ok(self.push(Op::AddBias(x, bias), out))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), value)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), value)
    }

    /// `z` where `z >= 0`, `slope * z` otherwise.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).map(|z| leaky_relu(z, slope));
        self.push(Op::LeakyRelu(a, slope), value)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let value = softmax_rows(self.value(a))?;
        Ok(self.push(Op::SoftmaxRows(a), value))
    }

    /// Mean over rows of `-ln(max(pred[target], 1e-12))` for one-hot `target`.
    pub fn cross_entropy(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        if p.rank() != 2 || p.shape() != target.shape() {
            return Err(Error::dim("cross_entropy", p.shape(), target.shape()));
        }
        let mut targets = Vec::with_capacity(p.rows());
        for i in 0..target.rows() {
            let row = target.row(i);
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones != 1 || zeros != row.len() - 1 {
                return Err(Error::Validation(format!(
                    "cross_entropy: target row {i} is not one-hot"
                )));
            }
            targets.push(row.iter().position(|&v| v == 1.0).unwrap());
        }
        self.cross_entropy_indices(pred, &targets)
    }

    /// [`Tape::cross_entropy`] with class indices instead of one-hot rows.
    pub fn cross_entropy_indices(&mut self, pred: Var, targets: &[usize]) -> Result<Var> {
        let p = self.value(pred);
        if p.rank() != 2 || p.rows() != targets.len() {
            return Err(Error::dim("cross_entropy", p.shape(), &[targets.len()]));
        }
        let c = p.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Validation(format!(
                "cross_entropy: class {bad} out of range for {c} classes"
            )));
        }
        let b = targets.len() as f64;
        let loss = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -p.row(i)[t].max(PROB_FLOOR).ln())
            .sum::<f64>()
            / b;
        Ok(self.push(
            Op::CrossEntropy {
                pred,
                targets: targets.to_vec(),
            },
            Tensor::scalar(loss),
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), value)
    }

    /// Same-padded NHWC convolution; `kernel` is `[k, k, in, out]`, `bias` is `[out]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize) -> Result<Var> {
        let (ti, tk, tb) = (self.value(input), self.value(kernel), self.value(bias));
        let (si, sk) = (ti.shape(), tk.shape());
        if si.len() != 4 || sk.len() != 4 || sk[0] != sk[1] || sk[2] != si[3] {
            return Err(Error::dim("conv2d", si, sk));
        }
        if tb.shape() != [sk[3]] {
            return Err(Error::dim("conv2d bias", sk, tb.shape()));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d: stride must be positive".into()));
        }
        let geom = ConvGeometry::same(si[0], si[1], si[2], si[3], sk[0], sk[3], stride);
        let cols = geom.im2col(ti.data());
        let mut out = vec![0.0; geom.positions() * geom.out_channels];
        gemm(
            geom.positions(),
            geom.patch_len(),
            geom.out_channels,
            &cols,
            false,
            tk.data(),
            false,
            &mut out,
            false,
        );
        for row in out.chunks_mut(geom.out_channels) {
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let value = Tensor::new(
            [geom.batch, geom.out_height, geom.out_width, geom.out_channels],
            out,
        )?;
        Ok(self.push(
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            },
            value,
        ))
    }

    /// Mean over the two spatial axes of a `[b, h, w, f]` tensor.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.shape();
        if s.len() != 4 {
            return Err(Error::dim("global_average_pool", s, &[0, 0, 0, 0]));
        }
        let (b, hw, f) = (s[0], s[1] * s[2], s[3]);
        let mut out = vec![0.0; b * f];
        for (bi, o) in out.chunks_mut(f).enumerate() {
            for p in 0..hw {
                let src = &t.data()[(bi * hw + p) * f..(bi * hw + p + 1) * f];
                for (acc, v) in o.iter_mut().zip(src) {
                    *acc += v;
                }
            }
            for acc in o.iter_mut() {
                *acc /= hw as f64;
            }
        }
        let value = Tensor::new([b, f], out)?;
        Ok(self.push(Op::GlobalAvgPool(a), value))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(Op::Reshape(a), value))
    }

    /// Concatenates 2-D tensors with equal row counts along the column axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat: no inputs".into()))?;
        let rows = self.shape(first)[0];
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::dim("concat", self.shape(first), s));
            }
        }
        let width: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new([rows, width], out)?;
        Ok(self.push(Op::Concat(parts.to_vec()), value))
    }

    /// Slice `[:, step, :]` of a `[b, T, d]` sequence.
    pub fn time_step(&mut self, seq: Var, step: usize) -> Result<Var> {
        let t = self.value(seq);
        let s = t.shape();
        if s.len() != 3 || step >= s[1] {
            return Err(Error::dim("time_step", s, &[step]));
        }
        let (b, steps, d) = (s[0], s[1], s[2]);
        let mut out = Vec::with_capacity(b * d);
        for bi in 0..b {
            let off = (bi * steps + step) * d;
            out.extend_from_slice(&t.data()[off..off + d]);
        }
        let value = Tensor::new([b, d], out)?;
        Ok(self.push(Op::TimeStep { seq, step }, value))
    }

    /// Stacks `T` tensors of shape `[b, d]` into `[b, T, d]`.
    pub fn stack_time(&mut self, steps: &[Var]) -> Result<Var> {
        let first = *steps
            .first()
            .ok_or_else(|| Error::Contract("stack_time: no steps".into()))?;
        let shape = self.shape(first).to_vec();
        if shape.len() != 2 {
            return Err(Error::dim("stack_time", &shape, &[0, 0]));
        }
        for &s in steps {
            if self.shape(s) != shape.as_slice() {
                return Err(Error::dim("stack_time", &shape, self.shape(s)));
            }
        }
        let (b, d, t) = (shape[0], shape[1], steps.len());
        let mut out = Vec::with_capacity(b * t * d);
        for bi in 0..b {
            for &s in steps {
                out.extend_from_slice(self.value(s).row(bi));
            }
        }
        let value = Tensor::new([b, t, d], out)?;
        Ok(self.push(Op::StackTime(steps.to_vec()), value))
    }

    /// Gradients of the scalar `loss` with respect to every node it depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let sign = if self.fault == Some(node.op.kind()) { -1.0 } else { 1.0 };
            self.propagate(idx, &g, sign, &mut grads);
            grads[idx] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, idx: usize, g: &Tensor, sign: f64, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let send = |grads: &mut [Option<Tensor>], v: Var, data: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => {
                    for (a, d) in acc.data_mut().iter_mut().zip(&data) {
                        *a += sign * d;
                    }
                }
                slot @ None => {
                    let data = data.into_iter().map(|d| sign * d).collect();
                    *slot = Some(
                        Tensor::new(self.shape(v).to_vec(), data).expect("gradient shape"),
                    );
                }
            }
        };
        let wants = |v: Var| self.nodes[v.0].requires_grad;

        match &node.op {
            Op::Leaf | Op::Constant { .. } => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, tb.data(), true, &mut da, false);
                    send(grads, *a, da);
                }
                if wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, g.data(), false, &mut db, false);
                    send(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                send(grads, *a, g.data().to_vec());
                send(grads, *b, g.data().to_vec());
            }
            Op::Sub(a, b) => {
                send(grads, *a, g.data().to_vec());
                send(grads, *b, g.data().iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if wants(*a) {
                    send(grads, *a, g.data().iter().zip(tb.data()).map(|(g, y)| g * y).collect());
                }
                if wants(*b) {
                    send(grads, *b, g.data().iter().zip(ta.data()).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(a, f) => send(grads, *a, g.data().iter().map(|v| v * f).collect()),
            Op::AddBias(x, bias) => {
                send(grads, *x, g.data().to_vec());
                if wants(*bias) {
                    let n = self.value(*bias).len();
                    let mut db = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    send(grads, *bias, db);
                }
            }
            Op::Sigmoid(a) => send(
                grads,
                *a,
                g.data().iter().zip(y.data()).map(|(g, s)| g * s * (1.0 - s)).collect(),
            ),
            Op::Tanh(a) => send(
                grads,
                *a,
                g.data().iter().zip(y.data()).map(|(g, t)| g * (1.0 - t * t)).collect(),
            ),
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a);
                send(
                    grads,
                    *a,
                    g.data()
                        .iter()
                        .zip(x.data())
                        .map(|(g, &z)| if z >= 0.0 { *g } else { g * slope })
                        .collect(),
                )
            }
            Op::SoftmaxRows(a) => {
                let w = y.row_len();
                let mut dz = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.data().chunks(w).zip(g.data().chunks(w)).zip(dz.chunks_mut(w)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((d, y), g) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = y * (g - dot);
                    }
                }
                send(grads, *a, dz);
            }
            Op::CrossEntropy { pred, targets } => {
                let p = self.value(*pred);
                let c = p.shape()[1];
                let scale = g.data()[0] / targets.len() as f64;
                let mut dp = vec![0.0; p.len()];
                for (i, &t) in targets.iter().enumerate() {
                    let v = p.row(i)[t];
                    if v >= PROB_FLOOR {
                        dp[i * c + t] = -scale / v;
                    }
                }
                send(grads, *pred, dp);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                send(grads, *a, vec![g.data()[0]; n]);
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            } => {
                let (pos, patch, cout) = (geom.positions(), geom.patch_len(), geom.out_channels);
                if wants(*kernel) {
                    let mut dk = vec![0.0; patch * cout];
                    gemm(patch, pos, cout, cols, true, g.data(), false, &mut dk, false);
                    send(grads, *kernel, dk);
                }
                if wants(*bias) {
                    let mut db = vec![0.0; cout];
                    for row in g.data().chunks(cout) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    send(grads, *bias, db);
                }
                if wants(*input) {
                    let tk = self.value(*kernel);
                    let mut dcols = vec![0.0; pos * patch];
                    gemm(pos, cout, patch, g.data(), false, tk.data(), true, &mut dcols, false);
                    let mut dx = vec![0.0; self.value(*input).len()];
                    geom.col2im(&dcols, &mut dx);
                    send(grads, *input, dx);
                }
            }
            Op::GlobalAvgPool(a) => {
                let s = self.shape(*a);
                let (hw, f) = (s[1] * s[2], s[3]);
                let mut dx = vec![0.0; self.value(*a).len()];
                for (bi, gr) in g.data().chunks(f).enumerate() {
                    for p in 0..hw {
                        let dst = &mut dx[(bi * hw + p) * f..(bi * hw + p + 1) * f];
                        for (d, v) in dst.iter_mut().zip(gr) {
                            *d = v / hw as f64;
                        }
                    }
                }
                send(grads, *a, dx);
            }
            Op::Reshape(a) => send(grads, *a, g.data().to_vec()),
            Op::Concat(parts) => {
                let rows = y.shape()[0];
                let width = y.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if wants(p) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(&g.data()[r * width + offset..r * width + offset + w]);
                        }
                        send(grads, p, dp);
                    }
                    offset += w;
                }
            }
            Op::TimeStep { seq, step } => {
                let s = self.shape(*seq);
                let (steps, d) = (s[1], s[2]);
                let mut ds = vec![0.0; self.value(*seq).len()];
                for (bi, gr) in g.data().chunks(d).enumerate() {
                    let off = (bi * steps + step) * d;
                    ds[off..off + d].copy_from_slice(gr);
                }
                send(grads, *seq, ds);
            }
            Op::StackTime(steps) => {
                let (t, d) = (steps.len(), y.shape()[2]);
                for (si, &s) in steps.iter().enumerate() {
                    if !wants(s) {
                        continue;
                    }
                    let b = y.shape()[0];
                    let mut dsv = Vec::with_capacity(b * d);
                    for bi in 0..b {
                        let off = (bi * t + si) * d;
                        dsv.extend_from_slice(&g.data()[off..off + d]);
                    }
                    send(grads, s, dsv);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_reference_values() {
        let mut tape = Tape::new();
        let z = tape.constant(t(&[1], &[0.0]));
        let s = tape.sigmoid(z);
        let th = tape.tanh(z);
        let m = tape.constant(t(&[1], &[-1.0]));
        let l = tape.leaky_relu(m, 0.2);
        assert_eq!(tape.value(s).data(), &[0.5]);
        assert_eq!(tape.value(th).data(), &[0.0]);
        assert!((tape.value(l).data()[0] + 0.2).abs() < 1e-15);
    }

    #[test]
    fn softmax_reference_rows() {
        let out = softmax_rows(&t(&[3, 3], &[0., 0., 0., 2f64.ln(), 0., f64::MIN_POSITIVE, 1000., 0., 0.])).unwrap();
        for v in out.row(0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((out.row(1)[0] - 0.5).abs() < 1e-15);
        let wide = softmax_rows(&t(&[1, 2], &[2f64.ln(), 0.0])).unwrap();
        assert!((wide.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((wide.data()[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!((out.row(2)[0] - 1.0).abs() < 1e-15 && out.row(2)[1] >= 0.0);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let err = softmax_rows(&t(&[1, 2], &[f64::NAN, 0.0])).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn cross_entropy_reference_values() {
        let mut tape = Tape::new();
        let p = tape.constant(t(&[1, 3], &[1.0, 0.0, 0.0]));
        let l = tape.cross_entropy(p, &t(&[1, 3], &[1.0, 0.0, 0.0])).unwrap();
        assert_eq!(tape.value(l).data(), &[0.0]);
        let u = tape.constant(t(&[1, 3], &[1.0 / 3.0; 3]));
        let l = tape.cross_entropy(u, &t(&[1, 3], &[0.0, 0.0, 1.0])).unwrap();
        assert!((tape.value(l).data()[0] - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_rejects_soft_targets() {
        let mut tape = Tape::new();
        let p = tape.constant(t(&[1, 2], &[0.5, 0.5]));
        let err = tape.cross_entropy(p, &t(&[1, 2], &[0.5, 0.5])).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[2, 3], &[1., -2., 3., 0.5, 0., 9.]));
        let s = tape.sum(w);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(w), Tensor::ones([2, 3]));
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[1], &[0.0]));
        let s = tape.sigmoid(w);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(w).data(), &[0.25]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::zeros([2]));
        let s = tape.sigmoid(w);
        assert!(matches!(tape.backward(s), Err(Error::Contract(_))));
    }

    #[test]
    fn conv_same_padding_shapes() {
        let g = ConvGeometry::same(1, 8, 8, 1, 3, 4, 2);
        assert_eq!((g.out_height, g.out_width, g.pad_top, g.pad_left), (4, 4, 0, 0));
        let g = ConvGeometry::same(1, 28, 28, 1, 3, 4, 2);
        assert_eq!((g.out_height, g.pad_top), (14, 0));
        let g = ConvGeometry::same(1, 7, 7, 1, 3, 4, 2);
        assert_eq!((g.out_height, g.pad_top), (4, 1));
        let g = ConvGeometry::same(1, 5, 5, 1, 3, 4, 1);
        assert_eq!((g.out_height, g.pad_top), (5, 1));
    }

    #[test]
    fn conv_matches_direct_loop() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform([2, 5, 6, 3], 1.0, &mut rng);
        let k = Tensor::uniform([3, 3, 3, 4], 1.0, &mut rng);
        let b = Tensor::uniform([4], 1.0, &mut rng);
        let mut tape = Tape::new();
        let (xv, kv, bv) = (tape.constant(x.clone()), tape.constant(k.clone()), tape.constant(b.clone()));
        let y = tape.conv2d(xv, kv, bv, 2).unwrap();
        let out = tape.value(y);
        assert_eq!(out.shape(), &[2, 3, 3, 4]);
        let geom = ConvGeometry::same(2, 5, 6, 3, 3, 4, 2);
        for bi in 0..2 {
            for oy in 0..3 {
                for ox in 0..3 {
                    for co in 0..4 {
                        let mut acc = b.data()[co];
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - geom.pad_top as isize;
                                let ix = (ox * 2 + kx) as isize - geom.pad_left as isize;
                                if iy < 0 || ix < 0 || iy >= 5 || ix >= 6 {
                                    continue;
                                }
                                for ci in 0..3 {
                                    let xi = ((bi * 5 + iy as usize) * 6 + ix as usize) * 3 + ci;
                                    let ki = ((ky * 3 + kx) * 3 + ci) * 4 + co;
                                    acc += x.data()[xi] * k.data()[ki];
                                }
                            }
                        }
                        let got = out.data()[((bi * 3 + oy) * 3 + ox) * 4 + co];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_constants_short_circuit_matmul() {
        let mut tape = Tape::new();
        let h = tape.zeros([2, 3]);
        let w = tape.param(Tensor::ones([3, 4]));
        let before = tape.len();
        let y = tape.matmul(h, w).unwrap();
        assert_eq!(tape.value(y), &Tensor::zeros([2, 4]));
        assert_eq!(tape.kind(y), OpKind::Constant);
        assert_eq!(tape.len(), before + 1);
    }

    #[test]
    fn fault_injection_flips_sign() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[1], &[0.0]));
        let s = tape.sigmoid(w);
        tape.inject_fault(OpKind::Sigmoid);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(w).data(), &[-0.25]);
    }

    #[test]
    fn stack_and_step_round_trip() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = tape.constant(t(&[2, 2], &[5., 6., 7., 8.]));
        let s = tape.stack_time(&[a, b]).unwrap();
        assert_eq!(tape.value(s).data(), &[1., 2., 5., 6., 3., 4., 7., 8.]);
        let back = tape.time_step(s, 1).unwrap();
        assert_eq!(tape.value(back), tape.value(b));
    }
}
