//! Define-by-run tape for reverse-mode differentiation over dense tensors.
//!
//! Every primitive evaluates eagerly and appends a node; node inputs always
//! have smaller indices than the node itself, so a reverse sweep over the
//! node list is a valid topological order.

use super::kernels;
use super::{AutodiffError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Arithmetic precision of recorded values.
///
/// `F32` rounds every primitive's output (and every propagated gradient) to
/// single precision while keeping `f64` storage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F64,
    F32,
}

/// Primitive identifiers for [`Tape::apply`]. Parameters that are not tensors
/// travel inside the variant.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddRow,
    MulRow,
    MatMul,
    Transpose,
    Softmax,
    LogSoftmax,
    Log,
    Exp,
    Tanh,
    Gelu,
    LayerNorm,
    Embedding(Vec<usize>),
    SliceRows { start: usize, len: usize },
    SliceCols { start: usize, len: usize },
    ConcatRows,
    ConcatCols,
    Sum,
    Mean,
    MaskedFill { mask: Vec<bool>, value: f64 },
    Gather(Vec<usize>),
    Minimum,
    Clamp { lo: f64, hi: f64 },
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Log(Var),
    Exp(Var),
    Tanh(Var),
    Gelu(Var),
    LayerNorm { x: Var, rstd: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mean(Var),
    MaskedFill { x: Var, mask: Vec<bool> },
    Gather { x: Var, idx: Vec<usize> },
    Minimum(Var, Var),
    Clamp { x: Var, lo: f64, hi: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros of `shape` when the loss did not depend on it.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }
}

fn shape_err(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::Shape { op, detail }
}

fn matrix_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize), AutodiffError> {
    match t.shape().len() {
        2 => Ok((t.shape()[0], t.shape()[1])),
        _ => Err(shape_err(op, format!("expected a matrix, got shape {:?}", t.shape()))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self { nodes: Vec::new(), precision }
    }

    pub fn precision(&self) -> Precision {
        self.precision
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

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn round(&self, mut data: Vec<f64>) -> Vec<f64> {
        if self.precision == Precision::F32 {
            for v in data.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
        data
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        let data = self.round(data);
        let value = Tensor::new(shape, data).expect("primitive produced inconsistent shape");
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf.
    pub fn var(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    /// Dispatches a primitive by identifier.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var, AutodiffError> {
        let arity = |n: usize, name: &'static str| -> Result<(), AutodiffError> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(shape_err(name, format!("expected {} inputs, got {}", n, inputs.len())))
            }
        };
        match prim {
            Primitive::Add => arity(2, "add").and_then(|_| self.add(inputs[0], inputs[1])),
            Primitive::Sub => arity(2, "sub").and_then(|_| self.sub(inputs[0], inputs[1])),
            Primitive::Mul => arity(2, "mul").and_then(|_| self.mul(inputs[0], inputs[1])),
            Primitive::Scale(s) => arity(1, "scale").map(|_| self.scale(inputs[0], s)),
            Primitive::AddRow => arity(2, "add_row").and_then(|_| self.add_row(inputs[0], inputs[1])),
            Primitive::MulRow => arity(2, "mul_row").and_then(|_| self.mul_row(inputs[0], inputs[1])),
            Primitive::MatMul => arity(2, "matmul").and_then(|_| self.matmul(inputs[0], inputs[1])),
            Primitive::Transpose => arity(1, "transpose").and_then(|_| self.transpose(inputs[0])),
            Primitive::Softmax => arity(1, "softmax").and_then(|_| self.softmax_rows(inputs[0])),
            Primitive::LogSoftmax => arity(1, "log_softmax").and_then(|_| self.log_softmax_rows(inputs[0])),
            Primitive::Log => arity(1, "log").map(|_| self.log(inputs[0])),
            Primitive::Exp => arity(1, "exp").map(|_| self.exp(inputs[0])),
            Primitive::Tanh => arity(1, "tanh").map(|_| self.tanh(inputs[0])),
            Primitive::Gelu => arity(1, "gelu").map(|_| self.gelu(inputs[0])),
            Primitive::LayerNorm => arity(1, "layer_norm").and_then(|_| self.layer_norm(inputs[0])),
            Primitive::Embedding(ids) => arity(1, "embedding").and_then(|_| self.embedding(inputs[0], &ids)),
            Primitive::SliceRows { start, len } => {
                arity(1, "slice_rows").and_then(|_| self.slice_rows(inputs[0], start, len))
            }
            Primitive::SliceCols { start, len } => {
                arity(1, "slice_cols").and_then(|_| self.slice_cols(inputs[0], start, len))
            }
            Primitive::ConcatRows => self.concat_rows(inputs),
            Primitive::ConcatCols => self.concat_cols(inputs),
            Primitive::Sum => arity(1, "sum").map(|_| self.sum(inputs[0])),
            Primitive::Mean => arity(1, "mean").map(|_| self.mean(inputs[0])),
            Primitive::MaskedFill { mask, value } => {
                arity(1, "masked_fill").and_then(|_| self.masked_fill(inputs[0], mask, value))
            }
            Primitive::Gather(idx) => arity(1, "gather").and_then(|_| self.gather(inputs[0], idx)),
            Primitive::Minimum => arity(2, "minimum").and_then(|_| self.minimum(inputs[0], inputs[1])),
            Primitive::Clamp { lo, hi } => arity(1, "clamp").map(|_| self.clamp(inputs[0], lo, hi)),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<(), AutodiffError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb {
            Ok(())
        } else {
            Err(shape_err(op, format!("{:?} vs {:?}", sa, sb)))
        }
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(shape, data, op, rg)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a);
        self.push(shape, data, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape(a, b, "minimum")?;
        Ok(self.zip_with(a, b, f64::min, Op::Minimum(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, f64::ln, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, kernels::gelu, Op::Gelu(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, |x| x.clamp(lo, hi), Op::Clamp { x: a, lo, hi })
    }

    fn row_operand(&self, x: Var, b: Var, op: &'static str) -> Result<(usize, usize), AutodiffError> {
        let (r, c) = matrix_dims(self.value(x), op)?;
        if self.value(b).len() != c {
            return Err(shape_err(
                op,
                format!("row operand {:?} does not match {:?}", self.value(b).shape(), self.value(x).shape()),
            ));
        }
        Ok((r, c))
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var, AutodiffError> {
        let (r, c) = self.row_operand(x, b, "add_row")?;
        let bv = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, &bb) in row.iter_mut().zip(bv) {
                *v += bb;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(vec![r, c], data, Op::AddRow(x, b), rg))
    }

    /// Multiplies every row elementwise by a length-`cols` vector.
    pub fn mul_row(&mut self, x: Var, w: Var) -> Result<Var, AutodiffError> {
        let (r, c) = self.row_operand(x, w, "mul_row")?;
        let wv = self.value(w).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, &ww) in row.iter_mut().zip(wv) {
                *v *= ww;
            }
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(vec![r, c], data, Op::MulRow(x, w), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (m, k) = matrix_dims(self.value(a), "matmul")?;
        let (k2, n) = matrix_dims(self.value(b), "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let (r, c) = matrix_dims(self.value(a), "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![c, r], out, Op::Transpose(a), rg))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let (r, c) = matrix_dims(self.value(a), "softmax")?;
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(c) {
            kernels::softmax_in_place(row);
        }
        let rg = self.rg(a);
        Ok(self.push(vec![r, c], data, Op::Softmax(a), rg))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let (r, c) = matrix_dims(self.value(a), "log_softmax")?;
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(c) {
            kernels::log_softmax_in_place(row);
        }
        let rg = self.rg(a);
        Ok(self.push(vec![r, c], data, Op::LogSoftmax(a), rg))
    }

    /// Per-row normalization to zero mean, unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let (r, c) = matrix_dims(self.value(a), "layer_norm")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        let mut rstd = Vec::with_capacity(r);
        for (row, orow) in src.chunks(c).zip(out.chunks_mut(c)) {
            rstd.push(kernels::layer_norm_row(row, orow));
        }
        let rg = self.rg(a);
        Ok(self.push(vec![r, c], out, Op::LayerNorm { x: a, rstd }, rg))
    }

    /// Gathers rows of `table` by index.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, AutodiffError> {
        let (v, d) = matrix_dims(self.value(table), "embedding")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(shape_err("embedding", format!("id {bad} out of range for table [{v}, {d}]")));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(vec![ids.len(), d], out, Op::Embedding { table, ids: ids.to_vec() }, rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let (r, c) = matrix_dims(self.value(a), "slice_rows")?;
        if start + len > r {
            return Err(shape_err("slice_rows", format!("rows {start}..{} of {r}", start + len)));
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(a);
        Ok(self.push(vec![len, c], data, Op::SliceRows { x: a, start }, rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let (r, c) = matrix_dims(self.value(a), "slice_cols")?;
        if start + len > c {
            return Err(shape_err("slice_cols", format!("cols {start}..{} of {c}", start + len)));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(r * len);
        for row in src.chunks(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(vec![r, len], data, Op::SliceCols { x: a, start }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let first = parts.first().ok_or_else(|| shape_err("concat_rows", "no inputs".into()))?;
        let (_, c) = matrix_dims(self.value(*first), "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, pc) = matrix_dims(self.value(p), "concat_rows")?;
            if pc != c {
                return Err(shape_err("concat_rows", format!("column mismatch {pc} vs {c}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![rows, c], data, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let first = parts.first().ok_or_else(|| shape_err("concat_cols", "no inputs".into()))?;
        let (r, _) = matrix_dims(self.value(*first), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = matrix_dims(self.value(p), "concat_cols")?;
            if pr != r {
                return Err(shape_err("concat_cols", format!("row mismatch {pr} vs {r}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![r, total], data, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(vec![], vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(a);
        self.push(vec![], vec![m], Op::Mean(a), rg)
    }

    /// Replaces entries where `mask` is true with `value`.
    pub fn masked_fill(&mut self, a: Var, mask: Vec<bool>, value: f64) -> Result<Var, AutodiffError> {
        if mask.len() != self.value(a).len() {
            return Err(shape_err(
                "masked_fill",
                format!("mask of {} for tensor {:?}", mask.len(), self.value(a).shape()),
            ));
        }
        let data = self.value(a).data().iter().zip(&mask).map(|(&x, &m)| if m { value } else { x }).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape, data, Op::MaskedFill { x: a, mask }, rg))
    }

    /// Picks `a[r, idx[r]]` for each row; result has shape `[rows]`.
    pub fn gather(&mut self, a: Var, idx: Vec<usize>) -> Result<Var, AutodiffError> {
        let (r, c) = matrix_dims(self.value(a), "gather")?;
        if idx.len() != r || idx.iter().any(|&i| i >= c) {
            return Err(shape_err("gather", format!("{} indices into [{r}, {c}]", idx.len())));
        }
        let src = self.value(a).data();
        let data = idx.iter().enumerate().map(|(row, &i)| src[row * c + i]).collect();
        let rg = self.rg(a);
        Ok(self.push(vec![r], data, Op::Gather { x: a, idx }, rg))
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients, AutodiffError> {
        let n = self.nodes.len();
        if loss.0 >= n {
            return Err(AutodiffError::Contract("loss is not on this tape".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(AutodiffError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut leaf_grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let g = self.round(g);
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                leaf_grads[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        // Accumulator into an input's gradient buffer, created on first touch.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(buf);
        };
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, gv)| *x += gv));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, gv)| *x += gv));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, gv)| *x += gv));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, gv)| *x -= gv));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for ((x, gv), bb) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gv * bb;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((x, gv), aa) in gb.iter_mut().zip(g).zip(av) {
                        *x += gv * aa;
                    }
                });
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for (k, x) in ga.iter_mut().enumerate() {
                        if av[k] <= bv[k] {
                            *x += g[k];
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for (k, x) in gb.iter_mut().enumerate() {
                        if av[k] > bv[k] {
                            *x += g[k];
                        }
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, gv)| *x += s * gv)),
            Op::AddRow(x, b) => {
                let c = node.value.cols();
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(v, gv)| *v += gv));
                acc(*b, &mut |gb| {
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(v, gv)| *v += gv);
                    }
                });
            }
            Op::MulRow(x, w) => {
                let c = node.value.cols();
                let (xv, wv) = (val(*x), val(*w));
                acc(*x, &mut |gx| {
                    for (grow, gxrow) in g.chunks(c).zip(gx.chunks_mut(c)) {
                        for ((v, gv), ww) in gxrow.iter_mut().zip(grow).zip(wv) {
                            *v += gv * ww;
                        }
                    }
                });
                acc(*w, &mut |gw| {
                    for (grow, xrow) in g.chunks(c).zip(xv.chunks(c)) {
                        for ((v, gv), xx) in gw.iter_mut().zip(grow).zip(xrow) {
                            *v += gv * xx;
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let at = &nodes[a.0].value;
                let bt = &nodes[b.0].value;
                let (m, k) = (at.shape()[0], at.shape()[1]);
                let n = bt.shape()[1];
                acc(*a, &mut |ga| kernels::matmul_nt_acc(g, bt.data(), ga, m, n, k));
                acc(*b, &mut |gb| kernels::matmul_tn_acc(at.data(), g, gb, m, k, n));
            }
            Op::Transpose(a) => {
                // node is [c, r]; input is [r, c]
                let (c, r) = (node.value.shape()[0], node.value.shape()[1]);
                acc(*a, &mut |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let c = node.value.cols();
                acc(*a, &mut |ga| {
                    for ((grow, yrow), garow) in g.chunks(c).zip(y.chunks(c)).zip(ga.chunks_mut(c)) {
                        let inner: f64 = grow.iter().zip(yrow).map(|(gv, yv)| gv * yv).sum();
                        for ((v, gv), yv) in garow.iter_mut().zip(grow).zip(yrow) {
                            *v += yv * (gv - inner);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let c = node.value.cols();
                acc(*a, &mut |ga| {
                    for ((grow, yrow), garow) in g.chunks(c).zip(y.chunks(c)).zip(ga.chunks_mut(c)) {
                        let total: f64 = grow.iter().sum();
                        for ((v, gv), yv) in garow.iter_mut().zip(grow).zip(yrow) {
                            *v += gv - yv.exp() * total;
                        }
                    }
                });
            }
            Op::Log(a) => {
                let av = val(*a);
                acc(*a, &mut |ga| {
                    for ((v, gv), x) in ga.iter_mut().zip(g).zip(av) {
                        *v += gv / x;
                    }
                });
            }
            Op::Exp(a) => acc(*a, &mut |ga| {
                for ((v, gv), yv) in ga.iter_mut().zip(g).zip(y) {
                    *v += gv * yv;
                }
            }),
            Op::Tanh(a) => acc(*a, &mut |ga| {
                for ((v, gv), yv) in ga.iter_mut().zip(g).zip(y) {
                    *v += gv * (1.0 - yv * yv);
                }
            }),
            Op::Gelu(a) => {
                let av = val(*a);
                acc(*a, &mut |ga| {
                    for ((v, gv), x) in ga.iter_mut().zip(g).zip(av) {
                        *v += gv * kernels::gelu_grad(*x);
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    for ((v, gv), xx) in gx.iter_mut().zip(g).zip(xv) {
                        if *xx >= *lo && *xx <= *hi {
                            *v += gv;
                        }
                    }
                });
            }
            Op::LayerNorm { x, rstd } => {
                let c = node.value.cols();
                let cf = c as f64;
                acc(*x, &mut |gx| {
                    for (((grow, yrow), gxrow), rs) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)).zip(rstd) {
                        let mean_g = grow.iter().sum::<f64>() / cf;
                        let mean_gy = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / cf;
                        for ((v, gv), yv) in gxrow.iter_mut().zip(grow).zip(yrow) {
                            *v += rs * (gv - mean_g - yv * mean_gy);
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = node.value.cols();
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id * d..(id + 1) * d];
                        dst.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(v, gv)| *v += gv);
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let c = node.value.cols();
                acc(*x, &mut |gx| {
                    let dst = &mut gx[start * c..start * c + g.len()];
                    dst.iter_mut().zip(g).for_each(|(v, gv)| *v += gv);
                });
            }
            Op::SliceCols { x, start } => {
                let len = node.value.cols();
                let c = nodes[x.0].value.cols();
                acc(*x, &mut |gx| {
                    for (grow, gxrow) in g.chunks(len).zip(gx.chunks_mut(c)) {
                        gxrow[*start..start + len].iter_mut().zip(grow).for_each(|(v, gv)| *v += gv);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    let slice = &g[offset..offset + len];
                    acc(p, &mut |gp| gp.iter_mut().zip(slice).for_each(|(v, gv)| *v += gv));
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut col = 0;
                for &p in parts {
                    let w = nodes[p.0].value.cols();
                    acc(p, &mut |gp| {
                        for (grow, gprow) in g.chunks(total).zip(gp.chunks_mut(w)) {
                            gprow.iter_mut().zip(&grow[col..col + w]).for_each(|(v, gv)| *v += gv);
                        }
                    });
                    col += w;
                }
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(a) => {
                let n = nodes[a.0].value.len() as f64;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|v| *v += g[0] / n));
            }
            Op::MaskedFill { x, mask } => acc(*x, &mut |gx| {
                for ((v, gv), m) in gx.iter_mut().zip(g).zip(mask) {
                    if !m {
                        *v += gv;
                    }
                }
            }),
            Op::Gather { x, idx } => {
                let c = nodes[x.0].value.cols();
                acc(*x, &mut |gx| {
                    for (r, &i) in idx.iter().enumerate() {
                        gx[r * c + i] += g[r];
                    }
                });
            }
        }
    }
}
