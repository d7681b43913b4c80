use std::sync::Arc;

use super::Tensor;
use crate::error::{Error, Result};

/// Floor applied inside `log` so that zero probabilities stay finite.
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous groups over a flat vector, stored as CSR-style offsets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    offsets: Vec<usize>,
}

impl Segments {
    pub fn from_lengths(lengths: impl IntoIterator<Item = usize>) -> Self {
        let mut offsets = vec![0];
        for l in lengths {
            let last = *offsets.last().unwrap();
            offsets.push(last + l);
        }
        Self { offsets }
    }

    pub fn count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    /// Segment index of every flat position.
    pub fn owners(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.total());
        for i in 0..self.count() {
            out.extend(std::iter::repeat_n(i, self.range(i).len()));
        }
        out
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Concat(Vec<Var>),
    SliceCols(Var, usize, usize),
    Reshape(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    GatherRows(Var, Arc<Vec<usize>>),
    GatherCols(Var, Arc<Vec<usize>>),
    SegmentLogSoftmax(Var, Arc<Segments>),
    SegmentSum(Var, Arc<Segments>),
    BceWithLogits(Var, Arc<Tensor>),
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Execution-ordered record of operations. Every op evaluates eagerly and
/// appends a node; `backward` walks the record in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf: receives a gradient in `backward`.
    pub fn param(&mut self, value: Arc<Tensor>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf: never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(mismatch(name, x, y));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |p, q| p * q, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// Adds a row vector (length = last extent) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        let w = x.last_dim();
        if r.len() != w || x.shape().is_empty() {
            return Err(mismatch("add_row", x, r));
        }
        let mut out = x.clone();
        for chunk in out.data_mut().chunks_mut(w) {
            for (o, b) in chunk.iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape().len() != 2 || y.shape().len() != 2 || x.shape()[1] != y.shape()[0] {
            return Err(mismatch("matmul", x, y));
        }
        let out = matmul_raw(x, y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.shape().len() != 2 {
            return Err(Error::invalid(format!(
                "transpose needs a matrix, got {:?}",
                x.shape()
            )));
        }
        let out = transpose_raw(x);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat of zero tensors"));
        }
        let first = self.value(parts[0]);
        let lead: Vec<usize> = first.shape()[..first.shape().len().saturating_sub(1)].to_vec();
        let rows: usize = lead.iter().product();
        let mut width = 0;
        for &p in parts {
            let t = self.value(p);
            let tl = &t.shape()[..t.shape().len().saturating_sub(1)];
            if tl != lead.as_slice() || t.shape().is_empty() {
                return Err(mismatch("concat", first, t));
            }
            width += t.last_dim();
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                let t = self.value(p);
                let w = t.last_dim();
                data.extend_from_slice(&t.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(width);
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    /// Columns `[start, start + len)` of the last axis.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        let w = x.last_dim();
        if start + len > w || x.shape().is_empty() {
            return Err(Error::invalid(format!(
                "slice [{start}, {}) out of range for {:?}",
                start + len,
                x.shape()
            )));
        }
        let rows = x.len() / w;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&x.data()[r * w + start..r * w + start + len]);
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SliceCols(a, start, len), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(out, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// Natural log with inputs floored at [`LOG_FLOOR`].
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.max(LOG_FLOOR).ln(), Op::Log(a))
    }

    /// Max-subtracted softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let w = x.last_dim();
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(w) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::Softmax(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::invalid("mean of empty tensor"));
        }
        let m = x.data().iter().sum::<f64>() / x.len() as f64;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(m), Op::Mean(a), rg))
    }

    /// Sum over the last axis; drops that axis.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.shape().is_empty() {
            return Err(Error::invalid("sum_last on a scalar"));
        }
        let w = x.last_dim();
        let data: Vec<f64> = x.data().chunks(w).map(|c| c.iter().sum()).collect();
        let shape = x.shape()[..x.shape().len() - 1].to_vec();
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SumLast(a), rg))
    }

    /// Row lookup (embedding gather). On a 1-D tensor this picks elements.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if x.shape().is_empty() {
            return Err(Error::invalid("gather_rows on a scalar"));
        }
        let (n, w) = (x.rows(), x.row_len());
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            if i >= n {
                return Err(Error::invalid(format!("row {i} out of range for {n} rows")));
            }
            data.extend_from_slice(x.row(i));
        }
        let mut shape = x.shape().to_vec();
        shape[0] = idx.len();
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::GatherRows(a, Arc::new(idx.to_vec())), rg))
    }

    /// Column lookup along the last axis of a matrix.
    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if x.shape().len() != 2 {
            return Err(Error::invalid("gather_cols needs a matrix"));
        }
        let (rows, w) = (x.shape()[0], x.shape()[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= w) {
            return Err(Error::invalid(format!("column {bad} out of range for {w}")));
        }
        let mut data = Vec::with_capacity(rows * idx.len());
        for r in 0..rows {
            let row = &x.data()[r * w..(r + 1) * w];
            data.extend(idx.iter().map(|&i| row[i]));
        }
        let out = Tensor::new(vec![rows, idx.len()], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::GatherCols(a, Arc::new(idx.to_vec())), rg))
    }

    /// Log-softmax computed independently within each segment of a vector.
    pub fn segment_log_softmax(&mut self, a: Var, seg: &Arc<Segments>) -> Result<Var> {
        let x = self.value(a);
        if x.shape().len() != 1 || x.len() != seg.total() {
            return Err(Error::invalid(format!(
                "segment_log_softmax: {:?} vs {} segmented entries",
                x.shape(),
                seg.total()
            )));
        }
        let mut out = x.clone();
        for s in 0..seg.count() {
            let r = seg.range(s);
            if r.is_empty() {
                return Err(Error::contract("softmax over an empty segment"));
            }
            log_softmax_in_place(&mut out.data_mut()[r]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SegmentLogSoftmax(a, seg.clone()), rg))
    }

    pub fn segment_sum(&mut self, a: Var, seg: &Arc<Segments>) -> Result<Var> {
        let x = self.value(a);
        if x.shape().len() != 1 || x.len() != seg.total() {
            return Err(Error::invalid("segment_sum: length mismatch"));
        }
        let data = (0..seg.count())
            .map(|s| x.data()[seg.range(s)].iter().sum())
            .collect();
        let out = Tensor::vector(data);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SegmentSum(a, seg.clone()), rg))
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Tensor) -> Result<Var> {
        let z = self.value(logits);
        if z.shape() != targets.shape() {
            return Err(mismatch("bce_with_logits", z, &targets));
        }
        let n = z.len() as f64;
        let loss = z
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits(logits, Arc::new(targets)),
            rg,
        ))
    }

    /// Reverse pass from a scalar node. Gradients accumulate over every use of
    /// a node; nodes unreachable from `loss` keep no gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, || g.clone());
                self.acc(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, || g.clone());
                self.acc(grads, *b, || g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, || zip(g, y, |p, q| p * q));
                self.acc(grads, *b, || zip(g, x, |p, q| p * q));
            }
            Op::Scale(a, c) => self.acc(grads, *a, || g.map(|v| v * c)),
            Op::AddRow(a, row) => {
                self.acc(grads, *a, || g.clone());
                self.acc(grads, *row, || {
                    let r = self.value(*row);
                    let w = r.len();
                    let mut acc = vec![0.0; w];
                    for chunk in g.data().chunks(w) {
                        for (s, v) in acc.iter_mut().zip(chunk) {
                            *s += v;
                        }
                    }
                    Tensor::new(r.shape().to_vec(), acc).unwrap()
                });
            }
            Op::MatMul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, || matmul_raw(g, &transpose_raw(y)));
                self.acc(grads, *b, || matmul_raw(&transpose_raw(x), g));
            }
            Op::Transpose(a) => self.acc(grads, *a, || transpose_raw(g)),
            Op::Concat(parts) => {
                let w_out = g.last_dim();
                let rows = g.len() / w_out;
                let mut off = 0;
                for &p in parts {
                    let t = self.value(p);
                    let w = t.last_dim();
                    if self.wants(p) {
                        let mut data = Vec::with_capacity(t.len());
                        for r in 0..rows {
                            data.extend_from_slice(&g.data()[r * w_out + off..r * w_out + off + w]);
                        }
                        let part = Tensor::new(t.shape().to_vec(), data).unwrap();
                        accumulate(grads, p, part);
                    }
                    off += w;
                }
            }
            Op::SliceCols(a, start, len) => {
                self.acc(grads, *a, || {
                    let x = self.value(*a);
                    let w = x.last_dim();
                    let mut full = Tensor::zeros(x.shape());
                    for (r, chunk) in g.data().chunks(*len).enumerate() {
                        full.data_mut()[r * w + start..r * w + start + len].copy_from_slice(chunk);
                    }
                    full
                });
            }
            Op::Reshape(a) => self.acc(grads, *a, || {
                g.clone().reshaped(self.value(*a).shape().to_vec()).unwrap()
            }),
            Op::Relu(a) => {
                let x = self.value(*a);
                self.acc(grads, *a, || zip(g, x, |p, q| if q > 0.0 { p } else { 0.0 }));
            }
            Op::Sigmoid(a) => self.acc(grads, *a, || zip(g, out, |p, s| p * s * (1.0 - s))),
            Op::Tanh(a) => self.acc(grads, *a, || zip(g, out, |p, t| p * (1.0 - t * t))),
            Op::Exp(a) => self.acc(grads, *a, || zip(g, out, |p, e| p * e)),
            Op::Log(a) => {
                let x = self.value(*a);
                self.acc(grads, *a, || {
                    zip(g, x, |p, q| if q > LOG_FLOOR { p / q } else { 0.0 })
                });
            }
            Op::Softmax(a) => self.acc(grads, *a, || {
                let w = out.last_dim();
                let mut dx = Tensor::zeros(out.shape());
                for ((d, y), gr) in dx
                    .data_mut()
                    .chunks_mut(w)
                    .zip(out.data().chunks(w))
                    .zip(g.data().chunks(w))
                {
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for k in 0..w {
                        d[k] = y[k] * (gr[k] - dot);
                    }
                }
                dx
            }),
            Op::Sum(a) => self.acc(grads, *a, || Tensor::full(self.value(*a).shape(), g.item())),
            Op::Mean(a) => self.acc(grads, *a, || {
                let x = self.value(*a);
                Tensor::full(x.shape(), g.item() / x.len() as f64)
            }),
            Op::SumLast(a) => self.acc(grads, *a, || {
                let x = self.value(*a);
                let w = x.last_dim();
                let data = g
                    .data()
                    .iter()
                    .flat_map(|&v| std::iter::repeat_n(v, w))
                    .collect();
                Tensor::new(x.shape().to_vec(), data).unwrap()
            }),
            Op::GatherRows(a, idx) => {
                if self.wants(*a) {
                    let x = self.value(*a);
                    let w = x.row_len();
                    let slot = grads[a.0].get_or_insert_with(|| Tensor::zeros(x.shape()));
                    for (k, &i) in idx.iter().enumerate() {
                        let src = &g.data()[k * w..(k + 1) * w];
                        for (d, s) in slot.data_mut()[i * w..(i + 1) * w].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
            Op::GatherCols(a, idx) => {
                if self.wants(*a) {
                    let x = self.value(*a);
                    let w = x.shape()[1];
                    let slot = grads[a.0].get_or_insert_with(|| Tensor::zeros(x.shape()));
                    let m = idx.len();
                    for (r, chunk) in g.data().chunks(m).enumerate() {
                        for (&i, &v) in idx.iter().zip(chunk) {
                            slot.data_mut()[r * w + i] += v;
                        }
                    }
                }
            }
            Op::SegmentLogSoftmax(a, seg) => self.acc(grads, *a, || {
                let mut dx = g.clone();
                for s in 0..seg.count() {
                    let r = seg.range(s);
                    let total: f64 = g.data()[r.clone()].iter().sum();
                    for j in r {
                        dx.data_mut()[j] -= out.data()[j].exp() * total;
                    }
                }
                dx
            }),
            Op::SegmentSum(a, seg) => self.acc(grads, *a, || {
                let mut dx = vec![0.0; seg.total()];
                for s in 0..seg.count() {
                    for j in seg.range(s) {
                        dx[j] = g.data()[s];
                    }
                }
                Tensor::vector(dx)
            }),
            Op::BceWithLogits(a, targets) => self.acc(grads, *a, || {
                let z = self.value(*a);
                let scale = g.item() / z.len() as f64;
                zip(z, targets, |z, y| (sigmoid(z) - y) * scale)
            }),
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce() -> Tensor) {
        if self.wants(v) {
            accumulate(grads, v, f());
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

pub(crate) fn matmul_raw(x: &Tensor, y: &Tensor) -> Tensor {
    let (m, k) = (x.shape()[0], x.shape()[1]);
    let n = y.shape()[1];
    let mut out = vec![0.0; m * n];
    let (xd, yd) = (x.data(), y.data());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a = xd[i * k + p];
            if a == 0.0 {
                continue;
            }
            let yrow = &yd[p * n..(p + 1) * n];
            for (o, b) in orow.iter_mut().zip(yrow) {
                *o += a * b;
            }
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

pub(crate) fn transpose_raw(x: &Tensor) -> Tensor {
    let (r, c) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out).unwrap()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub(crate) fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    for v in row.iter_mut() {
        *v -= lse;
    }
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = tape.softmax(x);
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![-1.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn gather_from_identity_is_basis_row() {
        let mut tape = Tape::new();
        let eye = tape.constant(Tensor::identity(3));
        let row = tape.gather_rows(eye, &[2]).unwrap();
        assert_eq!(tape.value(row).data(), &[0.0, 0.0, 1.0]);
        assert_eq!(tape.shape(row), &[1, 3]);
    }

    #[test]
    fn square_derivative_at_three() {
        let mut tape = Tape::new();
        let x = tape.param(Arc::new(Tensor::scalar(3.0)));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn unused_parameter_has_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Arc::new(Tensor::scalar(3.0)));
        let unused = tape.param(Arc::new(Tensor::scalar(1.0)));
        let y = tape.scale(x, 2.0);
        let g = tape.backward(y).unwrap();
        assert!(g.get(unused).is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Arc::new(Tensor::vector(vec![1.0, 2.0])));
        assert!(matches!(tape.backward(x), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn singleton_segment_is_exactly_certain() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![3.7, -1.0, 2.0]));
        let seg = Arc::new(Segments::from_lengths([1, 2]));
        let lp = tape.segment_log_softmax(x, &seg).unwrap();
        assert_eq!(tape.value(lp).data()[0], 0.0);
        assert_eq!(tape.value(lp).data()[0].exp(), 1.0);
    }

    #[test]
    fn log_is_floored() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0]));
        let y = tape.log(x);
        assert!(tape.value(y).data()[0].is_finite());
    }

    #[test]
    fn gradients_accumulate_over_reuse() {
        let mut tape = Tape::new();
        let x = tape.param(Arc::new(Tensor::vector(vec![1.0, 2.0])));
        let a = tape.scale(x, 3.0);
        let b = tape.add(a, x).unwrap();
        let s = tape.sum(b);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[4.0, 4.0]);
    }
}
