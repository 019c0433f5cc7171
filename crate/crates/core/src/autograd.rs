//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value. Nodes are only
//! ever appended, so tape order is already a topological order and the
//! backward pass is a single reverse sweep.

use rand::Rng;

use crate::error::{AcktError, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Log(Var),
    Softmax(Var),
    Concat(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    AddBias(Var, Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ScaleRows(Var, Var),
    SegmentSoftmax(Var, Vec<usize>),
    SegmentWeightedSum(Var, Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
        total_weight: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded sequence of differentiable operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` if `v` was not on a
    /// path to the loss or does not require gradients.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zeros when `v` is unreachable from the loss.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
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

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn check_offsets(offsets: &[usize], n: usize, op: &'static str) -> Result<()> {
    if offsets.len() < 2 || offsets[0] != 0 || *offsets.last().unwrap() != n {
        return Err(AcktError::Invalid(format!(
            "{op}: segment offsets must start at 0 and end at {n}"
        )));
    }
    if offsets.windows(2).any(|w| w[1] <= w[0]) {
        return Err(AcktError::Invalid(format!("{op}: empty segment")));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; no gradient is tracked.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable input; receives a gradient on backward.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        let (k2, n) = (bv.rows(), bv.cols());
        if k != k2 {
            return Err(AcktError::shape("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, 0.0);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.same_shape(bv) {
            return Err(AcktError::shape(name, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Multiplication by a constant scalar.
    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    /// Addition of a constant scalar.
    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a]);
        self.push(value, Op::AddScalar(a), rg)
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let rg = self.rg(&[a]);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    /// Natural log; inputs must be positive.
    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        let rg = self.rg(&[a]);
        self.push(value, Op::Log(a), rg)
    }

    /// Softmax over the last axis (each row of a matrix, or the whole vector).
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let cols = av.cols();
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let value = Tensor::new(av.shape().to_vec(), data).expect("shape preserved");
        let rg = self.rg(&[a]);
        self.push(value, Op::Softmax(a), rg)
    }

    /// Concatenation along the last axis. Vectors concatenate end to end;
    /// matrices must share their row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| AcktError::Invalid("concat of empty list".into()))?;
        let rows = self.value(*first).rows();
        let rank1 = parts.iter().all(|p| self.value(*p).rank() == 1);
        for p in parts {
            if self.value(*p).rows() != rows {
                return Err(AcktError::shape("concat", self.value(*first).shape(), self.value(*p).shape()));
            }
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let shape = if rank1 { vec![total] } else { vec![rows, total] };
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    /// Stacks matrices (or row vectors) on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| AcktError::Invalid("concat_rows of empty list".into()))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = self.value(*p);
            if v.cols() != cols {
                return Err(AcktError::shape("concat_rows", self.value(*first).shape(), v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Row lookup, e.g. an embedding table indexed by ids. Indices may repeat.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (rows, cols) = (tv.rows(), tv.cols());
        if indices.is_empty() {
            return Err(AcktError::Invalid("gather_rows with no indices".into()));
        }
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(AcktError::Invalid(format!("gather_rows index {i} out of range for {rows} rows")));
            }
            data.extend_from_slice(tv.row(i));
        }
        let value = Tensor::new(vec![indices.len(), cols], data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(value, Op::GatherRows(table, indices.to_vec()), rg))
    }

    /// Adds a bias vector to every row of `m`.
    pub fn add_bias(&mut self, m: Var, bias: Var) -> Result<Var> {
        let (mv, bv) = (self.value(m), self.value(bias));
        if bv.len() != mv.cols() {
            return Err(AcktError::shape("add_bias", mv.shape(), bv.shape()));
        }
        let cols = mv.cols();
        let mut data = mv.data().to_vec();
        for row in data.chunks_mut(cols) {
            for (x, b) in row.iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        let value = Tensor::new(vec![mv.rows(), cols], data)?;
        let rg = self.rg(&[m, bias]);
        Ok(self.push(value, Op::AddBias(m, bias), rg))
    }

    /// `x · w + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, m: Var, start: usize, width: usize) -> Result<Var> {
        let mv = self.value(m);
        if width == 0 || start + width > mv.cols() {
            return Err(AcktError::Invalid(format!(
                "slice_cols {start}..{} out of range for {} columns",
                start + width,
                mv.cols()
            )));
        }
        let mut data = Vec::with_capacity(mv.rows() * width);
        for r in 0..mv.rows() {
            data.extend_from_slice(&mv.row(r)[start..start + width]);
        }
        let value = Tensor::new(vec![mv.rows(), width], data)?;
        let rg = self.rg(&[m]);
        Ok(self.push(value, Op::SliceCols(m, start), rg))
    }

    /// Rows `start..start + count` of a matrix.
    pub fn slice_rows(&mut self, m: Var, start: usize, count: usize) -> Result<Var> {
        let mv = self.value(m);
        if count == 0 || start + count > mv.rows() {
            return Err(AcktError::Invalid(format!(
                "slice_rows {start}..{} out of range for {} rows",
                start + count,
                mv.rows()
            )));
        }
        let cols = mv.cols();
        let data = mv.data()[start * cols..(start + count) * cols].to_vec();
        let value = Tensor::new(vec![count, cols], data)?;
        let rg = self.rg(&[m]);
        Ok(self.push(value, Op::SliceRows(m, start), rg))
    }

    /// Multiplies row `i` of `m` by `s[i]`; `s` has one entry per row.
    pub fn scale_rows(&mut self, m: Var, s: Var) -> Result<Var> {
        let (mv, sv) = (self.value(m), self.value(s));
        if sv.len() != mv.rows() {
            return Err(AcktError::shape("scale_rows", mv.shape(), sv.shape()));
        }
        let cols = mv.cols();
        let mut data = mv.data().to_vec();
        for (row, &k) in data.chunks_mut(cols).zip(sv.data()) {
            row.iter_mut().for_each(|x| *x *= k);
        }
        let value = Tensor::new(vec![mv.rows(), cols], data)?;
        let rg = self.rg(&[m, s]);
        Ok(self.push(value, Op::ScaleRows(m, s), rg))
    }

    /// Softmax within consecutive segments of a flat score list.
    /// `offsets` has one more entry than there are segments.
    pub fn segment_softmax(&mut self, scores: Var, offsets: &[usize]) -> Result<Var> {
        let sv = self.value(scores);
        check_offsets(offsets, sv.len(), "segment_softmax")?;
        let mut data = sv.data().to_vec();
        for w in offsets.windows(2) {
            softmax_in_place(&mut data[w[0]..w[1]]);
        }
        let value = Tensor::new(vec![data.len()], data)?;
        let rg = self.rg(&[scores]);
        Ok(self.push(value, Op::SegmentSoftmax(scores, offsets.to_vec()), rg))
    }

    /// `out[s] = Σ_{j ∈ segment s} weights[j] · values[j]`.
    pub fn segment_weighted_sum(&mut self, weights: Var, values: Var, offsets: &[usize]) -> Result<Var> {
        let (wv, vv) = (self.value(weights), self.value(values));
        if wv.len() != vv.rows() {
            return Err(AcktError::shape("segment_weighted_sum", wv.shape(), vv.shape()));
        }
        check_offsets(offsets, wv.len(), "segment_weighted_sum")?;
        let cols = vv.cols();
        let segments = offsets.len() - 1;
        let mut data = vec![0.0; segments * cols];
        for (s, w) in offsets.windows(2).enumerate() {
            let out = &mut data[s * cols..(s + 1) * cols];
            for j in w[0]..w[1] {
                let a = wv.data()[j];
                for (o, v) in out.iter_mut().zip(vv.row(j)) {
                    *o += a * v;
                }
            }
        }
        let value = Tensor::new(vec![segments, cols], data)?;
        let rg = self.rg(&[weights, values]);
        Ok(self.push(value, Op::SegmentWeightedSum(weights, values, offsets.to_vec()), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let value = Tensor::scalar(v.data().iter().sum::<f64>() / v.len() as f64);
        let rg = self.rg(&[a]);
        self.push(value, Op::Mean(a), rg)
    }

    /// Weighted mean binary cross-entropy of `sigmoid(logits)` against
    /// `targets`. Zero-weight entries are ignored (padding).
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64], weights: Option<&[f64]>) -> Result<Var> {
        let lv = self.value(logits);
        if targets.len() != lv.len() {
            return Err(AcktError::shape("bce_with_logits", lv.shape(), &[targets.len()]));
        }
        let weights = match weights {
            Some(w) if w.len() != targets.len() => {
                return Err(AcktError::shape("bce_with_logits", &[targets.len()], &[w.len()]))
            }
            Some(w) => w.to_vec(),
            None => vec![1.0; targets.len()],
        };
        let total_weight: f64 = weights.iter().sum();
        if total_weight <= 0.0 {
            return Err(AcktError::Invalid("bce_with_logits: no weighted entries".into()));
        }
        let loss = lv
            .data()
            .iter()
            .zip(targets)
            .zip(&weights)
            .map(|((&x, &t), &w)| w * (softplus(x) - t * x))
            .sum::<f64>()
            / total_weight;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
                weights,
                total_weight,
            },
            rg,
        ))
    }

    /// Inverted dropout: zeroes entries with probability `rate` and scales
    /// survivors by `1 / (1 - rate)`. Identity when `rate == 0`.
    pub fn dropout<R: Rng>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(a);
        }
        if rate >= 1.0 {
            return Err(AcktError::Invalid(format!("dropout rate {rate} must be < 1")));
        }
        let keep = 1.0 / (1.0 - rate);
        let mask = self.value(a).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep });
        let m = self.constant(mask);
        self.mul(a, m)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(AcktError::Invalid("backward on empty tape".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(AcktError::Invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        // Only nodes that require gradients report one.
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    /// Gradient buffer of `v`, allocated as zeros on first use. Lets sparse
    /// ops accumulate into a region without materialising a full-size delta.
    fn zeroed<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> &'g mut [f64] {
        grads[v.0]
            .get_or_insert_with(|| Tensor::zeros(self.shape(v)))
            .data_mut()
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let acc = |grads: &mut [Option<Tensor>], v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let like = |v: Var, data: Vec<f64>| Tensor::new(self.shape(v).to_vec(), data).expect("gradient shape");
        let gd = g.data();
        let y = &node.value;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, bv.data(), true, &mut da, 0.0);
                    acc(grads, *a, like(*a, da));
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, gd, false, &mut db, 0.0);
                    acc(grads, *b, like(*b, db));
                }
            }
            Op::Add(a, b) => {
                acc(grads, *a, like(*a, gd.to_vec()));
                acc(grads, *b, like(*b, gd.to_vec()));
            }
            Op::Sub(a, b) => {
                acc(grads, *a, like(*a, gd.to_vec()));
                acc(grads, *b, like(*b, gd.iter().map(|x| -x).collect()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.nodes[a.0].requires_grad {
                    acc(grads, *a, like(*a, gd.iter().zip(bv).map(|(g, b)| g * b).collect()));
                }
                if self.nodes[b.0].requires_grad {
                    acc(grads, *b, like(*b, gd.iter().zip(av).map(|(g, a)| g * a).collect()));
                }
            }
            Op::Scale(a, s) => acc(grads, *a, like(*a, gd.iter().map(|g| g * s).collect())),
            Op::AddScalar(a) => acc(grads, *a, like(*a, gd.to_vec())),
            Op::Sigmoid(a) => {
                let d = gd.iter().zip(y.data()).map(|(g, s)| g * s * (1.0 - s)).collect();
                acc(grads, *a, like(*a, d));
            }
            Op::Tanh(a) => {
                let d = gd.iter().zip(y.data()).map(|(g, t)| g * (1.0 - t * t)).collect();
                acc(grads, *a, like(*a, d));
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d = gd.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
                acc(grads, *a, like(*a, d));
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                let d = gd.iter().zip(x).map(|(g, x)| g / x).collect();
                acc(grads, *a, like(*a, d));
            }
            Op::Softmax(a) => {
                let cols = y.cols();
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d.chunks_mut(cols).zip(y.data().chunks(cols)).zip(gd.chunks(cols)) {
                    softmax_backward(yr, gr, dr);
                }
                acc(grads, *a, like(*a, d));
            }
            Op::Concat(parts) => {
                let rows = y.rows();
                let total = y.cols();
                let mut offset = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    if self.nodes[p.0].requires_grad {
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(&gd[r * total + offset..r * total + offset + c]);
                        }
                        acc(grads, *p, like(*p, d));
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if self.nodes[p.0].requires_grad {
                        acc(grads, *p, like(*p, gd[offset..offset + n].to_vec()));
                    }
                    offset += n;
                }
            }
            Op::GatherRows(table, indices) => {
                let cols = y.cols();
                let slot = self.zeroed(grads, *table);
                for (r, &i) in indices.iter().enumerate() {
                    for (o, g) in slot[i * cols..(i + 1) * cols].iter_mut().zip(&gd[r * cols..(r + 1) * cols]) {
                        *o += g;
                    }
                }
            }
            Op::SliceRows(m, start) => {
                let offset = start * y.cols();
                let slot = self.zeroed(grads, *m);
                for (o, g) in slot[offset..offset + gd.len()].iter_mut().zip(gd) {
                    *o += g;
                }
            }
            Op::AddBias(m, bias) => {
                acc(grads, *m, like(*m, gd.to_vec()));
                if self.nodes[bias.0].requires_grad {
                    let cols = y.cols();
                    let mut d = vec![0.0; cols];
                    for row in gd.chunks(cols) {
                        for (o, g) in d.iter_mut().zip(row) {
                            *o += g;
                        }
                    }
                    acc(grads, *bias, like(*bias, d));
                }
            }
            Op::SliceCols(m, start) => {
                let mv = self.value(*m);
                let (cols, width) = (mv.cols(), y.cols());
                let mut d = vec![0.0; mv.len()];
                for r in 0..mv.rows() {
                    d[r * cols + start..r * cols + start + width].copy_from_slice(&gd[r * width..(r + 1) * width]);
                }
                acc(grads, *m, like(*m, d));
            }
            Op::ScaleRows(m, s) => {
                let (mv, sv) = (self.value(*m), self.value(*s));
                let cols = mv.cols();
                if self.nodes[m.0].requires_grad {
                    let mut d = gd.to_vec();
                    for (row, &k) in d.chunks_mut(cols).zip(sv.data()) {
                        row.iter_mut().for_each(|x| *x *= k);
                    }
                    acc(grads, *m, like(*m, d));
                }
                if self.nodes[s.0].requires_grad {
                    let d = gd
                        .chunks(cols)
                        .zip(mv.data().chunks(cols))
                        .map(|(g, x)| g.iter().zip(x).map(|(g, x)| g * x).sum())
                        .collect();
                    acc(grads, *s, like(*s, d));
                }
            }
            Op::SegmentSoftmax(scores, offsets) => {
                let mut d = vec![0.0; y.len()];
                for w in offsets.windows(2) {
                    let r = w[0]..w[1];
                    softmax_backward(&y.data()[r.clone()], &gd[r.clone()], &mut d[r]);
                }
                acc(grads, *scores, like(*scores, d));
            }
            Op::SegmentWeightedSum(weights, values, offsets) => {
                let (wv, vv) = (self.value(*weights), self.value(*values));
                let cols = vv.cols();
                let mut dw = vec![0.0; wv.len()];
                let mut dv = vec![0.0; vv.len()];
                for (s, w) in offsets.windows(2).enumerate() {
                    let gs = &gd[s * cols..(s + 1) * cols];
                    for j in w[0]..w[1] {
                        dw[j] = gs.iter().zip(vv.row(j)).map(|(g, v)| g * v).sum();
                        let a = wv.data()[j];
                        for (o, g) in dv[j * cols..(j + 1) * cols].iter_mut().zip(gs) {
                            *o = a * g;
                        }
                    }
                }
                acc(grads, *weights, like(*weights, dw));
                acc(grads, *values, like(*values, dv));
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                acc(grads, *a, like(*a, vec![gd[0]; n]));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                acc(grads, *a, like(*a, vec![gd[0] / n as f64; n]));
            }
            Op::BceWithLogits {
                logits,
                targets,
                weights,
                total_weight,
            } => {
                let x = self.value(*logits).data();
                let d = x
                    .iter()
                    .zip(targets)
                    .zip(weights)
                    .map(|((&x, &t), &w)| gd[0] * w * (sigmoid(x) - t) / total_weight)
                    .collect();
                acc(grads, *logits, like(*logits, d));
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

fn softmax_backward(y: &[f64], g: &[f64], out: &mut [f64]) {
    let dot: f64 = y.iter().zip(g).map(|(y, g)| y * g).sum();
    for ((o, y), g) in out.iter_mut().zip(y).zip(g) {
        *o = y * (g - dot);
    }
}

/// Numerically stable logistic function.
pub fn logistic(x: f64) -> f64 {
    sigmoid(x)
}

/// Softmax of a plain slice, for callers outside a tape.
pub fn softmax(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(AcktError::Invalid("softmax of empty vector".into()));
    }
    let mut out = values.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut t = Tape::new();
        let i = t.constant(m(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let b = t.constant(m(2, 2, &[3.0, 4.0, 5.0, 6.0]));
        let ib = t.matmul(i, b).unwrap();
        assert_eq!(t.value(ib).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = t.constant(m(1, 2, &[1.0, 2.0]));
        let c = t.constant(m(2, 1, &[3.0, 4.0]));
        let ac = t.matmul(a, c).unwrap();
        assert_eq!(t.value(ac).data(), &[11.0]);

        let z = t.constant(Tensor::zeros(&[2, 2]));
        let zb = t.matmul(z, b).unwrap();
        assert!(t.value(zb).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0, 0.0]).unwrap(), vec![1.0 / 3.0; 3]);
        let p = softmax(&[1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap();
        for (got, want) in p.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!(softmax(&[]).is_err());
        let big = softmax(&[1000.0, 1001.0]).unwrap();
        assert!(big.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn elementwise_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.0, -3.0, 3.0]));
        let s = t.sigmoid(x);
        let r = t.relu(x);
        let th = t.tanh(x);
        assert_eq!(t.value(s).data()[0], 0.5);
        assert_eq!(&t.value(r).data()[1..], &[0.0, 3.0]);
        assert_eq!(t.value(th).data()[0], 0.0);
        let y = t.constant(Tensor::vector(vec![1.0, 2.0]));
        assert!(t.add(x, y).is_err());
    }

    #[test]
    fn concat_examples() {
        let mut t = Tape::new();
        let a = t.param(Tensor::vector(vec![1.0, 2.0]));
        let b = t.param(Tensor::vector(vec![3.0]));
        let c = t.concat(&[a, b]).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0]);
        assert_eq!(t.shape(c), &[3]);
        let single = t.concat(&[b]).unwrap();
        assert_eq!(t.value(single).data(), &[3.0]);
        assert!(t.concat(&[]).is_err());

        // d/d(parts) of Σ k·out_k scatters weights back by offset.
        let w = t.constant(Tensor::vector(vec![10.0, 20.0, 30.0]));
        let p = t.mul(c, w).unwrap();
        let loss = t.sum(p);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[10.0, 20.0]);
        assert_eq!(g.get(b).unwrap().data(), &[30.0]);
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let mut t = Tape::new();
        let w = t.param(Tensor::vector(vec![0.5, -1.5, 2.0]));
        let s = t.sum(w);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut t = Tape::new();
        let w = t.param(Tensor::vector(vec![0.5, -1.5, 2.0]));
        let sq = t.mul(w, w).unwrap();
        let s = t.sum(sq);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1.0, -3.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_zero_fills_unreachable() {
        let mut t = Tape::new();
        let w = t.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(t.backward(w).is_err());
        let unused = t.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = t.sum(w);
        let g = t.backward(s).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.get_or_zeros(unused).data(), &[0.0, 0.0, 0.0]);
        assert!(Tape::new().backward(Var(0)).is_err());
    }

    #[test]
    fn bce_with_logits_matches_direct_formula() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![0.3, -2.0]));
        let l = t.bce_with_logits(x, &[1.0, 0.0], None).unwrap();
        let p0 = sigmoid(0.3);
        let p1 = sigmoid(-2.0);
        let want = -(p0.ln() + (1.0 - p1).ln()) / 2.0;
        assert!((t.value(l).item() - want).abs() < 1e-12);
        // Extreme logits stay finite.
        let y = t.param(Tensor::vector(vec![800.0, -800.0]));
        let l = t.bce_with_logits(y, &[0.0, 1.0], None).unwrap();
        assert!((t.value(l).item() - 800.0).abs() < 1e-9);
    }

    #[test]
    fn dropout_is_seeded_and_inverted() {
        let run = || {
            let mut t = Tape::new();
            let x = t.constant(Tensor::full(&[1000], 1.0));
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let y = t.dropout(x, 0.2, &mut rng).unwrap();
            t.value(y).clone()
        };
        let a = run();
        assert_eq!(a, run());
        let zeros = a.data().iter().filter(|&&v| v == 0.0).count();
        assert!((150..250).contains(&zeros), "{zeros}");
        assert!(a.data().iter().all(|&v| v == 0.0 || (v - 1.25).abs() < 1e-12));
    }

    #[test]
    fn segment_ops() {
        let mut t = Tape::new();
        let s = t.constant(Tensor::vector(vec![0.0, 0.0, 5.0]));
        let w = t.segment_softmax(s, &[0, 2, 3]).unwrap();
        assert_eq!(t.value(w).data(), &[0.5, 0.5, 1.0]);
        let v = t.constant(m(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let out = t.segment_weighted_sum(w, v, &[0, 2, 3]).unwrap();
        assert_eq!(t.value(out).data(), &[2.0, 3.0, 5.0, 6.0]);
        assert!(t.segment_softmax(s, &[0, 0, 3]).is_err());
        assert!(t.segment_softmax(s, &[0, 2]).is_err());
    }
}
