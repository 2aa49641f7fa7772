//! Recorded computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every loss evaluation: leaves are added
//! with [`Graph::leaf`] (trainable) or [`Graph::constant`], operations
//! append nodes, and [`Graph::backward`] walks the nodes in reverse to
//! produce gradients for every trainable leaf. Node ids are handed out in
//! creation order, which is already a topological order.
//!
//! Binary elementwise ops broadcast their right operand when it is `1x1`,
//! `1xC` or `Rx1`.

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Reduce over rows, keeping columns: `R x C -> 1 x C`.
    Rows,
    /// Reduce over columns, keeping rows: `R x C -> R x 1`.
    Cols,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Scalar,
    Row,
    Col,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Scale(Var, f64),
    Shift(Var),
    MatMul(Var, Var),
    LeakyRelu(Var, f64),
    Log(Var),
    Exp(Var),
    Square(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, Axis),
    LogSumExp(Var, Axis),
    MaskedLogSoftmax(Var, Vec<bool>),
    Gather(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SegmentSum(Var, Vec<usize>),
    SegmentLogSumExp(Var, Vec<usize>),
    LogAddExpConst(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar w.r.t. every node that required one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.0, shape.1))
    }
}

fn broadcast_kind(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Result<Broadcast> {
    if lhs == rhs {
        Ok(Broadcast::Same)
    } else if rhs == (1, 1) {
        Ok(Broadcast::Scalar)
    } else if rhs == (1, lhs.1) {
        Ok(Broadcast::Row)
    } else if rhs == (lhs.0, 1) {
        Ok(Broadcast::Col)
    } else {
        Err(Error::Shape { op, lhs, rhs })
    }
}

#[inline]
fn rhs_index(kind: Broadcast, i: usize, cols: usize) -> usize {
    match kind {
        Broadcast::Same => i,
        Broadcast::Scalar => 0,
        Broadcast::Row => i % cols,
        Broadcast::Col => i / cols,
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    // -inf is the representation of a masked log-probability and is allowed.
    if t.data().iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
        return Err(Error::NonFinite(op));
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        Some(acc) => {
            for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                *a += d;
            }
        }
        None => *slot = Some(delta),
    }
}

impl Graph {
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

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &'static str, value: Tensor, op: Op, rg: bool) -> Result<Var> {
        check_finite(name, &value)?;
        Ok(self.push(value, op, rg))
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(Var, Var, Broadcast) -> Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let kind = broadcast_kind(name, sa, sb)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let cols = sa.1;
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[rhs_index(kind, i, cols)]))
            .collect();
        let value = Tensor::new(sa.0, sa.1, data)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push_checked(name, value, make(a, b, kind), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * c);
        let rg = self.requires_grad(a);
        self.push_checked("scale", value, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x + c);
        let rg = self.requires_grad(a);
        self.push_checked("add_scalar", value, Op::Shift(a), rg)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push_checked("matmul", value, Op::MatMul(a, b), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let rg = self.requires_grad(a);
        self.push_checked("leaky_relu", value, Op::LeakyRelu(a, slope), rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.value(a).data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::LogDomain(bad));
        }
        let value = self.value(a).map(f64::ln);
        let rg = self.requires_grad(a);
        self.push_checked("log", value, Op::Log(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::exp);
        let rg = self.requires_grad(a);
        self.push_checked("exp", value, Op::Exp(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x * x);
        let rg = self.requires_grad(a);
        self.push_checked("square", value, Op::Square(a), rg)
    }

    /// Elementwise square root; the gradient at exactly zero is taken as 0.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.value(a).data().iter().find(|&&x| x < 0.0) {
            return Err(Error::LogDomain(bad));
        }
        let value = self.value(a).map(f64::sqrt);
        let rg = self.requires_grad(a);
        self.push_checked("sqrt", value, Op::Sqrt(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.requires_grad(a);
        self.push_checked("sum", value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::Shape {
                op: "mean",
                lhs: t.shape(),
                rhs: (1, 1),
            });
        }
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.requires_grad(a);
        self.push_checked("mean", value, Op::Mean(a), rg)
    }

    pub fn sum_axis(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.shape();
        let value = match axis {
            Axis::Cols => Tensor::column((0..r).map(|i| t.row_slice(i).iter().sum()).collect()),
            Axis::Rows => {
                let mut out = vec![0.0; c];
                for i in 0..r {
                    for (o, x) in out.iter_mut().zip(t.row_slice(i)) {
                        *o += x;
                    }
                }
                Tensor::row(out)
            }
        };
        let rg = self.requires_grad(a);
        self.push_checked("sum_axis", value, Op::SumAxis(a, axis), rg)
    }

    /// Max-shifted log-sum-exp over `axis`.
    pub fn logsumexp(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.shape();
        let lse = |it: &mut dyn Iterator<Item = f64>| -> f64 {
            let xs: Vec<f64> = it.collect();
            stable_lse(&xs)
        };
        let value = match axis {
            Axis::Cols => Tensor::column((0..r).map(|i| lse(&mut t.row_slice(i).iter().copied())).collect()),
            Axis::Rows => Tensor::row((0..c).map(|j| lse(&mut (0..r).map(|i| t.get(i, j)))).collect()),
        };
        let rg = self.requires_grad(a);
        self.push_checked("logsumexp", value, Op::LogSumExp(a, axis), rg)
    }

    /// Row-wise log-softmax where `mask[i*C + j] == false` entries are
    /// excluded from the normalizer and come out as `-inf`.
    pub fn masked_log_softmax(&mut self, a: Var, mask: Vec<bool>) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.shape();
        if mask.len() != r * c {
            return Err(Error::Shape {
                op: "masked_log_softmax",
                lhs: (r, c),
                rhs: (mask.len(), 1),
            });
        }
        let mut data = vec![f64::NEG_INFINITY; r * c];
        for i in 0..r {
            let row = t.row_slice(i);
            let m = &mask[i * c..(i + 1) * c];
            let valid: Vec<f64> = row.iter().zip(m).filter(|(_, &k)| k).map(|(&x, _)| x).collect();
            if valid.is_empty() {
                return Err(Error::NonFinite("masked_log_softmax (empty row)"));
            }
            let z = stable_lse(&valid);
            for j in 0..c {
                if m[j] {
                    data[i * c + j] = row[j] - z;
                }
            }
        }
        let value = Tensor::new(r, c, data)?;
        let rg = self.requires_grad(a);
        self.push_checked("masked_log_softmax", value, Op::MaskedLogSoftmax(a, mask), rg)
    }

    /// Pick entries by flat row-major index into a `K x 1` column.
    pub fn gather(&mut self, a: Var, indices: Vec<usize>) -> Result<Var> {
        let t = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.len()) {
            return Err(Error::Shape {
                op: "gather",
                lhs: t.shape(),
                rhs: (bad, 1),
            });
        }
        let value = Tensor::column(indices.iter().map(|&i| t.data()[i]).collect());
        let rg = self.requires_grad(a);
        self.push_checked("gather", value, Op::Gather(a, indices), rg)
    }

    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.shape();
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: (r, c),
                rhs: (bad, 1),
            });
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in &rows {
            data.extend_from_slice(t.row_slice(i));
        }
        let value = Tensor::new(rows.len(), c, data)?;
        let rg = self.requires_grad(a);
        self.push_checked("gather_rows", value, Op::GatherRows(a, rows), rg)
    }

    /// Stack tensors with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map_or(1, |&v| self.shape(v).1);
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: (rows, cols),
                    rhs: t.shape(),
                });
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(rows, cols, data)?;
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        self.push_checked("concat_rows", value, Op::ConcatRows(parts.to_vec()), rg)
    }

    fn check_segments(&self, op: &'static str, a: Var, seg: &[usize], n: usize) -> Result<()> {
        let shape = self.shape(a);
        if shape.1 != 1 || shape.0 != seg.len() || seg.iter().any(|&s| s >= n) {
            return Err(Error::Shape {
                op,
                lhs: shape,
                rhs: (seg.len(), n),
            });
        }
        Ok(())
    }

    /// Sum a `K x 1` column into `n` buckets given by `segments`.
    pub fn segment_sum(&mut self, a: Var, segments: Vec<usize>, n: usize) -> Result<Var> {
        self.check_segments("segment_sum", a, &segments, n)?;
        let mut out = vec![0.0; n];
        for (x, &s) in self.value(a).data().iter().zip(&segments) {
            out[s] += x;
        }
        let rg = self.requires_grad(a);
        self.push_checked("segment_sum", Tensor::column(out), Op::SegmentSum(a, segments), rg)
    }

    /// Stable log-sum-exp of a `K x 1` column within each of `n` buckets.
    /// Every bucket must be non-empty.
    pub fn segment_logsumexp(&mut self, a: Var, segments: Vec<usize>, n: usize) -> Result<Var> {
        self.check_segments("segment_logsumexp", a, &segments, n)?;
        let x = self.value(a).data();
        let mut max = vec![f64::NEG_INFINITY; n];
        for (&v, &s) in x.iter().zip(&segments) {
            max[s] = max[s].max(v);
        }
        if max.iter().any(|m| *m == f64::NEG_INFINITY) {
            return Err(Error::NonFinite("segment_logsumexp (empty segment)"));
        }
        let mut acc = vec![0.0; n];
        for (&v, &s) in x.iter().zip(&segments) {
            acc[s] += (v - max[s]).exp();
        }
        let out = acc.iter().zip(&max).map(|(a, m)| m + a.ln()).collect();
        let rg = self.requires_grad(a);
        self.push_checked(
            "segment_logsumexp",
            Tensor::column(out),
            Op::SegmentLogSumExp(a, segments),
            rg,
        )
    }

    /// Elementwise `ln(exp(a) + c)` for constants `c >= 0`, evaluated
    /// without forming `exp(a)`.
    pub fn log_add_exp_const(&mut self, a: Var, c: Vec<f64>) -> Result<Var> {
        let t = self.value(a);
        if c.len() != t.len() {
            return Err(Error::Shape {
                op: "log_add_exp_const",
                lhs: t.shape(),
                rhs: (c.len(), 1),
            });
        }
        if let Some(&bad) = c.iter().find(|&&x| !(x >= 0.0)) {
            return Err(Error::LogDomain(bad));
        }
        let data = t.data().iter().zip(&c).map(|(&x, &k)| log_add_exp(x, k)).collect();
        let value = Tensor::new(t.rows(), t.cols(), data)?;
        let rg = self.requires_grad(a);
        self.push_checked("log_add_exp_const", value, Op::LogAddExpConst(a), rg)
    }

    /// Gradients of the scalar `loss` w.r.t. every node requiring one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        let send = |v: Var, delta: Tensor, grads: &mut [Option<Tensor>]| {
            if self.nodes[v.0].requires_grad {
                accumulate(&mut grads[v.0], delta);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, kind) | Op::Sub(a, b, kind) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                send(*a, g.clone(), grads);
                if self.requires_grad(*b) {
                    let db = reduce_broadcast(g, *kind, self.shape(*b), |x, _| sign * x);
                    send(*b, db, grads);
                }
            }
            Op::Mul(a, b, kind) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let cols = av.cols();
                if self.requires_grad(*a) {
                    let data = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| x * bv.data()[rhs_index(*kind, i, cols)])
                        .collect();
                    send(*a, Tensor::new(av.rows(), cols, data).expect("shape"), grads);
                }
                if self.requires_grad(*b) {
                    let db = reduce_broadcast(g, *kind, bv.shape(), |x, i| x * av.data()[i]);
                    send(*b, db, grads);
                }
            }
            Op::Scale(a, c) => send(*a, g.map(|x| x * c), grads),
            Op::Shift(a) => send(*a, g.clone(), grads),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.shape();
                let n = bv.cols();
                if self.requires_grad(*a) {
                    // dA = G · Bᵀ
                    let mut da = Tensor::zeros(m, k);
                    gemm(m, n, k, (g.data(), n as isize, 1), (bv.data(), 1, n as isize), da.data_mut(), 0.0);
                    send(*a, da, grads);
                }
                if self.requires_grad(*b) {
                    // dB = Aᵀ · G
                    let mut db = Tensor::zeros(k, n);
                    gemm(k, m, n, (av.data(), 1, k as isize), (g.data(), n as isize, 1), db.data_mut(), 0.0);
                    send(*b, db, grads);
                }
            }
            Op::LeakyRelu(a, slope) => {
                let av = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(&x, &v)| if v > 0.0 { x } else { slope * x })
                    .collect();
                send(*a, Tensor::new(av.rows(), av.cols(), data).expect("shape"), grads);
            }
            Op::Log(a) => {
                let av = self.value(*a);
                send(*a, zip_map(g, av, |x, v| x / v), grads);
            }
            Op::Exp(a) => send(*a, zip_map(g, out, |x, y| x * y), grads),
            Op::Square(a) => {
                let av = self.value(*a);
                send(*a, zip_map(g, av, |x, v| 2.0 * x * v), grads);
            }
            Op::Sqrt(a) => send(
                *a,
                zip_map(g, out, |x, y| if y > 0.0 { 0.5 * x / y } else { 0.0 }),
                grads,
            ),
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                send(*a, Tensor::full(r, c, g.item()), grads);
            }
            Op::Mean(a) => {
                let (r, c) = self.shape(*a);
                send(*a, Tensor::full(r, c, g.item() / (r * c) as f64), grads);
            }
            Op::SumAxis(a, axis) => {
                let (r, c) = self.shape(*a);
                let data = (0..r * c)
                    .map(|i| match axis {
                        Axis::Cols => g.data()[i / c],
                        Axis::Rows => g.data()[i % c],
                    })
                    .collect();
                send(*a, Tensor::new(r, c, data).expect("shape"), grads);
            }
            Op::LogSumExp(a, axis) => {
                let av = self.value(*a);
                let (r, c) = av.shape();
                let data = (0..r * c)
                    .map(|i| {
                        let j = match axis {
                            Axis::Cols => i / c,
                            Axis::Rows => i % c,
                        };
                        g.data()[j] * (av.data()[i] - out.data()[j]).exp()
                    })
                    .collect();
                send(*a, Tensor::new(r, c, data).expect("shape"), grads);
            }
            Op::MaskedLogSoftmax(a, mask) => {
                let (r, c) = out.shape();
                let mut data = vec![0.0; r * c];
                for i in 0..r {
                    let span = i * c..(i + 1) * c;
                    let gsum: f64 = span
                        .clone()
                        .filter(|&k| mask[k])
                        .map(|k| g.data()[k])
                        .sum();
                    for k in span {
                        if mask[k] {
                            data[k] = g.data()[k] - out.data()[k].exp() * gsum;
                        }
                    }
                }
                send(*a, Tensor::new(r, c, data).expect("shape"), grads);
            }
            Op::Gather(a, idx) => {
                let (r, c) = self.shape(*a);
                let mut d = Tensor::zeros(r, c);
                for (&i, &x) in idx.iter().zip(g.data()) {
                    d.data_mut()[i] += x;
                }
                send(*a, d, grads);
            }
            Op::GatherRows(a, rows) => {
                let (r, c) = self.shape(*a);
                let mut d = Tensor::zeros(r, c);
                for (k, &i) in rows.iter().enumerate() {
                    let src = g.row_slice(k);
                    for (dst, x) in d.data_mut()[i * c..(i + 1) * c].iter_mut().zip(src) {
                        *dst += x;
                    }
                }
                send(*a, d, grads);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let t = self.value(p);
                    let n = t.len();
                    if self.requires_grad(p) {
                        let d = Tensor::new(t.rows(), t.cols(), g.data()[offset..offset + n].to_vec())
                            .expect("shape");
                        send(p, d, grads);
                    }
                    offset += n;
                }
            }
            Op::SegmentSum(a, seg) => {
                let d = Tensor::column(seg.iter().map(|&s| g.data()[s]).collect());
                send(*a, d, grads);
            }
            Op::SegmentLogSumExp(a, seg) => {
                let av = self.value(*a);
                let d = Tensor::column(
                    seg.iter()
                        .zip(av.data())
                        .map(|(&s, &x)| g.data()[s] * (x - out.data()[s]).exp())
                        .collect(),
                );
                send(*a, d, grads);
            }
            Op::LogAddExpConst(a) => {
                let av = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(av.data().iter().zip(out.data()))
                    .map(|(&x, (&v, &y))| x * (v - y).exp())
                    .collect();
                send(*a, Tensor::new(av.rows(), av.cols(), data).expect("shape"), grads);
            }
        }
    }
}

fn zip_map(g: &Tensor, t: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(t.data()).map(|(&x, &v)| f(x, v)).collect();
    Tensor::new(t.rows(), t.cols(), data).expect("shape")
}

/// Sum `f(g[i], i)` into the broadcast operand's shape.
fn reduce_broadcast(
    g: &Tensor,
    kind: Broadcast,
    shape: (usize, usize),
    f: impl Fn(f64, usize) -> f64,
) -> Tensor {
    let cols = g.cols();
    let mut d = Tensor::zeros(shape.0, shape.1);
    for (i, &x) in g.data().iter().enumerate() {
        d.data_mut()[rhs_index(kind, i, cols)] += f(x, i);
    }
    d
}

/// Max-shifted `ln Σ exp(x)`; `-inf` for an empty or all `-inf` slice.
pub fn stable_lse(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `ln(exp(a) + c)` for `c >= 0`.
pub fn log_add_exp(a: f64, c: f64) -> f64 {
    if c == 0.0 {
        return a;
    }
    let b = c.ln();
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn log_of_exp_is_identity() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let e = g.exp(x).unwrap();
        let y = g.log(e).unwrap();
        assert!(close(g.value(y).item(), 3.0, 1e-12));
        let grads = g.backward(y).unwrap();
        assert!(close(grads.get(x).unwrap().item(), 1.0, 1e-12));
    }

    #[test]
    fn lse_of_zeros() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(vec![0.0, 0.0]));
        let y = g.logsumexp(x, Axis::Cols).unwrap();
        assert!(close(g.value(y).item(), 2f64.ln(), 1e-12));
        assert!(close(g.value(y).item(), 0.693147, 1e-6));
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.square(x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn sum_and_zero_losses() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::row(vec![0.3, -1.2, 4.0]));
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[1.0, 1.0, 1.0]);

        let z = g.scale(p, 0.0).unwrap();
        let s = g.sum(z).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn errors() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(vec![1.0, -1.0]));
        assert!(matches!(g.log(x), Err(Error::LogDomain(_))));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss((1, 2)))));
        let y = g.leaf(Tensor::zeros(3, 3));
        assert!(matches!(g.add(x, y), Err(Error::Shape { .. })));
        assert!(g.matmul(x, y).is_err());
        let big = g.constant(Tensor::scalar(1000.0));
        assert!(matches!(g.exp(big), Err(Error::NonFinite(_))));
    }

    #[test]
    fn masked_log_softmax_excludes_invalid() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(2, 3, vec![1.0, 2.0, 3.0, 0.5, 0.5, 9.0]).unwrap());
        let y = g
            .masked_log_softmax(x, vec![true, true, true, true, true, false])
            .unwrap();
        let v = g.value(y);
        let p0: f64 = v.row_slice(0).iter().map(|l| l.exp()).sum();
        assert!(close(p0, 1.0, 1e-12));
        assert_eq!(v.get(1, 2), f64::NEG_INFINITY);
        assert!(close(v.get(1, 0), 0.5f64.ln(), 1e-12));
    }

    #[test]
    fn segment_ops() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::column(vec![1.0, 2.0, 3.0]));
        let s = g.segment_sum(x, vec![0, 1, 0], 2).unwrap();
        assert_eq!(g.value(s).data(), &[4.0, 2.0]);
        let l = g.segment_logsumexp(x, vec![0, 1, 0], 2).unwrap();
        assert!(close(g.value(l).data()[0], (1f64.exp() + 3f64.exp()).ln(), 1e-12));
        assert!(g.segment_logsumexp(x, vec![0, 0, 0], 2).is_err());
    }

    #[test]
    fn log_add_exp_matches_direct() {
        for (a, c) in [(0.0, 0.0), (-3.0, 0.5), (2.0, 10.0), (-700.0, 1.0)] {
            let direct = (f64::exp(a) + c).ln();
            assert!(close(log_add_exp(a, c), direct, 1e-12), "{a} {c}");
        }
    }

    /// Central finite differences over every entry of every leaf.
    fn fd_check(build: impl Fn(&mut Graph, &[Var]) -> Var, leaves: Vec<Tensor>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = build(&mut g, &vars);
        let grads = g.backward(loss).unwrap();
        let h = 1e-5;
        for (li, leaf) in leaves.iter().enumerate() {
            for k in 0..leaf.len() {
                let eval = |delta: f64| {
                    let mut g = Graph::new();
                    let vs: Vec<Var> = leaves
                        .iter()
                        .enumerate()
                        .map(|(j, t)| {
                            let mut t = t.clone();
                            if j == li {
                                t.data_mut()[k] += delta;
                            }
                            g.leaf(t)
                        })
                        .collect();
                    let l = build(&mut g, &vs);
                    g.value(l).item()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let ad = grads.get_or_zeros(vars[li], leaf.shape()).data()[k];
                let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-4);
                assert!(rel < 1e-5, "leaf {li} entry {k}: ad {ad} fd {fd}");
            }
        }
    }

    #[test]
    fn op_gradients_match_finite_differences() {
        let a = Tensor::new(2, 3, vec![0.3, -0.7, 1.1, 0.2, -0.4, 0.9]).unwrap();
        let b = Tensor::new(3, 2, vec![0.5, -1.0, 0.25, 0.8, -0.6, 0.1]).unwrap();
        let bias = Tensor::row(vec![0.1, -0.2]);
        fd_check(
            |g, v| {
                let m = g.matmul(v[0], v[1]).unwrap();
                let m = g.add(m, v[2]).unwrap();
                let m = g.leaky_relu(m, 0.01).unwrap();
                let l = g.logsumexp(m, Axis::Cols).unwrap();
                let s = g.square(l).unwrap();
                g.mean(s).unwrap()
            },
            vec![a.clone(), b.clone(), bias],
        );
        fd_check(
            |g, v| {
                let e = g.exp(v[0]).unwrap();
                let l = g.log(e).unwrap();
                let p = g.mul(l, v[0]).unwrap();
                let q = g.sub(p, v[1]).unwrap();
                let r = g.sum_axis(q, Axis::Rows).unwrap();
                let r = g.logsumexp(r, Axis::Cols).unwrap();
                g.sum(r).unwrap()
            },
            vec![a.clone(), Tensor::row(vec![0.2, -0.3, 0.4])],
        );
        fd_check(
            |g, v| {
                let ls = g
                    .masked_log_softmax(v[0], vec![true, false, true, true, true, true])
                    .unwrap();
                let picked = g.gather(ls, vec![0, 2, 3, 5]).unwrap();
                let aug = g.log_add_exp_const(picked, vec![0.0, 0.3, 2.0, 0.01]).unwrap();
                let seg = g.segment_logsumexp(aug, vec![0, 1, 1, 0], 2).unwrap();
                let s2 = g.segment_sum(aug, vec![1, 0, 1, 1], 2).unwrap();
                let t = g.mul(seg, s2).unwrap();
                let rows = g.gather_rows(v[0], vec![1, 1, 0]).unwrap();
                let k = g.constant(Tensor::new(1, 3, vec![0.5, 0.5, 0.5]).unwrap());
                let rows = g.concat_rows(&[rows, k, v[0]]).unwrap();
                let sq = g.square(rows).unwrap();
                let sq = g.sum_axis(sq, Axis::Cols).unwrap();
                let rt = g.sqrt(sq).unwrap();
                let m = g.mean(rt).unwrap();
                let tt = g.sum(t).unwrap();
                let out = g.add(tt, m).unwrap();
                g.add_scalar(out, 1.5).unwrap()
            },
            vec![a],
        );
    }

    proptest! {
        #[test]
        fn lse_shift_invariance(xs in proptest::collection::vec(-50.0f64..50.0, 1..12), c in -100.0f64..100.0) {
            let base = stable_lse(&xs);
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            let lhs = stable_lse(&shifted);
            prop_assert!((lhs - (base + c)).abs() <= 1e-12 * (1.0 + base.abs() + c.abs()));
        }
    }
}
