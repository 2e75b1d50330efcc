//! Reverse-mode automatic differentiation on a define-by-run tape.
//!
//! Every forward pass builds a fresh graph: each operation appends a node
//! whose parents already sit at lower indices, so walking the arena in
//! reverse index order is a reverse topological traversal that visits each
//! node exactly once. Values are immutable once appended; `backward` never
//! mutates the tape, so repeated calls on the same graph return identical
//! gradients.
//!
//! Besides elementwise/matrix primitives, the tape provides fused losses on
//! logits (cross-entropy, KL against a constant reference, mean entropy).
//! Fusing gives the analytically simplified backward `softmax - reference`,
//! which is both numerically stable and exactly zero when the perturbed pass
//! reproduces the reference bit for bit.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    // rhs is a 1 x C row broadcast over the lhs rows
    AddRow(NodeId, NodeId),
    SubRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    DivRow(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    Clamp(NodeId, f64, f64),
    Matmul(NodeId, NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    MeanRows(NodeId),
    MedianRows(NodeId),
    Sum(NodeId),
    MeanAll(NodeId),
    ConcatRows(Vec<NodeId>),
    SliceRows(NodeId, usize, usize),
    CeTarget {
        logits: NodeId,
        rows: Range<usize>,
        target: usize,
    },
    CeLabels {
        logits: NodeId,
        labels: Vec<usize>,
    },
    KlConstRef {
        logits: NodeId,
        rows: Range<usize>,
        log_p_ref: Tensor,
    },
    EntropyMean {
        logits: NodeId,
        rows: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients of a scalar root with respect to every reachable node.
pub struct Gradients {
    adj: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.adj[id.0].as_ref()
    }

    /// Gradient at `id`, or zeros of the given shape if the node is
    /// unreachable from the root.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        match self.get(id) {
            Some(t) => t.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(row);
    row.iter().map(|&v| (v - lse).exp()).collect()
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(row);
    row.iter().map(|&v| v - lse).collect()
}

/// Value-level row-wise log-softmax, matching the expression the fused
/// losses use internally.
pub fn log_softmax_values(t: &Tensor) -> Tensor {
    let cols = t.cols();
    let mut data = Vec::with_capacity(t.len());
    for r in 0..t.rows() {
        data.extend(log_softmax_row(&t.data()[r * cols..(r + 1) * cols]));
    }
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Insert an input tensor. Leaves are both variables and constants;
    /// gradients are simply read off for the leaves the caller cares about.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    fn check_same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn check_row_broadcast(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.rows() != 1 || tb.cols() != ta.cols() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn zip_same(
        &mut self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        self.check_same_shape(op, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    fn zip_row(
        &mut self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        self.check_row_broadcast(op, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let cols = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, tb.data()[i % cols]))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_same("div", a, b, |x, y| x / y)?;
        Ok(self.push(v, Op::Div(a, b)))
    }

    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_row("add_row", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::AddRow(a, b)))
    }

    pub fn sub_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_row("sub_row", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::SubRow(a, b)))
    }

    pub fn mul_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_row("mul_row", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::MulRow(a, b)))
    }

    pub fn div_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_row("div_row", a, b, |x, y| x / y)?;
        Ok(self.push(v, Op::DivRow(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.value(a).map(|x| k * x);
        self.push(v, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.value(a).map(|x| x + k);
        self.push(v, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(v, Op::Relu(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    /// Subgradient 1 on [lo, hi], 0 outside.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = (ta.rows(), ta.cols());
        let (k2, m) = (tb.rows(), tb.cols());
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for p in 0..k {
                let aip = ta.data()[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &tb.data()[p * m..(p + 1) * m];
                let orow = &mut out[i * m..(i + 1) * m];
                for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                    *o += aip * bv;
                }
            }
        }
        let v = Tensor::new(vec![n, m], out)?;
        Ok(self.push(v, Op::Matmul(a, b)))
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let cols = t.cols();
        let mut data = Vec::with_capacity(t.len());
        for r in 0..t.rows() {
            data.extend(softmax_row(&t.data()[r * cols..(r + 1) * cols]));
        }
        let v = Tensor::new(t.shape().to_vec(), data).unwrap();
        self.push(v, Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let cols = t.cols();
        let mut data = Vec::with_capacity(t.len());
        for r in 0..t.rows() {
            data.extend(log_softmax_row(&t.data()[r * cols..(r + 1) * cols]));
        }
        let v = Tensor::new(t.shape().to_vec(), data).unwrap();
        self.push(v, Op::LogSoftmax(a))
    }

    /// Column means: N x C -> 1 x C.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        let (n, c) = (t.rows(), t.cols());
        if n == 0 {
            return Err(Error::InvalidShape {
                op: "mean_rows",
                shape: t.shape().to_vec(),
                reason: "empty batch".into(),
            });
        }
        let mut out = vec![0.0; c];
        for r in 0..n {
            for (o, &v) in out.iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= n as f64;
        }
        let v = Tensor::new(vec![1, c], out)?;
        Ok(self.push(v, Op::MeanRows(a)))
    }

    /// Column medians: N x C -> 1 x C. For even N the midpoint of the two
    /// central order statistics. The subgradient spreads unit mass uniformly
    /// over the elements tied with the contributing order statistics.
    pub fn median_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        let (n, c) = (t.rows(), t.cols());
        if n == 0 {
            return Err(Error::InvalidShape {
                op: "median_rows",
                shape: t.shape().to_vec(),
                reason: "empty batch".into(),
            });
        }
        let mut out = vec![0.0; c];
        for j in 0..c {
            let mut col: Vec<f64> = (0..n).map(|r| t.at(r, j)).collect();
            col.sort_by(|x, y| x.partial_cmp(y).unwrap());
            out[j] = if n % 2 == 1 {
                col[n / 2]
            } else {
                0.5 * (col[n / 2 - 1] + col[n / 2])
            };
        }
        let v = Tensor::new(vec![1, c], out)?;
        Ok(self.push(v, Op::MedianRows(a)))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let s: f64 = t.data().iter().sum();
        let v = Tensor::scalar(s / t.len() as f64);
        self.push(v, Op::MeanAll(a))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_rows(&tensors)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let t = self.value(a);
        if start > end || end > t.rows() {
            return Err(Error::InvalidShape {
                op: "slice_rows",
                shape: t.shape().to_vec(),
                reason: format!("row range {start}..{end} out of bounds"),
            });
        }
        let v = t.slice_rows(start, end);
        Ok(self.push(v, Op::SliceRows(a, start, end)))
    }

    /// Mean over `rows` of the cross-entropy against one fixed target class.
    pub fn ce_target(
        &mut self,
        logits: NodeId,
        rows: Range<usize>,
        target: usize,
    ) -> Result<NodeId> {
        let t = self.value(logits);
        let c = t.cols();
        if rows.is_empty() || rows.end > t.rows() {
            return Err(Error::invalid(
                "ce_target",
                format!("empty or out-of-range rows {rows:?}"),
            ));
        }
        if target >= c {
            return Err(Error::invalid(
                "ce_target",
                format!("target {target} >= classes {c}"),
            ));
        }
        let mut loss = 0.0;
        for r in rows.clone() {
            let row = t.row(r);
            loss += log_sum_exp(row) - row[target];
        }
        loss /= rows.len() as f64;
        let v = Tensor::scalar(loss);
        Ok(self.push(
            v,
            Op::CeTarget {
                logits,
                rows,
                target,
            },
        ))
    }

    /// Mean cross-entropy against per-row labels, over the whole batch.
    pub fn ce_labels(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let t = self.value(logits);
        let c = t.cols();
        if labels.len() != t.rows() {
            return Err(Error::ShapeMismatch {
                op: "ce_labels",
                lhs: t.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::invalid(
                "ce_labels",
                format!("label {bad} >= classes {c}"),
            ));
        }
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = t.row(r);
            loss += log_sum_exp(row) - row[y];
        }
        loss /= labels.len() as f64;
        let v = Tensor::scalar(loss);
        Ok(self.push(
            v,
            Op::CeLabels {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Mean over `rows` of KL(exp(log_p_ref) || softmax(logits_row)). The
    /// reference enters as constant log-probabilities; only the logits
    /// receive gradient. When the perturbed pass reproduces the reference
    /// logits bit for bit, both the value and the gradient are exactly zero.
    pub fn kl_const_ref(
        &mut self,
        logits: NodeId,
        rows: Range<usize>,
        log_p_ref: Tensor,
    ) -> Result<NodeId> {
        let t = self.value(logits);
        let c = t.cols();
        if rows.is_empty() || rows.end > t.rows() {
            return Err(Error::invalid(
                "kl_const_ref",
                format!("empty or out-of-range rows {rows:?}"),
            ));
        }
        if log_p_ref.rows() != rows.len() || log_p_ref.cols() != c {
            return Err(Error::ShapeMismatch {
                op: "kl_const_ref",
                lhs: vec![rows.len(), c],
                rhs: log_p_ref.shape().to_vec(),
            });
        }
        let mut loss = 0.0;
        for (i, r) in rows.clone().enumerate() {
            let lsm = log_softmax_row(t.row(r));
            for (j, &lp) in log_p_ref.row(i).iter().enumerate() {
                let p = lp.exp();
                if p > 0.0 {
                    loss += p * (lp - lsm[j]);
                }
            }
        }
        loss /= rows.len() as f64;
        let v = Tensor::scalar(loss);
        Ok(self.push(
            v,
            Op::KlConstRef {
                logits,
                rows,
                log_p_ref,
            },
        ))
    }

    /// Mean over the listed rows of the prediction entropy of
    /// softmax(logits). Rows may be any subset; duplicates are not expected.
    pub fn entropy_mean(&mut self, logits: NodeId, rows: Vec<usize>) -> Result<NodeId> {
        let t = self.value(logits);
        if rows.is_empty() || rows.iter().any(|&r| r >= t.rows()) {
            return Err(Error::invalid(
                "entropy_mean",
                format!("empty or out-of-range rows {rows:?}"),
            ));
        }
        let mut loss = 0.0;
        for &r in &rows {
            let lsm = log_softmax_row(t.row(r));
            let mut h = 0.0;
            for &l in &lsm {
                let p = l.exp();
                if p > 0.0 {
                    h -= p * l;
                }
            }
            loss += h;
        }
        loss /= rows.len() as f64;
        let v = Tensor::scalar(loss);
        Ok(self.push(v, Op::EntropyMean { logits, rows }))
    }

    /// Row entropies of softmax(logits) as plain values (no node).
    pub fn row_entropies(&self, logits: NodeId) -> Vec<f64> {
        let t = self.value(logits);
        (0..t.rows())
            .map(|r| {
                let lsm = log_softmax_row(t.row(r));
                lsm.iter()
                    .map(|&l| {
                        let p = l.exp();
                        if p > 0.0 {
                            -p * l
                        } else {
                            0.0
                        }
                    })
                    .sum()
            })
            .collect()
    }

    /// Reverse pass from a scalar root. Returns adjoints for every node
    /// reachable from the root; unreachable nodes have no entry.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(Error::NonScalarRoot {
                shape: rv.shape().to_vec(),
            });
        }
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let g = match adj[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate_parents(idx, &g, &mut adj);
            adj[idx] = Some(g);
        }
        Ok(Gradients { adj })
    }

    fn acc(&self, adj: &mut [Option<Tensor>], id: NodeId, contrib: Tensor) {
        match &mut adj[id.0] {
            Some(t) => t.axpy(1.0, &contrib).expect("adjoint shape"),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn accumulate_parents(&self, idx: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(adj, *a, g.clone());
                self.acc(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(adj, *a, g.clone());
                self.acc(adj, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da = elementwise(g, tb, |gv, y| gv * y);
                let db = elementwise(g, ta, |gv, x| gv * x);
                self.acc(adj, *a, da);
                self.acc(adj, *b, db);
            }
            Op::Div(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da = elementwise(g, tb, |gv, y| gv / y);
                let mut db = g.clone();
                for ((dv, &x), &y) in db.data_mut().iter_mut().zip(ta.data()).zip(tb.data()) {
                    *dv = -*dv * x / (y * y);
                }
                self.acc(adj, *a, da);
                self.acc(adj, *b, db);
            }
            Op::AddRow(a, b) => {
                self.acc(adj, *a, g.clone());
                self.acc(adj, *b, col_sums(g));
            }
            Op::SubRow(a, b) => {
                self.acc(adj, *a, g.clone());
                self.acc(adj, *b, col_sums(g).map(|x| -x));
            }
            Op::MulRow(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let cols = ta.cols();
                let mut da = g.clone();
                for (i, dv) in da.data_mut().iter_mut().enumerate() {
                    *dv *= tb.data()[i % cols];
                }
                let mut prod = g.clone();
                for (dv, &x) in prod.data_mut().iter_mut().zip(ta.data()) {
                    *dv *= x;
                }
                self.acc(adj, *a, da);
                self.acc(adj, *b, col_sums(&prod));
            }
            Op::DivRow(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let cols = ta.cols();
                let mut da = g.clone();
                for (i, dv) in da.data_mut().iter_mut().enumerate() {
                    *dv /= tb.data()[i % cols];
                }
                let mut prod = g.clone();
                for (i, (dv, &x)) in prod.data_mut().iter_mut().zip(ta.data()).enumerate() {
                    let y = tb.data()[i % cols];
                    *dv = -*dv * x / (y * y);
                }
                self.acc(adj, *a, da);
                self.acc(adj, *b, col_sums(&prod));
            }
            Op::Scale(a, k) => self.acc(adj, *a, g.map(|x| k * x)),
            Op::AddScalar(a) => self.acc(adj, *a, g.clone()),
            Op::Relu(a) => {
                let ta = self.value(*a);
                let da = elementwise(g, ta, |gv, x| if x > 0.0 { gv } else { 0.0 });
                self.acc(adj, *a, da);
            }
            Op::Exp(a) => {
                let da = elementwise(g, &node.value, |gv, y| gv * y);
                self.acc(adj, *a, da);
            }
            Op::Ln(a) => {
                let ta = self.value(*a);
                let da = elementwise(g, ta, |gv, x| gv / x);
                self.acc(adj, *a, da);
            }
            Op::Sqrt(a) => {
                let da = elementwise(g, &node.value, |gv, y| gv / (2.0 * y));
                self.acc(adj, *a, da);
            }
            Op::Clamp(a, lo, hi) => {
                let ta = self.value(*a);
                let (lo, hi) = (*lo, *hi);
                let da = elementwise(g, ta, |gv, x| if x >= lo && x <= hi { gv } else { 0.0 });
                self.acc(adj, *a, da);
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k) = (ta.rows(), ta.cols());
                let m = tb.cols();
                // da = g . b^T
                let mut da = vec![0.0; n * k];
                for i in 0..n {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..m {
                            s += g.data()[i * m + j] * tb.data()[p * m + j];
                        }
                        da[i * k + p] = s;
                    }
                }
                // db = a^T . g
                let mut db = vec![0.0; k * m];
                for i in 0..n {
                    for p in 0..k {
                        let aip = ta.data()[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        for j in 0..m {
                            db[p * m + j] += aip * g.data()[i * m + j];
                        }
                    }
                }
                self.acc(adj, *a, Tensor::new(vec![n, k], da).unwrap());
                self.acc(adj, *b, Tensor::new(vec![k, m], db).unwrap());
            }
            Op::Softmax(a) => {
                let p = &node.value;
                let cols = p.cols();
                let mut da = Tensor::zeros(p.shape().to_vec());
                for r in 0..p.rows() {
                    let prow = p.row(r);
                    let grow = &g.data()[r * cols..(r + 1) * cols];
                    let dot: f64 = prow.iter().zip(grow).map(|(&pv, &gv)| pv * gv).sum();
                    for j in 0..cols {
                        da.set(r, j, prow[j] * (grow[j] - dot));
                    }
                }
                self.acc(adj, *a, da);
            }
            Op::LogSoftmax(a) => {
                let lsm = &node.value;
                let cols = lsm.cols();
                let mut da = Tensor::zeros(lsm.shape().to_vec());
                for r in 0..lsm.rows() {
                    let grow = &g.data()[r * cols..(r + 1) * cols];
                    let gsum: f64 = grow.iter().sum();
                    for j in 0..cols {
                        let p = lsm.at(r, j).exp();
                        da.set(r, j, grow[j] - p * gsum);
                    }
                }
                self.acc(adj, *a, da);
            }
            Op::MeanRows(a) => {
                let ta = self.value(*a);
                let (n, c) = (ta.rows(), ta.cols());
                let mut da = Tensor::zeros(vec![n, c]);
                for r in 0..n {
                    for j in 0..c {
                        da.set(r, j, g.data()[j] / n as f64);
                    }
                }
                self.acc(adj, *a, da);
            }
            Op::MedianRows(a) => {
                let ta = self.value(*a);
                let (n, c) = (ta.rows(), ta.cols());
                let mut da = Tensor::zeros(vec![n, c]);
                for j in 0..c {
                    let mut col: Vec<f64> = (0..n).map(|r| ta.at(r, j)).collect();
                    col.sort_by(|x, y| x.partial_cmp(y).unwrap());
                    // contributing order statistics and their weights
                    let contributors: &[(f64, f64)] = &if n % 2 == 1 {
                        vec![(col[n / 2], 1.0)]
                    } else {
                        vec![(col[n / 2 - 1], 0.5), (col[n / 2], 0.5)]
                    };
                    for &(val, w) in contributors {
                        let ties = (0..n).filter(|&r| ta.at(r, j) == val).count() as f64;
                        for r in 0..n {
                            if ta.at(r, j) == val {
                                let cur = da.at(r, j);
                                da.set(r, j, cur + g.data()[j] * w / ties);
                            }
                        }
                    }
                }
                self.acc(adj, *a, da);
            }
            Op::Sum(a) => {
                let ta = self.value(*a);
                let da = Tensor::full(ta.shape().to_vec(), g.scalar_value());
                self.acc(adj, *a, da);
            }
            Op::MeanAll(a) => {
                let ta = self.value(*a);
                let da = Tensor::full(ta.shape().to_vec(), g.scalar_value() / ta.len() as f64);
                self.acc(adj, *a, da);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    self.acc(adj, p, g.slice_rows(start, start + rows));
                    start += rows;
                }
            }
            Op::SliceRows(a, start, end) => {
                let ta = self.value(*a);
                let mut da = Tensor::zeros(ta.shape().to_vec());
                let c = ta.cols();
                for (i, r) in (*start..*end).enumerate() {
                    for j in 0..c {
                        da.set(r, j, g.at(i, j));
                    }
                }
                self.acc(adj, *a, da);
            }
            Op::CeTarget {
                logits,
                rows,
                target,
            } => {
                let t = self.value(*logits);
                let scale = g.scalar_value() / rows.len() as f64;
                let mut da = Tensor::zeros(t.shape().to_vec());
                for r in rows.clone() {
                    let p = softmax_row(t.row(r));
                    for (j, &pv) in p.iter().enumerate() {
                        let ind = if j == *target { 1.0 } else { 0.0 };
                        da.set(r, j, (pv - ind) * scale);
                    }
                }
                self.acc(adj, *logits, da);
            }
            Op::CeLabels { logits, labels } => {
                let t = self.value(*logits);
                let scale = g.scalar_value() / labels.len() as f64;
                let mut da = Tensor::zeros(t.shape().to_vec());
                for (r, &y) in labels.iter().enumerate() {
                    let p = softmax_row(t.row(r));
                    for (j, &pv) in p.iter().enumerate() {
                        let ind = if j == y { 1.0 } else { 0.0 };
                        da.set(r, j, (pv - ind) * scale);
                    }
                }
                self.acc(adj, *logits, da);
            }
            Op::KlConstRef {
                logits,
                rows,
                log_p_ref,
            } => {
                let t = self.value(*logits);
                let scale = g.scalar_value() / rows.len() as f64;
                let mut da = Tensor::zeros(t.shape().to_vec());
                for (i, r) in rows.clone().enumerate() {
                    let p = softmax_row(t.row(r));
                    for (j, &pv) in p.iter().enumerate() {
                        da.set(r, j, (pv - log_p_ref.at(i, j).exp()) * scale);
                    }
                }
                self.acc(adj, *logits, da);
            }
            Op::EntropyMean { logits, rows } => {
                let t = self.value(*logits);
                let scale = g.scalar_value() / rows.len() as f64;
                let mut da = Tensor::zeros(t.shape().to_vec());
                for &r in rows {
                    let lsm = log_softmax_row(t.row(r));
                    let h: f64 = lsm
                        .iter()
                        .map(|&l| {
                            let p = l.exp();
                            if p > 0.0 {
                                -p * l
                            } else {
                                0.0
                            }
                        })
                        .sum();
                    for (j, &l) in lsm.iter().enumerate() {
                        let p = l.exp();
                        da.set(r, j, -p * (l + h) * scale);
                    }
                }
                self.acc(adj, *logits, da);
            }
        }
    }
}

fn elementwise(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g
        .data()
        .iter()
        .zip(other.data().iter())
        .map(|(&gv, &ov)| f(gv, ov))
        .collect();
    Tensor::new(g.shape().to_vec(), data).unwrap()
}

fn col_sums(g: &Tensor) -> Tensor {
    let c = g.cols();
    let mut out = vec![0.0; c];
    for r in 0..g.rows() {
        for (o, &v) in out.iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    Tensor::new(vec![1, c], out).unwrap()
}

/// Evaluate a scalar graph function at `x`.
pub fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let id = tape.leaf(x.clone());
    let root = f(&mut tape, id)?;
    let v = tape.value(root);
    if !v.is_scalar() {
        return Err(Error::NonScalarRoot {
            shape: v.shape().to_vec(),
        });
    }
    Ok(v.scalar_value())
}

/// Compare the analytic gradient of a scalar function against central finite
/// differences. Returns the max over coordinates of
/// |analytic - fd| / max(1, |analytic|).
pub fn grad_check<F>(f: &F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut tape = Tape::new();
    let id = tape.leaf(x.clone());
    let root = f(&mut tape, id)?;
    let grads = tape.backward(root)?;
    let analytic = grads.get_or_zeros(id, x.shape());

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let fd = (eval_scalar(f, &xp)? - eval_scalar(f, &xm)?) / (2.0 * h);
        let a = analytic.data()[i];
        let err = (a - fd).abs() / a.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
