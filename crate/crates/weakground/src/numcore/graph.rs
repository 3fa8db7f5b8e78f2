//! Reverse-mode gradient tape over tensor-valued nodes.
//!
//! A [`Graph`] records one forward pass as a flat op list; node ids are tape
//! indices, so every node's inputs precede it and [`Graph::backward`] is a
//! single reverse sweep. Gradients for parameter nodes accumulate into the
//! [`ParamStore`] they were loaded from.

use super::ops;
use super::tensor::{ParamStore, Tensor};
use super::{NumError, NumResult, COSINE_EPS};

/// Index of a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    /// Constant input; no gradient.
    Input,
    /// Snapshot of a named parameter; backward accumulates into the store.
    Param(String),
    Add(NodeId, NodeId),
    /// `x [n×b] + bias [b]` broadcast over rows.
    AddBias(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Weighted sum of scalar nodes.
    AddScaled(Vec<(NodeId, f64)>),
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`.
    MatMulNT(NodeId, NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    /// Row-wise temperature softmax.
    SoftmaxRows(NodeId, f64),
    LayerNormRows {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    GatherRows(NodeId, Vec<usize>),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    Row(NodeId, usize),
    /// Mean over the listed rows; repeats accumulate.
    MeanRows(NodeId, Vec<usize>),
    Reshape(NodeId),
    /// All-pairs cosine similarity between rows of `a` and rows of `b`.
    CosineRows {
        a: NodeId,
        b: NodeId,
        eps: f64,
    },
    /// Per-row max; gradient flows to the lowest-index argmax only.
    RowMax(NodeId),
    /// Sum of the k largest entries; ties break toward the lowest index.
    TopKSum(NodeId, usize),
    SumAll(NodeId),
    StackScalars(Vec<NodeId>),
    InfoNce {
        pos: NodeId,
        negs: Option<NodeId>,
        temp: f64,
    },
    CrossEntropy {
        logits: NodeId,
        target: usize,
    },
    /// KL(target ‖ softmax(scores / temp)) with a constant target
    /// distribution; only `scores` receives gradient.
    KlFixedTarget {
        target: Vec<f64>,
        scores: NodeId,
        temp: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// One recorded forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
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

    // ---- leaf nodes -------------------------------------------------------

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.input(Tensor::scalar(v))
    }

    /// Loads the current value of a named parameter onto the tape.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> NumResult<NodeId> {
        let value = store.get(name)?.clone();
        Ok(self.push(value, Op::Param(name.to_string())))
    }

    // ---- arithmetic -------------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NumResult<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(NumError::ShapeMismatch {
                op: "add",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NumResult<NodeId> {
        let xv = self.value(x);
        let bv = self.value(bias);
        if !xv.is_matrix() || bv.shape() != [xv.cols()] {
            return Err(NumError::ShapeMismatch {
                op: "add_bias",
                left: xv.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let cols = xv.cols();
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let row = &mut out.values_mut()[r * cols..(r + 1) * cols];
            for (o, b) in row.iter_mut().zip(bv.values()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddBias(x, bias)))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let mut out = self.value(x).clone();
        for v in out.values_mut() {
            *v *= c;
        }
        self.push(out, Op::Scale(x, c))
    }

    /// Weighted sum of scalar nodes: `Σ wᵢ · termᵢ`.
    pub fn add_scaled(&mut self, terms: &[(NodeId, f64)]) -> NumResult<NodeId> {
        if terms.is_empty() {
            return Err(NumError::contract("add_scaled", "empty term list"));
        }
        let mut acc = 0.0;
        for (id, w) in terms {
            acc += w * self.value(*id).item()?;
        }
        Ok(self.push(Tensor::scalar(acc), Op::AddScaled(terms.to_vec())))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NumResult<NodeId> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NumResult<NodeId> {
        let out = ops::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMulNT(a, b)))
    }

    /// `x · w + bias`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, bias: NodeId) -> NumResult<NodeId> {
        let z = self.matmul(x, w)?;
        self.add_bias(z, bias)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        for v in out.values_mut() {
            *v = v.max(0.0);
        }
        self.push(out, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        for v in out.values_mut() {
            *v = v.tanh();
        }
        self.push(out, Op::Tanh(x))
    }

    pub fn softmax_rows(&mut self, x: NodeId, temp: f64) -> NumResult<NodeId> {
        ops::check_temperature("softmax_rows", temp)?;
        let xv = self.value(x);
        if !xv.is_matrix() {
            return Err(NumError::contract("softmax_rows", "expected matrix"));
        }
        let (r, c) = (xv.rows(), xv.cols());
        let mut vals = Vec::with_capacity(r * c);
        for i in 0..r {
            vals.extend(ops::softmax(xv.row_slice(i), temp)?);
        }
        let out = Tensor::matrix(r, c, vals)?;
        Ok(self.push(out, Op::SoftmaxRows(x, temp)))
    }

    pub fn layer_norm_rows(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    ) -> NumResult<NodeId> {
        let xv = self.value(x);
        if !xv.is_matrix() {
            return Err(NumError::contract("layer_norm_rows", "expected matrix"));
        }
        let d = xv.cols();
        if self.value(gain).shape() != [d] || self.value(bias).shape() != [d] {
            return Err(NumError::ShapeMismatch {
                op: "layer_norm_rows",
                left: xv.shape().to_vec(),
                right: self.value(gain).shape().to_vec(),
            });
        }
        let rows = xv.rows();
        let g = self.value(gain).values().to_vec();
        let b = self.value(bias).values().to_vec();
        let mut vals = Vec::with_capacity(rows * d);
        for r in 0..rows {
            let row = self.value(x).row_slice(r);
            let (mu, sigma) = row_moments(row, eps);
            for j in 0..d {
                vals.push((row[j] - mu) / sigma * g[j] + b[j]);
            }
        }
        let out = Tensor::matrix(rows, d, vals)?;
        Ok(self.push(out, Op::LayerNormRows { x, gain, bias, eps }))
    }

    pub fn gather_rows(&mut self, x: NodeId, ids: Vec<usize>) -> NumResult<NodeId> {
        let xv = self.value(x);
        if !xv.is_matrix() {
            return Err(NumError::contract("gather_rows", "expected matrix"));
        }
        if ids.is_empty() {
            return Err(NumError::contract("gather_rows", "empty id list"));
        }
        let rows = xv.rows();
        let d = xv.cols();
        let mut vals = Vec::with_capacity(ids.len() * d);
        for &i in &ids {
            if i >= rows {
                return Err(NumError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    len: rows,
                });
            }
            vals.extend_from_slice(xv.row_slice(i));
        }
        let out = Tensor::matrix(ids.len(), d, vals)?;
        Ok(self.push(out, Op::GatherRows(x, ids)))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NumResult<NodeId> {
        if parts.is_empty() {
            return Err(NumError::contract("concat_rows", "empty part list"));
        }
        let d = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut vals = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            if !pv.is_matrix() || pv.cols() != d {
                return Err(NumError::ShapeMismatch {
                    op: "concat_rows",
                    left: vec![rows, d],
                    right: pv.shape().to_vec(),
                });
            }
            rows += pv.rows();
            vals.extend_from_slice(pv.values());
        }
        let out = Tensor::matrix(rows, d, vals)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NumResult<NodeId> {
        if parts.is_empty() {
            return Err(NumError::contract("concat_cols", "empty part list"));
        }
        let rows = self.value(parts[0]).rows();
        let mut width = 0;
        for &p in parts {
            let pv = self.value(p);
            if !pv.is_matrix() || pv.rows() != rows {
                return Err(NumError::ShapeMismatch {
                    op: "concat_cols",
                    left: vec![rows, width],
                    right: pv.shape().to_vec(),
                });
            }
            width += pv.cols();
        }
        let mut vals = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                vals.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let out = Tensor::matrix(rows, width, vals)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NumResult<NodeId> {
        let xv = self.value(x);
        if !xv.is_matrix() || len == 0 || start + len > xv.cols() {
            return Err(NumError::contract(
                "slice_cols",
                format!(
                    "cols {start}..{} out of shape {:?}",
                    start + len,
                    xv.shape()
                ),
            ));
        }
        let rows = xv.rows();
        let mut vals = Vec::with_capacity(rows * len);
        for r in 0..rows {
            vals.extend_from_slice(&xv.row_slice(r)[start..start + len]);
        }
        let out = Tensor::matrix(rows, len, vals)?;
        Ok(self.push(out, Op::SliceCols { x, start, len }))
    }

    /// Extracts row `i` as a `[1×d]` matrix.
    pub fn row(&mut self, x: NodeId, i: usize) -> NumResult<NodeId> {
        let xv = self.value(x);
        if !xv.is_matrix() {
            return Err(NumError::contract("row", "expected matrix"));
        }
        if i >= xv.rows() {
            return Err(NumError::IndexOutOfRange {
                op: "row",
                index: i,
                len: xv.rows(),
            });
        }
        let out = Tensor::matrix(1, xv.cols(), xv.row_slice(i).to_vec())?;
        Ok(self.push(out, Op::Row(x, i)))
    }

    /// Mean of the listed rows as `[1×d]`.
    pub fn mean_rows(&mut self, x: NodeId, rows: Vec<usize>) -> NumResult<NodeId> {
        let xv = self.value(x);
        if !xv.is_matrix() {
            return Err(NumError::contract("mean_rows", "expected matrix"));
        }
        if rows.is_empty() {
            return Err(NumError::contract("mean_rows", "empty row list"));
        }
        let d = xv.cols();
        let mut acc = vec![0.0; d];
        for &r in &rows {
            if r >= xv.rows() {
                return Err(NumError::IndexOutOfRange {
                    op: "mean_rows",
                    index: r,
                    len: xv.rows(),
                });
            }
            for (a, v) in acc.iter_mut().zip(xv.row_slice(r)) {
                *a += v;
            }
        }
        let inv = 1.0 / rows.len() as f64;
        for a in &mut acc {
            *a *= inv;
        }
        let out = Tensor::matrix(1, d, acc)?;
        Ok(self.push(out, Op::MeanRows(x, rows)))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> NumResult<NodeId> {
        let xv = self.value(x);
        let n: usize = shape.iter().product();
        if n != xv.len() {
            return Err(NumError::DataLength {
                shape,
                expected: n,
                got: xv.len(),
            });
        }
        let out = Tensor::new(shape, xv.values().to_vec())?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Cosine similarity between every row of `a` and every row of `b`,
    /// producing `[rows(a) × rows(b)]`.
    pub fn cosine_rows(&mut self, a: NodeId, b: NodeId) -> NumResult<NodeId> {
        let av = self.value(a);
        let bv = self.value(b);
        if !av.is_matrix() || !bv.is_matrix() || av.cols() != bv.cols() || av.cols() == 0 {
            return Err(NumError::ShapeMismatch {
                op: "cosine_rows",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let eps = COSINE_EPS;
        let (p, q) = (av.rows(), bv.rows());
        let na: Vec<f64> = (0..p).map(|i| ops::norm(av.row_slice(i)).max(eps)).collect();
        let nb: Vec<f64> = (0..q).map(|j| ops::norm(bv.row_slice(j)).max(eps)).collect();
        let mut vals = Vec::with_capacity(p * q);
        for i in 0..p {
            let ar = av.row_slice(i);
            for j in 0..q {
                let c = ops::dot(ar, bv.row_slice(j)) / (na[i] * nb[j]);
                vals.push(c.clamp(-1.0, 1.0));
            }
        }
        let out = Tensor::matrix(p, q, vals)?;
        Ok(self.push(out, Op::CosineRows { a, b, eps }))
    }

    /// Per-row maximum as a length-p vector.
    pub fn row_max(&mut self, x: NodeId) -> NumResult<NodeId> {
        let xv = self.value(x);
        if !xv.is_matrix() || xv.cols() == 0 {
            return Err(NumError::contract("row_max", "expected nonempty matrix"));
        }
        let vals: Vec<f64> = (0..xv.rows())
            .map(|r| xv.row_slice(r)[argmax(xv.row_slice(r))])
            .collect();
        let out = Tensor::vector(vals);
        Ok(self.push(out, Op::RowMax(x)))
    }

    /// Sum of the `k` largest entries of a vector (k is capped at the length).
    pub fn topk_sum(&mut self, x: NodeId, k: usize) -> NumResult<NodeId> {
        let xv = self.value(x);
        if xv.shape().len() != 1 || xv.is_empty() {
            return Err(NumError::contract("topk_sum", "expected nonempty vector"));
        }
        if k == 0 {
            return Err(NumError::contract("topk_sum", "k must be >= 1"));
        }
        let sel = topk_indices(xv.values(), k);
        let s: f64 = sel.iter().map(|&i| xv.values()[i]).sum();
        Ok(self.push(Tensor::scalar(s), Op::TopKSum(x, k)))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).values().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    /// Packs scalar nodes into one vector node.
    pub fn stack_scalars(&mut self, parts: &[NodeId]) -> NumResult<NodeId> {
        if parts.is_empty() {
            return Err(NumError::contract("stack_scalars", "empty part list"));
        }
        let mut vals = Vec::with_capacity(parts.len());
        for &p in parts {
            vals.push(self.value(p).item()?);
        }
        Ok(self.push(Tensor::vector(vals), Op::StackScalars(parts.to_vec())))
    }

    /// InfoNCE over a scalar positive and an optional vector of negatives.
    pub fn info_nce_node(
        &mut self,
        pos: NodeId,
        negs: Option<NodeId>,
        temp: f64,
    ) -> NumResult<NodeId> {
        let p = self.value(pos).item()?;
        let loss = match negs {
            Some(n) => {
                let nv = self.value(n);
                if nv.shape().len() != 1 {
                    return Err(NumError::contract("info_nce", "negatives must be a vector"));
                }
                ops::info_nce(p, nv.values(), temp)?
            }
            None => ops::info_nce(p, &[], temp)?,
        };
        Ok(self.push(Tensor::scalar(loss), Op::InfoNce { pos, negs, temp }))
    }

    /// Cross-entropy of a logit vector against a target index.
    pub fn cross_entropy_node(&mut self, logits: NodeId, target: usize) -> NumResult<NodeId> {
        let lv = self.value(logits);
        if lv.shape().len() != 1 {
            return Err(NumError::contract("cross_entropy", "logits must be a vector"));
        }
        let loss = ops::cross_entropy(lv.values(), target)?;
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, target }))
    }

    /// `KL(target ‖ softmax(scores / temp))` with `target` held constant.
    pub fn kl_fixed_target(
        &mut self,
        target: Vec<f64>,
        scores: NodeId,
        temp: f64,
    ) -> NumResult<NodeId> {
        ops::check_temperature("kl_fixed_target", temp)?;
        let sv = self.value(scores);
        if sv.shape().len() != 1 || sv.len() != target.len() || target.is_empty() {
            return Err(NumError::ShapeMismatch {
                op: "kl_fixed_target",
                left: vec![target.len()],
                right: sv.shape().to_vec(),
            });
        }
        if target.iter().any(|&p| !(0.0..=1.0 + 1e-9).contains(&p)) {
            return Err(NumError::contract("kl_fixed_target", "target is not a distribution"));
        }
        let scaled: Vec<f64> = sv.values().iter().map(|&s| s / temp).collect();
        let lse = ops::logsumexp(&scaled);
        let mut loss = 0.0;
        for (p, s) in target.iter().zip(&scaled) {
            if *p > 0.0 {
                loss += p * (p.ln() - (s - lse));
            }
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::KlFixedTarget { target, scores, temp },
        ))
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar root; parameter gradients accumulate
    /// additively into `store`.
    pub fn backward(&self, root: NodeId, store: &mut ParamStore) -> NumResult<()> {
        if !self.value(root).is_scalar() {
            return Err(NumError::contract(
                "backward",
                format!("root must be scalar, got shape {:?}", self.value(root).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Input => {}
                Op::Param(name) => store.accumulate_grad(name, &g)?,
                Op::Add(a, b) => {
                    add_grad(&mut grads, *a, &g, self.value(*a).shape());
                    add_grad(&mut grads, *b, &g, self.value(*b).shape());
                }
                Op::AddBias(x, bias) => {
                    add_grad(&mut grads, *x, &g, self.value(*x).shape());
                    let cols = g.cols();
                    let mut db = vec![0.0; cols];
                    for r in 0..g.rows() {
                        for (d, v) in db.iter_mut().zip(g.row_slice(r)) {
                            *d += v;
                        }
                    }
                    add_grad_values(&mut grads, *bias, &db, self.value(*bias).shape());
                }
                Op::Scale(x, c) => {
                    let dv: Vec<f64> = g.values().iter().map(|v| v * c).collect();
                    add_grad_values(&mut grads, *x, &dv, self.value(*x).shape());
                }
                Op::AddScaled(terms) => {
                    let gv = g.values()[0];
                    for (id, w) in terms {
                        add_grad_values(&mut grads, *id, &[gv * w], self.value(*id).shape());
                    }
                }
                Op::MatMul(a, b) => {
                    let da = ops::matmul_nt(&g, self.value(*b))?;
                    let db = ops::matmul_tn(self.value(*a), &g)?;
                    add_grad(&mut grads, *a, &da, self.value(*a).shape());
                    add_grad(&mut grads, *b, &db, self.value(*b).shape());
                }
                Op::MatMulNT(a, b) => {
                    let da = ops::matmul(&g, self.value(*b))?;
                    let db = ops::matmul_tn(&g, self.value(*a))?;
                    add_grad(&mut grads, *a, &da, self.value(*a).shape());
                    add_grad(&mut grads, *b, &db, self.value(*b).shape());
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let dv: Vec<f64> = g
                        .values()
                        .iter()
                        .zip(xv.values())
                        .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                        .collect();
                    add_grad_values(&mut grads, *x, &dv, xv.shape());
                }
                Op::Tanh(x) => {
                    let y = &self.nodes[i].value;
                    let dv: Vec<f64> = g
                        .values()
                        .iter()
                        .zip(y.values())
                        .map(|(gv, &y)| gv * (1.0 - y * y))
                        .collect();
                    add_grad_values(&mut grads, *x, &dv, self.value(*x).shape());
                }
                Op::SoftmaxRows(x, temp) => {
                    let y = &self.nodes[i].value;
                    let (r, c) = (y.rows(), y.cols());
                    let mut dv = vec![0.0; r * c];
                    for row in 0..r {
                        let yr = y.row_slice(row);
                        let gr = g.row_slice(row);
                        let inner: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for j in 0..c {
                            dv[row * c + j] = yr[j] * (gr[j] - inner) / temp;
                        }
                    }
                    add_grad_values(&mut grads, *x, &dv, self.value(*x).shape());
                }
                Op::LayerNormRows { x, gain, bias, eps } => {
                    let xv = self.value(*x);
                    let gv = self.value(*gain);
                    let d = xv.cols();
                    let mut dx = vec![0.0; xv.len()];
                    let mut dgain = vec![0.0; d];
                    let mut dbias = vec![0.0; d];
                    for r in 0..xv.rows() {
                        let row = xv.row_slice(r);
                        let grow = g.row_slice(r);
                        let (mu, sigma) = row_moments(row, *eps);
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mu) / sigma).collect();
                        let dxhat: Vec<f64> =
                            grow.iter().zip(gv.values()).map(|(g, w)| g * w).collect();
                        let mean_dxhat: f64 = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dxhat_xhat: f64 =
                            dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dgain[j] += grow[j] * xhat[j];
                            dbias[j] += grow[j];
                            dx[r * d + j] =
                                (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat) / sigma;
                        }
                    }
                    add_grad_values(&mut grads, *x, &dx, xv.shape());
                    add_grad_values(&mut grads, *gain, &dgain, self.value(*gain).shape());
                    add_grad_values(&mut grads, *bias, &dbias, self.value(*bias).shape());
                }
                Op::GatherRows(x, ids) => {
                    let xv = self.value(*x);
                    let d = xv.cols();
                    let mut dv = vec![0.0; xv.len()];
                    for (out_row, &src) in ids.iter().enumerate() {
                        for (acc, v) in dv[src * d..(src + 1) * d].iter_mut().zip(g.row_slice(out_row)) {
                            *acc += v;
                        }
                    }
                    add_grad_values(&mut grads, *x, &dv, xv.shape());
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        let d = self.value(p).cols();
                        let dv = g.values()[offset * d..(offset + rows) * d].to_vec();
                        add_grad_values(&mut grads, p, &dv, self.value(p).shape());
                        offset += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let rows = g.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let mut dv = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dv.extend_from_slice(&g.row_slice(r)[offset..offset + w]);
                        }
                        add_grad_values(&mut grads, p, &dv, self.value(p).shape());
                        offset += w;
                    }
                }
                Op::SliceCols { x, start, len } => {
                    let xv = self.value(*x);
                    let cols = xv.cols();
                    let mut dv = vec![0.0; xv.len()];
                    for r in 0..g.rows() {
                        for j in 0..*len {
                            dv[r * cols + start + j] += g.row_slice(r)[j];
                        }
                    }
                    add_grad_values(&mut grads, *x, &dv, xv.shape());
                }
                Op::Row(x, row) => {
                    let xv = self.value(*x);
                    let d = xv.cols();
                    let mut dv = vec![0.0; xv.len()];
                    dv[row * d..(row + 1) * d].copy_from_slice(g.values());
                    add_grad_values(&mut grads, *x, &dv, xv.shape());
                }
                Op::MeanRows(x, rows) => {
                    let xv = self.value(*x);
                    let d = xv.cols();
                    let inv = 1.0 / rows.len() as f64;
                    let mut dv = vec![0.0; xv.len()];
                    for &r in rows {
                        for (acc, v) in dv[r * d..(r + 1) * d].iter_mut().zip(g.values()) {
                            *acc += v * inv;
                        }
                    }
                    add_grad_values(&mut grads, *x, &dv, xv.shape());
                }
                Op::Reshape(x) => {
                    add_grad_values(&mut grads, *x, g.values(), self.value(*x).shape());
                }
                Op::CosineRows { a, b, eps } => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let c = &self.nodes[i].value;
                    let (p, q) = (av.rows(), bv.rows());
                    let d = av.cols();
                    let na: Vec<f64> = (0..p).map(|r| ops::norm(av.row_slice(r))).collect();
                    let nb: Vec<f64> = (0..q).map(|r| ops::norm(bv.row_slice(r))).collect();
                    let mut da = vec![0.0; av.len()];
                    let mut db = vec![0.0; bv.len()];
                    for x in 0..p {
                        let ax = av.row_slice(x);
                        let nax = na[x].max(*eps);
                        let mut coef_a = 0.0; // Σ_y g·c, scales the -a_x/na² term
                        for y in 0..q {
                            let gxy = g.values()[x * q + y];
                            if gxy == 0.0 {
                                continue;
                            }
                            let nby = nb[y].max(*eps);
                            let cxy = c.values()[x * q + y];
                            let byr = bv.row_slice(y);
                            let inv = 1.0 / (nax * nby);
                            for j in 0..d {
                                da[x * d + j] += gxy * byr[j] * inv;
                            }
                            if nb[y] >= *eps {
                                let scale = gxy * cxy / (nby * nby);
                                for j in 0..d {
                                    db[y * d + j] -= scale * byr[j];
                                }
                            }
                            let scale = gxy * inv;
                            for j in 0..d {
                                db[y * d + j] += scale * ax[j];
                            }
                            coef_a += gxy * cxy;
                        }
                        if na[x] >= *eps && coef_a != 0.0 {
                            let scale = coef_a / (nax * nax);
                            for j in 0..d {
                                da[x * d + j] -= scale * ax[j];
                            }
                        }
                    }
                    add_grad_values(&mut grads, *a, &da, av.shape());
                    add_grad_values(&mut grads, *b, &db, bv.shape());
                }
                Op::RowMax(x) => {
                    let xv = self.value(*x);
                    let c = xv.cols();
                    let mut dv = vec![0.0; xv.len()];
                    for r in 0..xv.rows() {
                        let arg = argmax(xv.row_slice(r));
                        dv[r * c + arg] += g.values()[r];
                    }
                    add_grad_values(&mut grads, *x, &dv, xv.shape());
                }
                Op::TopKSum(x, k) => {
                    let xv = self.value(*x);
                    let mut dv = vec![0.0; xv.len()];
                    for idx in topk_indices(xv.values(), *k) {
                        dv[idx] += g.values()[0];
                    }
                    add_grad_values(&mut grads, *x, &dv, xv.shape());
                }
                Op::SumAll(x) => {
                    let xv = self.value(*x);
                    let dv = vec![g.values()[0]; xv.len()];
                    add_grad_values(&mut grads, *x, &dv, xv.shape());
                }
                Op::StackScalars(parts) => {
                    for (j, &p) in parts.iter().enumerate() {
                        add_grad_values(&mut grads, p, &[g.values()[j]], self.value(p).shape());
                    }
                }
                Op::InfoNce { pos, negs, temp } => {
                    let Some(negs) = negs else { continue }; // constant-zero loss
                    let pv = self.value(*pos).values()[0];
                    let nv = self.value(*negs).values();
                    let mut logits = Vec::with_capacity(nv.len() + 1);
                    logits.push(pv / temp);
                    logits.extend(nv.iter().map(|v| v / temp));
                    let probs = ops::softmax(&logits, 1.0)?;
                    let gv = g.values()[0];
                    add_grad_values(
                        &mut grads,
                        *pos,
                        &[gv * (probs[0] - 1.0) / temp],
                        self.value(*pos).shape(),
                    );
                    let dn: Vec<f64> = probs[1..].iter().map(|p| gv * p / temp).collect();
                    add_grad_values(&mut grads, *negs, &dn, self.value(*negs).shape());
                }
                Op::CrossEntropy { logits, target } => {
                    let lv = self.value(*logits);
                    let probs = ops::softmax(lv.values(), 1.0)?;
                    let gv = g.values()[0];
                    let dv: Vec<f64> = probs
                        .iter()
                        .enumerate()
                        .map(|(j, p)| gv * (p - if j == *target { 1.0 } else { 0.0 }))
                        .collect();
                    add_grad_values(&mut grads, *logits, &dv, lv.shape());
                }
                Op::KlFixedTarget { target, scores, temp } => {
                    let sv = self.value(*scores);
                    let scaled: Vec<f64> = sv.values().iter().map(|&s| s / temp).collect();
                    let q = ops::softmax(&scaled, 1.0)?;
                    let gv = g.values()[0];
                    let dv: Vec<f64> = q
                        .iter()
                        .zip(target)
                        .map(|(q, p)| gv * (q - p) / temp)
                        .collect();
                    add_grad_values(&mut grads, *scores, &dv, sv.shape());
                }
            }
        }
        Ok(())
    }
}

/// First index of the maximum value (lowest index wins ties).
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `k` largest values, ties broken toward the lowest index;
/// `k` is capped at the length.
fn topk_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| values[j].total_cmp(&values[i]).then(i.cmp(&j)));
    idx.truncate(k.min(values.len()));
    idx
}

fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mu = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
    (mu, (var + eps).sqrt())
}

fn add_grad(grads: &mut [Option<Tensor>], id: NodeId, delta: &Tensor, shape: &[usize]) {
    add_grad_values(grads, id, delta.values(), shape);
}

fn add_grad_values(grads: &mut [Option<Tensor>], id: NodeId, delta: &[f64], shape: &[usize]) {
    let slot = &mut grads[id.0];
    match slot {
        Some(t) => {
            for (a, b) in t.values_mut().iter_mut().zip(delta) {
                *a += b;
            }
        }
        None => {
            let mut t = Tensor::zeros(shape.to_vec());
            t.values_mut().copy_from_slice(delta);
            *slot = Some(t);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::check::grad_check;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        let vals: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape, vals).unwrap()
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap()).unwrap();
        let mut g = Graph::new();
        let x = g.param(&store, "x").unwrap();
        let loss = g.matmul_nt(x, x).unwrap(); // Σ x² as [1×1]
        let loss = g.reshape(loss, vec![1]).unwrap();
        assert_eq!(g.value(loss).item().unwrap(), 5.0);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad("x").unwrap().values(), &[2.0, 4.0]);
    }

    #[test]
    fn unused_parameter_gets_exactly_zero_grad() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::scalar(3.0)).unwrap();
        store.insert("unused", Tensor::scalar(9.0)).unwrap();
        let mut g = Graph::new();
        let x = g.param(&store, "x").unwrap();
        let loss = g.scale(x, 2.0);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad("x").unwrap().values(), &[2.0]);
        assert_eq!(store.grad("unused").unwrap().values(), &[0.0]);
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::scalar(1.5)).unwrap();
        for _ in 0..2 {
            let mut g = Graph::new();
            let x = g.param(&store, "x").unwrap();
            let loss = g.scale(x, 3.0);
            g.backward(loss, &mut store).unwrap();
        }
        assert_eq!(store.grad("x").unwrap().values(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let mut g = Graph::new();
        let x = g.param(&store, "x").unwrap();
        assert!(matches!(
            g.backward(x, &mut store),
            Err(NumError::Contract { op: "backward", .. })
        ));
    }

    /// Every tape op, exercised through a scalar loss, must match central
    /// finite differences. Random continuous inputs keep the samples away
    /// from relu/max kinks.
    #[test]
    fn all_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // matmul / add_bias / relu / tanh chain.
        let mut store = ParamStore::new();
        store.insert("w1", rand_tensor(&mut rng, vec![3, 4])).unwrap();
        store.insert("b1", rand_tensor(&mut rng, vec![4])).unwrap();
        store.insert("w2", rand_tensor(&mut rng, vec![4, 2])).unwrap();
        store.insert("x", rand_tensor(&mut rng, vec![2, 3])).unwrap();
        let report = grad_check(
            |g, s| {
                let x = g.param(s, "x")?;
                let w1 = g.param(s, "w1")?;
                let b1 = g.param(s, "b1")?;
                let w2 = g.param(s, "w2")?;
                let h = g.linear(x, w1, b1)?;
                let h = g.tanh(h);
                let z = g.matmul(h, w2)?;
                let z = g.relu(z);
                Ok(g.sum_all(z))
            },
            &mut store,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "{report}");

        // softmax_rows + layer_norm + gather/mean/concat/slice plumbing.
        let mut store = ParamStore::new();
        store.insert("tab", rand_tensor(&mut rng, vec![5, 6])).unwrap();
        store.insert("gain", rand_tensor(&mut rng, vec![6])).unwrap();
        store.insert("bias", rand_tensor(&mut rng, vec![6])).unwrap();
        let report = grad_check(
            |g, s| {
                let tab = g.param(s, "tab")?;
                let gain = g.param(s, "gain")?;
                let bias = g.param(s, "bias")?;
                let rows = g.gather_rows(tab, vec![0, 2, 4, 2])?;
                let normed = g.layer_norm_rows(rows, gain, bias, 1e-5)?;
                let sm = g.softmax_rows(normed, 0.7)?;
                let left = g.slice_cols(sm, 0, 3)?;
                let right = g.slice_cols(sm, 3, 3)?;
                let cat = g.concat_cols(&[left, right])?;
                let pooled = g.mean_rows(cat, vec![0, 1, 3])?;
                let one_row = g.row(cat, 2)?;
                let stacked = g.concat_rows(&[pooled, one_row])?;
                Ok(g.sum_all(stacked))
            },
            &mut store,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "{report}");

        // cosine_rows + row_max + topk_sum + info_nce (argmax margins are
        // generic for random continuous inputs).
        let mut store = ParamStore::new();
        store.insert("a", rand_tensor(&mut rng, vec![3, 5])).unwrap();
        store.insert("b", rand_tensor(&mut rng, vec![4, 5])).unwrap();
        let report = grad_check(
            |g, s| {
                let a = g.param(s, "a")?;
                let b = g.param(s, "b")?;
                let c = g.cosine_rows(a, b)?;
                let maxes = g.row_max(c)?;
                let pos = g.topk_sum(maxes, 2)?;
                let flat = g.reshape(c, vec![12])?;
                let loss = g.info_nce_node(pos, Some(flat), 0.5)?;
                Ok(loss)
            },
            &mut store,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "{report}");

        // cross_entropy + kl_fixed_target + scale/add_scaled/stack.
        let mut store = ParamStore::new();
        store.insert("logits", rand_tensor(&mut rng, vec![6])).unwrap();
        store.insert("scores", rand_tensor(&mut rng, vec![4])).unwrap();
        let report = grad_check(
            |g, s| {
                let logits = g.param(s, "logits")?;
                let scores = g.param(s, "scores")?;
                let ce = g.cross_entropy_node(logits, 2)?;
                let kl = g.kl_fixed_target(vec![0.1, 0.2, 0.3, 0.4], scores, 0.25)?;
                let kl2 = g.scale(kl, 0.5);
                let both = g.stack_scalars(&[ce, kl2])?;
                let top = g.topk_sum(both, 2)?;
                g.add_scaled(&[(top, 0.9), (ce, 0.1)])
            },
            &mut store,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "{report}");
    }

    #[test]
    fn row_max_ties_send_gradient_to_lowest_index() {
        let mut store = ParamStore::new();
        store
            .insert("x", Tensor::matrix(1, 3, vec![0.5, 0.5, 0.1]).unwrap())
            .unwrap();
        let mut g = Graph::new();
        let x = g.param(&store, "x").unwrap();
        let m = g.row_max(x).unwrap();
        let loss = g.sum_all(m);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad("x").unwrap().values(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn topk_sum_caps_k_and_breaks_ties_low() {
        let mut store = ParamStore::new();
        store
            .insert("x", Tensor::vector(vec![0.3, 0.9, 0.9, 0.1]))
            .unwrap();
        let mut g = Graph::new();
        let x = g.param(&store, "x").unwrap();
        let s = g.topk_sum(x, 10).unwrap();
        assert!((g.value(s).item().unwrap() - 2.2).abs() < 1e-12);
        let s3 = g.topk_sum(x, 3).unwrap();
        assert!((g.value(s3).item().unwrap() - 2.1).abs() < 1e-12);
        g.backward(s3, &mut store).unwrap();
        assert_eq!(store.grad("x").unwrap().values(), &[1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn info_nce_node_with_no_negatives_is_constant_zero() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::scalar(0.8)).unwrap();
        let mut g = Graph::new();
        let p = g.param(&store, "p").unwrap();
        let loss = g.info_nce_node(p, None, 0.1).unwrap();
        assert_eq!(g.value(loss).item().unwrap(), 0.0);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad("p").unwrap().values(), &[0.0]);
    }

    #[test]
    fn kl_fixed_target_zero_when_distributions_match() {
        // scores whose softmax at temp 1 equals the target distribution.
        let target = vec![0.1, 0.2, 0.3, 0.4];
        let scores: Vec<f64> = target.iter().map(|p: &f64| p.ln()).collect();
        let mut g = Graph::new();
        let s = g.input(Tensor::vector(scores));
        let kl = g.kl_fixed_target(target, s, 1.0).unwrap();
        assert!(g.value(kl).item().unwrap().abs() < 1e-12);
    }

    #[test]
    fn single_proposal_kl_is_exactly_zero() {
        let mut g = Graph::new();
        let s = g.input(Tensor::vector(vec![0.37]));
        let kl = g.kl_fixed_target(vec![1.0], s, 0.1).unwrap();
        assert_eq!(g.value(kl).item().unwrap(), 0.0);
    }
}
