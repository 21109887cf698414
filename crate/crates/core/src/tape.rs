//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation applied to its nodes. Calling
//! [`Graph::backward`] walks the record in reverse and returns a gradient for
//! each node that (transitively) depends on a trainable parameter, or for the
//! explicitly requested target nodes when using [`Graph::backward_to`].
//! Parameters are borrowed from a [`ParamStore`]; graphs never mutate them.

use std::collections::HashMap;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};

pub type Mat = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors, kept in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new tensor. Panics on duplicate names, which is a model
    /// construction bug rather than a runtime condition.
    pub fn insert(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// Block structure of a batched multi-head attention call.
///
/// Queries are `batch * q_len` rows, keys/values `batch * k_len` rows; row
/// blocks belong to one sample each. Keys at or beyond `key_valid[b]` are
/// masked out for sample `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnLayout {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    pub key_valid: Vec<usize>,
    pub causal: bool,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    MatMulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    AddTiled(NodeId, NodeId),
    Scale(NodeId, f64),
    Inner(NodeId, NodeId),
    Axpby {
        a: NodeId,
        b: NodeId,
        wa: f64,
        wb: f64,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    QuickGelu(NodeId),
    Gather {
        x: NodeId,
        rows: Vec<usize>,
    },
    RowNormalize {
        x: NodeId,
        norms: Vec<f64>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        layout: AttnLayout,
        probs: Vec<Mat>,
    },
    SdmKl {
        logits: NodeId,
        probs: Mat,
        log_ratio: Mat,
        row_loss: Vec<f64>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        norm: f64,
        probs: Mat,
    },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNT(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::AddTiled(a, b)
            | Op::Inner(a, b)
            | Op::Axpby { a, b, .. } => vec![*a, *b],
            Op::Scale(x, _) | Op::QuickGelu(x) => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Gather { x, .. } | Op::RowNormalize { x, .. } => vec![*x],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::SdmKl { logits, .. } | Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    op: Op,
    // `None` for parameter nodes, whose value lives in the store.
    value: Option<Mat>,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    nodes: Vec<Option<Mat>>,
    params: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn node(&self, id: NodeId) -> Option<&Mat> {
        self.nodes[id.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Mat> {
        self.params.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn into_params(self) -> Vec<Option<Mat>> {
        self.params
    }

    pub fn has_param_grads(&self) -> bool {
        self.params.iter().any(|g| g.is_some())
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_K: f64 = 1.702;

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Mat) -> NodeId {
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> ArrayView2<'_, f64> {
        match &self.nodes[id.0].value {
            Some(v) => v.view(),
            None => match self.nodes[id.0].op {
                Op::Param(p) => self.params.get(p).view(),
                _ => unreachable!("only parameter nodes borrow their value"),
            },
        }
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id)[[0, 0]]
    }

    /// Post-softmax attention maps of an attention node, one per
    /// `(sample, head)` in sample-major order.
    pub fn attention_probs(&self, id: NodeId) -> Option<(&AttnLayout, &[Mat])> {
        match &self.nodes[id.0].op {
            Op::Attention { layout, probs, .. } => Some((layout, probs)),
            _ => None,
        }
    }

    pub fn leaf(&mut self, value: Mat) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        let n = NodeId(self.nodes.len() - 1);
        self.param_nodes.insert(id, n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(&self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(Op::MatMulNT(a, b), v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.value(a) + &self.value(b);
        self.push(Op::Add(a, b), v)
    }

    /// Adds a `1 × c` row to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> NodeId {
        let v = &self.value(x) + &self.value(row);
        self.push(Op::AddRow(x, row), v)
    }

    /// Adds an `r × c` block to each consecutive `r`-row block of `x`.
    pub fn add_tiled(&mut self, x: NodeId, tile: NodeId) -> NodeId {
        let t = self.value(tile);
        let r = t.nrows();
        let mut v = self.value(x).to_owned();
        assert_eq!(v.nrows() % r, 0, "tile rows must divide input rows");
        for mut block in v.axis_chunks_iter_mut(Axis(0), r) {
            block += &t;
        }
        self.push(Op::AddTiled(x, tile), v)
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let h = self.matmul(x, w);
        self.add_row(h, b)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let v = &self.value(x) * factor;
        self.push(Op::Scale(x, factor), v)
    }

    /// Frobenius inner product `Σ_ij a_ij b_ij` as a `1 × 1` node.
    pub fn inner(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = (&self.value(a) * &self.value(b)).sum();
        self.push(Op::Inner(a, b), Mat::from_elem((1, 1), v))
    }

    /// `wa·a + wb·b` for same-shape inputs.
    pub fn axpby(&mut self, a: NodeId, wa: f64, b: NodeId, wb: f64) -> NodeId {
        let v = &self.value(a) * wa + &self.value(b) * wb;
        self.push(Op::Axpby { a, b, wa, wb }, v)
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = self.value(x);
        let cols = xv.ncols() as f64;
        let mut xhat = xv.to_owned();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / cols;
            row -= mean;
            let var = row.iter().map(|a| a * a).sum::<f64>() / cols;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row *= inv;
            inv_std.push(inv);
        }
        let v = &xhat * &self.value(gamma) + &self.value(beta);
        self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            v,
        )
    }

    /// `x · σ(1.702 x)`
    pub fn quick_gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(|a| a * sigmoid(GELU_K * a));
        self.push(Op::QuickGelu(x), v)
    }

    pub fn gather_rows(&mut self, x: NodeId, rows: Vec<usize>) -> NodeId {
        let v = self.value(x).select(Axis(0), &rows);
        self.push(Op::Gather { x, rows }, v)
    }

    /// Scales every row to unit Euclidean norm. Rows with zero norm are a
    /// degenerate input.
    pub fn row_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let mut v = self.value(x).to_owned();
        let mut norms = Vec::with_capacity(v.nrows());
        for (i, mut row) in v.rows_mut().into_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::Degenerate(format!(
                    "row {i} has norm {n}; cannot normalize"
                )));
            }
            row /= n;
            norms.push(n);
        }
        Ok(self.push(Op::RowNormalize { x, norms }, v))
    }

    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        layout: AttnLayout,
    ) -> Result<NodeId> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        if layout.heads == 0 || d % layout.heads != 0 {
            return Err(Error::Shape(format!(
                "width {d} not divisible by {} heads",
                layout.heads
            )));
        }
        if qv.nrows() != layout.batch * layout.q_len
            || kv.nrows() != layout.batch * layout.k_len
            || vv.nrows() != kv.nrows()
            || kv.ncols() != d
            || vv.ncols() != d
            || layout.key_valid.len() != layout.batch
        {
            return Err(Error::Shape(format!(
                "attention inputs q {:?}, k {:?}, v {:?} do not match layout {layout:?}",
                qv.dim(),
                kv.dim(),
                vv.dim()
            )));
        }
        if let Some(b) = layout
            .key_valid
            .iter()
            .position(|&n| n == 0 || n > layout.k_len)
        {
            return Err(Error::Shape(format!(
                "sample {b} has {} valid keys of {}",
                layout.key_valid[b], layout.k_len
            )));
        }
        let dh = d / layout.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Mat::zeros((qv.nrows(), d));
        let mut probs = Vec::with_capacity(layout.batch * layout.heads);
        for b in 0..layout.batch {
            let qr = b * layout.q_len..(b + 1) * layout.q_len;
            let kr = b * layout.k_len..(b + 1) * layout.k_len;
            let valid = layout.key_valid[b];
            for h in 0..layout.heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = qv.slice(s![qr.clone(), cols.clone()]);
                let kh = kv.slice(s![kr.clone(), cols.clone()]);
                let vh = vv.slice(s![kr.clone(), cols.clone()]);
                let mut p = qh.dot(&kh.t());
                for (i, mut row) in p.rows_mut().into_iter().enumerate() {
                    let limit = if layout.causal { valid.min(i + 1) } else { valid };
                    let mut max = f64::NEG_INFINITY;
                    for a in row.iter_mut().take(limit) {
                        *a *= scale;
                        max = max.max(*a);
                    }
                    let mut sum = 0.0;
                    for (j, a) in row.iter_mut().enumerate() {
                        if j < limit {
                            *a = (*a - max).exp();
                            sum += *a;
                        } else {
                            *a = 0.0;
                        }
                    }
                    row /= sum;
                }
                out.slice_mut(s![qr.clone(), cols]).assign(&p.dot(&vh));
                probs.push(p);
            }
        }
        Ok(self.push(
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
            out,
        ))
    }

    /// Similarity-distribution-matching KL term over a logits matrix whose
    /// rows are anchors: `(1/B) Σ_i Σ_j p_ij (log p_ij − log(target_ij + eps))`
    /// with `p` the row softmax of `logits`.
    pub fn sdm_kl(&mut self, logits: NodeId, target: &Mat, eps: f64) -> Result<NodeId> {
        let z = self.value(logits);
        if z.dim() != target.dim() {
            return Err(Error::Shape(format!(
                "logits {:?} vs target {:?}",
                z.dim(),
                target.dim()
            )));
        }
        let rows = z.nrows() as f64;
        let log_probs = log_softmax_rows(z);
        let probs = log_probs.mapv(f64::exp);
        let mut log_ratio = log_probs;
        Zip::from(&mut log_ratio)
            .and(target)
            .for_each(|lr, &q| *lr -= (q + eps).ln());
        let row_loss: Vec<f64> = probs
            .rows()
            .into_iter()
            .zip(log_ratio.rows())
            .map(|(p, f)| p.dot(&f))
            .collect();
        let total = row_loss.iter().sum::<f64>() / rows;
        Ok(self.push(
            Op::SdmKl {
                logits,
                probs,
                log_ratio,
                row_loss,
            },
            Mat::from_elem((1, 1), total),
        ))
    }

    /// `−(1/norm) Σ_i log softmax(logits_i)[targets_i]`
    pub fn cross_entropy(&mut self, logits: NodeId, targets: Vec<usize>, norm: f64) -> Result<NodeId> {
        let z = self.value(logits);
        if z.nrows() != targets.len() {
            return Err(Error::Shape(format!(
                "{} logit rows for {} targets",
                z.nrows(),
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= z.ncols()) {
            return Err(Error::Vocabulary {
                id: t as u32,
                vocab: z.ncols(),
            });
        }
        let log_probs = log_softmax_rows(z);
        let nll: f64 = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -log_probs[[i, t]])
            .sum();
        let probs = log_probs.mapv(f64::exp);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets,
                norm,
                probs,
            },
            Mat::from_elem((1, 1), nll / norm),
        ))
    }

    /// Gradients of the scalar `root` with respect to every node that depends
    /// on a parameter, and to all parameters.
    pub fn backward(&self, root: NodeId) -> Gradients {
        self.run_backward(root, &[], true)
    }

    /// Gradients of `root` with respect to `targets` only. Parameter
    /// gradients are not computed.
    pub fn backward_to(&self, root: NodeId, targets: &[NodeId]) -> Gradients {
        self.run_backward(root, targets, false)
    }

    fn run_backward(&self, root: NodeId, targets: &[NodeId], with_params: bool) -> Gradients {
        assert_eq!(self.value(root).dim(), (1, 1), "backward root must be scalar");
        let n = self.nodes.len();
        let mut requires = vec![false; n];
        for &t in targets {
            requires[t.0] = true;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            requires[i] = requires[i]
                || match node.op {
                    Op::Leaf => false,
                    Op::Param(_) => with_params,
                    ref op => op.inputs().iter().any(|x| requires[x.0]),
                };
        }

        // Only targets and parameters retain their gradient after propagation.
        let mut keep = vec![false; n];
        for &t in targets {
            keep[t.0] = true;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Param(_)) {
                keep[i] = keep[i] || with_params;
            }
        }
        let mut grads: Vec<Option<Mat>> = (0..n).map(|_| None).collect();
        if requires[root.0] {
            grads[root.0] = Some(Mat::ones((1, 1)));
        }

        for i in (0..=root.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let dy_ref = &dy;
            let node = &self.nodes[i];
            let mut acc = |id: NodeId, g: Mat| {
                if requires[id.0] {
                    match &mut grads[id.0] {
                        Some(existing) => *existing += &g,
                        slot @ None => *slot = Some(g),
                    }
                }
            };
            let need = |id: &NodeId| requires[id.0];
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    if need(a) {
                        acc(*a, dy.dot(&self.value(*b).t()));
                    }
                    if need(b) {
                        acc(*b, self.value(*a).t().dot(&dy));
                    }
                }
                Op::MatMulNT(a, b) => {
                    if need(a) {
                        acc(*a, dy.dot(&self.value(*b)));
                    }
                    if need(b) {
                        acc(*b, dy.t().dot(&self.value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    if need(b) {
                        acc(*b, dy_ref.clone());
                    }
                    acc(*a, dy_ref.clone());
                }
                Op::AddRow(x, row) => {
                    if need(row) {
                        acc(*row, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    acc(*x, dy_ref.clone());
                }
                Op::AddTiled(x, tile) => {
                    if need(tile) {
                        let r = self.value(*tile).nrows();
                        let mut dt = Mat::zeros((r, dy.ncols()));
                        for block in dy.axis_chunks_iter(Axis(0), r) {
                            dt += &block;
                        }
                        acc(*tile, dt);
                    }
                    acc(*x, dy_ref.clone());
                }
                Op::Scale(x, f) => acc(*x, dy_ref * *f),
                Op::Inner(a, b) => {
                    let up = dy[[0, 0]];
                    if need(a) {
                        acc(*a, &self.value(*b) * up);
                    }
                    if need(b) {
                        acc(*b, &self.value(*a) * up);
                    }
                }
                Op::Axpby { a, b, wa, wb } => {
                    if need(b) {
                        acc(*b, &dy * *wb);
                    }
                    acc(*a, dy_ref * *wa);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    if need(gamma) {
                        acc(*gamma, (&dy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if need(beta) {
                        acc(*beta, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if need(x) {
                        let dxhat = &dy * &self.value(*gamma);
                        let cols = dxhat.ncols() as f64;
                        let mut dx = Mat::zeros(dxhat.dim());
                        for (r, mut out) in dx.rows_mut().into_iter().enumerate() {
                            let g = dxhat.row(r);
                            let xh = xhat.row(r);
                            let sum_g = g.sum();
                            let sum_gx = g.dot(&xh);
                            let inv = inv_std[r];
                            Zip::from(&mut out).and(&g).and(&xh).for_each(|o, &gi, &xi| {
                                *o = inv / cols * (cols * gi - sum_g - xi * sum_gx);
                            });
                        }
                        acc(*x, dx);
                    }
                }
                Op::QuickGelu(x) => {
                    let mut dx = dy_ref.clone();
                    Zip::from(&mut dx).and(&self.value(*x)).for_each(|g, &a| {
                        let sg = sigmoid(GELU_K * a);
                        *g *= sg + GELU_K * a * sg * (1.0 - sg);
                    });
                    acc(*x, dx);
                }
                Op::Gather { x, rows } => {
                    let mut dx = Mat::zeros(self.value(*x).dim());
                    for (src, &dst) in rows.iter().enumerate() {
                        let mut target = dx.row_mut(dst);
                        target += &dy.row(src);
                    }
                    acc(*x, dx);
                }
                Op::RowNormalize { x, norms } => {
                    let y = node.value.as_ref().expect("normalize output");
                    let mut dx = dy_ref.clone();
                    for (r, mut g) in dx.rows_mut().into_iter().enumerate() {
                        let yr = y.row(r);
                        let proj = yr.dot(&g);
                        Zip::from(&mut g).and(&yr).for_each(|gi, &yi| {
                            *gi = (*gi - yi * proj) / norms[r];
                        });
                    }
                    acc(*x, dx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    layout,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = qv.ncols();
                    let dh = d / layout.heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Mat::zeros(qv.dim());
                    let mut dk = Mat::zeros(kv.dim());
                    let mut dv = Mat::zeros(vv.dim());
                    for b in 0..layout.batch {
                        let qr = b * layout.q_len..(b + 1) * layout.q_len;
                        let kr = b * layout.k_len..(b + 1) * layout.k_len;
                        for h in 0..layout.heads {
                            let cols = h * dh..(h + 1) * dh;
                            let p = &probs[b * layout.heads + h];
                            let dout = dy.slice(s![qr.clone(), cols.clone()]);
                            let vh = vv.slice(s![kr.clone(), cols.clone()]);
                            let mut dp = dout.dot(&vh.t());
                            for (mut drow, prow) in dp.rows_mut().into_iter().zip(p.rows()) {
                                let inner = drow.dot(&prow);
                                Zip::from(&mut drow).and(&prow).for_each(|g, &pi| {
                                    *g = pi * (*g - inner) * scale;
                                });
                            }
                            if need(v) {
                                let mut dst = dv.slice_mut(s![kr.clone(), cols.clone()]);
                                dst += &p.t().dot(&dout);
                            }
                            if need(q) {
                                let kh = kv.slice(s![kr.clone(), cols.clone()]);
                                let mut dst = dq.slice_mut(s![qr.clone(), cols.clone()]);
                                dst += &dp.dot(&kh);
                            }
                            if need(k) {
                                let qh = qv.slice(s![qr.clone(), cols.clone()]);
                                let mut dst = dk.slice_mut(s![kr.clone(), cols]);
                                dst += &dp.t().dot(&qh);
                            }
                        }
                    }
                    acc(*q, dq);
                    acc(*k, dk);
                    acc(*v, dv);
                }
                Op::SdmKl {
                    logits,
                    probs,
                    log_ratio,
                    row_loss,
                } => {
                    let upstream = dy[[0, 0]] / probs.nrows() as f64;
                    let mut dz = probs.clone();
                    for (r, mut row) in dz.rows_mut().into_iter().enumerate() {
                        let lr = log_ratio.row(r);
                        Zip::from(&mut row).and(&lr).for_each(|g, &f| {
                            *g *= (f - row_loss[r]) * upstream;
                        });
                    }
                    acc(*logits, dz);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    norm,
                    probs,
                } => {
                    let mut dz = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        dz[[r, t]] -= 1.0;
                    }
                    dz *= dy[[0, 0]] / *norm;
                    acc(*logits, dz);
                }
            }
            if keep[i] {
                grads[i] = Some(dy);
            }
        }

        let mut params: Vec<Option<Mat>> = (0..self.params.len()).map(|_| None).collect();
        if with_params {
            for (pid, nid) in &self.param_nodes {
                params[pid.0] = grads[nid.0].take();
            }
        }
        Gradients {
            nodes: grads,
            params,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn log_softmax_rows(z: ArrayView2<'_, f64>) -> Mat {
    let mut out = z.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &a| m.max(a));
        let lse = max + row.iter().map(|a| (a - max).exp()).sum::<f64>().ln();
        row -= lse;
    }
    out
}
