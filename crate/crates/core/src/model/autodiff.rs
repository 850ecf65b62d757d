//! Minimal reverse-mode differentiation core.
//!
//! A tape of matrix-valued nodes supporting exactly the operations the
//! foresight model needs: affine maps, masked multi-head softmax attention,
//! layer norm, tanh, row gather/scatter/select, and the loss reductions.
//! No broadcasting rules beyond row-bias addition, no general graph.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::mat::{axpy, dot, Mat};
use crate::scalar::Real;

const LN_EPS: f64 = 1e-5;

/// Named parameter storage; the tape references parameters by index.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    mats: Vec<Mat<T>>,
    names: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            mats: Vec::new(),
            names: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, mat: Mat<T>) -> ParamId {
        self.mats.push(mat);
        self.names.push(name.into());
        ParamId(self.mats.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat<T> {
        &self.mats[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat<T> {
        &mut self.mats[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat<T>)> {
        self.names.iter().map(|s| s.as_str()).zip(&self.mats)
    }

    /// Total scalar count across all parameters.
    pub fn total_len(&self) -> usize {
        self.mats.iter().map(|m| m.rows() * m.cols()).sum()
    }

    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.total_len());
        for m in &self.mats {
            out.extend_from_slice(m.data());
        }
        out
    }

    pub fn assign_from_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.total_len() {
            return Err(Error::shape(format!(
                "flat parameter vector has {} entries, expected {}",
                flat.len(),
                self.total_len()
            )));
        }
        let mut off = 0;
        for m in &mut self.mats {
            let n = m.rows() * m.cols();
            m.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Zero matrices with the same shapes, used as gradient accumulators.
    pub fn zeros_like(&self) -> Vec<Mat<T>> {
        self.mats.iter().map(|m| Mat::zeros(m.rows(), m.cols())).collect()
    }
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Mask plan for the fused attention op: which head belongs to which parity
/// group and, per group, the visible key rows of every query row.
#[derive(Debug)]
pub struct AttnPlan {
    pub n_heads: usize,
    pub head_dim: usize,
    /// Group index (0 or 1) per head.
    pub group_of_head: Vec<usize>,
    /// Per group, per query row: ascending visible key rows.
    pub visibility: [Arc<Vec<Vec<u32>>>; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op<T> {
    Param(ParamId),
    Const,
    Matmul(NodeId, NodeId),
    AddMat(NodeId, NodeId),
    AddRowBias(NodeId, NodeId),
    Scale(NodeId, T),
    Tanh(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        plan: Arc<AttnPlan>,
    },
    GatherRows {
        table: NodeId,
        idx: Arc<Vec<u32>>,
    },
    AssembleRows {
        parts: Vec<(Arc<Vec<u32>>, NodeId)>,
    },
    RowSelect {
        x: NodeId,
        rows: Arc<Vec<u32>>,
    },
    MeanRows(NodeId),
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    Reshape(NodeId),
    L1Mean {
        pred: NodeId,
        target: Arc<Mat<T>>,
    },
    L2GroupMean {
        pred: NodeId,
        groups: Arc<Vec<Vec<u32>>>,
        targets: Arc<Vec<Vec<T>>>,
    },
}

enum Aux<T> {
    None,
    /// Per head, per query row: softmax probabilities aligned with the
    /// plan's visibility lists.
    Attn(Vec<Vec<Vec<T>>>),
    /// Per row: (mean, 1/std).
    Ln(Vec<(T, T)>),
    /// Per group: residual norm.
    GroupNorms(Vec<T>),
}

struct Node<T> {
    op: Op<T>,
    value: Mat<T>,
    aux: Aux<T>,
}

/// Computation tape over a parameter set.
pub struct Tape<'p, T: Real> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<T>>,
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn value(&self, id: NodeId) -> &Mat<T> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> Result<T> {
        let m = self.value(id);
        if m.rows() * m.cols() != 1 {
            return Err(Error::shape("expected a 1x1 node"));
        }
        Ok(m.data()[0])
    }

    fn push(&mut self, op: Op<T>, value: Mat<T>, aux: Aux<T>) -> NodeId {
        self.nodes.push(Node { op, value, aux });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        let value = self.params.get(id).clone();
        self.push(Op::Param(id), value, Aux::None)
    }

    pub fn constant(&mut self, value: Mat<T>) -> NodeId {
        self.push(Op::Const, value, Aux::None)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::Matmul(a, b), value, Aux::None))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let mut value = self.value(a).clone();
        value.add_in_place(self.value(b))?;
        Ok(self.push(Op::AddMat(a, b), value, Aux::None))
    }

    /// Adds a 1 x C bias row to every row of `x`.
    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let b = self.value(bias);
        let xv = self.value(x);
        if b.rows() != 1 || b.cols() != xv.cols() {
            return Err(Error::shape(format!(
                "bias must be 1x{}, got {}x{}",
                xv.cols(),
                b.rows(),
                b.cols()
            )));
        }
        let mut value = xv.clone();
        for r in 0..value.rows() {
            axpy(value.row_mut(r), T::one(), b.row(0));
        }
        Ok(self.push(Op::AddRowBias(x, bias), value, Aux::None))
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        let mut value = self.value(x).clone();
        value.scale_in_place(c);
        self.push(Op::Scale(x, c), value, Aux::None)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v.tanh());
        self.push(Op::Tanh(x), value, Aux::None)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let c = xv.cols();
        let g = self.value(gain);
        let b = self.value(bias);
        if g.rows() != 1 || g.cols() != c || b.rows() != 1 || b.cols() != c {
            return Err(Error::shape("layer_norm gain/bias must be 1 x cols"));
        }
        let eps = T::from_f64_c(LN_EPS);
        let cn = T::from_f64_c(c as f64);
        let mut value = Mat::zeros(xv.rows(), c);
        let mut stats = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / cn;
            let var = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<T>()
                / cn;
            let rstd = T::one() / (var + eps).sqrt();
            let out = value.row_mut(r);
            for i in 0..c {
                let xhat = (row[i] - mean) * rstd;
                out[i] = xhat * g.row(0)[i] + b.row(0)[i];
            }
            stats.push((mean, rstd));
        }
        Ok(self.push(
            Op::LayerNorm { x, gain, bias },
            value,
            Aux::Ln(stats),
        ))
    }

    /// Fused masked multi-head attention over full-width Q/K/V matrices.
    /// Head `h` uses columns `[h*head_dim, (h+1)*head_dim)` and the
    /// visibility of its parity group. Rows with no visible keys output
    /// zero.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, plan: Arc<AttnPlan>) -> Result<NodeId> {
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let n = qv.rows();
        let d_model = qv.cols();
        if plan.n_heads * plan.head_dim != d_model {
            return Err(Error::shape(format!(
                "attention plan expects {} cols, inputs have {d_model}",
                plan.n_heads * plan.head_dim
            )));
        }
        if kv.rows() != n || vv.rows() != n || kv.cols() != d_model || vv.cols() != d_model {
            return Err(Error::shape("attention q/k/v shapes disagree"));
        }
        for g in 0..2 {
            if plan.visibility[g].len() != n {
                return Err(Error::shape(format!(
                    "attention plan group {g} covers {} rows, inputs have {n}",
                    plan.visibility[g].len()
                )));
            }
        }
        let dh = plan.head_dim;
        let scale = T::one() / T::from_f64_c((dh as f64).sqrt());
        let mut value = Mat::zeros(n, d_model);
        let mut probs_all = Vec::with_capacity(plan.n_heads);
        for h in 0..plan.n_heads {
            let cols = h * dh..(h + 1) * dh;
            let vis = &plan.visibility[plan.group_of_head[h]];
            let mut head_probs = Vec::with_capacity(n);
            for i in 0..n {
                let keys = &vis[i];
                if keys.is_empty() {
                    head_probs.push(Vec::new());
                    continue;
                }
                let q_row = &qv.row(i)[cols.clone()];
                let mut logits = Vec::with_capacity(keys.len());
                let mut m = T::neg_infinity();
                for &j in keys.iter() {
                    let s = dot(q_row, &kv.row(j as usize)[cols.clone()]) * scale;
                    if s > m {
                        m = s;
                    }
                    logits.push(s);
                }
                let mut z = T::zero();
                for l in logits.iter_mut() {
                    *l = (*l - m).exp();
                    z = z + *l;
                }
                let inv = T::one() / z;
                let out_row = &mut value.row_mut(i)[cols.clone()];
                for (&j, p) in keys.iter().zip(logits.iter_mut()) {
                    *p = *p * inv;
                    axpy(out_row, *p, &vv.row(j as usize)[cols.clone()]);
                }
                head_probs.push(logits);
            }
            probs_all.push(head_probs);
        }
        Ok(self.push(
            Op::Attention { q, k, v, plan },
            value,
            Aux::Attn(probs_all),
        ))
    }

    /// Rows of `table` at the given indices (embedding lookup).
    pub fn gather_rows(&mut self, table: NodeId, idx: Arc<Vec<u32>>) -> Result<NodeId> {
        let t = self.value(table);
        let mut value = Mat::zeros(idx.len(), t.cols());
        for (r, &i) in idx.iter().enumerate() {
            if i as usize >= t.rows() {
                return Err(Error::shape(format!(
                    "gather index {i} out of range for {} rows",
                    t.rows()
                )));
            }
            value.row_mut(r).copy_from_slice(t.row(i as usize));
        }
        Ok(self.push(Op::GatherRows { table, idx }, value, Aux::None))
    }

    /// Scatters several nodes' rows into a zero-initialized (n_rows x cols)
    /// matrix. Target indices must be disjoint across parts.
    pub fn assemble_rows(
        &mut self,
        n_rows: usize,
        cols: usize,
        parts: Vec<(Arc<Vec<u32>>, NodeId)>,
    ) -> Result<NodeId> {
        let mut value = Mat::zeros(n_rows, cols);
        let mut seen = vec![false; n_rows];
        for (idx, node) in &parts {
            let src = self.value(*node);
            if src.cols() != cols {
                return Err(Error::shape(format!(
                    "assemble part has {} cols, expected {cols}",
                    src.cols()
                )));
            }
            if src.rows() != idx.len() {
                return Err(Error::shape(format!(
                    "assemble part has {} rows but {} indices",
                    src.rows(),
                    idx.len()
                )));
            }
            for (r, &i) in idx.iter().enumerate() {
                let i = i as usize;
                if i >= n_rows || seen[i] {
                    return Err(Error::shape(format!(
                        "assemble target row {i} out of range or duplicated"
                    )));
                }
                seen[i] = true;
                value.row_mut(i).copy_from_slice(src.row(r));
            }
        }
        Ok(self.push(Op::AssembleRows { parts }, value, Aux::None))
    }

    pub fn row_select(&mut self, x: NodeId, rows: Arc<Vec<u32>>) -> Result<NodeId> {
        let xv = self.value(x);
        let mut value = Mat::zeros(rows.len(), xv.cols());
        for (r, &i) in rows.iter().enumerate() {
            if i as usize >= xv.rows() {
                return Err(Error::shape(format!(
                    "row_select index {i} out of range for {} rows",
                    xv.rows()
                )));
            }
            value.row_mut(r).copy_from_slice(xv.row(i as usize));
        }
        Ok(self.push(Op::RowSelect { x, rows }, value, Aux::None))
    }

    /// 1 x C mean over rows.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rows() == 0 {
            return Err(Error::shape("mean_rows over zero rows"));
        }
        let inv = T::one() / T::from_f64_c(xv.rows() as f64);
        let mut value = Mat::zeros(1, xv.cols());
        for r in 0..xv.rows() {
            axpy(value.row_mut(0), inv, xv.row(r));
        }
        Ok(self.push(Op::MeanRows(x), value, Aux::None))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if start + len > xv.cols() {
            return Err(Error::shape(format!(
                "slice {start}..{} out of {} cols",
                start + len,
                xv.cols()
            )));
        }
        let mut value = Mat::zeros(xv.rows(), len);
        for r in 0..xv.rows() {
            value.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        Ok(self.push(Op::SliceCols { x, start, len }, value, Aux::None))
    }

    /// Row-major reshape; element count must be preserved.
    pub fn reshape(&mut self, x: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if rows * cols != xv.rows() * xv.cols() {
            return Err(Error::shape(format!(
                "reshape {}x{} -> {rows}x{cols} changes element count",
                xv.rows(),
                xv.cols()
            )));
        }
        let value = Mat::from_vec(rows, cols, xv.data().to_vec())?;
        Ok(self.push(Op::Reshape(x), value, Aux::None))
    }

    /// Mean over rows of the row-wise L1 distance to `target`.
    pub fn l1_mean(&mut self, pred: NodeId, target: Arc<Mat<T>>) -> Result<NodeId> {
        let p = self.value(pred);
        if p.rows() != target.rows() || p.cols() != target.cols() {
            return Err(Error::shape(format!(
                "l1_mean: pred {}x{} vs target {}x{}",
                p.rows(),
                p.cols(),
                target.rows(),
                target.cols()
            )));
        }
        let mut total = T::zero();
        for (&a, &b) in p.data().iter().zip(target.data()) {
            total = total + (a - b).abs();
        }
        let value = Mat::from_vec(1, 1, vec![total / T::from_f64_c(p.rows() as f64)])?;
        Ok(self.push(Op::L1Mean { pred, target }, value, Aux::None))
    }

    /// Mean over groups of the Euclidean norm of the grouped residual:
    /// group `g` selects rows of `pred`, flattens them, and compares with
    /// `targets[g]`.
    pub fn l2_group_mean(
        &mut self,
        pred: NodeId,
        groups: Arc<Vec<Vec<u32>>>,
        targets: Arc<Vec<Vec<T>>>,
    ) -> Result<NodeId> {
        let p = self.value(pred);
        if groups.len() != targets.len() || groups.is_empty() {
            return Err(Error::shape("l2_group_mean: group/target mismatch"));
        }
        let c = p.cols();
        let mut norms = Vec::with_capacity(groups.len());
        let mut total = T::zero();
        for (rows, tgt) in groups.iter().zip(targets.iter()) {
            if rows.len() * c != tgt.len() {
                return Err(Error::shape(format!(
                    "l2_group_mean: group of {} rows x {c} cols vs target of {}",
                    rows.len(),
                    tgt.len()
                )));
            }
            let mut sq = T::zero();
            for (ri, &row) in rows.iter().enumerate() {
                let pr = p.row(row as usize);
                let tr = &tgt[ri * c..(ri + 1) * c];
                for (&a, &b) in pr.iter().zip(tr) {
                    let d = a - b;
                    sq = sq + d * d;
                }
            }
            let norm = sq.sqrt();
            norms.push(norm);
            total = total + norm;
        }
        let value = Mat::from_vec(1, 1, vec![total / T::from_f64_c(groups.len() as f64)])?;
        Ok(self.push(
            Op::L2GroupMean {
                pred,
                groups,
                targets,
            },
            value,
            Aux::GroupNorms(norms),
        ))
    }

    /// Reverse pass from a scalar node; returns per-parameter gradients
    /// aligned with the parameter set.
    pub fn backward(&self, loss: NodeId) -> Result<Vec<Mat<T>>> {
        let lv = self.value(loss);
        if lv.rows() != 1 || lv.cols() != 1 {
            return Err(Error::shape("backward expects a scalar loss node"));
        }
        let mut grads: Vec<Option<Mat<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::from_vec(1, 1, vec![T::one()])?);
        let mut param_grads = self.params.zeros_like();

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Const => {}
                Op::Param(pid) => {
                    param_grads[pid.0].add_in_place(&dy)?;
                }
                Op::Matmul(a, b) => {
                    let da = dy.matmul_nt(self.value(*b))?;
                    let db = self.value(*a).matmul_tn(&dy)?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::AddMat(a, b) => {
                    accumulate(&mut grads, *a, dy.clone())?;
                    accumulate(&mut grads, *b, dy)?;
                }
                Op::AddRowBias(x, bias) => {
                    let mut db = Mat::zeros(1, dy.cols());
                    for r in 0..dy.rows() {
                        axpy(db.row_mut(0), T::one(), dy.row(r));
                    }
                    accumulate(&mut grads, *x, dy)?;
                    accumulate(&mut grads, *bias, db)?;
                }
                Op::Scale(x, c) => {
                    let mut dx = dy;
                    dx.scale_in_place(*c);
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Tanh(x) => {
                    let y = &node.value;
                    let mut dx = dy;
                    for (g, &yv) in dx.data_mut().iter_mut().zip(y.data()) {
                        *g = *g * (T::one() - yv * yv);
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::LayerNorm { x, gain, bias } => {
                    let Aux::Ln(stats) = &node.aux else { unreachable!() };
                    let xv = self.value(*x);
                    let g = self.value(*gain);
                    let c = xv.cols();
                    let cn = T::from_f64_c(c as f64);
                    let mut dx = Mat::zeros(xv.rows(), c);
                    let mut dgain = Mat::zeros(1, c);
                    let mut dbias = Mat::zeros(1, c);
                    for r in 0..xv.rows() {
                        let (mean, rstd) = stats[r];
                        let xr = xv.row(r);
                        let dyr = dy.row(r);
                        let mut sum_dxhat = T::zero();
                        let mut sum_dxhat_xhat = T::zero();
                        for i in 0..c {
                            let xhat = (xr[i] - mean) * rstd;
                            let dxhat = dyr[i] * g.row(0)[i];
                            sum_dxhat = sum_dxhat + dxhat;
                            sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                            dgain.row_mut(0)[i] = dgain.row(0)[i] + dyr[i] * xhat;
                            dbias.row_mut(0)[i] = dbias.row(0)[i] + dyr[i];
                        }
                        let mean_dxhat = sum_dxhat / cn;
                        let mean_dxhat_xhat = sum_dxhat_xhat / cn;
                        let dxr = dx.row_mut(r);
                        for i in 0..c {
                            let xhat = (xr[i] - mean) * rstd;
                            let dxhat = dyr[i] * g.row(0)[i];
                            dxr[i] = rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    }
                    accumulate(&mut grads, *x, dx)?;
                    accumulate(&mut grads, *gain, dgain)?;
                    accumulate(&mut grads, *bias, dbias)?;
                }
                Op::Attention { q, k, v, plan } => {
                    let Aux::Attn(probs) = &node.aux else { unreachable!() };
                    let qv = self.value(*q);
                    let kv = self.value(*k);
                    let vv = self.value(*v);
                    let n = qv.rows();
                    let dh = plan.head_dim;
                    let scale = T::one() / T::from_f64_c((dh as f64).sqrt());
                    let mut dq = Mat::zeros(n, qv.cols());
                    let mut dk = Mat::zeros(n, qv.cols());
                    let mut dv = Mat::zeros(n, qv.cols());
                    for h in 0..plan.n_heads {
                        let cols = h * dh..(h + 1) * dh;
                        let vis = &plan.visibility[plan.group_of_head[h]];
                        for i in 0..n {
                            let keys = &vis[i];
                            if keys.is_empty() {
                                continue;
                            }
                            let p_row = &probs[h][i];
                            let dy_row = &dy.row(i)[cols.clone()];
                            // dp_j = dy . v_j ; ds_j = p_j (dp_j - sum_l p_l dp_l)
                            let mut dps = Vec::with_capacity(keys.len());
                            let mut dot_p_dp = T::zero();
                            for (&j, &p) in keys.iter().zip(p_row) {
                                let dp = dot(dy_row, &vv.row(j as usize)[cols.clone()]);
                                dot_p_dp = dot_p_dp + p * dp;
                                dps.push(dp);
                            }
                            let q_row = qv.row(i)[cols.clone()].to_vec();
                            let dq_row = &mut dq.row_mut(i)[cols.clone()];
                            for ((&j, &p), &dp) in keys.iter().zip(p_row).zip(&dps) {
                                let ds = p * (dp - dot_p_dp) * scale;
                                axpy(dq_row, ds, &kv.row(j as usize)[cols.clone()]);
                                axpy(&mut dk.row_mut(j as usize)[cols.clone()], ds, &q_row);
                                axpy(&mut dv.row_mut(j as usize)[cols.clone()], p, dy_row);
                            }
                        }
                    }
                    accumulate(&mut grads, *q, dq)?;
                    accumulate(&mut grads, *k, dk)?;
                    accumulate(&mut grads, *v, dv)?;
                }
                Op::GatherRows { table, idx } => {
                    let t = self.value(*table);
                    let mut dt = Mat::zeros(t.rows(), t.cols());
                    for (r, &i) in idx.iter().enumerate() {
                        axpy(dt.row_mut(i as usize), T::one(), dy.row(r));
                    }
                    accumulate(&mut grads, *table, dt)?;
                }
                Op::AssembleRows { parts } => {
                    for (idx, node_id) in parts {
                        let src = self.value(*node_id);
                        let mut dpart = Mat::zeros(src.rows(), src.cols());
                        for (r, &i) in idx.iter().enumerate() {
                            dpart.row_mut(r).copy_from_slice(dy.row(i as usize));
                        }
                        accumulate(&mut grads, *node_id, dpart)?;
                    }
                }
                Op::RowSelect { x, rows } => {
                    let xv = self.value(*x);
                    let mut dx = Mat::zeros(xv.rows(), xv.cols());
                    for (r, &i) in rows.iter().enumerate() {
                        axpy(dx.row_mut(i as usize), T::one(), dy.row(r));
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::MeanRows(x) => {
                    let xv = self.value(*x);
                    let inv = T::one() / T::from_f64_c(xv.rows() as f64);
                    let mut dx = Mat::zeros(xv.rows(), xv.cols());
                    for r in 0..xv.rows() {
                        axpy(dx.row_mut(r), inv, dy.row(0));
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::SliceCols { x, start, len } => {
                    let xv = self.value(*x);
                    let mut dx = Mat::zeros(xv.rows(), xv.cols());
                    for r in 0..dx.rows() {
                        dx.row_mut(r)[*start..*start + *len].copy_from_slice(dy.row(r));
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Reshape(x) => {
                    let xv = self.value(*x);
                    let dx = Mat::from_vec(xv.rows(), xv.cols(), dy.data().to_vec())?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::L1Mean { pred, target } => {
                    let p = self.value(*pred);
                    let coef = dy.data()[0] / T::from_f64_c(p.rows() as f64);
                    let mut dp = Mat::zeros(p.rows(), p.cols());
                    for ((g, &a), &b) in dp.data_mut().iter_mut().zip(p.data()).zip(target.data()) {
                        let d = a - b;
                        *g = if d > T::zero() {
                            coef
                        } else if d < T::zero() {
                            -coef
                        } else {
                            T::zero()
                        };
                    }
                    accumulate(&mut grads, *pred, dp)?;
                }
                Op::L2GroupMean {
                    pred,
                    groups,
                    targets,
                } => {
                    let Aux::GroupNorms(norms) = &node.aux else { unreachable!() };
                    let p = self.value(*pred);
                    let c = p.cols();
                    let gcount = T::from_f64_c(groups.len() as f64);
                    let tiny = T::from_f64_c(1e-300);
                    let mut dp = Mat::zeros(p.rows(), c);
                    for ((rows, tgt), &norm) in groups.iter().zip(targets.iter()).zip(norms) {
                        if norm <= tiny {
                            continue;
                        }
                        let coef = dy.data()[0] / (norm * gcount);
                        for (ri, &row) in rows.iter().enumerate() {
                            let pr = p.row(row as usize);
                            let tr = &tgt[ri * c..(ri + 1) * c];
                            let dr = dp.row_mut(row as usize);
                            for i in 0..c {
                                dr[i] = dr[i] + coef * (pr[i] - tr[i]);
                            }
                        }
                    }
                    accumulate(&mut grads, *pred, dp)?;
                }
            }
        }
        Ok(param_grads)
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Mat<T>>], id: NodeId, g: Mat<T>) -> Result<()> {
    match &mut grads[id.0] {
        Some(existing) => existing.add_in_place(&g),
        slot => {
            *slot = Some(g);
            Ok(())
        }
    }
}
