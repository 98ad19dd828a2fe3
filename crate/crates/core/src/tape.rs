//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records one forward pass. Parameters are borrowed from a
//! [`ParamStore`] rather than copied, and [`Graph::backward`] produces
//! gradients for every node that the loss depends on. Ops are coarse
//! (fused linear, fused multi-head attention, layer norm) with hand-written
//! adjoints.

use alloc::vec;
use alloc::vec::Vec;

use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::{axpy, dot, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

enum Op {
    Input,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    AddBias { x: Var, b: Var },
    Add(Var, Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Matrix, inv_std: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<Matrix> },
    Dropout { x: Var, mask: Vec<f64> },
    SpaceToDepth { x: Var, side: usize },
    DepthToSpace { x: Var, side: usize },
    GatherRows { table: Var, ids: Vec<usize> },
    ReplaceRows { x: Var, table: Var, fill_row: usize, mask: Vec<bool> },
    AddTableRows { x: Var, table: Var, offset: usize },
    Concat(Vec<Var>),
    SelectRows { x: Var, rows: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, scale: f64, probs: Matrix },
    SquaredError { x: Var, target: Matrix, scale: f64 },
    BceWithLogits { x: Var, labels: Vec<f64>, scale: f64 },
    Sum(Vec<Var>),
}

struct Node {
    op: Op,
    value: Option<Matrix>,
}

/// One recorded forward computation.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::new(), param_vars: vec![None; params.len()] }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Matrix) -> Var {
        self.nodes.push(Node { op, value: Some(value) });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => self.params.get(*id),
            (_, Some(m)) => m,
            _ => unreachable!("node without value"),
        }
    }

    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(Op::Input, value)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node { op: Op::Param(id), value: None });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// `x · w + b` with `w` of shape `[in, out]` and `b` of shape `[1, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(xv.cols(), wv.rows(), "linear input width");
        let mut out = xv.matmul(wv);
        if let Some(b) = b {
            add_row_broadcast(&mut out, self.value(b));
        }
        self.push(Op::Linear { x, w, b }, out)
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let mut out = self.value(x).clone();
        add_row_broadcast(&mut out, self.value(b));
        self.push(Op::AddBias { x, b }, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.value(b).shape(), "add shapes");
        out.add_assign(self.value(b));
        self.push(Op::Add(a, b), out)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.push(Op::Relu(x), out)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = gelu(*v);
        }
        self.push(Op::Gelu(x), out)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = sigmoid(*v);
        }
        self.push(Op::Sigmoid(x), out)
    }

    /// Row-wise layer normalization with learned gain and bias (`[1, d]`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let mut xhat = Matrix::zeros(n, d);
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
            inv_std.push(is);
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = xhat.clone();
        for r in 0..n {
            for ((o, gi), bi) in out.row_mut(r).iter_mut().zip(g).zip(b) {
                *o = *o * gi + bi;
            }
        }
        self.push(Op::LayerNorm { x, gain, bias, xhat, inv_std }, out)
    }

    /// Scaled dot-product self-attention split over `heads` column groups.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qv.shape();
        assert!(heads > 0 && d % heads == 0, "attention heads must divide width");
        let dh = d / heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut out = Matrix::zeros(n, d);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let mut p = Matrix::zeros(n, n);
            for i in 0..n {
                let qi = &qv.row(i)[cols.clone()];
                let pr = p.row_mut(i);
                for (j, s) in pr.iter_mut().enumerate() {
                    *s = dot(qi, &kv.row(j)[cols.clone()]) * scale;
                }
                softmax_in_place(pr);
                let orow = &mut out.row_mut(i)[cols.clone()];
                for (j, &pij) in p.row(i).iter().enumerate() {
                    axpy(pij, &vv.row(j)[cols.clone()], orow);
                }
            }
            probs.push(p);
        }
        self.push(Op::Attention { q, k, v, heads, probs }, out)
    }

    /// Multiplies by a precomputed mask whose entries are `0` or `1/(1-p)`.
    pub fn dropout_with_mask(&mut self, x: Var, mask: Vec<f64>) -> Var {
        let mut out = self.value(x).clone();
        assert_eq!(out.len(), mask.len(), "dropout mask length");
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        self.push(Op::Dropout { x, mask }, out)
    }

    /// `[side², c] → [(side/2)², 4c]`: gathers each 2×2 pixel block into one row.
    pub fn space_to_depth(&mut self, x: Var, side: usize) -> Var {
        let out = space_to_depth(self.value(x), side);
        self.push(Op::SpaceToDepth { x, side }, out)
    }

    /// `[side², 4c] → [(2·side)², c]`: inverse of [`Graph::space_to_depth`].
    pub fn depth_to_space(&mut self, x: Var, side: usize) -> Var {
        let out = depth_to_space(self.value(x), side);
        self.push(Op::DepthToSpace { x, side }, out)
    }

    pub fn gather_rows(&mut self, table: Var, ids: Vec<usize>) -> Var {
        let out = self.value(table).select_rows(&ids);
        self.push(Op::GatherRows { table, ids }, out)
    }

    /// Rows flagged in `mask` are replaced by `table[fill_row]`.
    pub fn replace_rows(&mut self, x: Var, table: Var, fill_row: usize, mask: Vec<bool>) -> Var {
        let mut out = self.value(x).clone();
        assert_eq!(out.rows(), mask.len(), "replace_rows mask length");
        let fill = self.value(table).row(fill_row);
        for (r, &m) in mask.iter().enumerate() {
            if m {
                out.row_mut(r).copy_from_slice(fill);
            }
        }
        self.push(Op::ReplaceRows { x, table, fill_row, mask }, out)
    }

    /// `out[i] = x[i] + table[offset + i]`.
    pub fn add_table_rows(&mut self, x: Var, table: Var, offset: usize) -> Var {
        let mut out = self.value(x).clone();
        let t = self.value(table);
        assert!(offset + out.rows() <= t.rows(), "table rows exhausted");
        for r in 0..out.rows() {
            for (o, p) in out.row_mut(r).iter_mut().zip(t.row(offset + r)) {
                *o += p;
            }
        }
        self.push(Op::AddTableRows { x, table, offset }, out)
    }

    /// Stacks rows of the given nodes in order.
    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in &parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat widths");
            data.extend_from_slice(m.data());
            rows += m.rows();
        }
        self.push(Op::Concat(parts), Matrix::from_vec(rows, cols, data))
    }

    pub fn select_rows(&mut self, x: Var, rows: Vec<usize>) -> Var {
        let out = self.value(x).select_rows(&rows);
        self.push(Op::SelectRows { x, rows }, out)
    }

    /// `scale · Σᵢ −log softmax(logitsᵢ)[targetᵢ]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>, scale: f64) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "cross-entropy targets");
        let mut probs = lv.clone();
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            total -= log_softmax_at(lv.row(r), t);
            softmax_in_place(probs.row_mut(r));
        }
        self.push(Op::CrossEntropy { logits, targets, scale, probs }, Matrix::scalar(scale * total))
    }

    /// `scale · Σ (x − target)²`.
    pub fn squared_error(&mut self, x: Var, target: Matrix, scale: f64) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), target.shape(), "squared-error shapes");
        let s: f64 = xv.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        self.push(Op::SquaredError { x, target, scale }, Matrix::scalar(scale * s))
    }

    /// `scale · Σ softplus(x) − y·x`, i.e. binary cross-entropy on logits.
    pub fn bce_with_logits(&mut self, x: Var, labels: Vec<f64>, scale: f64) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), labels.len(), "bce labels");
        let s: f64 = xv.data().iter().zip(&labels).map(|(&z, &y)| softplus(z) - y * z).sum();
        self.push(Op::BceWithLogits { x, labels, scale }, Matrix::scalar(scale * s))
    }

    /// Sum of scalar nodes.
    pub fn sum(&mut self, parts: Vec<Var>) -> Var {
        let s = parts.iter().map(|&p| self.value(p).scalar_value()).sum();
        self.push(Op::Sum(parts), Matrix::scalar(s))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward from a scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            self.backward_node(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Gradients { grads, param_vars: self.param_vars.clone() }
    }

    fn backward_node(&self, idx: usize, dy: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                acc(grads, *x, dy.matmul_t(wv));
                acc(grads, *w, xv.t_matmul(dy));
                if let Some(b) = b {
                    acc(grads, *b, column_sums(dy));
                }
            }
            Op::AddBias { x, b } => {
                acc(grads, *x, dy.clone());
                acc(grads, *b, column_sums(dy));
            }
            Op::Add(a, b) => {
                acc(grads, *a, dy.clone());
                acc(grads, *b, dy.clone());
            }
            Op::Relu(x) => {
                let y = node.value.as_ref().unwrap();
                let mut dx = dy.clone();
                for (d, &o) in dx.data_mut().iter_mut().zip(y.data()) {
                    if o <= 0.0 {
                        *d = 0.0;
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let mut dx = dy.clone();
                for (d, &z) in dx.data_mut().iter_mut().zip(xv.data()) {
                    *d *= gelu_grad(z);
                }
                acc(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let y = node.value.as_ref().unwrap();
                let mut dx = dy.clone();
                for (d, &s) in dx.data_mut().iter_mut().zip(y.data()) {
                    *d *= s * (1.0 - s);
                }
                acc(grads, *x, dx);
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let g = self.value(*gain).data();
                let (n, d) = xhat.shape();
                let mut dgain = Matrix::zeros(1, d);
                let mut dx = Matrix::zeros(n, d);
                let mut dxhat = vec![0.0; d];
                for r in 0..n {
                    let dyr = dy.row(r);
                    let xr = xhat.row(r);
                    for c in 0..d {
                        dgain.data_mut()[c] += dyr[c] * xr[c];
                        dxhat[c] = dyr[c] * g[c];
                    }
                    let sum_d: f64 = dxhat.iter().sum();
                    let sum_dx: f64 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum();
                    let k = inv_std[r] / d as f64;
                    for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = k * (d as f64 * dxhat[c] - sum_d - xr[c] * sum_dx);
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *gain, dgain);
                acc(grads, *bias, column_sums(dy));
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (n, d) = qv.shape();
                let dh = d / heads;
                let scale = 1.0 / libm::sqrt(dh as f64);
                let mut dq = Matrix::zeros(n, d);
                let mut dk = Matrix::zeros(n, d);
                let mut dv = Matrix::zeros(n, d);
                let mut ds = vec![0.0; n];
                for (h, p) in probs.iter().enumerate() {
                    let cols = h * dh..(h + 1) * dh;
                    for i in 0..n {
                        let dyi = &dy.row(i)[cols.clone()];
                        let pi = p.row(i);
                        // dP_ij = dy_i · v_j ; dV_j += P_ij dy_i
                        for j in 0..n {
                            ds[j] = dot(dyi, &vv.row(j)[cols.clone()]);
                            axpy(pi[j], dyi, &mut dv.row_mut(j)[cols.clone()]);
                        }
                        let inner: f64 = ds.iter().zip(pi).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            ds[j] = pi[j] * (ds[j] - inner) * scale;
                        }
                        let dqi = &mut dq.row_mut(i)[cols.clone()];
                        for j in 0..n {
                            axpy(ds[j], &kv.row(j)[cols.clone()], dqi);
                        }
                        let qi = &qv.row(i)[cols.clone()];
                        for j in 0..n {
                            axpy(ds[j], qi, &mut dk.row_mut(j)[cols.clone()]);
                        }
                    }
                }
                acc(grads, *q, dq);
                acc(grads, *k, dk);
                acc(grads, *v, dv);
            }
            Op::Dropout { x, mask } => {
                let mut dx = dy.clone();
                for (d, m) in dx.data_mut().iter_mut().zip(mask) {
                    *d *= m;
                }
                acc(grads, *x, dx);
            }
            Op::SpaceToDepth { x, side } => acc(grads, *x, depth_to_space(dy, side / 2)),
            Op::DepthToSpace { x, side } => acc(grads, *x, space_to_depth(dy, side * 2)),
            Op::GatherRows { table, ids } => {
                let t = self.value(*table);
                let mut dt = Matrix::zeros(t.rows(), t.cols());
                for (r, &id) in ids.iter().enumerate() {
                    axpy(1.0, dy.row(r), dt.row_mut(id));
                }
                acc(grads, *table, dt);
            }
            Op::ReplaceRows { x, table, fill_row, mask } => {
                let t = self.value(*table);
                let mut dt = Matrix::zeros(t.rows(), t.cols());
                let mut dx = dy.clone();
                for (r, &m) in mask.iter().enumerate() {
                    if m {
                        axpy(1.0, dy.row(r), dt.row_mut(*fill_row));
                        dx.row_mut(r).fill(0.0);
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *table, dt);
            }
            Op::AddTableRows { x, table, offset } => {
                let t = self.value(*table);
                let mut dt = Matrix::zeros(t.rows(), t.cols());
                for r in 0..dy.rows() {
                    dt.row_mut(offset + r).copy_from_slice(dy.row(r));
                }
                acc(grads, *x, dy.clone());
                acc(grads, *table, dt);
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    let idx: Vec<usize> = (start..start + rows).collect();
                    acc(grads, p, dy.select_rows(&idx));
                    start += rows;
                }
            }
            Op::SelectRows { x, rows } => {
                let xv = self.value(*x);
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for (r, &src) in rows.iter().enumerate() {
                    axpy(1.0, dy.row(r), dx.row_mut(src));
                }
                acc(grads, *x, dx);
            }
            Op::CrossEntropy { logits, targets, scale, probs } => {
                let g = dy.scalar_value() * scale;
                let mut dl = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let row = dl.row_mut(r);
                    row[t] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= g;
                    }
                }
                acc(grads, *logits, dl);
            }
            Op::SquaredError { x, target, scale } => {
                let g = 2.0 * dy.scalar_value() * scale;
                let xv = self.value(*x);
                let data = xv.data().iter().zip(target.data()).map(|(a, b)| g * (a - b)).collect();
                acc(grads, *x, Matrix::from_vec(xv.rows(), xv.cols(), data));
            }
            Op::BceWithLogits { x, labels, scale } => {
                let g = dy.scalar_value() * scale;
                let xv = self.value(*x);
                let data = xv.data().iter().zip(labels).map(|(&z, &y)| g * (sigmoid(z) - y)).collect();
                acc(grads, *x, Matrix::from_vec(xv.rows(), xv.cols(), data));
            }
            Op::Sum(parts) => {
                for &p in parts {
                    acc(grads, p, dy.clone());
                }
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    param_vars: Vec<Option<Var>>,
}

impl Gradients {
    /// Gradient with respect to a node, if the loss depends on it.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Adds every parameter gradient into `out`.
    pub fn accumulate_into(&self, out: &mut Grads) {
        for (i, pv) in self.param_vars.iter().enumerate() {
            if let Some(g) = pv.and_then(|v| self.grads[v.0].as_ref()) {
                out.get_mut(ParamId(i)).add_assign(g);
            }
        }
    }

    /// Parameters that received any gradient at all.
    pub fn touched_params(&self) -> Vec<ParamId> {
        self.param_vars
            .iter()
            .enumerate()
            .filter(|(_, pv)| pv.map(|v| self.grads[v.0].is_some()).unwrap_or(false))
            .map(|(i, _)| ParamId(i))
            .collect()
    }
}

fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn add_row_broadcast(out: &mut Matrix, b: &Matrix) {
    assert_eq!(b.len(), out.cols(), "bias width");
    for r in 0..out.rows() {
        for (o, bi) in out.row_mut(r).iter_mut().zip(b.data()) {
            *o += bi;
        }
    }
}

fn column_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for r in 0..m.rows() {
        axpy(1.0, m.row(r), out.data_mut());
    }
    out
}

pub fn space_to_depth(x: &Matrix, side: usize) -> Matrix {
    assert!(side % 2 == 0 && x.rows() == side * side, "space_to_depth input shape");
    let c = x.cols();
    let half = side / 2;
    let mut out = Matrix::zeros(half * half, 4 * c);
    for i in 0..half {
        for j in 0..half {
            let orow = out.row_mut(i * half + j);
            for di in 0..2 {
                for dj in 0..2 {
                    let src = (2 * i + di) * side + 2 * j + dj;
                    let k = (di * 2 + dj) * c;
                    orow[k..k + c].copy_from_slice(x.row(src));
                }
            }
        }
    }
    out
}

pub fn depth_to_space(x: &Matrix, side: usize) -> Matrix {
    assert!(x.rows() == side * side && x.cols() % 4 == 0, "depth_to_space input shape");
    let c = x.cols() / 4;
    let full = side * 2;
    let mut out = Matrix::zeros(full * full, c);
    for i in 0..side {
        for j in 0..side {
            let irow = x.row(i * side + j);
            for di in 0..2 {
                for dj in 0..2 {
                    let dst = (2 * i + di) * full + 2 * j + dj;
                    let k = (di * 2 + dj) * c;
                    out.row_mut(dst).copy_from_slice(&irow[k..k + c]);
                }
            }
        }
    }
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - max);
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `log softmax(row)[t]`, computed stably.
pub fn log_softmax_at(row: &[f64], t: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + libm::log(row.iter().map(|v| libm::exp(v - max)).sum::<f64>());
    row[t] - lse
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + libm::log1p(libm::exp(-libm::fabs(x)))
}

const FRAC_1_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2)) + x * FRAC_1_SQRT_2PI * libm::exp(-0.5 * x * x)
}
