//! Recorded computation graph with reverse-mode gradients.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and enough context to push gradients back to its inputs. Parameters enter
//! through [`Graph::param`], which remembers the store path so
//! [`Graph::backward`] can accumulate into the store's gradient buffers.

use super::kernels::Parallelism;
use super::matrix::Matrix;
use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
    },
    AddRow {
        x: NodeId,
        bias: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        s: f64,
    },
    Relu {
        x: NodeId,
    },
    ColSlice {
        x: NodeId,
        start: usize,
    },
    ConcatCols {
        xs: Vec<NodeId>,
    },
    Reshape {
        x: NodeId,
    },
    Transpose {
        x: NodeId,
    },
    MaskRows {
        x: NodeId,
        keep: Vec<bool>,
    },
    MaskedSoftmaxRows {
        x: NodeId,
    },
    LogSoftmaxRows {
        x: NodeId,
    },
    Diag {
        x: NodeId,
    },
    SumAll {
        x: NodeId,
    },
    L2NormalizeRows {
        x: NodeId,
        norms: Vec<f64>,
    },
    GroupScores {
        q: NodeId,
        k: NodeId,
        q_per_group: usize,
        group_len: usize,
        scale: f64,
    },
    GroupApply {
        a: NodeId,
        v: NodeId,
        q_per_group: usize,
        group_len: usize,
    },
    SegmentMax {
        x: NodeId,
        argmax: Vec<usize>,
    },
    ScatterRows {
        x: NodeId,
        targets: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    param: Option<String>,
    requires_grad: bool,
}

/// Computation tape. One graph per forward pass; not shared across threads.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    par: Parallelism,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_parallelism(par: Parallelism) -> Self {
        Graph { nodes: Vec::new(), par }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        let v = self.value(id);
        if v.shape() != (1, 1) {
            return Err(Error::Contract(format!("node is {:?}, not a scalar", v.shape())));
        }
        Ok(v.data()[0])
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            param: None,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].requires_grad)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf bound to a store path.
    pub fn param(&mut self, store: &ParamStore, path: &str) -> Result<NodeId> {
        let value = store.get(path)?.clone();
        let id = self.push(value, Op::Leaf, true);
        self.nodes[id.0].param = Some(path.to_string());
        Ok(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId> {
        let v = self.value(a).matmul_with(self.value(b), ta, tb, self.par)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::MatMul { a, b, ta, tb }, rg))
    }

    /// Adds a `1 × cols` row to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::Dimension(format!(
                "bias {:?} for input {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let mut out = xv.clone();
        let cols = out.cols();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        debug_assert_eq!(cols, bv.cols());
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddRow { x, bias }, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "add {:?} + {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let out = self.value(x).scale(s);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale { x, s }, rg)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let data = v.data().iter().map(|&t| t.max(0.0)).collect();
        let out = Matrix::from_vec(v.rows(), v.cols(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu { x }, rg)
    }

    pub fn col_slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(x);
        if start + len > v.cols() {
            return Err(Error::Dimension(format!(
                "columns {start}..{} of {:?}",
                start + len,
                v.shape()
            )));
        }
        let mut data = Vec::with_capacity(v.rows() * len);
        for r in 0..v.rows() {
            data.extend_from_slice(&v.row(r)[start..start + len]);
        }
        let out = Matrix::from_vec(v.rows(), len, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::ColSlice { x, start }, rg))
    }

    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let rows = xs
            .first()
            .map(|&x| self.shape(x).0)
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        if xs.iter().any(|&x| self.shape(x).0 != rows) {
            return Err(Error::Dimension("concat with differing row counts".into()));
        }
        let cols: usize = xs.iter().map(|&x| self.shape(x).1).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &x in xs {
                data.extend_from_slice(self.value(x).row(r));
            }
        }
        let out = Matrix::from_vec(rows, cols, data)?;
        let rg = self.rg(xs);
        Ok(self.push(out, Op::ConcatCols { xs: xs.to_vec() }, rg))
    }

    /// Row-major reinterpretation with the same element count.
    pub fn reshape(&mut self, x: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let out = Matrix::from_vec(rows, cols, self.value(x).data().to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape { x }, rg))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).transpose();
        let rg = self.rg(&[x]);
        self.push(out, Op::Transpose { x }, rg)
    }

    /// Zeroes rows whose `keep` flag is false.
    pub fn mask_rows(&mut self, x: NodeId, keep: &[bool]) -> Result<NodeId> {
        let mut out = self.value(x).clone();
        if keep.len() != out.rows() {
            return Err(Error::Dimension(format!(
                "row mask of {} for {} rows",
                keep.len(),
                out.rows()
            )));
        }
        for (r, &k) in keep.iter().enumerate() {
            if !k {
                out.row_mut(r).fill(0.0);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MaskRows { x, keep: keep.to_vec() }, rg))
    }

    /// Row-wise softmax over entries whose mask flag is true; masked entries
    /// become exactly 0. `mask` is row-major with the shape of `x`.
    pub fn masked_softmax_rows(&mut self, x: NodeId, mask: &[bool]) -> Result<NodeId> {
        let v = self.value(x);
        if mask.len() != v.len() {
            return Err(Error::Dimension("softmax mask shape".into()));
        }
        let cols = v.cols();
        let mut out = Matrix::zeros(v.rows(), cols);
        for r in 0..v.rows() {
            let probs = super::layers::softmax(v.row(r), &mask[r * cols..(r + 1) * cols])?;
            out.row_mut(r).copy_from_slice(&probs);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MaskedSoftmaxRows { x }, rg))
    }

    pub fn log_softmax_rows(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let mut out = v.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|t| (t - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|t| *t -= lse);
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::LogSoftmaxRows { x }, rg)
    }

    /// Diagonal of a square matrix as an `n × 1` column.
    pub fn diag(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.rows() != v.cols() {
            return Err(Error::Dimension(format!("diag of {:?}", v.shape())));
        }
        let data = (0..v.rows()).map(|i| v.get(i, i)).collect();
        let out = Matrix::from_vec(v.rows(), 1, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Diag { x }, rg))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Matrix::scalar(s), Op::SumAll { x }, rg)
    }

    pub fn l2_normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(out.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = super::matrix::l2_norm(row);
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::DegenerateScene);
            }
            row.iter_mut().for_each(|t| *t /= n);
            norms.push(n);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::L2NormalizeRows { x, norms }, rg))
    }

    /// Block-diagonal scores: row `r` of `q` belongs to group
    /// `r / q_per_group` and is scored against the `group_len` rows of `k`
    /// in that group. Output is `q.rows × group_len`.
    pub fn group_scores(
        &mut self,
        q: NodeId,
        k: NodeId,
        q_per_group: usize,
        group_len: usize,
        scale: f64,
    ) -> Result<NodeId> {
        let (qv, kv) = (self.value(q), self.value(k));
        check_groups(qv.rows(), kv.rows(), q_per_group, group_len)?;
        if qv.cols() != kv.cols() {
            return Err(Error::Dimension("query/key width".into()));
        }
        let mut out = Matrix::zeros(qv.rows(), group_len);
        for r in 0..qv.rows() {
            let base = (r / q_per_group) * group_len;
            for j in 0..group_len {
                let s = super::matrix::dot(qv.row(r), kv.row(base + j));
                out.set(r, j, s * scale);
            }
        }
        let rg = self.rg(&[q, k]);
        Ok(self.push(
            out,
            Op::GroupScores {
                q,
                k,
                q_per_group,
                group_len,
                scale,
            },
            rg,
        ))
    }

    /// Block-diagonal mixing: `out[r] = Σ_j a[r, j] · v[g(r)·group_len + j]`.
    pub fn group_apply(&mut self, a: NodeId, v: NodeId, q_per_group: usize, group_len: usize) -> Result<NodeId> {
        let (av, vv) = (self.value(a), self.value(v));
        check_groups(av.rows(), vv.rows(), q_per_group, group_len)?;
        if av.cols() != group_len {
            return Err(Error::Dimension("mixing weights width".into()));
        }
        let d = vv.cols();
        let mut out = Matrix::zeros(av.rows(), d);
        for r in 0..av.rows() {
            let base = (r / q_per_group) * group_len;
            for j in 0..group_len {
                let w = av.get(r, j);
                if w == 0.0 {
                    continue;
                }
                let src = vv.row(base + j);
                for (o, s) in out.row_mut(r).iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        }
        let rg = self.rg(&[a, v]);
        Ok(self.push(
            out,
            Op::GroupApply {
                a,
                v,
                q_per_group,
                group_len,
            },
            rg,
        ))
    }

    /// Coordinate-wise max over each segment of row indices.
    pub fn segment_max(&mut self, x: NodeId, segments: &[Vec<usize>]) -> Result<NodeId> {
        let v = self.value(x);
        let d = v.cols();
        let mut out = Matrix::zeros(segments.len(), d);
        let mut argmax = Vec::with_capacity(segments.len() * d);
        for (s, seg) in segments.iter().enumerate() {
            if seg.is_empty() {
                return Err(Error::Contract(format!("segment {s} is empty")));
            }
            for c in 0..d {
                let mut best = seg[0];
                for &r in &seg[1..] {
                    if v.get(r, c) > v.get(best, c) {
                        best = r;
                    }
                }
                out.set(s, c, v.get(best, c));
                argmax.push(best);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SegmentMax { x, argmax }, rg))
    }

    /// Places row `i` of `x` at row `targets[i]` of a zero `total × cols` matrix.
    pub fn scatter_rows(&mut self, x: NodeId, targets: &[usize], total: usize) -> Result<NodeId> {
        let v = self.value(x);
        if targets.len() != v.rows() {
            return Err(Error::Dimension("scatter target count".into()));
        }
        let mut seen = vec![false; total];
        let mut out = Matrix::zeros(total, v.cols());
        for (i, &t) in targets.iter().enumerate() {
            if t >= total || seen[t] {
                return Err(Error::Contract(format!("bad scatter target {t}")));
            }
            seen[t] = true;
            out.row_mut(t).copy_from_slice(v.row(i));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::ScatterRows {
                x,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar root; parameter gradients are added to the
    /// store's gradient buffers.
    pub fn backward(&self, root: NodeId, store: &mut ParamStore) -> Result<()> {
        if self.shape(root) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward from non-scalar root {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Matrix::scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Some(path) = &node.param {
                store.grad_mut(path)?.add_assign(&g);
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(())
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let par = self.par;
        let mut acc = |id: NodeId, m: Matrix| match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&m),
            slot @ None => *slot = Some(m),
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(a), self.value(b));
                if self.needs(a) {
                    let da = if ta {
                        bv.matmul_with(g, tb, true, par)?
                    } else {
                        g.matmul_with(bv, false, !tb, par)?
                    };
                    acc(a, da);
                }
                if self.needs(b) {
                    let db = if tb {
                        g.matmul_with(av, true, ta, par)?
                    } else {
                        av.matmul_with(g, !ta, false, par)?
                    };
                    acc(b, db);
                }
            }
            &Op::AddRow { x, bias } => {
                if self.needs(bias) {
                    let mut db = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, v) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    acc(bias, db);
                }
                if self.needs(x) {
                    acc(x, g.clone());
                }
            }
            &Op::Add { a, b } => {
                if self.needs(a) {
                    acc(a, g.clone());
                }
                if self.needs(b) {
                    acc(b, g.clone());
                }
            }
            &Op::Scale { x, s } => acc(x, g.scale(s)),
            &Op::Relu { x } => {
                let xv = self.value(x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(gv, &t)| if t > 0.0 { *gv } else { 0.0 })
                    .collect();
                acc(x, Matrix::from_vec(g.rows(), g.cols(), data)?);
            }
            &Op::ColSlice { x, start } => {
                let (rows, cols) = self.shape(x);
                let mut dx = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    dx.row_mut(r)[start..start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(x, dx);
            }
            Op::ConcatCols { xs } => {
                let mut offset = 0;
                for &x in xs {
                    let (rows, cols) = self.shape(x);
                    if self.needs(x) {
                        let mut dx = Matrix::zeros(rows, cols);
                        for r in 0..rows {
                            dx.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        acc(x, dx);
                    }
                    offset += cols;
                }
            }
            &Op::Reshape { x } => {
                let (rows, cols) = self.shape(x);
                acc(x, Matrix::from_vec(rows, cols, g.data().to_vec())?);
            }
            &Op::Transpose { x } => acc(x, g.transpose()),
            Op::MaskRows { x, keep } => {
                let mut dx = g.clone();
                for (r, &k) in keep.iter().enumerate() {
                    if !k {
                        dx.row_mut(r).fill(0.0);
                    }
                }
                acc(*x, dx);
            }
            &Op::MaskedSoftmaxRows { x } => {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let inner = super::matrix::dot(yr, gr);
                    for (d, (yv, gv)) in dx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *d = yv * (gv - inner);
                    }
                }
                acc(x, dx);
            }
            &Op::LogSoftmaxRows { x } => {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let gsum: f64 = g.row(r).iter().sum();
                    for (d, (yv, gv)) in dx.row_mut(r).iter_mut().zip(y.row(r).iter().zip(g.row(r))) {
                        *d = gv - yv.exp() * gsum;
                    }
                }
                acc(x, dx);
            }
            &Op::Diag { x } => {
                let n = g.rows();
                let mut dx = Matrix::zeros(n, n);
                for i in 0..n {
                    dx.set(i, i, g.get(i, 0));
                }
                acc(x, dx);
            }
            &Op::SumAll { x } => {
                let (rows, cols) = self.shape(x);
                acc(x, Matrix::filled(rows, cols, g.data()[0]));
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let inner = super::matrix::dot(yr, gr);
                    for (d, (yv, gv)) in dx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *d = (gv - yv * inner) / norms[r];
                    }
                }
                acc(*x, dx);
            }
            &Op::GroupScores {
                q,
                k,
                q_per_group,
                group_len,
                scale,
            } => {
                let (qv, kv) = (self.value(q), self.value(k));
                let mut dq = Matrix::zeros(qv.rows(), qv.cols());
                let mut dk = Matrix::zeros(kv.rows(), kv.cols());
                for r in 0..qv.rows() {
                    let base = (r / q_per_group) * group_len;
                    for j in 0..group_len {
                        let gs = g.get(r, j) * scale;
                        if gs == 0.0 {
                            continue;
                        }
                        let krow = base + j;
                        for c in 0..qv.cols() {
                            dq.data_mut()[r * qv.cols() + c] += gs * kv.get(krow, c);
                            dk.data_mut()[krow * kv.cols() + c] += gs * qv.get(r, c);
                        }
                    }
                }
                if self.needs(q) {
                    acc(q, dq);
                }
                if self.needs(k) {
                    acc(k, dk);
                }
            }
            &Op::GroupApply {
                a,
                v,
                q_per_group,
                group_len,
            } => {
                let (av, vv) = (self.value(a), self.value(v));
                let mut da = Matrix::zeros(av.rows(), av.cols());
                let mut dv = Matrix::zeros(vv.rows(), vv.cols());
                for r in 0..av.rows() {
                    let base = (r / q_per_group) * group_len;
                    for j in 0..group_len {
                        let vrow = base + j;
                        da.set(r, j, super::matrix::dot(g.row(r), vv.row(vrow)));
                        let w = av.get(r, j);
                        if w != 0.0 {
                            for (d, gv) in dv.row_mut(vrow).iter_mut().zip(g.row(r)) {
                                *d += w * gv;
                            }
                        }
                    }
                }
                if self.needs(a) {
                    acc(a, da);
                }
                if self.needs(v) {
                    acc(v, dv);
                }
            }
            Op::SegmentMax { x, argmax } => {
                let (rows, cols) = self.shape(*x);
                let mut dx = Matrix::zeros(rows, cols);
                for s in 0..g.rows() {
                    for c in 0..cols {
                        let r = argmax[s * cols + c];
                        dx.data_mut()[r * cols + c] += g.get(s, c);
                    }
                }
                acc(*x, dx);
            }
            Op::ScatterRows { x, targets } => {
                let cols = g.cols();
                let mut dx = Matrix::zeros(targets.len(), cols);
                for (i, &t) in targets.iter().enumerate() {
                    dx.row_mut(i).copy_from_slice(g.row(t));
                }
                acc(*x, dx);
            }
        }
        Ok(())
    }
}

fn check_groups(q_rows: usize, kv_rows: usize, q_per_group: usize, group_len: usize) -> Result<()> {
    if q_per_group == 0 || group_len == 0 || !q_rows.is_multiple_of(q_per_group) {
        return Err(Error::Dimension("group layout".into()));
    }
    if (q_rows / q_per_group) * group_len != kv_rows {
        return Err(Error::Dimension(format!(
            "{q_rows} query rows in groups of {q_per_group} against {kv_rows} rows in groups of {group_len}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.constant(Matrix::zeros(2, 2));
        let mut store = ParamStore::new();
        assert!(matches!(g.backward(x, &mut store), Err(Error::Contract(_))));
    }

    #[test]
    fn quadratic_gradient_is_exact() {
        // loss = sum((x W)^2), dL/dW = 2 xᵀ (x W)
        let mut store = ParamStore::new();
        store
            .insert("w", Matrix::from_rows(&[[1.0, -2.0], [0.5, 3.0]]).unwrap())
            .unwrap();
        let mut g = Graph::new();
        let x = g.constant(Matrix::from_rows(&[[1.0, 2.0]]).unwrap());
        let w = g.param(&store, "w").unwrap();
        let y = g.matmul(x, w).unwrap();
        let yy = g.group_scores(y, y, 1, 1, 1.0).unwrap();
        let l = g.sum(yy);
        g.backward(l, &mut store).unwrap();
        // y = [2, 4]
        let want = [4.0, 8.0, 8.0, 16.0];
        assert_eq!(store.grad("w").unwrap().data(), &want);
    }

    #[test]
    fn constants_do_not_request_gradients() {
        let mut g = Graph::new();
        let a = g.constant(Matrix::filled(2, 2, 1.0));
        let b = g.relu(a);
        assert!(!g.nodes[b.0].requires_grad);
    }

    #[test]
    fn masked_softmax_rejects_all_false_row() {
        let mut g = Graph::new();
        let a = g.constant(Matrix::zeros(1, 2));
        assert!(matches!(
            g.masked_softmax_rows(a, &[false, false]),
            Err(Error::EmptyScene)
        ));
    }

    #[test]
    fn scatter_rejects_duplicate_target() {
        let mut g = Graph::new();
        let a = g.constant(Matrix::zeros(2, 2));
        assert!(g.scatter_rows(a, &[1, 1], 3).is_err());
        assert!(g.scatter_rows(a, &[0, 2], 3).is_ok());
    }
}
