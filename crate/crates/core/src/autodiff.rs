//! Reverse-mode tape over row-major matrices.
//!
//! One tape per training step. Values are computed eagerly on append; backward
//! sweeps node ids in descending order, sending each node's gradient to its
//! parents in declaration order, which makes gradient accumulation bitwise
//! deterministic.

use crate::error::{SvxError, SvxResult};
use crate::matrix::{Matrix, Real};
use std::collections::HashMap;
use std::rc::Rc;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named trainable parameters in insertion order. Insertion order is the
/// canonical parameter order for the optimizer.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Matrix<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> ParamStore<T> {
        ParamStore { names: Vec::new(), values: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: Matrix<T>) -> SvxResult<ParamId> {
        if self.index.contains_key(name) {
            return Err(SvxError::DuplicateParameter { name: name.to_string() });
        }
        let id = self.values.len();
        self.index.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.values.push(value);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn require(&self, name: &str) -> SvxResult<ParamId> {
        self.find(name).ok_or_else(|| SvxError::MissingParameter { name: name.to_string() })
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|m| m.cast()).collect(),
            index: self.index.clone(),
        }
    }

    /// Total scalar entries across all parameters.
    pub fn entry_count(&self) -> usize {
        self.values.iter().map(|m| m.rows() * m.cols()).sum()
    }
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore::new()
    }
}

/// Offset-grouped sparse connection table: pairs[k] lists (input-row,
/// output-row) pairs wired through weight block k.
pub type OffsetPairs = Rc<Vec<Vec<(u32, u32)>>>;

enum Op<T: Real> {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    RowAdd(NodeId, NodeId),
    Scale(NodeId, T),
    Relu(NodeId),
    Gelu(NodeId),
    Sigmoid(NodeId),
    Ln(NodeId),
    Exp(NodeId),
    SoftmaxRows(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    GroupNorm { x: NodeId, gain: NodeId, bias: NodeId, groups: usize },
    GatherRows { x: NodeId, rows: Rc<Vec<usize>> },
    ScatterAddRows { x: NodeId, rows: Rc<Vec<usize>> },
    SumAll(NodeId),
    MeanAll(NodeId),
    SumRows(NodeId),
    MeanRows(NodeId),
    ConcatCols(NodeId, NodeId),
    SliceCols { x: NodeId, start: usize },
    Transpose(NodeId),
    Clamp { x: NodeId, lo: T, hi: T },
    BceWithLogitsSum { logits: NodeId, targets: Matrix<T> },
    GatherMatScatter { x: NodeId, w: NodeId, pairs: OffsetPairs },
}

struct Node<T: Real> {
    value: Matrix<T>,
    op: Op<T>,
}

/// Per-node gradients produced by a backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Matrix<T>> {
        self.grads[id.0].as_ref()
    }
}

const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C1: f64 = 0.044_715;
const NORM_EPS: f64 = 1e-5;

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<usize, NodeId>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Tape<T> {
        Tape { nodes: Vec::new(), param_nodes: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    /// Discretized non-smooth state of the graph: one code per ReLU input
    /// entry (positive or not) and per Clamp input entry (below, inside,
    /// above the bounds). Two evaluations of the same graph are
    /// finite-difference compatible only when these agree; a disagreement
    /// means the perturbation crossed a kink.
    pub fn kink_signature(&self) -> Vec<u8> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for &v in self.nodes[x.0].value.data() {
                        sig.push((v > T::zero()) as u8);
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    for &v in self.nodes[x.0].value.data() {
                        sig.push(if v < *lo {
                            0
                        } else if v > *hi {
                            2
                        } else {
                            1
                        });
                    }
                }
                _ => {}
            }
        }
        sig
    }

    /// Smallest distance from any ReLU input to its kink, or from any Clamp
    /// input to a bound, across the whole graph. Finite-difference checks on
    /// small graphs use this to reject instances where central differences
    /// straddle a non-smooth point; infinite when the graph has no kinked op.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for &v in self.nodes[x.0].value.data() {
                        margin = margin.min(Real::to_f64(v).abs());
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    let (lo, hi) = (Real::to_f64(*lo), Real::to_f64(*hi));
                    for &v in self.nodes[x.0].value.data() {
                        let v = Real::to_f64(v);
                        margin = margin.min((v - lo).abs().min((v - hi).abs()));
                    }
                }
                _ => {}
            }
        }
        margin
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Non-parameter leaf: inputs, constants, frozen buffers.
    pub fn leaf(&mut self, value: Matrix<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Parameter leaf, memoized so repeated requests share one node and its
    /// gradient accumulates across all uses.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id.0) {
            return n;
        }
        let n = self.push(store.get(id).clone(), Op::Leaf);
        self.param_nodes.insert(id.0, n);
        n
    }

    /// Tape node currently bound to a parameter, if any.
    pub fn param_node(&self, id: ParamId) -> Option<NodeId> {
        self.param_nodes.get(&id.0).copied()
    }

    fn shape_err(&self, op: &'static str, expected: String, got: String) -> SvxError {
        SvxError::ShapeMismatch { op, expected, got }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> SvxResult<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> SvxResult<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> SvxResult<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> SvxResult<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// x (N×C) + row (1×C), broadcast down the rows.
    pub fn row_add(&mut self, x: NodeId, row: NodeId) -> SvxResult<NodeId> {
        let (n, c) = self.shape(x);
        let (rr, rc) = self.shape(row);
        if rr != 1 || rc != c {
            return Err(self.shape_err("row_add", format!("1x{c} row"), format!("{rr}x{rc}")));
        }
        let mut v = self.value(x).clone();
        for r in 0..n {
            for j in 0..c {
                let add = self.nodes[row.0].value.get(0, j);
                let cur = v.get(r, j);
                v.set(r, j, cur + add);
            }
        }
        Ok(self.push(v, Op::RowAdd(x, row)))
    }

    pub fn scale(&mut self, x: NodeId, s: T) -> NodeId {
        let v = self.value(x).scale(s);
        self.push(v, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| if a > T::zero() { a } else { T::zero() });
        self.push(v, Op::Relu(x))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let c0 = T::from_f64(GELU_C0);
        let c1 = T::from_f64(GELU_C1);
        let half = T::from_f64(0.5);
        let v = self.value(x).map(|a| {
            let inner = c0 * (a + c1 * a * a * a);
            half * a * (T::one() + inner.tanh())
        });
        self.push(v, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(sigmoid_scalar);
        self.push(v, Op::Sigmoid(x))
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| a.ln());
        self.push(v, Op::Ln(x))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| a.exp());
        self.push(v, Op::Exp(x))
    }

    /// Numerically stable softmax across each row.
    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let src = self.value(x);
        let (n, c) = src.shape();
        let mut v = Matrix::zeros(n, c);
        for r in 0..n {
            let row = src.row(r);
            let mut mx = T::neg_infinity();
            for &a in row {
                if a > mx {
                    mx = a;
                }
            }
            let mut denom = T::zero();
            for j in 0..c {
                let e = (row[j] - mx).exp();
                v.set(r, j, e);
                denom = denom + e;
            }
            for j in 0..c {
                let e = v.get(r, j);
                v.set(r, j, e / denom);
            }
        }
        self.push(v, Op::SoftmaxRows(x))
    }

    /// Per-row normalization over channels with learned gain/bias (both 1×C).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> SvxResult<NodeId> {
        let (n, c) = self.shape(x);
        for (nm, id) in [("gain", gain), ("bias", bias)] {
            let s = self.shape(id);
            if s != (1, c) {
                return Err(self.shape_err("layer_norm", format!("1x{c} {nm}"), format!("{s:?}")));
            }
        }
        let eps = T::from_f64(NORM_EPS);
        let src = self.value(x);
        let g = &self.nodes[gain.0].value;
        let b = &self.nodes[bias.0].value;
        let mut v = Matrix::zeros(n, c);
        for r in 0..n {
            let row = src.row(r);
            let (mu, var) = mean_var(row);
            let s = (var + eps).sqrt();
            for j in 0..c {
                let yhat = (row[j] - mu) / s;
                v.set(r, j, g.get(0, j) * yhat + b.get(0, j));
            }
        }
        Ok(self.push(v, Op::LayerNorm { x, gain, bias }))
    }

    /// Normalize over all rows within each channel group (group statistics
    /// across the entire active set), then apply per-channel gain/bias.
    pub fn group_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        groups: usize,
    ) -> SvxResult<NodeId> {
        let (n, c) = self.shape(x);
        if groups == 0 || c % groups != 0 {
            return Err(SvxError::BadGroupCount { channels: c, groups });
        }
        for (nm, id) in [("gain", gain), ("bias", bias)] {
            let s = self.shape(id);
            if s != (1, c) {
                return Err(self.shape_err("group_norm", format!("1x{c} {nm}"), format!("{s:?}")));
            }
        }
        let cg = c / groups;
        let eps = T::from_f64(NORM_EPS);
        let src = self.value(x);
        let g = &self.nodes[gain.0].value;
        let b = &self.nodes[bias.0].value;
        let mut v = Matrix::zeros(n, c);
        for grp in 0..groups {
            let (mu, var) = group_stats(src, grp * cg, (grp + 1) * cg);
            let s = (var + eps).sqrt();
            for r in 0..n {
                for j in grp * cg..(grp + 1) * cg {
                    let yhat = (src.get(r, j) - mu) / s;
                    v.set(r, j, g.get(0, j) * yhat + b.get(0, j));
                }
            }
        }
        Ok(self.push(v, Op::GroupNorm { x, gain, bias, groups }))
    }

    pub fn gather_rows(&mut self, x: NodeId, rows: Rc<Vec<usize>>) -> SvxResult<NodeId> {
        let (n, c) = self.shape(x);
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(self.shape_err("gather_rows", format!("rows < {n}"), format!("{bad}")));
        }
        let src = self.value(x);
        let mut v = Matrix::zeros(rows.len(), c);
        for (out_r, &in_r) in rows.iter().enumerate() {
            v.row_mut(out_r).copy_from_slice(src.row(in_r));
        }
        Ok(self.push(v, Op::GatherRows { x, rows }))
    }

    /// out has `out_rows` rows; out[rows[r]] += x[r]. Duplicate targets add.
    pub fn scatter_add_rows(
        &mut self,
        x: NodeId,
        rows: Rc<Vec<usize>>,
        out_rows: usize,
    ) -> SvxResult<NodeId> {
        let (n, c) = self.shape(x);
        if rows.len() != n {
            return Err(self.shape_err("scatter_add_rows", format!("{n} indices"), format!("{}", rows.len())));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= out_rows) {
            return Err(self.shape_err(
                "scatter_add_rows",
                format!("targets < {out_rows}"),
                format!("{bad}"),
            ));
        }
        let src = self.value(x);
        let mut v = Matrix::zeros(out_rows, c);
        for (in_r, &out_r) in rows.iter().enumerate() {
            let dst = v.row_mut(out_r);
            for (d, &s) in dst.iter_mut().zip(src.row(in_r)) {
                *d = *d + s;
            }
        }
        Ok(self.push(v, Op::ScatterAddRows { x, rows }))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let mut acc = T::zero();
        for &a in self.value(x).data() {
            acc = acc + a;
        }
        self.push(Matrix::from_vec(1, 1, vec![acc]).unwrap(), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let count = {
            let (n, c) = self.shape(x);
            (n * c).max(1)
        };
        let mut acc = T::zero();
        for &a in self.value(x).data() {
            acc = acc + a;
        }
        let v = acc / T::from_f64(count as f64);
        self.push(Matrix::from_vec(1, 1, vec![v]).unwrap(), Op::MeanAll(x))
    }

    pub fn sum_rows(&mut self, x: NodeId) -> NodeId {
        let (n, _) = self.shape(x);
        let src = self.value(x);
        let mut v = Matrix::zeros(n, 1);
        for r in 0..n {
            let mut acc = T::zero();
            for &a in src.row(r) {
                acc = acc + a;
            }
            v.set(r, 0, acc);
        }
        self.push(v, Op::SumRows(x))
    }

    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let (n, c) = self.shape(x);
        let src = self.value(x);
        let inv = T::one() / T::from_f64(c.max(1) as f64);
        let mut v = Matrix::zeros(n, 1);
        for r in 0..n {
            let mut acc = T::zero();
            for &a in src.row(r) {
                acc = acc + a;
            }
            v.set(r, 0, acc * inv);
        }
        self.push(v, Op::MeanRows(x))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> SvxResult<NodeId> {
        let (na, ca) = self.shape(a);
        let (nb, cb) = self.shape(b);
        if na != nb {
            return Err(self.shape_err("concat_cols", format!("{na} rows"), format!("{nb} rows")));
        }
        let mut v = Matrix::zeros(na, ca + cb);
        for r in 0..na {
            v.row_mut(r)[..ca].copy_from_slice(self.nodes[a.0].value.row(r));
            v.row_mut(r)[ca..].copy_from_slice(self.nodes[b.0].value.row(r));
        }
        Ok(self.push(v, Op::ConcatCols(a, b)))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> SvxResult<NodeId> {
        let (n, c) = self.shape(x);
        if start >= end || end > c {
            return Err(self.shape_err("slice_cols", format!("0 ≤ start < end ≤ {c}"), format!("{start}..{end}")));
        }
        let src = self.value(x);
        let mut v = Matrix::zeros(n, end - start);
        for r in 0..n {
            v.row_mut(r).copy_from_slice(&src.row(r)[start..end]);
        }
        Ok(self.push(v, Op::SliceCols { x, start }))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).transpose();
        self.push(v, Op::Transpose(x))
    }

    /// Identity inside [lo, hi], saturate outside; gradient passes through on
    /// the closed interval and is zero outside.
    pub fn clamp(&mut self, x: NodeId, lo: T, hi: T) -> NodeId {
        let v = self.value(x).map(|a| if a < lo { lo } else if a > hi { hi } else { a });
        self.push(v, Op::Clamp { x, lo, hi })
    }

    /// Σ over entries of max(l,0) − l·t + ln(1 + e^{−|l|}): the numerically
    /// stable binary cross-entropy on logits, summed, with constant targets.
    pub fn bce_with_logits_sum(&mut self, logits: NodeId, targets: Matrix<T>) -> SvxResult<NodeId> {
        let shape = self.shape(logits);
        if targets.shape() != shape {
            return Err(self.shape_err(
                "bce_with_logits_sum",
                format!("{shape:?} targets"),
                format!("{:?}", targets.shape()),
            ));
        }
        let mut acc = T::zero();
        for (&l, &t) in self.value(logits).data().iter().zip(targets.data()) {
            let pos = if l > T::zero() { l } else { T::zero() };
            acc = acc + pos - l * t + (-l.abs()).exp().ln_1p();
        }
        let v = Matrix::from_vec(1, 1, vec![acc]).unwrap();
        Ok(self.push(v, Op::BceWithLogitsSum { logits, targets }))
    }

    /// Sparse convolution core: out[j] += x[i] · W_k for every (i, j) in
    /// pairs[k], where W_k is the k-th Cin×Cout block of w ((K·Cin)×Cout).
    /// Output has out_rows rows; rows with no contributions stay zero.
    pub fn gather_matmul_scatter(
        &mut self,
        x: NodeId,
        w: NodeId,
        pairs: OffsetPairs,
        out_rows: usize,
    ) -> SvxResult<NodeId> {
        let (n, cin) = self.shape(x);
        let (wr, cout) = self.shape(w);
        let k = pairs.len();
        if k == 0 || wr != k * cin {
            return Err(self.shape_err(
                "gather_matmul_scatter",
                format!("{k}·{cin} weight rows"),
                format!("{wr}"),
            ));
        }
        for pk in pairs.iter() {
            if let Some(&(i, j)) = pk.iter().find(|&&(i, j)| i as usize >= n || j as usize >= out_rows)
            {
                return Err(self.shape_err(
                    "gather_matmul_scatter",
                    format!("pairs < ({n}, {out_rows})"),
                    format!("({i}, {j})"),
                ));
            }
        }
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let mut out = Matrix::zeros(out_rows, cout);
        for (ki, pk) in pairs.iter().enumerate() {
            for &(i, j) in pk {
                let xr = xv.row(i as usize);
                let dst = out.row_mut(j as usize);
                for (c, &a) in xr.iter().enumerate() {
                    if a == T::zero() {
                        continue;
                    }
                    let wrow = wv.row(ki * cin + c);
                    for (d, &b) in dst.iter_mut().zip(wrow) {
                        *d = *d + a * b;
                    }
                }
            }
        }
        Ok(self.push(out, Op::GatherMatScatter { x, w, pairs }))
    }

    /// Reverse sweep from a scalar loss node. Returns per-node gradients.
    pub fn backward(&self, loss: NodeId) -> SvxResult<Gradients<T>> {
        let (lr, lc) = self.shape(loss);
        if (lr, lc) != (1, 1) {
            return Err(SvxError::NonScalarLoss { rows: lr, cols: lc });
        }
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::from_vec(1, 1, vec![T::one()]).unwrap());
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, id: usize, g: &Matrix<T>, grads: &mut Vec<Option<Matrix<T>>>) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let da = g.matmul(&bv.transpose()).expect("shapes fixed at forward");
                let db = av.transpose().matmul(g).expect("shapes fixed at forward");
                accum(&mut grads[a.0], da);
                accum(&mut grads[b.0], db);
            }
            Op::Add(a, b) => {
                accum(&mut grads[a.0], g.clone());
                accum(&mut grads[b.0], g.clone());
            }
            Op::Sub(a, b) => {
                accum(&mut grads[a.0], g.clone());
                accum(&mut grads[b.0], g.scale(-T::one()));
            }
            Op::Mul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                accum(&mut grads[a.0], g.zip_map(bv, |x, y| x * y).unwrap());
                accum(&mut grads[b.0], g.zip_map(av, |x, y| x * y).unwrap());
            }
            Op::RowAdd(x, row) => {
                accum(&mut grads[x.0], g.clone());
                let (n, c) = g.shape();
                let mut dr = Matrix::zeros(1, c);
                for r in 0..n {
                    for j in 0..c {
                        let cur = dr.get(0, j);
                        dr.set(0, j, cur + g.get(r, j));
                    }
                }
                accum(&mut grads[row.0], dr);
            }
            Op::Scale(x, s) => {
                accum(&mut grads[x.0], g.scale(*s));
            }
            Op::Relu(x) => {
                // subgradient 0 at exactly 0
                let xv = &self.nodes[x.0].value;
                accum(
                    &mut grads[x.0],
                    g.zip_map(xv, |gv, a| if a > T::zero() { gv } else { T::zero() }).unwrap(),
                );
            }
            Op::Gelu(x) => {
                let c0 = T::from_f64(GELU_C0);
                let c1 = T::from_f64(GELU_C1);
                let half = T::from_f64(0.5);
                let three = T::from_f64(3.0);
                let xv = &self.nodes[x.0].value;
                let dx = g
                    .zip_map(xv, |gv, a| {
                        let t = (c0 * (a + c1 * a * a * a)).tanh();
                        let sech2 = T::one() - t * t;
                        let d = half * (T::one() + t)
                            + half * a * sech2 * c0 * (T::one() + three * c1 * a * a);
                        gv * d
                    })
                    .unwrap();
                accum(&mut grads[x.0], dx);
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                accum(&mut grads[x.0], g.zip_map(y, |gv, s| gv * s * (T::one() - s)).unwrap());
            }
            Op::Ln(x) => {
                let xv = &self.nodes[x.0].value;
                accum(&mut grads[x.0], g.zip_map(xv, |gv, a| gv / a).unwrap());
            }
            Op::Exp(x) => {
                let y = &node.value;
                accum(&mut grads[x.0], g.zip_map(y, |gv, e| gv * e).unwrap());
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let (n, c) = y.shape();
                let mut dx = Matrix::zeros(n, c);
                for r in 0..n {
                    let mut dot = T::zero();
                    for j in 0..c {
                        dot = dot + g.get(r, j) * y.get(r, j);
                    }
                    for j in 0..c {
                        dx.set(r, j, y.get(r, j) * (g.get(r, j) - dot));
                    }
                }
                accum(&mut grads[x.0], dx);
            }
            Op::LayerNorm { x, gain, bias } => {
                let xv = &self.nodes[x.0].value;
                let gv = &self.nodes[gain.0].value;
                let (n, c) = xv.shape();
                let eps = T::from_f64(NORM_EPS);
                let inv_c = T::one() / T::from_f64(c as f64);
                let mut dx = Matrix::zeros(n, c);
                let mut dgain = Matrix::zeros(1, c);
                let mut dbias = Matrix::zeros(1, c);
                for r in 0..n {
                    let row = xv.row(r);
                    let (mu, var) = mean_var(row);
                    let s = (var + eps).sqrt();
                    let mut mean_gg = T::zero();
                    let mut mean_ggy = T::zero();
                    for j in 0..c {
                        let yhat = (row[j] - mu) / s;
                        let gg = g.get(r, j) * gv.get(0, j);
                        mean_gg = mean_gg + gg;
                        mean_ggy = mean_ggy + gg * yhat;
                        let cur_g = dgain.get(0, j);
                        dgain.set(0, j, cur_g + g.get(r, j) * yhat);
                        let cur_b = dbias.get(0, j);
                        dbias.set(0, j, cur_b + g.get(r, j));
                    }
                    mean_gg = mean_gg * inv_c;
                    mean_ggy = mean_ggy * inv_c;
                    for j in 0..c {
                        let yhat = (row[j] - mu) / s;
                        let gg = g.get(r, j) * gv.get(0, j);
                        dx.set(r, j, (gg - mean_gg - yhat * mean_ggy) / s);
                    }
                }
                accum(&mut grads[x.0], dx);
                accum(&mut grads[gain.0], dgain);
                accum(&mut grads[bias.0], dbias);
            }
            Op::GroupNorm { x, gain, bias, groups } => {
                let xv = &self.nodes[x.0].value;
                let gv = &self.nodes[gain.0].value;
                let (n, c) = xv.shape();
                let cg = c / groups;
                let eps = T::from_f64(NORM_EPS);
                let mut dx = Matrix::zeros(n, c);
                let mut dgain = Matrix::zeros(1, c);
                let mut dbias = Matrix::zeros(1, c);
                for grp in 0..*groups {
                    let (lo, hi) = (grp * cg, (grp + 1) * cg);
                    let m = n * cg;
                    if m == 0 {
                        continue;
                    }
                    let (mu, var) = group_stats(xv, lo, hi);
                    let s = (var + eps).sqrt();
                    let inv_m = T::one() / T::from_f64(m as f64);
                    let mut mean_gg = T::zero();
                    let mut mean_ggy = T::zero();
                    for r in 0..n {
                        for j in lo..hi {
                            let yhat = (xv.get(r, j) - mu) / s;
                            let gg = g.get(r, j) * gv.get(0, j);
                            mean_gg = mean_gg + gg;
                            mean_ggy = mean_ggy + gg * yhat;
                            let cur_g = dgain.get(0, j);
                            dgain.set(0, j, cur_g + g.get(r, j) * yhat);
                            let cur_b = dbias.get(0, j);
                            dbias.set(0, j, cur_b + g.get(r, j));
                        }
                    }
                    mean_gg = mean_gg * inv_m;
                    mean_ggy = mean_ggy * inv_m;
                    for r in 0..n {
                        for j in lo..hi {
                            let yhat = (xv.get(r, j) - mu) / s;
                            let gg = g.get(r, j) * gv.get(0, j);
                            dx.set(r, j, (gg - mean_gg - yhat * mean_ggy) / s);
                        }
                    }
                }
                accum(&mut grads[x.0], dx);
                accum(&mut grads[gain.0], dgain);
                accum(&mut grads[bias.0], dbias);
            }
            Op::GatherRows { x, rows } => {
                let (n, c) = self.nodes[x.0].value.shape();
                let mut dx = Matrix::zeros(n, c);
                for (out_r, &in_r) in rows.iter().enumerate() {
                    let dst = dx.row_mut(in_r);
                    for (d, &s) in dst.iter_mut().zip(g.row(out_r)) {
                        *d = *d + s;
                    }
                }
                accum(&mut grads[x.0], dx);
            }
            Op::ScatterAddRows { x, rows } => {
                let (n, c) = self.nodes[x.0].value.shape();
                let mut dx = Matrix::zeros(n, c);
                for (in_r, &out_r) in rows.iter().enumerate() {
                    dx.row_mut(in_r).copy_from_slice(g.row(out_r));
                }
                accum(&mut grads[x.0], dx);
            }
            Op::SumAll(x) => {
                let (n, c) = self.nodes[x.0].value.shape();
                accum(&mut grads[x.0], Matrix::full(n, c, g.get(0, 0)));
            }
            Op::MeanAll(x) => {
                let (n, c) = self.nodes[x.0].value.shape();
                let v = g.get(0, 0) / T::from_f64(((n * c).max(1)) as f64);
                accum(&mut grads[x.0], Matrix::full(n, c, v));
            }
            Op::SumRows(x) => {
                let (n, c) = self.nodes[x.0].value.shape();
                let mut dx = Matrix::zeros(n, c);
                for r in 0..n {
                    let gv = g.get(r, 0);
                    for j in 0..c {
                        dx.set(r, j, gv);
                    }
                }
                accum(&mut grads[x.0], dx);
            }
            Op::MeanRows(x) => {
                let (n, c) = self.nodes[x.0].value.shape();
                let inv = T::one() / T::from_f64(c.max(1) as f64);
                let mut dx = Matrix::zeros(n, c);
                for r in 0..n {
                    let gv = g.get(r, 0) * inv;
                    for j in 0..c {
                        dx.set(r, j, gv);
                    }
                }
                accum(&mut grads[x.0], dx);
            }
            Op::ConcatCols(a, b) => {
                let (n, ca) = self.nodes[a.0].value.shape();
                let (_, cb) = self.nodes[b.0].value.shape();
                let mut da = Matrix::zeros(n, ca);
                let mut db = Matrix::zeros(n, cb);
                for r in 0..n {
                    da.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                    db.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                }
                accum(&mut grads[a.0], da);
                accum(&mut grads[b.0], db);
            }
            Op::SliceCols { x, start } => {
                let (n, c) = self.nodes[x.0].value.shape();
                let (_, gw) = g.shape();
                let mut dx = Matrix::zeros(n, c);
                for r in 0..n {
                    dx.row_mut(r)[*start..*start + gw].copy_from_slice(g.row(r));
                }
                accum(&mut grads[x.0], dx);
            }
            Op::Transpose(x) => {
                accum(&mut grads[x.0], g.transpose());
            }
            Op::Clamp { x, lo, hi } => {
                let xv = &self.nodes[x.0].value;
                let dx = g
                    .zip_map(xv, |gv, a| if a >= *lo && a <= *hi { gv } else { T::zero() })
                    .unwrap();
                accum(&mut grads[x.0], dx);
            }
            Op::BceWithLogitsSum { logits, targets } => {
                let scale = g.get(0, 0);
                let lv = &self.nodes[logits.0].value;
                let dl = lv.zip_map(targets, |l, t| (sigmoid_scalar(l) - t) * scale).unwrap();
                accum(&mut grads[logits.0], dl);
            }
            Op::GatherMatScatter { x, w, pairs } => {
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                let (n, cin) = xv.shape();
                let (_, cout) = wv.shape();
                let mut dx = Matrix::zeros(n, cin);
                let mut dw = Matrix::zeros(wv.rows(), cout);
                for (ki, pk) in pairs.iter().enumerate() {
                    for &(i, j) in pk {
                        let grow = g.row(j as usize);
                        let xr = xv.row(i as usize);
                        // dX[i,c] += dot(g[j], W_k[c,:]); dW_k[c,:] += x[i,c]·g[j]
                        let dxr = dx.row_mut(i as usize);
                        for c in 0..cin {
                            let wrow = wv.row(ki * cin + c);
                            let mut acc = T::zero();
                            for (&gv, &wvv) in grow.iter().zip(wrow) {
                                acc = acc + gv * wvv;
                            }
                            dxr[c] = dxr[c] + acc;
                            let a = xr[c];
                            if a != T::zero() {
                                let dwrow = dw.row_mut(ki * cin + c);
                                for (d, &gv) in dwrow.iter_mut().zip(grow) {
                                    *d = *d + a * gv;
                                }
                            }
                        }
                    }
                }
                accum(&mut grads[x.0], dx);
                accum(&mut grads[w.0], dw);
            }
        }
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Tape::new()
    }
}

fn sigmoid_scalar<T: Real>(a: T) -> T {
    // split on sign so exp never overflows
    if a >= T::zero() {
        T::one() / (T::one() + (-a).exp())
    } else {
        let e = a.exp();
        e / (T::one() + e)
    }
}

fn accum<T: Real>(slot: &mut Option<Matrix<T>>, delta: Matrix<T>) {
    match slot {
        Some(m) => {
            debug_assert_eq!(m.shape(), delta.shape());
            for (a, &b) in m.data_mut().iter_mut().zip(delta.data()) {
                *a = *a + b;
            }
        }
        None => *slot = Some(delta),
    }
}

fn mean_var<T: Real>(row: &[T]) -> (T, T) {
    let inv = T::one() / T::from_f64(row.len().max(1) as f64);
    let mut mu = T::zero();
    for &a in row {
        mu = mu + a;
    }
    mu = mu * inv;
    let mut var = T::zero();
    for &a in row {
        let d = a - mu;
        var = var + d * d;
    }
    (mu, var * inv)
}

fn group_stats<T: Real>(x: &Matrix<T>, lo: usize, hi: usize) -> (T, T) {
    let m = x.rows() * (hi - lo);
    let inv = T::one() / T::from_f64(m.max(1) as f64);
    let mut mu = T::zero();
    for r in 0..x.rows() {
        for j in lo..hi {
            mu = mu + x.get(r, j);
        }
    }
    mu = mu * inv;
    let mut var = T::zero();
    for r in 0..x.rows() {
        for j in lo..hi {
            let d = x.get(r, j) - mu;
            var = var + d * d;
        }
    }
    (mu, var * inv)
}

/// Central-difference check of the whole tape against analytic gradients.
/// Rebuilds the graph via `builder` for every perturbed entry; returns the
/// worst relative error |analytic − numeric| / max(1e-8, |analytic| + |numeric|).
pub fn grad_check<F>(builder: F, inputs: &[Matrix<f64>], eps: f64) -> SvxResult<f64>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> SvxResult<NodeId>,
{
    let eval = |mats: &[Matrix<f64>]| -> SvxResult<(Tape<f64>, Vec<NodeId>, NodeId)> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = mats.iter().map(|m| tape.leaf(m.clone())).collect();
        let loss = builder(&mut tape, &ids)?;
        let (r, c) = tape.shape(loss);
        if (r, c) != (1, 1) {
            return Err(SvxError::NonScalarLoss { rows: r, cols: c });
        }
        if !tape.value(loss).is_finite() {
            return Err(SvxError::NonFinite { label: "grad_check loss" });
        }
        Ok((tape, ids, loss))
    };

    let (tape, ids, loss) = eval(inputs)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Matrix<f64>> = ids
        .iter()
        .map(|&id| {
            grads
                .get(id)
                .cloned()
                .unwrap_or_else(|| {
                    let (r, c) = tape.shape(id);
                    Matrix::zeros(r, c)
                })
        })
        .collect();
    for m in &analytic {
        if !m.is_finite() {
            return Err(SvxError::NonFinite { label: "analytic gradient" });
        }
    }

    let mut worst = 0.0f64;
    let mut work: Vec<Matrix<f64>> = inputs.to_vec();
    for mi in 0..inputs.len() {
        for idx in 0..inputs[mi].data().len() {
            let orig = work[mi].data()[idx];
            work[mi].data_mut()[idx] = orig + eps;
            let (tp, _, lp) = eval(&work)?;
            let fp = tp.value(lp).get(0, 0);
            work[mi].data_mut()[idx] = orig - eps;
            let (tm, _, lm) = eval(&work)?;
            let fm = tm.value(lm).get(0, 0);
            work[mi].data_mut()[idx] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            if !numeric.is_finite() {
                return Err(SvxError::NonFinite { label: "numeric gradient" });
            }
            let a = analytic[mi].data()[idx];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

/// Outcome of a kink-aware finite-difference sweep.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Entries whose two evaluations landed in different piecewise-linear
    /// regions (some ReLU or clamp input crossed its kink between −eps and
    /// +eps). Central differences do not estimate a derivative there.
    pub skipped: usize,
    /// Input matrix and flat entry index of the worst error.
    pub worst_input: usize,
    pub worst_entry: usize,
    /// Analytic and numeric gradients at the worst entry, for telling a
    /// genuinely wrong derivative from finite-difference noise on a near-zero
    /// one.
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// `grad_check` for graphs with many ReLU inputs. On a large graph the
/// closest pre-activation to zero sits well inside any usable step size, so
/// some perturbations inevitably cross a kink; screening whole instances
/// (as the small per-op tests do) can never succeed. Instead every entry is
/// perturbed, and the ones whose ±eps evaluations disagree on the active
/// set are reported as skipped rather than scored.
///
/// Scoring subtracts a rounding-noise allowance before the relative error is
/// formed. Two evaluations of the loss differ by a few ulps even when the
/// parameter entry has no influence at all, so the central-difference
/// quotient carries ~ulp(loss)/(2 eps) of absolute noise. For entries whose
/// true gradient sits below that band the quotient is pure noise, and
/// dividing it by a tiny magnitude would flag correct derivatives. The
/// allowance (64 ulps of the loss scale) is far below the absolute error any
/// real defect produces on a gradient large enough for finite differences to
/// measure.
pub fn grad_check_kink_aware<F>(
    builder: F,
    inputs: &[Matrix<f64>],
    eps: f64,
) -> SvxResult<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> SvxResult<NodeId>,
{
    let eval = |mats: &[Matrix<f64>]| -> SvxResult<(Tape<f64>, Vec<NodeId>, NodeId)> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = mats.iter().map(|m| tape.leaf(m.clone())).collect();
        let loss = builder(&mut tape, &ids)?;
        let (r, c) = tape.shape(loss);
        if (r, c) != (1, 1) {
            return Err(SvxError::NonScalarLoss { rows: r, cols: c });
        }
        if !tape.value(loss).is_finite() {
            return Err(SvxError::NonFinite { label: "grad_check loss" });
        }
        Ok((tape, ids, loss))
    };

    let (tape, ids, loss) = eval(inputs)?;
    let noise = 64.0 * f64::EPSILON * tape.value(loss).get(0, 0).abs().max(1.0) / (2.0 * eps);
    let grads = tape.backward(loss)?;
    let analytic: Vec<Matrix<f64>> = ids
        .iter()
        .map(|&id| {
            grads.get(id).cloned().unwrap_or_else(|| {
                let (r, c) = tape.shape(id);
                Matrix::zeros(r, c)
            })
        })
        .collect();
    for m in &analytic {
        if !m.is_finite() {
            return Err(SvxError::NonFinite { label: "analytic gradient" });
        }
    }

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        skipped: 0,
        worst_input: 0,
        worst_entry: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    let mut work: Vec<Matrix<f64>> = inputs.to_vec();
    for mi in 0..inputs.len() {
        for idx in 0..inputs[mi].data().len() {
            let orig = work[mi].data()[idx];
            work[mi].data_mut()[idx] = orig + eps;
            let (tp, _, lp) = eval(&work)?;
            work[mi].data_mut()[idx] = orig - eps;
            let (tm, _, lm) = eval(&work)?;
            work[mi].data_mut()[idx] = orig;
            if tp.kink_signature() != tm.kink_signature() {
                report.skipped += 1;
                continue;
            }
            let numeric = (tp.value(lp).get(0, 0) - tm.value(lm).get(0, 0)) / (2.0 * eps);
            if !numeric.is_finite() {
                return Err(SvxError::NonFinite { label: "numeric gradient" });
            }
            let a = analytic[mi].data()[idx];
            let err = ((a - numeric).abs() - noise).max(0.0)
                / (a.abs() + numeric.abs()).max(1e-8);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_input = mi;
                report.worst_entry = idx;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}
