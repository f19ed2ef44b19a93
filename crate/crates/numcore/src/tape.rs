//! Reverse-mode differentiation tape.
//!
//! Every operation appends a node holding its output value. Nodes whose
//! inputs all lack `requires_grad` are stored as plain leaves, so frozen
//! sub-networks cost nothing during `backward`.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::kernels::{dot, gelu, gelu_grad, mm, mm_nt, mm_tn, sigmoid, softmax_into};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Sigmoid,
    Relu,
    LeakyRelu(Real),
    Tanh,
    Log,
    Exp,
    Gelu,
}

impl Unary {
    pub fn apply(self, x: Real) -> Real {
        match self {
            Unary::Sigmoid => sigmoid(x),
            Unary::Relu => x.max(0.0),
            Unary::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Unary::Tanh => x.tanh(),
            Unary::Log => x.ln(),
            Unary::Exp => x.exp(),
            Unary::Gelu => gelu(x),
        }
    }

    fn derivative(self, x: Real, y: Real) -> Real {
        match self {
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Unary::Tanh => 1.0 - y * y,
            Unary::Log => 1.0 / x,
            Unary::Exp => y,
            Unary::Gelu => gelu_grad(x),
        }
    }
}

/// Which named parameters receive gradients when bound to a tape.
#[derive(Clone, Debug, PartialEq)]
pub enum Trainable {
    All,
    Nothing,
    Prefixes(Vec<String>),
}

impl Trainable {
    pub fn prefix(p: &str) -> Self {
        Trainable::Prefixes(vec![p.to_string()])
    }

    pub fn matches(&self, name: &str) -> bool {
        match self {
            Trainable::All => true,
            Trainable::Nothing => false,
            Trainable::Prefixes(ps) => ps.iter().any(|p| name.starts_with(p.as_str())),
        }
    }
}

/// Row-grouped index lists: row `r` owns entries `offsets[r]..offsets[r + 1]`,
/// and entry `e` refers to source row `cols[e]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Segments {
    offsets: Vec<usize>,
    cols: Vec<usize>,
}

impl Segments {
    pub fn new(offsets: Vec<usize>, cols: Vec<usize>) -> Result<Self> {
        let ok = offsets.first() == Some(&0)
            && offsets.last() == Some(&cols.len())
            && offsets.windows(2).all(|w| w[0] <= w[1]);
        if !ok {
            return Err(Error::Contract("malformed segment offsets".into()));
        }
        Ok(Self { offsets, cols })
    }

    pub fn from_lists(lists: &[Vec<usize>]) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        let mut cols = Vec::new();
        offsets.push(0);
        for l in lists {
            cols.extend_from_slice(l);
            offsets.push(cols.len());
        }
        Self { offsets, cols }
    }

    pub fn rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn entries(&self) -> usize {
        self.cols.len()
    }

    pub fn range(&self, row: usize) -> std::ops::Range<usize> {
        self.offsets[row]..self.offsets[row + 1]
    }

    pub fn cols(&self) -> &[usize] {
        &self.cols
    }

    /// Row index of every entry, in entry order.
    pub fn entry_rows(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.cols.len());
        for r in 0..self.rows() {
            out.extend(std::iter::repeat_n(r, self.range(r).len()));
        }
        out
    }
}

/// Layout of a padded batch of sequences for [`Tape::attention`].
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayout {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub lengths: Vec<usize>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    MatmulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, Real),
    AddScalar(Var),
    Unary(Var, Unary),
    Clamp(Var, Real, Real),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<Real>,
        rstd: Vec<Real>,
        floored: Vec<bool>,
    },
    GatherRows(Var, Vec<usize>),
    SumAll(Var),
    SumRows(Var),
    ConcatCols(Var, Var),
    Reshape(Var),
    SliceRows(Var, usize),
    SegmentSoftmax(Var, Arc<Segments>),
    EdgeAggregate {
        weights: Var,
        x: Var,
        segs: Arc<Segments>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: Arc<AttentionLayout>,
        probs: Vec<Real>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Variance floor used by [`Tape::layer_norm`].
pub const LAYER_NORM_EPS: Real = 1e-5;

pub struct Tape {
    nodes: Vec<Node>,
    trainable: Trainable,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape on which every bound parameter is trainable.
    pub fn new() -> Self {
        Self::with_trainable(Trainable::All)
    }

    pub fn with_trainable(trainable: Trainable) -> Self {
        Self {
            nodes: Vec::new(),
            trainable,
            params: Vec::new(),
            param_index: HashMap::new(),
        }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Attention probabilities recorded by an [`Tape::attention`] node, laid
    /// out as `[batch, heads, seq, seq]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[Real]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        // Attention keeps its probabilities for inspection even when frozen.
        let keep = requires_grad || matches!(op, Op::Attention { .. });
        let op = if keep { op } else { Op::Leaf };
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

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient regardless of the trainable policy.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a named parameter from `store`. Repeated binds return the same
    /// handle.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_index.get(name) {
            return Ok(v);
        }
        let value = store.value(name)?.clone();
        let rg = self.trainable.matches(name);
        let v = self.push(value, Op::Leaf, rg);
        self.params.push((name.to_string(), v));
        self.param_index.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(n, v)| (n.as_str(), *v))
    }

    /// Copies `v` as a constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return shape_err("matmul", self.shape(a), self.shape(b));
        }
        let out = mm(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Matmul(a, b), rg))
    }

    /// `a · bᵀ` for `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (n, k2) = self.value(b).dims2()?;
        if k != k2 {
            return shape_err("matmul_nt", self.shape(a), self.shape(b));
        }
        let out = mm_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatmulNt(a, b), rg))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: fn(Real, Real) -> Real) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return shape_err(name, ta.shape(), tb.shape());
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Adds `row` (numel = cols of `a`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        if self.value(row).numel() != n {
            return shape_err("add_row", self.shape(a), self.shape(row));
        }
        let r = self.value(row).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            for (x, b) in data[i * n..(i + 1) * n].iter_mut().zip(&r) {
                *x += b;
            }
        }
        let rg = self.rg(&[a, row]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, c: Real) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * c).collect();
        let t = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: Real) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x + c).collect();
        let t = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::AddScalar(a), rg)
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| kind.apply(x)).collect();
        let t = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Unary(a, kind), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: Real) -> Var {
        self.unary(Unary::LeakyRelu(slope), a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(Unary::Gelu, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    /// Natural log. Callers feeding probabilities clamp first (see
    /// [`Tape::clamp_prob`]).
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Unary::Log, a)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping applied.
    pub fn clamp(&mut self, a: Var, lo: Real, hi: Real) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x.clamp(lo, hi)).collect();
        let t = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Clamp(a, lo, hi), rg)
    }

    /// Clamps probabilities into `[PROB_EPS, 1 - PROB_EPS]`.
    pub fn clamp_prob(&mut self, a: Var) -> Var {
        self.clamp(a, PROB_EPS, 1.0 - PROB_EPS)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            softmax_into(&src[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
        }
        let rg = self.rg(&[a]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::SoftmaxRows(a), rg))
    }

    /// Per-row standardization followed by `gain ⊙ · + bias`. The variance is
    /// floored at [`LAYER_NORM_EPS`].
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return shape_err("layer_norm", self.shape(x), self.shape(gain));
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut normed = vec![0.0; m * n];
        let mut out = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut floored = vec![false; m];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().sum::<Real>() / n as Real;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / n as Real;
            floored[i] = var <= LAYER_NORM_EPS;
            let r = 1.0 / var.max(LAYER_NORM_EPS).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                normed[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
                floored,
            },
            rg,
        ))
    }

    /// Selects rows of a 2-D table (embedding lookup). Indices may repeat.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(table).dims2()?;
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(Error::Contract(format!(
                    "row index {i} out of range for table with {rows} rows"
                )));
            }
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(vec![idx.len(), cols], out)?,
            Op::GatherRows(table, idx.to_vec()),
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    /// `[m,n] -> [m,1]`
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let src = self.value(a).data();
        let out = (0..m).map(|i| src[i * n..(i + 1) * n].iter().sum()).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![m, 1], out)?, Op::SumRows(a), rg))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p) = self.value(a).dims2()?;
        let (m2, q) = self.value(b).dims2()?;
        if m != m2 {
            return shape_err("concat_cols", self.shape(a), self.shape(b));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            out.extend_from_slice(&da[i * p..(i + 1) * p]);
            out.extend_from_slice(&db[i * q..(i + 1) * q]);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, p + q], out)?, Op::ConcatCols(a, b), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Rows `start..end` of a 2-D tensor.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        if start > end || end > m {
            return Err(Error::Contract(format!("row slice {start}..{end} out of range for {m} rows")));
        }
        let data = self.value(a).data()[start * n..end * n].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![end - start, n], data)?, Op::SliceRows(a, start), rg))
    }

    /// Softmax of a column vector `[E,1]` within each segment.
    pub fn segment_softmax(&mut self, a: Var, segs: Arc<Segments>) -> Result<Var> {
        if self.value(a).numel() != segs.entries() {
            return shape_err("segment_softmax", self.shape(a), &[segs.entries()]);
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for r in 0..segs.rows() {
            let range = segs.range(r);
            softmax_into(&src[range.clone()], &mut out[range]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(vec![segs.entries(), 1], out)?,
            Op::SegmentSoftmax(a, segs),
            rg,
        ))
    }

    /// `out[r] = Σ_{e in row r} weights[e] · x[cols[e]]`.
    pub fn edge_aggregate(&mut self, weights: Var, x: Var, segs: Arc<Segments>) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if self.value(weights).numel() != segs.entries() {
            return shape_err("edge_aggregate", self.shape(weights), &[segs.entries()]);
        }
        if let Some(&bad) = segs.cols().iter().find(|&&c| c >= n) {
            return Err(Error::Contract(format!("edge source {bad} out of range for {n} rows")));
        }
        let w = self.value(weights).data();
        let xs = self.value(x).data();
        let mut out = vec![0.0; segs.rows() * d];
        for r in 0..segs.rows() {
            let orow = &mut out[r * d..(r + 1) * d];
            for e in segs.range(r) {
                let c = segs.cols()[e];
                for (o, xv) in orow.iter_mut().zip(&xs[c * d..(c + 1) * d]) {
                    *o += w[e] * xv;
                }
            }
        }
        let rg = self.rg(&[weights, x]);
        Ok(self.push(
            Tensor::new(vec![segs.rows(), d], out)?,
            Op::EdgeAggregate { weights, x, segs },
            rg,
        ))
    }

    /// Multi-head scaled dot-product self-attention over a padded batch.
    ///
    /// `q`, `k`, `v` are `[batch*seq, dim]`. Sequence `b` only attends over its
    /// first `lengths[b]` positions; output rows past the length are zero.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: Arc<AttentionLayout>) -> Result<Var> {
        let (rows, dim) = self.value(q).dims2()?;
        let AttentionLayout {
            batch,
            seq,
            heads,
            ref lengths,
        } = *layout;
        if rows != batch * seq || self.shape(k) != self.shape(q) || self.shape(v) != self.shape(q) {
            return shape_err("attention", self.shape(q), self.shape(k));
        }
        if heads == 0 || dim % heads != 0 || lengths.len() != batch || lengths.iter().any(|&l| l > seq) {
            return Err(Error::Contract(format!(
                "bad attention layout: dim {dim}, heads {heads}, lengths {lengths:?}, seq {seq}"
            )));
        }
        let dh = dim / heads;
        let scale = 1.0 / (dh as Real).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; rows * dim];
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            let len = lengths[b];
            for h in 0..heads {
                let off = h * dh;
                for i in 0..len {
                    let qi = &qd[(b * seq + i) * dim + off..][..dh];
                    for j in 0..len {
                        let kj = &kd[(b * seq + j) * dim + off..][..dh];
                        scores[j] = dot(qi, kj) * scale;
                    }
                    let p = &mut probs[((b * heads + h) * seq + i) * seq..][..len];
                    softmax_into(&scores[..len], p);
                    let orow = &mut out[(b * seq + i) * dim + off..][..dh];
                    for (j, &pj) in p.iter().enumerate() {
                        let vj = &vd[(b * seq + j) * dim + off..][..dh];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += pj * x;
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Tensor::new(vec![rows, dim], out)?,
            Op::Attention { q, k, v, layout, probs },
            rg,
        ))
    }

    /// Runs reverse accumulation from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients {
            grads,
            params: self.params,
        })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let gd = g.data();
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, data: Vec<Real>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let shape = self.nodes[v.0].value.shape().to_vec();
            let t = Tensor::new(shape, data).expect("gradient shape matches value");
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = val(*a).dims2()?;
                let (_, n) = val(*b).dims2()?;
                if self.nodes[a.0].requires_grad {
                    acc(*a, mm_nt(gd, val(*b).data(), m, n, k));
                }
                if self.nodes[b.0].requires_grad {
                    acc(*b, mm_tn(val(*a).data(), gd, m, k, n));
                }
            }
            Op::MatmulNt(a, b) => {
                let (m, k) = val(*a).dims2()?;
                let (n, _) = val(*b).dims2()?;
                if self.nodes[a.0].requires_grad {
                    acc(*a, mm(gd, val(*b).data(), m, n, k));
                }
                if self.nodes[b.0].requires_grad {
                    acc(*b, mm_tn(gd, val(*a).data(), m, n, k));
                }
            }
            Op::Add(a, b) => {
                acc(*a, gd.to_vec());
                acc(*b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, gd.to_vec());
                acc(*b, gd.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (da, db) = (val(*a).data(), val(*b).data());
                acc(*a, gd.iter().zip(db).map(|(g, y)| g * y).collect());
                acc(*b, gd.iter().zip(da).map(|(g, x)| g * x).collect());
            }
            Op::AddRow(a, row) => {
                acc(*a, gd.to_vec());
                let n = val(*row).numel();
                let mut r = vec![0.0; n];
                for chunk in gd.chunks(n) {
                    for (x, y) in r.iter_mut().zip(chunk) {
                        *x += y;
                    }
                }
                acc(*row, r);
            }
            Op::Scale(a, c) => acc(*a, gd.iter().map(|g| g * c).collect()),
            Op::AddScalar(a) => acc(*a, gd.to_vec()),
            Op::Unary(a, kind) => {
                let x = val(*a).data();
                let y = node.value.data();
                let d = gd
                    .iter()
                    .zip(x.iter().zip(y))
                    .map(|(g, (&xv, &yv))| g * kind.derivative(xv, yv))
                    .collect();
                acc(*a, d);
            }
            Op::Clamp(a, lo, hi) => {
                let x = val(*a).data();
                let d = gd
                    .iter()
                    .zip(x)
                    .map(|(g, &xv)| if xv >= *lo && xv <= *hi { *g } else { 0.0 })
                    .collect();
                acc(*a, d);
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = node.value.dims2()?;
                let y = node.value.data();
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &gd[i * n..(i + 1) * n];
                    let s = dot(yr, gr);
                    for j in 0..n {
                        d[i * n + j] = yr[j] * (gr[j] - s);
                    }
                }
                acc(*a, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
                floored,
            } => {
                let (m, n) = node.value.dims2()?;
                let g = val(*gain).data();
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                let mut dx = vec![0.0; m * n];
                let mut dh = vec![0.0; n];
                for i in 0..m {
                    let gr = &gd[i * n..(i + 1) * n];
                    let hr = &normed[i * n..(i + 1) * n];
                    for j in 0..n {
                        dgain[j] += gr[j] * hr[j];
                        dbias[j] += gr[j];
                        dh[j] = gr[j] * g[j];
                    }
                    let mean_dh = dh.iter().sum::<Real>() / n as Real;
                    let mean_dhh = if floored[i] { 0.0 } else { dot(&dh, hr) / n as Real };
                    for j in 0..n {
                        dx[i * n + j] = rstd[i] * (dh[j] - mean_dh - hr[j] * mean_dhh);
                    }
                }
                acc(*x, dx);
                acc(*gain, dgain);
                acc(*bias, dbias);
            }
            Op::GatherRows(table, idx) => {
                let (rows, cols) = val(*table).dims2()?;
                let mut d = vec![0.0; rows * cols];
                for (k, &i) in idx.iter().enumerate() {
                    for (x, y) in d[i * cols..(i + 1) * cols].iter_mut().zip(&gd[k * cols..(k + 1) * cols]) {
                        *x += y;
                    }
                }
                acc(*table, d);
            }
            Op::SumAll(a) => acc(*a, vec![gd[0]; val(*a).numel()]),
            Op::SumRows(a) => {
                let (m, n) = val(*a).dims2()?;
                let mut d = Vec::with_capacity(m * n);
                for &gi in gd.iter().take(m) {
                    d.extend(std::iter::repeat_n(gi, n));
                }
                acc(*a, d);
            }
            Op::ConcatCols(a, b) => {
                let (m, p) = val(*a).dims2()?;
                let (_, q) = val(*b).dims2()?;
                let mut da = Vec::with_capacity(m * p);
                let mut db = Vec::with_capacity(m * q);
                for i in 0..m {
                    da.extend_from_slice(&gd[i * (p + q)..i * (p + q) + p]);
                    db.extend_from_slice(&gd[i * (p + q) + p..(i + 1) * (p + q)]);
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::Reshape(a) => acc(*a, gd.to_vec()),
            Op::SliceRows(a, start) => {
                let (m, n) = val(*a).dims2()?;
                let mut d = vec![0.0; m * n];
                d[start * n..start * n + gd.len()].copy_from_slice(gd);
                acc(*a, d);
            }
            Op::SegmentSoftmax(a, segs) => {
                let y = node.value.data();
                let mut d = vec![0.0; y.len()];
                for r in 0..segs.rows() {
                    let range = segs.range(r);
                    let s = dot(&y[range.clone()], &gd[range.clone()]);
                    for e in range {
                        d[e] = y[e] * (gd[e] - s);
                    }
                }
                acc(*a, d);
            }
            Op::EdgeAggregate { weights, x, segs } => {
                let (n, dim) = val(*x).dims2()?;
                let w = val(*weights).data();
                let xs = val(*x).data();
                let mut dw = vec![0.0; w.len()];
                let mut dx = vec![0.0; n * dim];
                for r in 0..segs.rows() {
                    let grow = &gd[r * dim..(r + 1) * dim];
                    for e in segs.range(r) {
                        let c = segs.cols()[e];
                        dw[e] = dot(grow, &xs[c * dim..(c + 1) * dim]);
                        for (o, gv) in dx[c * dim..(c + 1) * dim].iter_mut().zip(grow) {
                            *o += w[e] * gv;
                        }
                    }
                }
                acc(*weights, dw);
                acc(*x, dx);
            }
            Op::Attention { q, k, v, layout, probs } => {
                let (rows, dim) = val(*q).dims2()?;
                let AttentionLayout {
                    batch,
                    seq,
                    heads,
                    ref lengths,
                } = **layout;
                let dh = dim / heads;
                let scale = 1.0 / (dh as Real).sqrt();
                let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
                let mut dq = vec![0.0; rows * dim];
                let mut dk = vec![0.0; rows * dim];
                let mut dv = vec![0.0; rows * dim];
                let mut dp = vec![0.0; seq];
                for b in 0..batch {
                    let len = lengths[b];
                    for h in 0..heads {
                        let off = h * dh;
                        for i in 0..len {
                            let gi = &gd[(b * seq + i) * dim + off..][..dh];
                            let p = &probs[((b * heads + h) * seq + i) * seq..][..len];
                            for j in 0..len {
                                let vj = (b * seq + j) * dim + off;
                                dp[j] = dot(gi, &vd[vj..vj + dh]);
                                for (o, gv) in dv[vj..vj + dh].iter_mut().zip(gi) {
                                    *o += p[j] * gv;
                                }
                            }
                            let s = dot(p, &dp[..len]);
                            let qi = (b * seq + i) * dim + off;
                            for j in 0..len {
                                let ds = p[j] * (dp[j] - s) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = (b * seq + j) * dim + off;
                                for t in 0..dh {
                                    dq[qi + t] += ds * kd[kj + t];
                                    dk[kj + t] += ds * qd[qi + t];
                                }
                            }
                        }
                    }
                }
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
        }
        Ok(())
    }
}

/// Lower clamp applied to every probability before it enters a log.
pub const PROB_EPS: Real = 1e-7;

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a bound parameter, if it was trainable.
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, v)| self.get(*v))
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params
            .iter()
            .filter_map(|(n, v)| self.get(*v).map(|g| (n.as_str(), g)))
    }
}
