//! GCN / GAT layers over the query graph, link scoring, and the
//! graph-reconstruction loss.

use std::sync::Arc;

use qgraph_numcore::{ParamStore, Real, Segments, Tape, Tensor, Var};
use rand::Rng;

use crate::clickgraph::QueryGraph;
use crate::error::{Error, Result};

pub const PREFIX: &str = "gnn.";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GnnKind {
    Gcn,
    Gat,
}

impl GnnKind {
    pub fn name(self) -> &'static str {
        match self {
            GnnKind::Gcn => "gcn",
            GnnKind::Gat => "gat",
        }
    }
}

impl std::str::FromStr for GnnKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gcn" => Ok(GnnKind::Gcn),
            "gat" => Ok(GnnKind::Gat),
            other => Err(Error::Config(format!("unknown gnn kind {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scorer {
    InnerProduct,
    /// MLP over `[h_i ‖ h_j]` with one hidden ReLU layer.
    MlpConcat { hidden: usize },
}

/// How `m_i` in the GCN coefficient `1/√(m_i m_j)` is counted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DegreeNorm {
    /// Neighbors plus the node itself.
    SelfInclusive,
    /// Neighbors only (floored at 1).
    Raw,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "identity" | "linear" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GnnConfig {
    pub kind: GnnKind,
    pub input_dim: usize,
    /// Output width of each layer; its length is the layer count K.
    pub dims: Vec<usize>,
    pub scorer: Scorer,
    pub degree_norm: DegreeNorm,
    pub leaky_slope: Real,
    /// Nonlinearity of every layer but the last, which is always identity.
    pub hidden_activation: Activation,
}

impl GnnConfig {
    /// `layers` layers all of width `d_model`, inner-product scoring.
    pub fn new(kind: GnnKind, layers: usize, d_model: usize) -> Self {
        Self {
            kind,
            input_dim: d_model,
            dims: vec![d_model; layers],
            scorer: Scorer::InnerProduct,
            degree_norm: DegreeNorm::SelfInclusive,
            leaky_slope: 0.2,
            hidden_activation: Activation::Relu,
        }
    }

    pub fn layers(&self) -> usize {
        self.dims.len()
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap_or(&self.input_dim)
    }

    pub fn validate(&self, d_model: usize) -> Result<()> {
        if self.dims.is_empty() {
            return Err(Error::Config("gnn needs at least one layer".into()));
        }
        if self.input_dim != d_model {
            return Err(Error::Config(format!(
                "gnn input dim {} must equal encoder d_model {d_model}",
                self.input_dim
            )));
        }
        Ok(())
    }

    fn in_dim(&self, k: usize) -> usize {
        if k == 0 {
            self.input_dim
        } else {
            self.dims[k - 1]
        }
    }

    /// `hidden_activation` between layers, identity after the last.
    pub fn activation(&self, k: usize) -> Activation {
        if k + 1 == self.layers() {
            Activation::Identity
        } else {
            self.hidden_activation
        }
    }
}

pub fn weight_name(k: usize) -> String {
    format!("{PREFIX}layer{k}.w")
}

pub fn attn_name(k: usize) -> String {
    format!("{PREFIX}layer{k}.a")
}

fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as Real).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-limit..limit)).collect()).expect("shape")
}

pub fn init_gnn(cfg: &GnnConfig, rng: &mut impl Rng) -> Result<ParamStore> {
    cfg.validate(cfg.input_dim)?;
    let mut s = ParamStore::new();
    for k in 0..cfg.layers() {
        let (din, dout) = (cfg.in_dim(k), cfg.dims[k]);
        s.insert(weight_name(k), glorot(&[dout, din], din, dout, rng))?;
        if cfg.kind == GnnKind::Gat {
            s.insert(attn_name(k), glorot(&[2 * dout], 2 * dout, 1, rng))?;
        }
    }
    if let Scorer::MlpConcat { hidden } = cfg.scorer {
        let d = cfg.output_dim();
        s.insert(format!("{PREFIX}scorer.w1"), glorot(&[2 * d, hidden], 2 * d, hidden, rng))?;
        s.insert(format!("{PREFIX}scorer.b1"), Tensor::zeros(&[hidden]))?;
        s.insert(format!("{PREFIX}scorer.w2"), glorot(&[hidden, 1], hidden, 1, rng))?;
        s.insert(format!("{PREFIX}scorer.b2"), Tensor::zeros(&[1]))?;
    }
    Ok(s)
}

/// Adjacency seen by the GNN layers: local neighbor lists (self excluded)
/// and each node's degree in the full graph.
#[derive(Clone, Debug)]
pub struct GraphView {
    neighbors: Vec<Vec<usize>>,
    degrees: Vec<usize>,
    segments: Arc<Segments>,
}

impl GraphView {
    pub fn new(neighbors: Vec<Vec<usize>>, degrees: Vec<usize>) -> Result<Self> {
        let n = neighbors.len();
        if degrees.len() != n {
            return Err(Error::Contract("one degree per node required".into()));
        }
        for (i, l) in neighbors.iter().enumerate() {
            if l.iter().any(|&j| j >= n || j == i) {
                return Err(Error::Contract(format!("bad neighbor list for node {i}")));
            }
        }
        let lists: Vec<Vec<usize>> = neighbors
            .iter()
            .enumerate()
            .map(|(i, l)| std::iter::once(i).chain(l.iter().copied()).collect())
            .collect();
        Ok(Self {
            segments: Arc::new(Segments::from_lists(&lists)),
            neighbors,
            degrees,
        })
    }

    pub fn full(g: &QueryGraph) -> Self {
        let neighbors = (0..g.num_nodes()).map(|i| g.neighbors(i).to_vec()).collect();
        Self::new(neighbors, g.degrees()).expect("graph adjacency is well formed")
    }

    /// Subgraph induced by `nodes` (local index = position in `nodes`),
    /// keeping full-graph degrees.
    pub fn induced(g: &QueryGraph, nodes: &[usize]) -> Self {
        let mut local = vec![usize::MAX; g.num_nodes()];
        for (li, &v) in nodes.iter().enumerate() {
            local[v] = li;
        }
        let neighbors = nodes
            .iter()
            .map(|&v| {
                g.neighbors(v)
                    .iter()
                    .filter_map(|&u| (local[u] != usize::MAX).then_some(local[u]))
                    .collect()
            })
            .collect();
        let degrees = nodes.iter().map(|&v| g.degree(v)).collect();
        Self::new(neighbors, degrees).expect("induced adjacency is well formed")
    }

    pub fn num_nodes(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.degrees[i]
    }

    /// Node `i`'s aggregation set: itself first, then its neighbors.
    pub fn segments(&self) -> Arc<Segments> {
        self.segments.clone()
    }

    fn norm_degree(&self, i: usize, norm: DegreeNorm) -> Real {
        match norm {
            DegreeNorm::SelfInclusive => (self.degrees[i] + 1) as Real,
            DegreeNorm::Raw => self.degrees[i].max(1) as Real,
        }
    }

    /// `1/√(m_i m_j)` for every aggregation entry.
    pub fn gcn_coefficients(&self, norm: DegreeNorm) -> Vec<Real> {
        let rows = self.segments.entry_rows();
        rows.iter()
            .zip(self.segments.cols())
            .map(|(&i, &j)| 1.0 / (self.norm_degree(i, norm) * self.norm_degree(j, norm)).sqrt())
            .collect()
    }
}

fn activate(tape: &mut Tape, x: Var, act: Activation) -> Var {
    match act {
        Activation::Identity => x,
        Activation::Relu => tape.relu(x),
    }
}

fn check_rows(tape: &Tape, view: &GraphView, h: Var) -> Result<()> {
    let rows = tape.value(h).dims2()?.0;
    if rows != view.num_nodes() {
        return Err(Error::Contract(format!(
            "layer input has {rows} rows for a graph of {} nodes",
            view.num_nodes()
        )));
    }
    Ok(())
}

/// `out_i = σ(Σ_{j ∈ N(i) ∪ {i}} W h_j / √(m_i m_j))`, `w: [d_out, d_in]`.
pub fn gcn_layer(tape: &mut Tape, w: Var, view: &GraphView, h_in: Var, norm: DegreeNorm, act: Activation) -> Result<Var> {
    check_rows(tape, view, h_in)?;
    let wh = tape.matmul_nt(h_in, w)?;
    let entries = view.segments.entries();
    let coefs = tape.constant(Tensor::new(vec![entries, 1], view.gcn_coefficients(norm))?);
    let agg = tape.edge_aggregate(coefs, wh, view.segments())?;
    Ok(activate(tape, agg, act))
}

/// Single-head attention aggregation over `N(i) ∪ {i}`. Returns the layer
/// output and the attention coefficients (one per aggregation entry).
pub fn gat_layer(
    tape: &mut Tape,
    w: Var,
    a: Var,
    view: &GraphView,
    h_in: Var,
    slope: Real,
    act: Activation,
) -> Result<(Var, Var)> {
    check_rows(tape, view, h_in)?;
    let wh = tape.matmul_nt(h_in, w)?;
    let d = tape.value(wh).dims2()?.1;
    if tape.value(a).numel() != 2 * d {
        return Err(Error::Contract(format!(
            "attention vector has {} entries, expected {}",
            tape.value(a).numel(),
            2 * d
        )));
    }
    let col = tape.reshape(a, vec![2 * d, 1])?;
    let a_center = tape.slice_rows(col, 0, d)?;
    let a_neigh = tape.slice_rows(col, d, 2 * d)?;
    let s_center = tape.matmul(wh, a_center)?;
    let s_neigh = tape.matmul(wh, a_neigh)?;
    let segs = view.segments();
    let rows = segs.entry_rows();
    let e_center = tape.gather_rows(s_center, &rows)?;
    let e_neigh = tape.gather_rows(s_neigh, segs.cols())?;
    let logits = tape.add(e_center, e_neigh)?;
    let logits = tape.leaky_relu(logits, slope);
    let alpha = tape.segment_softmax(logits, segs.clone())?;
    let agg = tape.edge_aggregate(alpha, wh, segs)?;
    Ok((activate(tape, agg, act), alpha))
}

/// Applies layer `k` of the configured stack.
pub fn apply_layer(
    tape: &mut Tape,
    params: &ParamStore,
    cfg: &GnnConfig,
    k: usize,
    view: &GraphView,
    h: Var,
) -> Result<Var> {
    let w = tape.param(params, &weight_name(k))?;
    let act = cfg.activation(k);
    match cfg.kind {
        GnnKind::Gcn => gcn_layer(tape, w, view, h, cfg.degree_norm, act),
        GnnKind::Gat => {
            let a = tape.param(params, &attn_name(k))?;
            Ok(gat_layer(tape, w, a, view, h, cfg.leaky_slope, act)?.0)
        }
    }
}

/// `H̃ = layer_K(… layer_1(H⁰))`.
pub fn gnn_forward(tape: &mut Tape, params: &ParamStore, cfg: &GnnConfig, view: &GraphView, h0: Var) -> Result<Var> {
    let mut h = h0;
    for k in 0..cfg.layers() {
        h = apply_layer(tape, params, cfg, k, view, h)?;
    }
    Ok(h)
}

/// `[P,1]` dot products `h_i · h_j` for each pair of row indices.
pub fn pair_logits(tape: &mut Tape, h: Var, pairs: &[(usize, usize)]) -> Result<Var> {
    let (is, js): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
    let hi = tape.gather_rows(h, &is)?;
    let hj = tape.gather_rows(h, &js)?;
    let prod = tape.mul(hi, hj)?;
    Ok(tape.sum_rows(prod)?)
}

/// Clamped `sigmoid(h_i · h_j)` per pair.
pub fn inner_product_probs(tape: &mut Tape, h: Var, pairs: &[(usize, usize)]) -> Result<Var> {
    let logits = pair_logits(tape, h, pairs)?;
    let p = tape.sigmoid(logits);
    Ok(tape.clamp_prob(p))
}

/// Clamped edge probabilities under the configured scorer.
pub fn link_probs(tape: &mut Tape, params: &ParamStore, scorer: Scorer, h: Var, pairs: &[(usize, usize)]) -> Result<Var> {
    match scorer {
        Scorer::InnerProduct => inner_product_probs(tape, h, pairs),
        Scorer::MlpConcat { .. } => {
            let (is, js): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
            let hi = tape.gather_rows(h, &is)?;
            let hj = tape.gather_rows(h, &js)?;
            let x = tape.concat_cols(hi, hj)?;
            let w1 = tape.param(params, &format!("{PREFIX}scorer.w1"))?;
            let b1 = tape.param(params, &format!("{PREFIX}scorer.b1"))?;
            let w2 = tape.param(params, &format!("{PREFIX}scorer.w2"))?;
            let b2 = tape.param(params, &format!("{PREFIX}scorer.b2"))?;
            let z = tape.matmul(x, w1)?;
            let z = tape.add_row(z, b1)?;
            let z = tape.relu(z);
            let z = tape.matmul(z, w2)?;
            let z = tape.add_row(z, b2)?;
            let p = tape.sigmoid(z);
            Ok(tape.clamp_prob(p))
        }
    }
}

/// Probability of a link between two embeddings.
pub fn link_score(params: &ParamStore, scorer: Scorer, hi: &[Real], hj: &[Real]) -> Result<Real> {
    if scorer == Scorer::InnerProduct && hi.len() != hj.len() {
        return Err(Error::Contract(format!(
            "embedding dims differ: {} vs {}",
            hi.len(),
            hj.len()
        )));
    }
    if hi.len() != hj.len() {
        return Err(Error::Contract("mlp scorer needs equal-width embeddings".into()));
    }
    let mut tape = Tape::with_trainable(qgraph_numcore::Trainable::Nothing);
    let h = tape.constant(Tensor::from_rows(&[hi.to_vec(), hj.to_vec()])?);
    let p = link_probs(&mut tape, params, scorer, h, &[(0, 1)])?;
    Ok(tape.value(p).data()[0])
}

/// `-Σ [y log p + (1 - y) log(1 - p)]` over already-clamped probabilities.
pub fn bce_sum(tape: &mut Tape, probs: Var, labels: &[Real]) -> Result<Var> {
    let n = tape.value(probs).numel();
    if labels.len() != n {
        return Err(Error::Contract(format!("{} labels for {n} probabilities", labels.len())));
    }
    let shape = tape.shape(probs).to_vec();
    let y = tape.constant(Tensor::new(shape.clone(), labels.to_vec())?);
    let not_y = tape.constant(Tensor::new(shape, labels.iter().map(|l| 1.0 - l).collect())?);
    let log_p = tape.log(probs);
    let q = tape.one_minus(probs);
    let log_q = tape.log(q);
    let pos = tape.mul(y, log_p)?;
    let neg = tape.mul(not_y, log_q)?;
    let both = tape.add(pos, neg)?;
    let total = tape.sum(both);
    Ok(tape.scale(total, -1.0))
}

/// Graph-reconstruction loss for the labelled pairs (row indices into
/// `h_tilde`).
pub fn loss_gnn(
    tape: &mut Tape,
    params: &ParamStore,
    scorer: Scorer,
    h_tilde: Var,
    pairs: &[(usize, usize)],
    labels: &[Real],
) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::Contract("reconstruction loss needs at least one pair".into()));
    }
    let p = link_probs(tape, params, scorer, h_tilde, pairs)?;
    bce_sum(tape, p, labels)
}
