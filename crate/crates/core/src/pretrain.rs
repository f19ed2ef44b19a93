//! Graph-regularized pre-training: stage-by-stage and joint strategies, the
//! BERT+Q baseline, early stopping on held-out edges, and checkpoints.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use qgraph_numcore::{Adam, AdamConfig, ParamStore, Real, Tape, Tensor, Trainable, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::clickgraph::{make_edge_batch, split_holdout, QueryGraph};
use crate::encoder::{self, init_encoder, query_embedding, EncoderConfig};
use crate::error::{Error, Result};
use crate::gnn::{self, gnn_forward, init_gnn, loss_gnn, GnnConfig, GraphView};
use crate::textproc::{encode_query, TokenId, Vocab};
use crate::transfer::{edge_distributions, loss_kl};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    StageByStage,
    Joint,
    BertQ,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::StageByStage => "sbs",
            Strategy::Joint => "joint",
            Strategy::BertQ => "bertq",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sbs" | "stage_by_stage" => Ok(Strategy::StageByStage),
            "joint" => Ok(Strategy::Joint),
            "bertq" | "bert_q" => Ok(Strategy::BertQ),
            other => Err(Error::Config(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub strategy: Strategy,
    /// Outer rounds of the stage-by-stage strategy.
    pub rounds: usize,
    pub lambda: Real,
    pub lr: Real,
    /// Anchor nodes per optimizer step.
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Cap on positives per anchor.
    pub max_pos: usize,
    pub holdout_fraction: Real,
    /// Stop-gradient through the posterior in joint training (ablation).
    pub stop_posterior_grad: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Joint,
            rounds: 4,
            lambda: 1.0,
            lr: 1e-3,
            batch_size: 32,
            max_epochs: 30,
            patience: 3,
            seed: 0,
            max_pos: 32,
            holdout_fraction: 0.1,
            stop_posterior_grad: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.rounds == 0 {
            return Err(Error::Config("stage-by-stage needs at least one round".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.max_pos == 0 {
            return Err(Error::Config("batch size and max_pos must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config(format!("holdout fraction {} outside [0, 1)", self.holdout_fraction)));
        }
        Ok(())
    }
}

/// Encoder plus GNN hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub encoder: EncoderConfig,
    pub gnn: GnnConfig,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.gnn.validate(self.encoder.d_model)
    }

    /// Fresh encoder and GNN parameters.
    pub fn init(&self, seed: u64) -> Result<ParamStore> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = init_encoder(&self.encoder, &mut rng)?;
        params.merge(&init_gnn(&self.gnn, &mut rng)?);
        Ok(params)
    }
}

/// Which losses a step computes and which parameters it updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// `L_GNN` over GNN parameters, encoder frozen.
    Gnn,
    /// `L_KL` over encoder parameters, GNN frozen and posterior fixed.
    Transfer,
    /// `L_GNN + λ L_KL` over everything.
    Joint,
    /// Edge reconstruction straight from encoder embeddings.
    BertQ,
}

impl Phase {
    pub fn trainable(self) -> Trainable {
        match self {
            Phase::Gnn => Trainable::prefix(gnn::PREFIX),
            Phase::Transfer | Phase::BertQ => Trainable::prefix(encoder::PREFIX),
            Phase::Joint => Trainable::All,
        }
    }

    fn uses_gnn(self) -> bool {
        self != Phase::BertQ
    }
}

/// Graph and token inputs for pre-training with a held-out edge set.
#[derive(Clone, Debug)]
pub struct PretrainData {
    /// Graph with held-out edges removed.
    pub train: QueryGraph,
    /// Encoder input ids per node.
    pub tokens: Vec<Vec<TokenId>>,
    pub holdout_pairs: Vec<(usize, usize)>,
    pub holdout_labels: Vec<Real>,
}

impl PretrainData {
    pub fn new(g: &QueryGraph, vocab: &Vocab, max_len: usize, holdout_fraction: Real, seed: u64) -> Self {
        let tokens = (0..g.num_nodes())
            .map(|i| encode_query(vocab, i, g.text(i), max_len).token_ids)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = split_holdout(g, holdout_fraction, &mut rng);
        Self {
            train: h.train,
            tokens,
            holdout_pairs: h.pairs,
            holdout_labels: h.labels,
        }
    }

    /// Anchors that have at least one training neighbor.
    pub fn anchors(&self) -> Vec<usize> {
        (0..self.train.num_nodes()).filter(|&i| self.train.degree(i) > 0).collect()
    }
}

/// Pairs for one step, with the nodes whose embeddings they need.
#[derive(Clone, Debug)]
pub struct Batch {
    /// Global node ids; local index = position.
    pub nodes: Vec<usize>,
    /// Induced adjacency over `nodes` (absent when no GNN is run).
    pub view: Option<GraphView>,
    /// Local row indices.
    pub pairs: Vec<(usize, usize)>,
    pub labels: Vec<Real>,
    pub shortfall: usize,
}

/// Union of the anchors' positive and sampled negative pairs. With `hops`
/// the node set is the `hops`-hop closure of the pair endpoints, enough for
/// an exact `hops`-layer GNN output at every endpoint.
pub fn build_batch(
    g: &QueryGraph,
    anchors: &[usize],
    hops: Option<usize>,
    max_pos: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    let mut seen = HashSet::new();
    let mut pairs = Vec::new();
    let mut labels = Vec::new();
    let mut shortfall = 0;
    for &a in anchors {
        let eb = make_edge_batch(g, a, max_pos, rng)?;
        shortfall += eb.shortfall;
        for (p, y) in eb.pairs().zip(eb.labels()) {
            if seen.insert((p.0.min(p.1), p.0.max(p.1))) {
                pairs.push(p);
                labels.push(y);
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::Contract("anchor batch produced no pairs".into()));
    }
    let mut endpoints: Vec<usize> = pairs.iter().flat_map(|&(i, j)| [i, j]).collect();
    endpoints.sort_unstable();
    endpoints.dedup();
    let nodes = match hops {
        Some(k) => g.k_hop_closure(&endpoints, k),
        None => endpoints,
    };
    let mut local = vec![usize::MAX; g.num_nodes()];
    for (li, &v) in nodes.iter().enumerate() {
        local[v] = li;
    }
    let pairs = pairs.into_iter().map(|(i, j)| (local[i], local[j])).collect();
    let view = hops.map(|_| GraphView::induced(g, &nodes));
    Ok(Batch {
        nodes,
        view,
        pairs,
        labels,
        shortfall,
    })
}

/// `[CLS]` embeddings of the given nodes, `[nodes, d_model]`.
pub fn encode_nodes(
    tape: &mut Tape,
    params: &ParamStore,
    cfg: &EncoderConfig,
    tokens: &[Vec<TokenId>],
    nodes: &[usize],
    rng: Option<&mut dyn rand::RngCore>,
) -> Result<Var> {
    let batch: Vec<&[TokenId]> = nodes.iter().map(|&v| tokens[v].as_slice()).collect();
    query_embedding(tape, params, cfg, &batch, rng)
}

/// Loss nodes of one step, all unnormalized sums over the batch pairs.
#[derive(Clone, Copy, Debug)]
pub struct Losses {
    pub l_gnn: Var,
    pub l_kl: Option<Var>,
    /// `l_gnn + λ l_kl` (just `l_gnn` without a GNN).
    pub l_j: Var,
    /// What the phase minimizes.
    pub objective: Var,
}

/// Options shared by every step of a phase.
#[derive(Clone, Copy, Debug)]
pub struct StepOptions {
    pub phase: Phase,
    pub lambda: Real,
    pub stop_posterior_grad: bool,
}

/// Builds all losses of `phase` for `pairs` over row-aligned node
/// embeddings. Which parameters receive gradients is decided by the tape's
/// trainable policy.
#[allow(clippy::too_many_arguments)]
pub fn phase_losses(
    tape: &mut Tape,
    params: &ParamStore,
    gnn_cfg: Option<&GnnConfig>,
    h: Var,
    view: Option<&GraphView>,
    pairs: &[(usize, usize)],
    labels: &[Real],
    opts: StepOptions,
) -> Result<Losses> {
    if !opts.phase.uses_gnn() {
        let p = gnn::inner_product_probs(tape, h, pairs)?;
        let l = gnn::bce_sum(tape, p, labels)?;
        return Ok(Losses {
            l_gnn: l,
            l_kl: None,
            l_j: l,
            objective: l,
        });
    }
    let (gnn_cfg, view) = match (gnn_cfg, view) {
        (Some(c), Some(v)) => (c, v),
        _ => return Err(Error::Contract(format!("{:?} phase needs a GNN and a graph view", opts.phase))),
    };
    let gnn_in = if opts.phase == Phase::Transfer { tape.detach(h) } else { h };
    let h_tilde = gnn_forward(tape, params, gnn_cfg, view, gnn_in)?;
    let l_gnn = loss_gnn(tape, params, gnn_cfg.scorer, h_tilde, pairs, labels)?;
    let dist = edge_distributions(tape, h, h_tilde, pairs)?;
    let stop = match opts.phase {
        Phase::Joint => opts.stop_posterior_grad,
        _ => true,
    };
    let l_kl = loss_kl(tape, dist, stop)?;
    let weighted = tape.scale(l_kl, opts.lambda);
    let l_j = tape.add(l_gnn, weighted)?;
    let objective = match opts.phase {
        Phase::Gnn => l_gnn,
        Phase::Transfer => l_kl,
        _ => l_j,
    };
    Ok(Losses {
        l_gnn,
        l_kl: Some(l_kl),
        l_j,
        objective,
    })
}

/// One row of the run log; losses are per-pair means over the epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub phase: String,
    pub epoch: usize,
    pub l_gnn: Real,
    pub l_kl: Real,
    pub l_j: Real,
    /// Per-pair held-out loss of the phase objective.
    pub holdout: Real,
    pub secs: Real,
}

/// Raw per-step loss sums.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub phase: String,
    pub epoch: usize,
    pub step: usize,
    pub pairs: usize,
    pub l_gnn: Real,
    pub l_kl: Real,
    pub l_j: Real,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

pub const RUN_LOG_HEADER: &str = "phase,epoch,l_gnn,l_kl,l_j,holdout,secs";

impl RunLog {
    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn append(&mut self, other: RunLog) {
        self.epochs.extend(other.epochs);
        self.steps.extend(other.steps);
    }

    pub fn phase<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a EpochRecord> + 'a {
        self.epochs.iter().filter(move |r| r.phase == name)
    }

    /// CSV with [`RUN_LOG_HEADER`]. `secs` is the only field that varies
    /// between identical runs.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(RUN_LOG_HEADER);
        s.push('\n');
        for r in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{:.3}",
                r.phase, r.epoch, r.l_gnn, r.l_kl, r.l_j, r.holdout, r.secs
            );
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Embeddings of every node without gradients, in chunks.
pub fn embed_all(params: &ParamStore, cfg: &EncoderConfig, tokens: &[Vec<TokenId>]) -> Result<Tensor> {
    const CHUNK: usize = 256;
    let mut data = Vec::with_capacity(tokens.len() * cfg.d_model);
    let all: Vec<usize> = (0..tokens.len()).collect();
    for chunk in all.chunks(CHUNK) {
        let mut tape = Tape::with_trainable(Trainable::Nothing);
        let h = encode_nodes(&mut tape, params, cfg, tokens, chunk, None)?;
        data.extend_from_slice(tape.value(h).data());
    }
    Ok(Tensor::new(vec![tokens.len(), cfg.d_model], data)?)
}

/// Per-pair held-out loss of the phase objective over the whole training
/// graph.
pub fn holdout_loss(
    data: &PretrainData,
    params: &ParamStore,
    enc: &EncoderConfig,
    gnn_cfg: Option<&GnnConfig>,
    opts: StepOptions,
) -> Result<Real> {
    if data.holdout_pairs.is_empty() {
        return Ok(0.0);
    }
    let h_all = embed_all(params, enc, &data.tokens)?;
    let mut tape = Tape::with_trainable(Trainable::Nothing);
    let h = tape.constant(h_all);
    let view = opts.phase.uses_gnn().then(|| GraphView::full(&data.train));
    let l = phase_losses(
        &mut tape,
        params,
        gnn_cfg,
        h,
        view.as_ref(),
        &data.holdout_pairs,
        &data.holdout_labels,
        opts,
    )?;
    Ok(tape.value(l.objective).data()[0] / data.holdout_pairs.len() as Real)
}

fn snapshot(params: &ParamStore, trainable: &Trainable) -> Vec<(String, Tensor)> {
    params
        .iter()
        .filter(|(n, _)| trainable.matches(n))
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect()
}

/// Trains the parameters selected by `opts.phase` until the held-out loss
/// stops improving for `patience` epochs or `max_epochs` is reached, then
/// restores the best epoch's values.
#[allow(clippy::too_many_arguments)]
fn run_phase(
    name: &str,
    data: &PretrainData,
    enc: &EncoderConfig,
    gnn_cfg: Option<&GnnConfig>,
    params: &mut ParamStore,
    cfg: &TrainConfig,
    opts: StepOptions,
    stream: u64,
) -> Result<RunLog> {
    cfg.validate()?;
    let mut log = RunLog::default();
    if cfg.max_epochs == 0 {
        return Ok(log);
    }
    let anchors = data.anchors();
    if anchors.is_empty() {
        return Err(Error::Contract("training graph has no edges".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let trainable = opts.phase.trainable();
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), params, &trainable);
    params.clear_grads();
    let hops = opts.phase.uses_gnn().then(|| gnn_cfg.map(|g| g.layers()).unwrap_or(0));

    let mut best = Real::INFINITY;
    let mut best_params = None;
    let mut stale = 0;
    let mut order = anchors.clone();
    for epoch in 0..cfg.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let (mut s_gnn, mut s_kl, mut s_j, mut n_pairs) = (0.0, 0.0, 0.0, 0usize);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = build_batch(&data.train, chunk, hops, cfg.max_pos, &mut rng)?;
            let mut tape = Tape::with_trainable(trainable.clone());
            let h = encode_nodes(&mut tape, params, enc, &data.tokens, &batch.nodes, Some(&mut rng))?;
            let l = phase_losses(
                &mut tape,
                params,
                gnn_cfg,
                h,
                batch.view.as_ref(),
                &batch.pairs,
                &batch.labels,
                opts,
            )?;
            let value = |v: Var| tape.value(v).data()[0];
            let rec = StepRecord {
                phase: name.to_string(),
                epoch,
                step,
                pairs: batch.pairs.len(),
                l_gnn: value(l.l_gnn),
                l_kl: l.l_kl.map(value).unwrap_or(0.0),
                l_j: value(l.l_j),
            };
            if !rec.l_j.is_finite() {
                return Err(Error::Contract(format!("{name}: non-finite loss at epoch {epoch} step {step}")));
            }
            s_gnn += rec.l_gnn;
            s_kl += rec.l_kl;
            s_j += rec.l_j;
            n_pairs += rec.pairs;
            log.steps.push(rec);
            let scaled = tape.scale(l.objective, 1.0 / batch.pairs.len() as Real);
            let grads = tape.backward(scaled)?;
            params.accumulate_grads(&grads);
            adam.step(params)?;
        }
        let holdout = holdout_loss(data, params, enc, gnn_cfg, opts)?;
        let np = n_pairs as Real;
        log.epochs.push(EpochRecord {
            phase: name.to_string(),
            epoch,
            l_gnn: s_gnn / np,
            l_kl: s_kl / np,
            l_j: s_j / np,
            holdout,
            secs: started.elapsed().as_secs_f64(),
        });
        log::info!("{name} epoch {epoch}: l_j {:.5} holdout {holdout:.5}", s_j / np);
        if holdout < best {
            best = holdout;
            best_params = Some(snapshot(params, &trainable));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    if let Some(saved) = best_params {
        for (n, t) in saved {
            params.set(n, t);
        }
    }
    params.clear_grads();
    Ok(log)
}

fn require_gnn(params: &ParamStore) -> Result<()> {
    if params.with_prefix(gnn::PREFIX).next().is_none() {
        return Err(Error::Contract("GNN parameters are missing".into()));
    }
    Ok(())
}

fn opts(phase: Phase, cfg: &TrainConfig) -> StepOptions {
    StepOptions {
        phase,
        lambda: cfg.lambda,
        stop_posterior_grad: cfg.stop_posterior_grad,
    }
}

/// Stage 1 of round `round`: GNN on `L_GNN` with the encoder frozen.
pub fn train_gnn_stage(
    data: &PretrainData,
    arch: &Architecture,
    params: &mut ParamStore,
    cfg: &TrainConfig,
    round: usize,
) -> Result<RunLog> {
    require_gnn(params)?;
    let name = format!("gnn_r{round}");
    run_phase(&name, data, &arch.encoder, Some(&arch.gnn), params, cfg, opts(Phase::Gnn, cfg), 2 * round as u64)
}

/// Stage 2 of round `round`: encoder on `L_KL` with the GNN frozen.
pub fn train_transfer_stage(
    data: &PretrainData,
    arch: &Architecture,
    params: &mut ParamStore,
    cfg: &TrainConfig,
    round: usize,
) -> Result<RunLog> {
    require_gnn(params)?;
    let name = format!("transfer_r{round}");
    run_phase(
        &name,
        data,
        &arch.encoder,
        Some(&arch.gnn),
        params,
        cfg,
        opts(Phase::Transfer, cfg),
        2 * round as u64 + 1,
    )
}

/// `cfg.rounds` alternations of the two stages, each warm-started.
pub fn train_stage_by_stage(
    data: &PretrainData,
    arch: &Architecture,
    params: &mut ParamStore,
    cfg: &TrainConfig,
) -> Result<RunLog> {
    cfg.validate()?;
    let mut log = RunLog::default();
    for r in 0..cfg.rounds {
        log.append(train_gnn_stage(data, arch, params, cfg, r)?);
        log.append(train_transfer_stage(data, arch, params, cfg, r)?);
    }
    Ok(log)
}

const JOINT_STREAM: u64 = 1 << 20;
const BERT_Q_STREAM: u64 = (1 << 20) + 1;

/// Both modules on `L_GNN + λ L_KL`.
pub fn train_joint(data: &PretrainData, arch: &Architecture, params: &mut ParamStore, cfg: &TrainConfig) -> Result<RunLog> {
    require_gnn(params)?;
    run_phase("joint", data, &arch.encoder, Some(&arch.gnn), params, cfg, opts(Phase::Joint, cfg), JOINT_STREAM)
}

/// Encoder-only edge reconstruction. Never reads or creates GNN parameters.
pub fn train_bert_q(data: &PretrainData, enc: &EncoderConfig, params: &mut ParamStore, cfg: &TrainConfig) -> Result<RunLog> {
    run_phase("bert_q", data, enc, None, params, cfg, opts(Phase::BertQ, cfg), BERT_Q_STREAM)
}

/// Dispatches on `cfg.strategy`.
pub fn pretrain(data: &PretrainData, arch: &Architecture, params: &mut ParamStore, cfg: &TrainConfig) -> Result<RunLog> {
    match cfg.strategy {
        Strategy::StageByStage => train_stage_by_stage(data, arch, params, cfg),
        Strategy::Joint => train_joint(data, arch, params, cfg),
        Strategy::BertQ => train_bert_q(data, &arch.encoder, params, cfg),
    }
}

pub fn save_checkpoint(params: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    Ok(qgraph_numcore::save_checkpoint(params, path)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamStore> {
    Ok(qgraph_numcore::load_checkpoint(path)?)
}
