//! Finite-difference check of the pre-training losses on a tiny model.

use qgraph_numcore::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use qgraph_numcore::{Real, Trainable};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::clickgraph::QueryGraph;
use crate::encoder::EncoderConfig;
use crate::error::Result;
use crate::gnn::{GnnConfig, GnnKind, GraphView};
use crate::pretrain::{encode_nodes, phase_losses, Architecture, Phase, StepOptions};
use crate::textproc::{build_vocab, encode_query, TokenId};

pub const TINY_NODES: usize = 12;
pub const TINY_VOCAB: usize = 50;

/// Which loss of the joint objective to differentiate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Gnn,
    Kl,
    Joint,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Gnn, LossKind::Kl, LossKind::Joint];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Gnn => "L_GNN",
            LossKind::Kl => "L_KL",
            LossKind::Joint => "L_J",
        }
    }
}

/// A 12-node graph (ring plus chords) with short texts, its tokens, all
/// edges as positives and as many non-edges as negatives.
pub struct TinyProblem {
    pub graph: QueryGraph,
    pub arch: Architecture,
    pub tokens: Vec<Vec<TokenId>>,
    pub pairs: Vec<(usize, usize)>,
    pub labels: Vec<Real>,
}

impl TinyProblem {
    pub fn new(kind: GnnKind, seed: u64) -> Result<Self> {
        let n = TINY_NODES;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut edges: Vec<(usize, usize)> = (0..n).map(|i| (i.min((i + 1) % n), i.max((i + 1) % n))).collect();
        while edges.len() < n + 4 {
            let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
            if a != b && !edges.contains(&(a.min(b), a.max(b))) {
                edges.push((a.min(b), a.max(b)));
            }
        }
        let texts: Vec<String> = (0..n)
            .map(|i| {
                let len = rng.random_range(2..6);
                let words: Vec<String> = (0..len).map(|_| format!("w{}", rng.random_range(0..30))).collect();
                format!("q{i} {}", words.join(" "))
            })
            .collect();
        let graph = QueryGraph::from_edges(texts, &edges)?;
        let vocab = build_vocab(graph.texts(), TINY_VOCAB, 1)?;
        let encoder = EncoderConfig {
            vocab_size: vocab.len(),
            d_model: 16,
            layers: 1,
            heads: 2,
            ffn: 32,
            max_len: 8,
            dropout: 0.0,
        };
        let arch = Architecture {
            encoder,
            gnn: GnnConfig::new(kind, 2, 16),
        };
        let tokens = (0..n).map(|i| encode_query(&vocab, i, graph.text(i), 8).token_ids).collect();
        let mut pairs: Vec<(usize, usize)> = graph.edges().collect();
        let mut labels = vec![1.0; pairs.len()];
        while labels.len() < 2 * graph.num_edges() {
            let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
            if a != b && !graph.has_edge(a, b) && !pairs.contains(&(a, b)) {
                pairs.push((a, b));
                labels.push(0.0);
            }
        }
        Ok(Self {
            graph,
            arch,
            tokens,
            pairs,
            labels,
        })
    }
}

/// Checks the analytic gradient of `loss` against central differences for
/// every parameter of a freshly initialized tiny model.
pub fn check_loss(problem: &TinyProblem, loss: LossKind, seed: u64, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let params = problem.arch.init(seed)?;
    let view = GraphView::full(&problem.graph);
    let nodes: Vec<usize> = (0..problem.graph.num_nodes()).collect();
    let step = StepOptions {
        phase: Phase::Joint,
        lambda: 1.0,
        stop_posterior_grad: false,
    };
    grad_check(
        |tape, p| {
            let h = encode_nodes(tape, p, &problem.arch.encoder, &problem.tokens, &nodes, None)?;
            let l = phase_losses(tape, p, Some(&problem.arch.gnn), h, Some(&view), &problem.pairs, &problem.labels, step)?;
            Ok(match loss {
                LossKind::Gnn => l.l_gnn,
                LossKind::Kl => l.l_kl.expect("joint phase has a KL term"),
                LossKind::Joint => l.l_j,
            })
        },
        &params,
        &Trainable::All,
        opts,
    )
}
