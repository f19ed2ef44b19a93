#![allow(dead_code)]

pub mod oracles;

use qgraph_core::clickgraph::QueryGraph;
use qgraph_core::encoder::EncoderConfig;
use qgraph_core::gnn::{GnnConfig, GnnKind};
use qgraph_core::pretrain::{Architecture, PretrainData};
use qgraph_core::textproc::{build_vocab, Vocab};
use qgraph_numcore::{ParamStore, Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random undirected graph with edge probability `p`; every node gets a
/// short distinct text.
pub fn random_graph(n: usize, p: Real, seed: u64) -> QueryGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random::<Real>() < p {
                edges.push((i, j));
            }
        }
    }
    let texts = (0..n)
        .map(|i| {
            let words: Vec<String> = (0..rng.random_range(1..5)).map(|_| format!("w{}", rng.random_range(0..12))).collect();
            format!("q{i} {}", words.join(" "))
        })
        .collect();
    QueryGraph::from_edges(texts, &edges).unwrap()
}

/// A ring plus chords, so every node has neighbors and non-neighbors.
pub fn ring_graph(n: usize, seed: u64) -> QueryGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges: Vec<(usize, usize)> = (0..n).map(|i| (i, (i + 1) % n)).collect();
    for _ in 0..n / 2 {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        if a != b {
            edges.push((a, b));
        }
    }
    let texts = (0..n).map(|i| format!("q{i} w{} w{}", i % 5, (i * 7) % 11)).collect();
    QueryGraph::from_edges(texts, &edges).unwrap()
}

pub fn tiny_arch(vocab_len: usize, kind: GnnKind) -> Architecture {
    Architecture {
        encoder: EncoderConfig {
            vocab_size: vocab_len,
            d_model: 16,
            layers: 1,
            heads: 2,
            ffn: 32,
            max_len: 8,
            dropout: 0.0,
        },
        gnn: GnnConfig::new(kind, 2, 16),
    }
}

pub struct Setup {
    pub graph: QueryGraph,
    pub vocab: Vocab,
    pub data: PretrainData,
    pub arch: Architecture,
    pub params: ParamStore,
}

pub fn tiny_setup(n: usize, kind: GnnKind, seed: u64) -> Setup {
    let graph = ring_graph(n, seed);
    let vocab = build_vocab(graph.texts(), 50, 1).unwrap();
    let arch = tiny_arch(vocab.len(), kind);
    let data = PretrainData::new(&graph, &vocab, arch.encoder.max_len, 0.1, seed);
    let params = arch.init(seed).unwrap();
    Setup {
        graph,
        vocab,
        data,
        arch,
        params,
    }
}

pub fn random_tensor(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}
