//! Query-graph pre-training: tokenization, click-graph projection, a small
//! Transformer encoder, GNN link prediction, KL transfer, and downstream
//! fine-tuning.

pub mod clickgraph;
pub mod config;
pub mod downstream;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod gnn;
pub mod gradient;
pub mod pretrain;
pub mod synth;
pub mod textproc;
pub mod transfer;

pub use error::{Error, Result};
