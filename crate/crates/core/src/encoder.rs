//! Pre-norm Transformer encoder. The `[CLS]` output row of each query is its
//! embedding.

use std::sync::Arc;

use qgraph_numcore::{AttentionLayout, ParamStore, Real, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::textproc::TokenId;

pub const PREFIX: &str = "trans.";

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub dropout: Real,
}

impl EncoderConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            layers: 2,
            heads: 4,
            ffn: 256,
            max_len: crate::textproc::DEFAULT_MAX_LEN,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be at least 2".into()));
        }
        if self.vocab_size == 0 || self.d_model == 0 || self.ffn == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

fn layer_name(l: usize, part: &str) -> String {
    format!("{PREFIX}layer{l}.{part}")
}

/// Normal(0, 0.02) weights and embeddings, unit gains, zero biases.
pub fn init_encoder(cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<ParamStore> {
    cfg.validate()?;
    let normal = Normal::new(0.0, 0.02).expect("valid std");
    let mut draw = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).expect("shape")
    };
    let d = cfg.d_model;
    let mut s = ParamStore::new();
    s.insert(format!("{PREFIX}tok_emb"), draw(&[cfg.vocab_size, d]))?;
    s.insert(format!("{PREFIX}pos_emb"), draw(&[cfg.max_len, d]))?;
    for l in 0..cfg.layers {
        for ln in ["ln1", "ln2"] {
            s.insert(layer_name(l, &format!("{ln}.gain")), Tensor::full(&[d], 1.0))?;
            s.insert(layer_name(l, &format!("{ln}.bias")), Tensor::zeros(&[d]))?;
        }
        for w in ["wq", "wk", "wv", "wo"] {
            s.insert(layer_name(l, &format!("attn.{w}")), draw(&[d, d]))?;
        }
        for b in ["bq", "bk", "bv", "bo"] {
            s.insert(layer_name(l, &format!("attn.{b}")), Tensor::zeros(&[d]))?;
        }
        s.insert(layer_name(l, "ffn.w1"), draw(&[d, cfg.ffn]))?;
        s.insert(layer_name(l, "ffn.b1"), Tensor::zeros(&[cfg.ffn]))?;
        s.insert(layer_name(l, "ffn.w2"), draw(&[cfg.ffn, d]))?;
        s.insert(layer_name(l, "ffn.b2"), Tensor::zeros(&[d]))?;
    }
    Ok(s)
}

fn check_sequence(cfg: &EncoderConfig, ids: &[TokenId]) -> Result<()> {
    if ids.is_empty() || ids.len() > cfg.max_len {
        return Err(Error::Contract(format!(
            "sequence length {} outside [1, {}]",
            ids.len(),
            cfg.max_len
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Contract(format!("token id {bad} >= vocab size {}", cfg.vocab_size)));
    }
    Ok(())
}

/// Row `j` is `tok_emb[ids[j]] + pos_emb[j]`.
pub fn embed_inputs(tape: &mut Tape, params: &ParamStore, cfg: &EncoderConfig, ids: &[TokenId]) -> Result<Var> {
    check_sequence(cfg, ids)?;
    let tok = tape.param(params, &format!("{PREFIX}tok_emb"))?;
    let pos = tape.param(params, &format!("{PREFIX}pos_emb"))?;
    let idx: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
    let t = tape.gather_rows(tok, &idx)?;
    let positions: Vec<usize> = (0..ids.len()).collect();
    let p = tape.gather_rows(pos, &positions)?;
    Ok(tape.add(t, p)?)
}

/// Per-token encoder outputs for a padded batch.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `[batch * seq, d_model]`; rows past a sequence's length are padding.
    pub hidden: Var,
    pub seq: usize,
    pub lengths: Vec<usize>,
    /// One attention node per layer (see [`Tape::attention_probs`]).
    pub attention: Vec<Var>,
}

impl EncoderOutput {
    /// Output rows of sequence `b`, `[len_b, d_model]`.
    pub fn rows_of(&self, tape: &mut Tape, b: usize) -> Result<Var> {
        let start = b * self.seq;
        Ok(tape.slice_rows(self.hidden, start, start + self.lengths[b])?)
    }
}

fn dropout(tape: &mut Tape, x: Var, rate: Real, rng: &mut Option<&mut dyn rand::RngCore>) -> Result<Var> {
    let Some(rng) = rng.as_mut() else { return Ok(x) };
    if rate == 0.0 {
        return Ok(x);
    }
    let shape = tape.shape(x).to_vec();
    let n = shape.iter().product();
    let keep = 1.0 / (1.0 - rate);
    let mask = (0..n)
        .map(|_| if rng.random::<Real>() < rate { 0.0 } else { keep })
        .collect();
    let m = tape.constant(Tensor::new(shape, mask)?);
    Ok(tape.mul(x, m)?)
}

fn linear(tape: &mut Tape, params: &ParamStore, x: Var, w: &str, b: &str) -> Result<Var> {
    let w = tape.param(params, w)?;
    let b = tape.param(params, b)?;
    let y = tape.matmul(x, w)?;
    Ok(tape.add_row(y, b)?)
}

/// Runs the encoder over a batch of token sequences. Padding positions are
/// excluded from attention, so each sequence's outputs match an unbatched
/// run. Dropout applies only when `rng` is given.
pub fn encoder_forward(
    tape: &mut Tape,
    params: &ParamStore,
    cfg: &EncoderConfig,
    batch: &[&[TokenId]],
    mut rng: Option<&mut dyn rand::RngCore>,
) -> Result<EncoderOutput> {
    if batch.is_empty() {
        return Err(Error::Contract("encoder batch is empty".into()));
    }
    for ids in batch {
        check_sequence(cfg, ids)?;
    }
    let seq = batch.iter().map(|s| s.len()).max().unwrap();
    let lengths: Vec<usize> = batch.iter().map(|s| s.len()).collect();
    let mut tok_idx = Vec::with_capacity(batch.len() * seq);
    let mut pos_idx = Vec::with_capacity(batch.len() * seq);
    for ids in batch {
        for j in 0..seq {
            tok_idx.push(ids.get(j).copied().unwrap_or(0) as usize);
            pos_idx.push(j);
        }
    }
    let tok = tape.param(params, &format!("{PREFIX}tok_emb"))?;
    let pos = tape.param(params, &format!("{PREFIX}pos_emb"))?;
    let t = tape.gather_rows(tok, &tok_idx)?;
    let p = tape.gather_rows(pos, &pos_idx)?;
    let mut x = tape.add(t, p)?;
    x = dropout(tape, x, cfg.dropout, &mut rng)?;

    let layout = Arc::new(AttentionLayout {
        batch: batch.len(),
        seq,
        heads: cfg.heads,
        lengths: lengths.clone(),
    });
    let mut attention = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let n = |part: &str| layer_name(l, part);
        let g1 = tape.param(params, &n("ln1.gain"))?;
        let b1 = tape.param(params, &n("ln1.bias"))?;
        let h = tape.layer_norm(x, g1, b1)?;
        let q = linear(tape, params, h, &n("attn.wq"), &n("attn.bq"))?;
        let k = linear(tape, params, h, &n("attn.wk"), &n("attn.bk"))?;
        let v = linear(tape, params, h, &n("attn.wv"), &n("attn.bv"))?;
        let a = tape.attention(q, k, v, layout.clone())?;
        attention.push(a);
        let o = linear(tape, params, a, &n("attn.wo"), &n("attn.bo"))?;
        let o = dropout(tape, o, cfg.dropout, &mut rng)?;
        x = tape.add(x, o)?;

        let g2 = tape.param(params, &n("ln2.gain"))?;
        let b2 = tape.param(params, &n("ln2.bias"))?;
        let h = tape.layer_norm(x, g2, b2)?;
        let f = linear(tape, params, h, &n("ffn.w1"), &n("ffn.b1"))?;
        let f = tape.gelu(f);
        let f = linear(tape, params, f, &n("ffn.w2"), &n("ffn.b2"))?;
        let f = dropout(tape, f, cfg.dropout, &mut rng)?;
        x = tape.add(x, f)?;
    }
    Ok(EncoderOutput {
        hidden: x,
        seq,
        lengths,
        attention,
    })
}

/// `[batch, d_model]` matrix of `[CLS]` outputs.
pub fn query_embedding(
    tape: &mut Tape,
    params: &ParamStore,
    cfg: &EncoderConfig,
    batch: &[&[TokenId]],
    rng: Option<&mut dyn rand::RngCore>,
) -> Result<Var> {
    let out = encoder_forward(tape, params, cfg, batch, rng)?;
    cls_rows(tape, &out)
}

pub fn cls_rows(tape: &mut Tape, out: &EncoderOutput) -> Result<Var> {
    let idx: Vec<usize> = (0..out.lengths.len()).map(|b| b * out.seq).collect();
    Ok(tape.gather_rows(out.hidden, &idx)?)
}

/// Convenience: embeddings of `batch` as plain rows, without gradients.
pub fn embed_queries(params: &ParamStore, cfg: &EncoderConfig, batch: &[&[TokenId]]) -> Result<Tensor> {
    let mut tape = Tape::with_trainable(qgraph_numcore::Trainable::Nothing);
    let h = query_embedding(&mut tape, params, cfg, batch, None)?;
    Ok(tape.value(h).clone())
}
