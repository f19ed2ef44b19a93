//! Fine-tuning heads for query classification and query matching, and the
//! evaluation metrics.

use std::fmt::Write as _;
use std::path::Path;

use qgraph_numcore::{Adam, AdamConfig, ParamStore, Real, Tape, Tensor, Trainable, Var, PROB_EPS};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::{self, query_embedding, EncoderConfig};
use crate::error::{Error, Result};
use crate::textproc::{encode_query, TokenId, Vocab};

pub const PREFIX: &str = "head.";

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledQuery {
    pub text: String,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryPair {
    pub a: String,
    pub b: String,
    pub label: bool,
}

fn read_lines(path: impl AsRef<Path>) -> Result<Vec<(usize, String)>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.to_string()))
        .collect())
}

/// `query_text\tlabel` per line.
pub fn read_labeled_tsv(path: impl AsRef<Path>) -> Result<Vec<LabeledQuery>> {
    read_lines(path)?
        .into_iter()
        .map(|(n, l)| {
            let (text, label) = l
                .rsplit_once('\t')
                .ok_or_else(|| Error::Format(format!("line {n}: expected query_text<TAB>label")))?;
            let label = label
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("line {n}: bad label {label:?}")))?;
            Ok(LabeledQuery {
                text: text.to_string(),
                label,
            })
        })
        .collect()
}

pub fn write_labeled_tsv(data: &[LabeledQuery], path: impl AsRef<Path>) -> Result<()> {
    let mut s = String::new();
    for q in data {
        let _ = writeln!(s, "{}\t{}", q.text, q.label);
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// `query_a\tquery_b\t{0,1}` per line.
pub fn read_pairs_tsv(path: impl AsRef<Path>) -> Result<Vec<QueryPair>> {
    read_lines(path)?
        .into_iter()
        .map(|(n, l)| {
            let f: Vec<&str> = l.split('\t').collect();
            let label = match f.as_slice() {
                [_, _, "1"] => true,
                [_, _, "0"] => false,
                _ => return Err(Error::Format(format!("line {n}: expected query_a<TAB>query_b<TAB>0|1"))),
            };
            Ok(QueryPair {
                a: f[0].to_string(),
                b: f[1].to_string(),
                label,
            })
        })
        .collect()
}

pub fn write_pairs_tsv(data: &[QueryPair], path: impl AsRef<Path>) -> Result<()> {
    let mut s = String::new();
    for p in data {
        let _ = writeln!(s, "{}\t{}\t{}", p.a, p.b, u8::from(p.label));
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Train / validation / test index sets.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub const PRIMARY_SPLIT: [Real; 3] = [0.8, 0.1, 0.1];
pub const SECONDARY_SPLIT: [Real; 3] = [0.6, 0.2, 0.2];

/// Shuffles `0..n` and cuts it by `ratios`; the test set takes the rest.
pub fn split_indices(n: usize, ratios: [Real; 3], seed: u64) -> Result<Splits> {
    if ratios.iter().any(|r| *r < 0.0) || (ratios.iter().sum::<Real>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be >= 0 and sum to 1")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (n as Real * ratios[0]).round() as usize;
    let n_val = ((n as Real * ratios[1]).round() as usize).min(n - n_train);
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Ok(Splits { train: idx, val, test })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: Real,
    pub recall: Real,
    pub f1: Real,
    pub support: usize,
}

/// Accuracy plus macro-averaged precision, recall and F1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: Real,
    pub precision: Real,
    pub recall: Real,
    pub f1: Real,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[gold][pred]`.
    pub confusion: Vec<Vec<usize>>,
}

fn ratio(num: usize, den: usize) -> Real {
    if den == 0 {
        0.0
    } else {
        num as Real / den as Real
    }
}

pub fn compute_metrics(preds: &[usize], golds: &[usize], classes: usize) -> Result<MetricsReport> {
    if preds.is_empty() || preds.len() != golds.len() {
        return Err(Error::Contract(format!(
            "metrics need equal nonempty inputs, got {} predictions and {} golds",
            preds.len(),
            golds.len()
        )));
    }
    if let Some(&bad) = preds.iter().chain(golds).find(|&&c| c >= classes) {
        return Err(Error::Contract(format!("class {bad} outside 0..{classes}")));
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&p, &g) in preds.iter().zip(golds) {
        confusion[g][p] += 1;
    }
    let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
    let per_class: Vec<ClassMetrics> = (0..classes)
        .map(|c| {
            let tp = confusion[c][c];
            let support: usize = confusion[c].iter().sum();
            let predicted: usize = confusion.iter().map(|row| row[c]).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            if support == 0 {
                log::warn!("class {c} has no gold examples; it scores 0 in the macro averages");
            }
            ClassMetrics {
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> Real| per_class.iter().map(f).sum::<Real>() / classes as Real;
    Ok(MetricsReport {
        accuracy: ratio(correct, preds.len()),
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        f1: mean(|m| m.f1),
        per_class,
        confusion,
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    /// `acc,precision,recall,f1`.
    pub fn csv_row(&self) -> String {
        format!("{:.6},{:.6},{:.6},{:.6}", self.accuracy, self.precision, self.recall, self.f1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadConfig {
    /// Hidden width of the two-layer MLP.
    pub hidden: usize,
    /// Train only the head.
    pub freeze_encoder: bool,
    /// Identity weights and zero biases (square layers only); otherwise
    /// N(0, 0.02).
    pub identity_init: bool,
}

impl HeadConfig {
    pub fn new(d_model: usize) -> Self {
        Self {
            hidden: d_model,
            freeze_encoder: false,
            identity_init: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub lr: Real,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many epochs without validation improvement.
    pub patience: usize,
    pub seed: u64,
    pub split: [Real; 3],
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            batch_size: 300,
            epochs: 30,
            patience: 5,
            seed: 0,
            split: PRIMARY_SPLIT,
        }
    }
}

fn init_mlp(d_in: usize, hidden: usize, d_out: usize, identity: bool, rng: &mut impl Rng) -> Result<ParamStore> {
    let normal = Normal::new(0.0, 0.02).expect("valid std");
    let mut weight = |r: usize, c: usize| {
        if identity {
            if r != c {
                return Err(Error::Config(format!("identity head init needs square layers, got {r}x{c}")));
            }
            return Ok(Tensor::eye(r));
        }
        Ok(Tensor::new(vec![r, c], (0..r * c).map(|_| normal.sample(rng)).collect())?)
    };
    let mut s = ParamStore::new();
    s.insert(format!("{PREFIX}w1"), weight(d_in, hidden)?)?;
    s.insert(format!("{PREFIX}b1"), Tensor::zeros(&[hidden]))?;
    s.insert(format!("{PREFIX}w2"), weight(hidden, d_out)?)?;
    s.insert(format!("{PREFIX}b2"), Tensor::zeros(&[d_out]))?;
    Ok(s)
}

/// `W2 relu(W1 h + b1) + b2` row-wise.
pub fn head_forward(tape: &mut Tape, params: &ParamStore, h: Var) -> Result<Var> {
    let w1 = tape.param(params, &format!("{PREFIX}w1"))?;
    let b1 = tape.param(params, &format!("{PREFIX}b1"))?;
    let w2 = tape.param(params, &format!("{PREFIX}w2"))?;
    let b2 = tape.param(params, &format!("{PREFIX}b2"))?;
    let z = tape.matmul(h, w1)?;
    let z = tape.add_row(z, b1)?;
    let z = tape.relu(z);
    let z = tape.matmul(z, w2)?;
    Ok(tape.add_row(z, b2)?)
}

/// `-Σ log softmax(logits)[i, y_i]`.
pub fn cross_entropy_sum(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, c) = tape.value(logits).dims2()?;
    if labels.len() != n {
        return Err(Error::Contract(format!("{} labels for {n} rows", labels.len())));
    }
    let mut onehot = vec![0.0; n * c];
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Contract(format!("label {y} outside 0..{c}")));
        }
        onehot[i * c + y] = 1.0;
    }
    let p = tape.softmax_rows(logits)?;
    let p = tape.clamp(p, PROB_EPS, 1.0);
    let lp = tape.log(p);
    let mask = tape.constant(Tensor::new(vec![n, c], onehot)?);
    let picked = tape.mul(lp, mask)?;
    let s = tape.sum(picked);
    Ok(tape.scale(s, -1.0))
}

/// Fine-tuned parameters (encoder under `trans.`, head under `head.`) and
/// test-split metrics of the epoch with the lowest validation loss.
#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub params: ParamStore,
    pub test: MetricsReport,
    pub best_val_loss: Real,
    pub best_val_accuracy: Real,
    pub epochs_run: usize,
}

/// Metrics of a split plus the mean training loss over it.
struct Scored {
    metrics: MetricsReport,
    loss: Real,
}

fn tokenize_all(vocab: &Vocab, texts: &[&str], max_len: usize) -> Vec<Vec<TokenId>> {
    texts.iter().map(|t| encode_query(vocab, 0, t, max_len).token_ids).collect()
}

fn embed(
    tape: &mut Tape,
    params: &ParamStore,
    enc: &EncoderConfig,
    tokens: &[Vec<TokenId>],
    idx: &[usize],
    rng: Option<&mut dyn rand::RngCore>,
) -> Result<Var> {
    let batch: Vec<&[TokenId]> = idx.iter().map(|&i| tokens[i].as_slice()).collect();
    query_embedding(tape, params, enc, &batch, rng)
}

/// Shared training loop: `step_loss` returns the summed loss of a batch,
/// `evaluate` scores a split. Keeps the parameters of the lowest validation
/// loss; accuracy on 50-odd validation items moves in coarse steps and ties
/// too often to select on.
#[allow(clippy::too_many_arguments)]
fn finetune_loop(
    mut params: ParamStore,
    trainable: Trainable,
    cfg: &FinetuneConfig,
    splits: &Splits,
    rng: &mut ChaCha8Rng,
    step_loss: &dyn Fn(&mut Tape, &ParamStore, &[usize], &mut ChaCha8Rng) -> Result<Var>,
    evaluate: &dyn Fn(&ParamStore, &[usize]) -> Result<Scored>,
) -> Result<FinetuneOutcome> {
    if splits.train.is_empty() {
        return Err(Error::Contract("training split is empty".into()));
    }
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), &params, &trainable);
    let val_idx = if splits.val.is_empty() { &splits.train } else { &splits.val };
    let start = evaluate(&params, val_idx)?;
    let mut best = (start.loss, start.metrics.accuracy, params.clone());
    let mut stale = 0;
    let mut order = splits.train.clone();
    let mut epochs_run = 0;
    for _ in 0..cfg.epochs {
        epochs_run += 1;
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut tape = Tape::with_trainable(trainable.clone());
            let loss = step_loss(&mut tape, &params, chunk, rng)?;
            total += tape.value(loss).data()[0];
            let loss = tape.scale(loss, 1.0 / chunk.len() as Real);
            let grads = tape.backward(loss)?;
            params.accumulate_grads(&grads);
            adam.step(&mut params)?;
        }
        let val = evaluate(&params, val_idx)?;
        log::debug!(
            "finetune epoch {epochs_run}: train loss {:.4} val loss {:.4} val acc {:.4}",
            total / order.len() as Real,
            val.loss,
            val.metrics.accuracy
        );
        if val.loss < best.0 {
            best = (val.loss, val.metrics.accuracy, params.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (best_val_loss, best_val_accuracy, mut params) = best;
    params.clear_grads();
    let test_idx = if splits.test.is_empty() { val_idx } else { &splits.test };
    let test = evaluate(&params, test_idx)?.metrics;
    Ok(FinetuneOutcome {
        params,
        test,
        best_val_loss,
        best_val_accuracy,
        epochs_run,
    })
}

fn prepare(encoder_params: &ParamStore, head: ParamStore, head_cfg: &HeadConfig) -> (ParamStore, Trainable) {
    let mut params = encoder_params.subset(encoder::PREFIX);
    params.merge(&head);
    params.clear_grads();
    let trainable = if head_cfg.freeze_encoder {
        Trainable::prefix(PREFIX)
    } else {
        Trainable::All
    };
    (params, trainable)
}

/// Class predictions for token sequences, in chunks, without gradients.
pub fn predict_classes(params: &ParamStore, enc: &EncoderConfig, tokens: &[Vec<TokenId>], idx: &[usize]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(256) {
        let mut tape = Tape::with_trainable(Trainable::Nothing);
        let h = embed(&mut tape, params, enc, tokens, chunk, None)?;
        let logits = head_forward(&mut tape, params, h)?;
        out.extend(argmax_rows(tape.value(logits)));
    }
    Ok(out)
}

/// First index of each row's maximum.
fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.shape()[0])
        .map(|r| {
            let row = t.row(r);
            (0..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b })
        })
        .collect()
}

/// Encoder plus a two-layer MLP head trained with softmax cross-entropy.
pub fn finetune_classification(
    encoder_params: &ParamStore,
    enc: &EncoderConfig,
    vocab: &Vocab,
    data: &[LabeledQuery],
    classes: usize,
    head_cfg: &HeadConfig,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    if classes == 0 {
        return Err(Error::Config("need at least one class".into()));
    }
    if let Some(q) = data.iter().find(|q| q.label >= classes) {
        return Err(Error::Contract(format!("label {} outside 0..{classes}", q.label)));
    }
    let splits = split_indices(data.len(), cfg.split, cfg.seed)?;
    for c in 0..classes {
        if !splits.train.iter().any(|&i| data[i].label == c) {
            log::warn!("class {c} is absent from the training split");
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let head = init_mlp(enc.d_model, head_cfg.hidden, classes, head_cfg.identity_init, &mut rng)?;
    let (params, trainable) = prepare(encoder_params, head, head_cfg);
    let texts: Vec<&str> = data.iter().map(|q| q.text.as_str()).collect();
    let tokens = tokenize_all(vocab, &texts, enc.max_len);
    let labels: Vec<usize> = data.iter().map(|q| q.label).collect();

    let step_loss = |tape: &mut Tape, p: &ParamStore, idx: &[usize], rng: &mut ChaCha8Rng| -> Result<Var> {
        let h = embed(tape, p, enc, &tokens, idx, Some(rng))?;
        let logits = head_forward(tape, p, h)?;
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        cross_entropy_sum(tape, logits, &y)
    };
    let evaluate = |p: &ParamStore, idx: &[usize]| -> Result<Scored> {
        let mut preds = Vec::with_capacity(idx.len());
        let mut loss = 0.0;
        for chunk in idx.chunks(256) {
            let mut tape = Tape::with_trainable(Trainable::Nothing);
            let h = embed(&mut tape, p, enc, &tokens, chunk, None)?;
            let logits = head_forward(&mut tape, p, h)?;
            preds.extend(argmax_rows(tape.value(logits)));
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let l = cross_entropy_sum(&mut tape, logits, &y)?;
            loss += tape.value(l).data()[0];
        }
        let golds: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        Ok(Scored {
            metrics: compute_metrics(&preds, &golds, classes)?,
            loss: loss / idx.len() as Real,
        })
    };
    finetune_loop(params, trainable, cfg, &splits, &mut rng, &step_loss, &evaluate)
}

/// Probabilities `sigmoid(refine(H_a) · refine(H_b))` per pair.
fn match_probs(tape: &mut Tape, params: &ParamStore, ha: Var, hb: Var) -> Result<Var> {
    let za = head_forward(tape, params, ha)?;
    let zb = head_forward(tape, params, hb)?;
    let prod = tape.mul(za, zb)?;
    let logits = tape.sum_rows(prod)?;
    let p = tape.sigmoid(logits);
    Ok(tape.clamp_prob(p))
}

/// Matching scores for already-embedded pairs.
pub fn match_scores(params: &ParamStore, ha: &Tensor, hb: &Tensor) -> Result<Vec<Real>> {
    let mut tape = Tape::with_trainable(Trainable::Nothing);
    let a = tape.constant(ha.clone());
    let b = tape.constant(hb.clone());
    let p = match_probs(&mut tape, params, a, b)?;
    Ok(tape.value(p).data().to_vec())
}

/// Fresh matching head, for callers that score without fine-tuning.
pub fn init_matching_head(d_model: usize, head_cfg: &HeadConfig, seed: u64) -> Result<ParamStore> {
    init_mlp(d_model, head_cfg.hidden, d_model, head_cfg.identity_init, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Shared MLP refinement of both queries, dot-product score, binary
/// cross-entropy; predictions threshold at 0.5.
pub fn finetune_matching(
    encoder_params: &ParamStore,
    enc: &EncoderConfig,
    vocab: &Vocab,
    data: &[QueryPair],
    head_cfg: &HeadConfig,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    let splits = split_indices(data.len(), cfg.split, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let head = init_mlp(enc.d_model, head_cfg.hidden, enc.d_model, head_cfg.identity_init, &mut rng)?;
    let (params, trainable) = prepare(encoder_params, head, head_cfg);
    let texts: Vec<&str> = data.iter().flat_map(|p| [p.a.as_str(), p.b.as_str()]).collect();
    let tokens = tokenize_all(vocab, &texts, enc.max_len);
    let labels: Vec<Real> = data.iter().map(|p| Real::from(u8::from(p.label))).collect();
    let sides = |idx: &[usize]| -> (Vec<usize>, Vec<usize>) { idx.iter().map(|&i| (2 * i, 2 * i + 1)).unzip() };

    let step_loss = |tape: &mut Tape, p: &ParamStore, idx: &[usize], rng: &mut ChaCha8Rng| -> Result<Var> {
        let (ia, ib) = sides(idx);
        let ha = embed(tape, p, enc, &tokens, &ia, Some(&mut *rng))?;
        let hb = embed(tape, p, enc, &tokens, &ib, Some(rng))?;
        let probs = match_probs(tape, p, ha, hb)?;
        let y: Vec<Real> = idx.iter().map(|&i| labels[i]).collect();
        crate::gnn::bce_sum(tape, probs, &y)
    };
    let evaluate = |p: &ParamStore, idx: &[usize]| -> Result<Scored> {
        let mut preds = Vec::with_capacity(idx.len());
        let mut loss = 0.0;
        for chunk in idx.chunks(256) {
            let (ia, ib) = sides(chunk);
            let mut tape = Tape::with_trainable(Trainable::Nothing);
            let ha = embed(&mut tape, p, enc, &tokens, &ia, None)?;
            let hb = embed(&mut tape, p, enc, &tokens, &ib, None)?;
            let probs = match_probs(&mut tape, p, ha, hb)?;
            preds.extend(tape.value(probs).data().iter().map(|&s| usize::from(s > 0.5)));
            let y: Vec<Real> = chunk.iter().map(|&i| labels[i]).collect();
            let l = crate::gnn::bce_sum(&mut tape, probs, &y)?;
            loss += tape.value(l).data()[0];
        }
        let golds: Vec<usize> = idx.iter().map(|&i| usize::from(data[i].label)).collect();
        Ok(Scored {
            metrics: compute_metrics(&preds, &golds, 2)?,
            loss: loss / idx.len() as Real,
        })
    };
    finetune_loop(params, trainable, cfg, &splits, &mut rng, &step_loss, &evaluate)
}

/// Metrics of a fine-tuned classifier over all of `data`.
pub fn evaluate_classification(
    params: &ParamStore,
    enc: &EncoderConfig,
    vocab: &Vocab,
    data: &[LabeledQuery],
    classes: usize,
) -> Result<MetricsReport> {
    let texts: Vec<&str> = data.iter().map(|q| q.text.as_str()).collect();
    let tokens = tokenize_all(vocab, &texts, enc.max_len);
    let idx: Vec<usize> = (0..data.len()).collect();
    let preds = predict_classes(params, enc, &tokens, &idx)?;
    let golds: Vec<usize> = data.iter().map(|q| q.label).collect();
    compute_metrics(&preds, &golds, classes)
}
