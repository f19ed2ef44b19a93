//! Variant × GNN × seed experiment runner over synthetic data, with
//! content-addressed artifacts and an aggregated results table.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use qgraph_numcore::checkpoint::{encode, round_to_f32};
use qgraph_numcore::{ParamStore, Real};
use sha2::{Digest, Sha256};

use crate::clickgraph::{project_bipartite, QueryGraph};
use crate::config::Config;
use crate::downstream::{finetune_classification, finetune_matching, FinetuneConfig, HeadConfig, LabeledQuery, QueryPair};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::gnn::{Activation, GnnConfig, GnnKind};
use crate::pretrain::{pretrain, Architecture, PretrainData, RunLog, Strategy, TrainConfig};
use crate::synth::{gen_synthetic, SynthConfig};
use crate::textproc::{build_vocab, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// No pre-training.
    Bert,
    BertQ,
    GeBertJ,
    GeBertS,
    /// Joint training with the transfer loss removed (`λ = 0`).
    WoTransfer,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Bert,
        Variant::BertQ,
        Variant::GeBertJ,
        Variant::GeBertS,
        Variant::WoTransfer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Bert => "bert",
            Variant::BertQ => "bert_q",
            Variant::GeBertJ => "ge_bert_j",
            Variant::GeBertS => "ge_bert_s",
            Variant::WoTransfer => "wo_transfer",
        }
    }

    pub fn uses_gnn(self) -> bool {
        matches!(self, Variant::GeBertJ | Variant::GeBertS | Variant::WoTransfer)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

/// Encoder and GNN sizes shared by every variant.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub vocab_size: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub dropout: Real,
    pub gnn_layers: usize,
    pub gnn_activation: Activation,
}

impl Default for ModelSpec {
    fn default() -> Self {
        let e = EncoderConfig::new(5000);
        Self {
            vocab_size: e.vocab_size,
            d_model: e.d_model,
            layers: e.layers,
            heads: e.heads,
            ffn: e.ffn,
            max_len: e.max_len,
            dropout: e.dropout,
            gnn_layers: 2,
            gnn_activation: Activation::Relu,
        }
    }
}

impl ModelSpec {
    pub fn architecture(&self, vocab_len: usize, kind: GnnKind) -> Architecture {
        Architecture {
            encoder: EncoderConfig {
                vocab_size: vocab_len,
                d_model: self.d_model,
                layers: self.layers,
                heads: self.heads,
                ffn: self.ffn,
                max_len: self.max_len,
                dropout: self.dropout,
            },
            gnn: GnnConfig {
                hidden_activation: self.gnn_activation,
                ..GnnConfig::new(kind, self.gnn_layers, self.d_model)
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub synth: SynthConfig,
    pub model: ModelSpec,
    /// Template for every pre-training run; strategy and `λ` are set per
    /// variant.
    pub pretrain: TrainConfig,
    pub finetune: FinetuneConfig,
    pub freeze_encoder: bool,
    pub variants: Vec<Variant>,
    pub gnns: Vec<GnnKind>,
    pub seeds: Vec<u64>,
    /// Joint-training weights; more than one runs a sweep.
    pub lambdas: Vec<Real>,
    /// Also fine-tune and score query matching.
    pub matching: bool,
    /// Artifact root; nothing is written when absent.
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            model: ModelSpec::default(),
            pretrain: TrainConfig::default(),
            finetune: FinetuneConfig::default(),
            freeze_encoder: false,
            variants: vec![Variant::Bert, Variant::BertQ, Variant::GeBertJ, Variant::GeBertS],
            gnns: vec![GnnKind::Gcn, GnnKind::Gat],
            seeds: vec![0],
            lambdas: vec![1.0],
            matching: false,
            out_dir: None,
        }
    }
}

/// Grid from the λ sensitivity study.
pub const LAMBDA_SWEEP: [Real; 8] = [0.001, 0.01, 0.1, 0.5, 1.0, 5.0, 10.0, 50.0];

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentSpec {
    /// Every key [`ExperimentSpec::from_config`] understands.
    pub const KEYS: &'static [&'static str] = &[
        "run.seed",
        "run.out",
        "synth.n_queries",
        "synth.n_classes",
        "synth.tokens_per_query",
        "synth.topic_vocab",
        "synth.noise_vocab",
        "synth.beta_text",
        "synth.p_in",
        "synth.p_out",
        "synth.urls_per_class",
        "synth.n_pairs",
        "synth.seed",
        "model.vocab_size",
        "model.d_model",
        "model.layers",
        "model.heads",
        "model.ffn",
        "model.max_len",
        "model.dropout",
        "model.gnn",
        "model.gnn_layers",
        "model.gnn_activation",
        "pretrain.strategy",
        "pretrain.lambda",
        "pretrain.stages",
        "pretrain.lr",
        "pretrain.batch_size",
        "pretrain.max_epochs",
        "pretrain.patience",
        "pretrain.max_pos",
        "pretrain.holdout_fraction",
        "pretrain.stop_posterior_grad",
        "finetune.lr",
        "finetune.batch_size",
        "finetune.epochs",
        "finetune.patience",
        "finetune.split",
        "finetune.freeze_encoder",
        "experiment.variants",
        "experiment.gnns",
        "experiment.seeds",
        "experiment.lambdas",
        "experiment.matching",
    ];

    pub fn from_config(c: &Config) -> Result<Self> {
        c.check_known(Self::KEYS)?;
        let d = Self::default();
        let s = &d.synth;
        let synth = SynthConfig {
            n_queries: c.parse_or("synth.n_queries", s.n_queries)?,
            n_classes: c.parse_or("synth.n_classes", s.n_classes)?,
            tokens_per_query: c.parse_or("synth.tokens_per_query", s.tokens_per_query)?,
            topic_vocab: c.parse_or("synth.topic_vocab", s.topic_vocab)?,
            noise_vocab: c.parse_or("synth.noise_vocab", s.noise_vocab)?,
            beta_text: c.parse_or("synth.beta_text", s.beta_text)?,
            p_in: c.parse_or("synth.p_in", s.p_in)?,
            p_out: c.parse_or("synth.p_out", s.p_out)?,
            urls_per_class: c.parse_or("synth.urls_per_class", s.urls_per_class)?,
            n_pairs: c.parse_or("synth.n_pairs", s.n_pairs)?,
            seed: c.parse_or("synth.seed", s.seed)?,
        };
        let m = &d.model;
        let model = ModelSpec {
            vocab_size: c.parse_or("model.vocab_size", m.vocab_size)?,
            d_model: c.parse_or("model.d_model", m.d_model)?,
            layers: c.parse_or("model.layers", m.layers)?,
            heads: c.parse_or("model.heads", m.heads)?,
            ffn: c.parse_or("model.ffn", m.ffn)?,
            max_len: c.parse_or("model.max_len", m.max_len)?,
            dropout: c.parse_or("model.dropout", m.dropout)?,
            gnn_layers: c.parse_or("model.gnn_layers", m.gnn_layers)?,
            gnn_activation: c.parse_or("model.gnn_activation", m.gnn_activation)?,
        };
        let p = &d.pretrain;
        let pretrain = TrainConfig {
            strategy: c.parse_or("pretrain.strategy", p.strategy.name().to_string())?.parse()?,
            rounds: c.parse_or("pretrain.stages", p.rounds)?,
            lambda: c.parse_or("pretrain.lambda", p.lambda)?,
            lr: c.parse_or("pretrain.lr", p.lr)?,
            batch_size: c.parse_or("pretrain.batch_size", p.batch_size)?,
            max_epochs: c.parse_or("pretrain.max_epochs", p.max_epochs)?,
            patience: c.parse_or("pretrain.patience", p.patience)?,
            seed: 0,
            max_pos: c.parse_or("pretrain.max_pos", p.max_pos)?,
            holdout_fraction: c.parse_or("pretrain.holdout_fraction", p.holdout_fraction)?,
            stop_posterior_grad: c.parse_or("pretrain.stop_posterior_grad", p.stop_posterior_grad)?,
        };
        let f = &d.finetune;
        let split: Vec<Real> = c.list_or("finetune.split", f.split.to_vec())?;
        let split: [Real; 3] = split
            .try_into()
            .map_err(|_| Error::Config("finetune.split needs three ratios".into()))?;
        let finetune = FinetuneConfig {
            lr: c.parse_or("finetune.lr", f.lr)?,
            batch_size: c.parse_or("finetune.batch_size", f.batch_size)?,
            epochs: c.parse_or("finetune.epochs", f.epochs)?,
            patience: c.parse_or("finetune.patience", f.patience)?,
            seed: 0,
            split,
        };
        let gnns = match c.get("experiment.gnns") {
            Some(_) => c.list_or("experiment.gnns", vec![])?,
            None => match c.get("model.gnn") {
                Some(g) => vec![g.parse()?],
                None => d.gnns.clone(),
            },
        };
        let seeds = match c.get("run.seed") {
            Some(s) => vec![s.parse().map_err(|e| Error::Config(format!("run.seed: {e}")))?],
            None => c.list_or("experiment.seeds", d.seeds.clone())?,
        };
        let spec = Self {
            synth,
            model,
            lambdas: c.list_or("experiment.lambdas", vec![pretrain.lambda])?,
            pretrain,
            finetune,
            freeze_encoder: c.parse_or("finetune.freeze_encoder", d.freeze_encoder)?,
            variants: c.list_or("experiment.variants", d.variants.clone())?,
            gnns,
            seeds,
            matching: c.parse_or("experiment.matching", d.matching)?,
            out_dir: c.get("run.out").map(PathBuf::from),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.pretrain.validate()?;
        if self.variants.is_empty() || self.seeds.is_empty() || self.lambdas.is_empty() {
            return Err(Error::Config("experiment needs variants, seeds and lambdas".into()));
        }
        if self.gnns.is_empty() && self.variants.iter().any(|v| v.uses_gnn()) {
            return Err(Error::Config("GNN variants requested without a GNN kind".into()));
        }
        if self.lambdas.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::Config("lambdas must be >= 0".into()));
        }
        self.model
            .architecture(self.model.vocab_size, GnnKind::Gcn)
            .validate()
    }

    /// Canonical `key = value` text of everything that affects results,
    /// excluding the seed list and output directory.
    pub fn canonical(&self) -> String {
        let s = &self.synth;
        let m = &self.model;
        let p = &self.pretrain;
        let f = &self.finetune;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("synth.n_queries", s.n_queries.to_string());
        kv("synth.n_classes", s.n_classes.to_string());
        kv("synth.tokens_per_query", s.tokens_per_query.to_string());
        kv("synth.topic_vocab", s.topic_vocab.to_string());
        kv("synth.noise_vocab", s.noise_vocab.to_string());
        kv("synth.beta_text", s.beta_text.to_string());
        kv("synth.p_in", s.p_in.to_string());
        kv("synth.p_out", s.p_out.to_string());
        kv("synth.urls_per_class", s.urls_per_class.to_string());
        kv("synth.n_pairs", s.n_pairs.to_string());
        kv("synth.seed", s.seed.to_string());
        kv("model.vocab_size", m.vocab_size.to_string());
        kv("model.d_model", m.d_model.to_string());
        kv("model.layers", m.layers.to_string());
        kv("model.heads", m.heads.to_string());
        kv("model.ffn", m.ffn.to_string());
        kv("model.max_len", m.max_len.to_string());
        kv("model.dropout", m.dropout.to_string());
        kv("model.gnn_layers", m.gnn_layers.to_string());
        kv("model.gnn_activation", m.gnn_activation.name().to_string());
        kv("pretrain.stages", p.rounds.to_string());
        kv("pretrain.lr", p.lr.to_string());
        kv("pretrain.batch_size", p.batch_size.to_string());
        kv("pretrain.max_epochs", p.max_epochs.to_string());
        kv("pretrain.patience", p.patience.to_string());
        kv("pretrain.max_pos", p.max_pos.to_string());
        kv("pretrain.holdout_fraction", p.holdout_fraction.to_string());
        kv("pretrain.stop_posterior_grad", p.stop_posterior_grad.to_string());
        kv("finetune.lr", f.lr.to_string());
        kv("finetune.batch_size", f.batch_size.to_string());
        kv("finetune.epochs", f.epochs.to_string());
        kv("finetune.patience", f.patience.to_string());
        kv("finetune.split", join(&f.split));
        kv("finetune.freeze_encoder", self.freeze_encoder.to_string());
        kv("experiment.variants", join(&self.variants.iter().map(|v| v.name()).collect::<Vec<_>>()));
        kv("experiment.gnns", join(&self.gnns.iter().map(|g| g.name()).collect::<Vec<_>>()));
        kv("experiment.lambdas", join(&self.lambdas));
        kv("experiment.matching", self.matching.to_string());
        out
    }

    /// First 12 hex digits of the SHA-256 of [`ExperimentSpec::canonical`].
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))[..12].to_string()
    }

    /// `out_dir/<hash>`, when an output directory is set.
    pub fn run_dir(&self) -> Option<PathBuf> {
        self.out_dir.as_ref().map(|d| d.join(self.hash()))
    }
}

/// One line of the results table.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub variant: String,
    pub gnn: String,
    /// Seed number, or `mean` / `std` for aggregate rows.
    pub seed: String,
    pub split: String,
    pub acc: Real,
    pub precision: Real,
    pub recall: Real,
    pub f1: Real,
}

pub const RESULTS_HEADER: &str = "variant,gnn,seed,split,acc,precision,recall,f1";

impl ResultRow {
    fn csv(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
            self.variant, self.gnn, self.seed, self.split, self.acc, self.precision, self.recall, self.f1
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct ExperimentReport {
    /// Per-seed rows in run order.
    pub rows: Vec<ResultRow>,
    /// Mean and sample standard deviation per (variant, gnn, split).
    pub summary: Vec<ResultRow>,
    /// Jobs that failed, with their errors.
    pub failures: Vec<String>,
    pub run_dir: Option<PathBuf>,
}

impl ExperimentReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(RESULTS_HEADER);
        s.push('\n');
        for r in self.rows.iter().chain(&self.summary) {
            s.push_str(&r.csv());
            s.push('\n');
        }
        s
    }

    /// Mean test accuracy of `variant` (any GNN when `gnn` is `None`).
    pub fn mean_accuracy(&self, variant: &str, gnn: Option<&str>) -> Option<Real> {
        self.summary
            .iter()
            .find(|r| r.variant == variant && r.seed == "mean" && r.split == "test" && gnn.is_none_or(|g| r.gnn == g))
            .map(|r| r.acc)
    }
}

/// Writes `bytes` unless `path` already holds different content.
pub fn write_guarded(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Ok(existing) = std::fs::read(path) {
        if existing == bytes {
            return Ok(());
        }
        return Err(Error::Contract(format!(
            "refusing to overwrite {} with different content",
            path.display()
        )));
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Inputs shared by every job of a seed.
struct SeedInputs {
    graph: QueryGraph,
    vocab: Vocab,
    labeled: Vec<LabeledQuery>,
    pairs: Vec<QueryPair>,
    classes: usize,
}

struct Job {
    variant: Variant,
    name: String,
    gnn: Option<GnnKind>,
    lambda: Real,
}

fn jobs(spec: &ExperimentSpec) -> Vec<Job> {
    let mut out = Vec::new();
    for &v in &spec.variants {
        if !v.uses_gnn() {
            out.push(Job {
                variant: v,
                name: v.name().to_string(),
                gnn: None,
                lambda: spec.pretrain.lambda,
            });
            continue;
        }
        for &g in &spec.gnns {
            let lambdas: Vec<Real> = match v {
                Variant::GeBertJ => spec.lambdas.clone(),
                Variant::WoTransfer => vec![0.0],
                _ => vec![spec.pretrain.lambda],
            };
            for &l in &lambdas {
                let name = if v == Variant::GeBertJ && spec.lambdas.len() > 1 {
                    format!("{}_l{l}", v.name())
                } else {
                    v.name().to_string()
                };
                out.push(Job {
                    variant: v,
                    name,
                    gnn: Some(g),
                    lambda: l,
                });
            }
        }
    }
    out
}

/// Pre-trains (per variant), fine-tunes and evaluates one job. Returns the
/// result rows.
fn run_job(spec: &ExperimentSpec, inputs: &SeedInputs, job: &Job, seed: u64, dir: Option<&Path>) -> Result<Vec<ResultRow>> {
    let started = Instant::now();
    let kind = job.gnn.unwrap_or(GnnKind::Gcn);
    let arch = spec.model.architecture(inputs.vocab.len(), kind);
    let mut params: ParamStore = arch.init(seed)?;
    let mut cfg = spec.pretrain.clone();
    cfg.seed = seed;
    cfg.lambda = job.lambda;
    let strategy = match job.variant {
        Variant::Bert => None,
        Variant::BertQ => Some(Strategy::BertQ),
        Variant::GeBertJ | Variant::WoTransfer => Some(Strategy::Joint),
        Variant::GeBertS => Some(Strategy::StageByStage),
    };
    let job_dir = dir.map(|d| match job.gnn {
        Some(g) => d.join(format!("{}_{}", job.name, g.name())),
        None => d.join(&job.name),
    });
    if let Some(strategy) = strategy {
        cfg.strategy = strategy;
        let data = PretrainData::new(&inputs.graph, &inputs.vocab, arch.encoder.max_len, cfg.holdout_fraction, seed);
        let log: RunLog = pretrain(&data, &arch, &mut params, &cfg)?;
        if let Some(d) = &job_dir {
            std::fs::create_dir_all(d)?;
            log.write_csv(d.join("runlog.csv"))?;
        }
    }
    let mut encoder = params.subset(crate::encoder::PREFIX);
    round_to_f32(&mut encoder);
    if let Some(d) = &job_dir {
        write_guarded(&d.join("pretrained.ckpt"), &encode(&encoder))?;
    }

    let mut ft = spec.finetune.clone();
    ft.seed = seed;
    let head = HeadConfig {
        freeze_encoder: spec.freeze_encoder,
        ..HeadConfig::new(arch.encoder.d_model)
    };
    let gnn_name = job.gnn.map(|g| g.name()).unwrap_or("none").to_string();
    let row = |split: &str, m: &crate::downstream::MetricsReport| ResultRow {
        variant: job.name.clone(),
        gnn: gnn_name.clone(),
        seed: seed.to_string(),
        split: split.to_string(),
        acc: m.accuracy,
        precision: m.precision,
        recall: m.recall,
        f1: m.f1,
    };
    let cls = finetune_classification(&encoder, &arch.encoder, &inputs.vocab, &inputs.labeled, inputs.classes, &head, &ft)?;
    let mut rows = vec![row("test", &cls.test)];
    if let Some(d) = &job_dir {
        let mut tuned = cls.params.clone();
        round_to_f32(&mut tuned);
        write_guarded(&d.join("finetuned.ckpt"), &encode(&tuned))?;
        write_guarded(&d.join("metrics.json"), cls.test.to_json().as_bytes())?;
    }
    if spec.matching {
        let m = finetune_matching(&encoder, &arch.encoder, &inputs.vocab, &inputs.pairs, &head, &ft)?;
        rows.push(row("match_test", &m.test));
        if let Some(d) = &job_dir {
            write_guarded(&d.join("matching_metrics.json"), m.test.to_json().as_bytes())?;
        }
    }
    log::info!(
        "{} ({gnn_name}) seed {seed}: acc {:.4} in {:.1}s",
        job.name,
        cls.test.accuracy,
        started.elapsed().as_secs_f64()
    );
    Ok(rows)
}

fn summarize(rows: &[ResultRow]) -> Vec<ResultRow> {
    let mut keys: Vec<(String, String, String)> = Vec::new();
    for r in rows {
        let k = (r.variant.clone(), r.gnn.clone(), r.split.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let mut out = Vec::new();
    for (variant, gnn, split) in keys {
        let group: Vec<&ResultRow> = rows
            .iter()
            .filter(|r| r.variant == variant && r.gnn == gnn && r.split == split)
            .collect();
        let n = group.len() as Real;
        let stat = |f: fn(&ResultRow) -> Real| {
            let mean = group.iter().map(|r| f(r)).sum::<Real>() / n;
            let var = if group.len() > 1 {
                group.iter().map(|r| (f(r) - mean).powi(2)).sum::<Real>() / (n - 1.0)
            } else {
                0.0
            };
            (mean, var.sqrt())
        };
        let (acc, precision, recall, f1) = (stat(|r| r.acc), stat(|r| r.precision), stat(|r| r.recall), stat(|r| r.f1));
        for (label, pick) in [("mean", 0), ("std", 1)] {
            let g = |p: (Real, Real)| if pick == 0 { p.0 } else { p.1 };
            out.push(ResultRow {
                variant: variant.clone(),
                gnn: gnn.clone(),
                seed: label.to_string(),
                split: split.clone(),
                acc: g(acc),
                precision: g(precision),
                recall: g(recall),
                f1: g(f1),
            });
        }
    }
    out
}

/// Runs every job for every seed. A failing job is logged, recorded in
/// `failures`, and skipped.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    spec.validate()?;
    let data = gen_synthetic(&spec.synth)?;
    let graph = project_bipartite(&data.clicks);
    let label_of: std::collections::HashMap<&str, usize> =
        data.labeled.iter().map(|q| (q.text.as_str(), q.label)).collect();
    let labeled: Vec<LabeledQuery> = graph
        .texts()
        .iter()
        .map(|t| LabeledQuery {
            text: t.clone(),
            label: label_of[t.as_str()],
        })
        .collect();
    let vocab = build_vocab(graph.texts(), spec.model.vocab_size, 1)?;
    let inputs = SeedInputs {
        graph,
        vocab,
        labeled,
        pairs: data.pairs,
        classes: spec.synth.n_classes,
    };
    let run_dir = spec.run_dir();
    if let Some(d) = &run_dir {
        write_guarded(&d.join("spec.conf"), spec.canonical().as_bytes())?;
        inputs.graph.write_edges(d.join("graph.edges"))?;
        inputs.graph.write_nodes(d.join("graph.nodes"))?;
        inputs.vocab.save(d.join("vocab.txt"))?;
    }
    let mut report = ExperimentReport {
        run_dir: run_dir.clone(),
        ..Default::default()
    };
    for &seed in &spec.seeds {
        let seed_dir = run_dir.as_ref().map(|d| d.join(format!("seed{seed}")));
        for job in jobs(spec) {
            match run_job(spec, &inputs, &job, seed, seed_dir.as_deref()) {
                Ok(rows) => report.rows.extend(rows),
                Err(e) => {
                    log::error!("{} seed {seed} failed: {e}", job.name);
                    report.failures.push(format!("{} seed {seed}: {e}", job.name));
                }
            }
        }
    }
    report.summary = summarize(&report.rows);
    if let Some(d) = &run_dir {
        write_guarded(&d.join(format!("results_{}.csv", join(&spec.seeds).replace(',', "-"))), report.to_csv().as_bytes())?;
    }
    Ok(report)
}
