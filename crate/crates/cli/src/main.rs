//! `qgraph`: build click graphs, generate synthetic data, pre-train,
//! fine-tune, evaluate and run whole experiments.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use qgraph_core::clickgraph::{ingest_click_log, project_bipartite, QueryGraph};
use qgraph_core::config::Config;
use qgraph_core::downstream::{
    evaluate_classification, finetune_classification, finetune_matching, read_labeled_tsv, read_pairs_tsv, HeadConfig,
};
use qgraph_core::experiment::{run_experiment, ExperimentSpec};
use qgraph_core::gnn::GnnKind;
use qgraph_core::gradient::{check_loss, LossKind, TinyProblem};
use qgraph_core::pretrain::{load_checkpoint, pretrain, save_checkpoint, PretrainData, Strategy};
use qgraph_core::synth::{gen_synthetic, write_synthetic};
use qgraph_core::textproc::{build_vocab, Vocab};
use qgraph_core::{Error, Result};
use qgraph_numcore::gradcheck::GradCheckOptions;

const EDGES_FILE: &str = "graph.edges";
const NODES_FILE: &str = "graph.nodes";
const VOCAB_FILE: &str = "vocab.txt";

#[derive(Parser)]
#[command(name = "qgraph", version, about = "Graph-enhanced query encoder pre-training")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand; each overrides the matching config key.
#[derive(Args, Clone, Debug, Default)]
struct Global {
    /// `key = value` config file with [section] headers
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    strategy: Option<StrategyArg>,
    #[arg(long, global = true, value_enum)]
    gnn: Option<GnnArg>,
    /// Weight of the transfer loss in joint training
    #[arg(long, global = true, value_name = "F")]
    lambda: Option<f64>,
    /// Rounds of stage-by-stage training
    #[arg(long, global = true, value_name = "N")]
    stages: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum StrategyArg {
    Sbs,
    Joint,
    Bertq,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum GnnArg {
    Gcn,
    Gat,
}

impl GnnArg {
    fn kind(self) -> GnnKind {
        match self {
            GnnArg::Gcn => GnnKind::Gcn,
            GnnArg::Gat => GnnKind::Gat,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Project a click log (query TAB url [TAB clicks]) into a query graph
    BuildGraph {
        #[arg(long, value_name = "PATH")]
        clicks: PathBuf,
    },
    /// Write a synthetic click log, labeled queries and query pairs
    GenSynthetic,
    /// Pre-train an encoder on a graph directory from build-graph
    Pretrain {
        #[arg(long, value_name = "DIR")]
        graph: PathBuf,
        /// Start from this checkpoint instead of a fresh initialization
        #[arg(long, value_name = "PATH")]
        init: Option<PathBuf>,
    },
    /// Fine-tune a pre-trained encoder for classification or matching
    Finetune {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        vocab: PathBuf,
        /// query TAB label
        #[arg(long, value_name = "PATH", conflicts_with = "pairs", required_unless_present = "pairs")]
        labels: Option<PathBuf>,
        /// query_a TAB query_b TAB 0|1
        #[arg(long, value_name = "PATH")]
        pairs: Option<PathBuf>,
    },
    /// Score a fine-tuned classifier on labeled queries
    Evaluate {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        vocab: PathBuf,
        #[arg(long, value_name = "PATH")]
        labels: PathBuf,
    },
    /// Compare analytic and finite-difference gradients of the pre-training losses
    GradCheck,
    /// Run the variant x GNN x seed matrix and print the results table
    Experiment,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn require_out(g: &Global) -> &Path {
    match &g.out {
        Some(p) => p,
        None => Cli::command()
            .error(ErrorKind::MissingRequiredArgument, "this subcommand needs --out DIR")
            .exit(),
    }
}

/// The config file with command-line overrides applied.
fn settings(g: &Global) -> Result<ExperimentSpec> {
    let mut c = match &g.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = g.seed {
        c.set("run.seed", s);
    }
    if let Some(s) = g.strategy {
        let name = match s {
            StrategyArg::Sbs => Some(Strategy::StageByStage),
            StrategyArg::Joint => Some(Strategy::Joint),
            StrategyArg::Bertq => Some(Strategy::BertQ),
            StrategyArg::None => None,
        };
        if let Some(st) = name {
            c.set("pretrain.strategy", st.name());
        }
    }
    if let Some(k) = g.gnn {
        c.set("model.gnn", k.kind().name());
        c.set("experiment.gnns", k.kind().name());
    }
    if let Some(l) = g.lambda {
        c.set("pretrain.lambda", l);
        c.set("experiment.lambdas", l);
    }
    if let Some(r) = g.stages {
        c.set("pretrain.stages", r);
    }
    if let Some(o) = &g.out {
        c.set("run.out", o.display());
    }
    ExperimentSpec::from_config(&c)
}

fn first_seed(spec: &ExperimentSpec) -> u64 {
    spec.seeds.first().copied().unwrap_or(0)
}

fn run(cli: &Cli) -> Result<ExitCode> {
    let g = &cli.global;
    match &cli.command {
        Command::BuildGraph { clicks } => {
            let out = require_out(g);
            let spec = settings(g)?;
            let log = ingest_click_log(clicks)?;
            let graph = project_bipartite(&log.records);
            let vocab = build_vocab(graph.texts(), spec.model.vocab_size, 1)?;
            std::fs::create_dir_all(out)?;
            graph.write_edges(out.join(EDGES_FILE))?;
            graph.write_nodes(out.join(NODES_FILE))?;
            vocab.save(out.join(VOCAB_FILE))?;
            println!(
                "{} queries, {} edges, {} vocabulary entries, {} malformed lines",
                graph.num_nodes(),
                graph.num_edges(),
                vocab.len(),
                log.malformed_lines
            );
        }
        Command::GenSynthetic => {
            let out = require_out(g);
            let mut spec = settings(g)?;
            if let Some(s) = g.seed {
                spec.synth.seed = s;
            }
            let data = gen_synthetic(&spec.synth)?;
            write_synthetic(&data, out)?;
            println!(
                "{} queries, {} click records, {} pairs in {}",
                data.labeled.len(),
                data.clicks.len(),
                data.pairs.len(),
                out.display()
            );
        }
        Command::Pretrain { graph, init } => {
            let out = require_out(g);
            let spec = settings(g)?;
            let seed = first_seed(&spec);
            let vocab = Vocab::load(graph.join(VOCAB_FILE))?;
            let qg = QueryGraph::read(graph.join(EDGES_FILE), graph.join(NODES_FILE))?;
            let kind = spec.gnns.first().copied().unwrap_or(GnnKind::Gcn);
            let arch = spec.model.architecture(vocab.len(), kind);
            let mut params = match init {
                Some(p) => load_checkpoint(p)?,
                None => arch.init(seed)?,
            };
            std::fs::create_dir_all(out)?;
            if g.strategy != Some(StrategyArg::None) {
                let mut cfg = spec.pretrain.clone();
                cfg.seed = seed;
                let data = PretrainData::new(&qg, &vocab, arch.encoder.max_len, cfg.holdout_fraction, seed);
                let log = pretrain(&data, &arch, &mut params, &cfg)?;
                log.write_csv(out.join("runlog.csv"))?;
                if let Some(last) = log.epochs.last() {
                    println!("{} epochs, final holdout loss {:.5}", log.epochs.len(), last.holdout);
                }
            }
            save_checkpoint(&params, out.join("pretrained.ckpt"))?;
        }
        Command::Finetune {
            checkpoint,
            vocab,
            labels,
            pairs,
        } => {
            let out = require_out(g);
            let spec = settings(g)?;
            let vocab = Vocab::load(vocab)?;
            let encoder = load_checkpoint(checkpoint)?;
            let arch = spec.model.architecture(vocab.len(), GnnKind::Gcn);
            let mut ft = spec.finetune.clone();
            ft.seed = first_seed(&spec);
            let head = HeadConfig {
                freeze_encoder: spec.freeze_encoder,
                ..HeadConfig::new(arch.encoder.d_model)
            };
            let outcome = match (labels, pairs) {
                (Some(l), _) => {
                    let data = read_labeled_tsv(l)?;
                    let classes = data.iter().map(|q| q.label + 1).max().unwrap_or(0);
                    finetune_classification(&encoder, &arch.encoder, &vocab, &data, classes, &head, &ft)?
                }
                (None, Some(p)) => finetune_matching(&encoder, &arch.encoder, &vocab, &read_pairs_tsv(p)?, &head, &ft)?,
                (None, None) => unreachable!("clap requires --labels or --pairs"),
            };
            std::fs::create_dir_all(out)?;
            save_checkpoint(&outcome.params, out.join("finetuned.ckpt"))?;
            std::fs::write(out.join("metrics.json"), outcome.test.to_json())?;
            println!("acc,precision,recall,f1");
            println!("{}", outcome.test.csv_row());
        }
        Command::Evaluate {
            checkpoint,
            vocab,
            labels,
        } => {
            let spec = settings(g)?;
            let vocab = Vocab::load(vocab)?;
            let params = load_checkpoint(checkpoint)?;
            let classes = params
                .get("head.b2")
                .map(|t| t.data().len())
                .ok_or_else(|| Error::Contract("checkpoint has no classification head".into()))?;
            let arch = spec.model.architecture(vocab.len(), GnnKind::Gcn);
            let report = evaluate_classification(&params, &arch.encoder, &vocab, &read_labeled_tsv(labels)?, classes)?;
            println!("{}", report.to_json());
            if let Some(out) = &g.out {
                std::fs::create_dir_all(out)?;
                std::fs::write(out.join("metrics.json"), report.to_json())?;
            }
        }
        Command::GradCheck => {
            let seed = g.seed.unwrap_or(0);
            let kinds = match g.gnn {
                Some(k) => vec![k.kind()],
                None => vec![GnnKind::Gcn, GnnKind::Gat],
            };
            let mut ok = true;
            for kind in kinds {
                let problem = TinyProblem::new(kind, seed)?;
                for loss in LossKind::ALL {
                    let report = check_loss(&problem, loss, seed, GradCheckOptions::default())?;
                    let worst = report.worst().map(|w| w.name.as_str()).unwrap_or("-");
                    println!(
                        "{} {:5} max rel err {:.3e} ({worst}) {}",
                        kind.name(),
                        loss.name(),
                        report.max_rel_err,
                        if report.passed { "ok" } else { "FAIL" }
                    );
                    ok &= report.passed;
                }
            }
            if !ok {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Experiment => {
            let spec = settings(g)?;
            let report = run_experiment(&spec)?;
            print!("{}", report.to_csv());
            if let Some(d) = &report.run_dir {
                eprintln!("artifacts in {}", d.display());
            }
            if !report.failures.is_empty() {
                for f in &report.failures {
                    eprintln!("failed: {f}");
                }
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
