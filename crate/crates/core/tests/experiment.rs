use qgraph_core::config::Config;
use qgraph_core::experiment::{run_experiment, write_guarded, ExperimentSpec, Variant, LAMBDA_SWEEP, RESULTS_HEADER};
use qgraph_core::Error;

const TINY: &str = "
[synth]
n_queries = 60
n_classes = 3
n_pairs = 20
[model]
vocab_size = 300
d_model = 8
layers = 1
heads = 2
ffn = 16
max_len = 12
gnn_layers = 1
[pretrain]
max_epochs = 2
batch_size = 16
[finetune]
lr = 0.001
batch_size = 16
epochs = 2
[experiment]
seeds = 0,1
gnns = gcn
";

fn spec(extra: &str, out: Option<&std::path::Path>) -> ExperimentSpec {
    let mut text = format!("{TINY}{extra}\n");
    if let Some(o) = out {
        text.push_str(&format!("[run]\nout = {}\n", o.display()));
    }
    ExperimentSpec::from_config(&Config::parse(&text).unwrap()).unwrap()
}

fn files_under(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn bert_only_runs_one_finetune_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let s = spec("variants = bert", Some(dir.path()));
    let r = run_experiment(&s).unwrap();
    assert!(r.failures.is_empty());
    assert_eq!(r.rows.len(), 2);
    assert!(r.rows.iter().all(|row| row.variant == "bert" && row.gnn == "none"));
    let seed0 = r.run_dir.unwrap().join("seed0").join("bert");
    assert!(seed0.join("finetuned.ckpt").exists());
    assert!(!seed0.join("runlog.csv").exists());
}

#[test]
fn reruns_reproduce_results_and_checkpoints() {
    let extra = "variants = bert_q,ge_bert_j,ge_bert_s\nmatching = true";
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run_experiment(&spec(extra, Some(a.path()))).unwrap();
    let rb = run_experiment(&spec(extra, Some(b.path()))).unwrap();
    assert!(ra.failures.is_empty(), "{:?}", ra.failures);
    assert_eq!(ra.to_csv(), rb.to_csv());
    let (fa, fb) = (files_under(a.path()), files_under(b.path()));
    assert_eq!(fa.len(), fb.len());
    for ((na, ba), (nb, bb)) in fa.iter().zip(&fb) {
        assert_eq!(na, nb);
        if na.ends_with("runlog.csv") {
            continue;
        }
        assert_eq!(ba, bb, "{na}");
    }
    assert!(fa.iter().any(|(n, _)| n.ends_with("pretrained.ckpt")));
    assert!(fa.iter().any(|(n, _)| n.ends_with("metrics.json")));
    assert!(ra.rows.iter().any(|r| r.split == "match_test"));

    // A rerun into the same directory finds identical artifacts and succeeds.
    let again = run_experiment(&spec(extra, Some(a.path()))).unwrap();
    assert_eq!(again.to_csv(), ra.to_csv());
}

#[test]
fn results_csv_layout_and_summary() {
    let r = run_experiment(&spec("variants = bert,bert_q", None)).unwrap();
    let csv = r.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], RESULTS_HEADER);
    assert_eq!(lines.len(), 1 + 4 + 4);
    let accs: Vec<f64> = r.rows.iter().filter(|row| row.variant == "bert").map(|row| row.acc).collect();
    let mean = r.mean_accuracy("bert", None).unwrap();
    assert!((mean - (accs[0] + accs[1]) / 2.0).abs() < 1e-12);
    assert!(lines.iter().any(|l| l.starts_with("bert,none,std,test,")));
}

#[test]
fn guarded_writes_never_replace_different_content() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x").join("a.bin");
    write_guarded(&p, b"one").unwrap();
    write_guarded(&p, b"one").unwrap();
    assert!(matches!(write_guarded(&p, b"two"), Err(Error::Contract(_))));
    assert_eq!(std::fs::read(&p).unwrap(), b"one");
}

#[test]
fn spec_hash_ignores_seeds_and_output_but_not_settings() {
    let dir = tempfile::tempdir().unwrap();
    let a = spec("", None);
    let b = spec("", Some(dir.path()));
    let c = ExperimentSpec {
        seeds: vec![7],
        ..a.clone()
    };
    assert_eq!(a.hash(), b.hash());
    assert_eq!(a.hash(), c.hash());
    assert_eq!(a.hash().len(), 12);
    let d = spec("lambdas = 0.5", None);
    assert_ne!(a.hash(), d.hash());
    assert_eq!(b.run_dir().unwrap(), dir.path().join(a.hash()));
}

#[test]
fn config_parsing_and_validation() {
    let s = spec("variants = ge_bert_j,wo_transfer", None);
    assert_eq!(s.variants, vec![Variant::GeBertJ, Variant::WoTransfer]);
    let bad = |text: &str| ExperimentSpec::from_config(&Config::parse(text).unwrap());
    assert!(matches!(bad("[experiment]\nvariants = gpt"), Err(Error::Config(_))));
    assert!(matches!(bad("[experiment]\nlambdas = -1"), Err(Error::Config(_))));
    assert!(matches!(bad("[model]\nd_model = 10\nheads = 4"), Err(Error::Config(_))));
    assert!(matches!(bad("[synth]\np_in = 0.001\np_out = 0.01"), Err(Error::Config(_))));
    let seeded = ExperimentSpec::from_config(&Config::parse("[run]\nseed = 3").unwrap()).unwrap();
    assert_eq!(seeded.seeds, vec![3]);
    assert_eq!(LAMBDA_SWEEP, [0.001, 0.01, 0.1, 0.5, 1.0, 5.0, 10.0, 50.0]);
}

#[test]
fn lambda_sweep_names_one_job_per_value() {
    let s = ExperimentSpec {
        seeds: vec![0],
        ..spec("variants = ge_bert_j\nlambdas = 0.1,1", None)
    };
    let r = run_experiment(&s).unwrap();
    let names: Vec<&str> = r.rows.iter().map(|row| row.variant.as_str()).collect();
    assert_eq!(names, vec!["ge_bert_j_l0.1", "ge_bert_j_l1"]);
}
