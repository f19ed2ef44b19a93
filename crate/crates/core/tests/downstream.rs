mod common;

use common::oracles::{metrics_oracle, Oracle};
use qgraph_core::downstream::{
    compute_metrics, finetune_classification, finetune_matching, init_matching_head, match_scores, read_labeled_tsv,
    read_pairs_tsv, split_indices, write_labeled_tsv, write_pairs_tsv, FinetuneConfig, HeadConfig, LabeledQuery,
    MetricsReport, QueryPair, PRIMARY_SPLIT, SECONDARY_SPLIT,
};
use qgraph_core::encoder::{embed_queries, init_encoder, EncoderConfig};
use qgraph_core::pretrain::{load_checkpoint, save_checkpoint};
use qgraph_core::synth::{gen_synthetic, SynthConfig};
use qgraph_core::textproc::{build_vocab, encode_query, Vocab};
use qgraph_core::Error;
use qgraph_numcore::{ParamStore, Real};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn assert_matches_oracle(m: &MetricsReport, o: &Oracle) {
    assert_eq!(m.confusion, o.confusion);
    assert_eq!(m.accuracy, o.acc);
    assert_eq!(m.precision, o.p);
    assert_eq!(m.recall, o.r);
    assert_eq!(m.f1, o.f1);
}

#[test]
fn hand_computed_binary_case() {
    let m = compute_metrics(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
    assert_eq!(m.accuracy, 0.75);
    assert!((m.precision - 0.5 * (1.0 + 2.0 / 3.0)).abs() < 1e-12);
    assert!((m.recall - 0.75).abs() < 1e-12);
    assert_eq!(m.confusion, vec![vec![1, 1], vec![0, 2]]);
}

#[test]
fn thousand_random_prediction_sets_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for _ in 0..1000 {
        let classes = rng.random_range(1..7);
        let n = rng.random_range(1..60);
        let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let golds: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let m = compute_metrics(&preds, &golds, classes).unwrap();
        assert_matches_oracle(&m, &metrics_oracle(&preds, &golds, classes));
    }
}

#[test]
fn degenerate_metric_inputs() {
    let m = compute_metrics(&[2, 0, 1], &[2, 0, 1], 3).unwrap();
    assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (1.0, 1.0, 1.0, 1.0));
    let m = compute_metrics(&[1; 6], &[0, 1, 0, 1, 0, 1], 2).unwrap();
    assert_eq!(m.accuracy, 0.5);
    assert!(matches!(compute_metrics(&[], &[], 2), Err(Error::Contract(_))));
    assert!(matches!(compute_metrics(&[0], &[0, 1], 2), Err(Error::Contract(_))));
    assert!(matches!(compute_metrics(&[3], &[0], 2), Err(Error::Contract(_))));
}

#[test]
fn metrics_serialize_as_json_and_csv() {
    let m = compute_metrics(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
    let back: MetricsReport = serde_json::from_str(&m.to_json()).unwrap();
    assert_eq!(back, m);
    assert_eq!(m.csv_row(), "0.750000,0.833333,0.750000,0.733333");
}

proptest! {
    #[test]
    fn metrics_stay_in_unit_interval(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..80)) {
        let (preds, golds): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let m = compute_metrics(&preds, &golds, 4).unwrap();
        for v in [m.accuracy, m.precision, m.recall, m.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        for (c, row) in m.confusion.iter().enumerate() {
            prop_assert_eq!(row.iter().sum::<usize>(), m.per_class[c].support);
            prop_assert_eq!(m.per_class[c].support, golds.iter().filter(|&&g| g == c).count());
        }
    }
}

#[test]
fn random_guess_matcher_is_near_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let golds: Vec<usize> = (0..1000).map(|i| i % 2).collect();
    let preds: Vec<usize> = (0..1000).map(|_| rng.random_range(0..2)).collect();
    let m = compute_metrics(&preds, &golds, 2).unwrap();
    let sigma = (0.25 / 1000.0 as Real).sqrt();
    assert!((m.accuracy - 0.5).abs() <= 3.0 * sigma, "{}", m.accuracy);
}

#[test]
fn splits_partition_the_indices() {
    for (ratios, sizes) in [(PRIMARY_SPLIT, (400, 50, 50)), (SECONDARY_SPLIT, (300, 100, 100))] {
        let s = split_indices(500, ratios, 7).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), sizes);
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..500).collect::<Vec<_>>());
        assert_eq!(split_indices(500, ratios, 7).unwrap(), s);
    }
    assert_ne!(split_indices(500, PRIMARY_SPLIT, 1).unwrap(), split_indices(500, PRIMARY_SPLIT, 2).unwrap());
    assert!(matches!(split_indices(10, [0.5, 0.5, 0.5], 0), Err(Error::Config(_))));
}

#[test]
fn tsv_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let labeled = vec![
        LabeledQuery { text: "cheap flights".into(), label: 2 },
        LabeledQuery { text: "weather tomorrow".into(), label: 0 },
    ];
    let pairs = vec![
        QueryPair { a: "a b".into(), b: "c".into(), label: true },
        QueryPair { a: "d".into(), b: "e f".into(), label: false },
    ];
    let (lp, pp) = (dir.path().join("l.tsv"), dir.path().join("p.tsv"));
    write_labeled_tsv(&labeled, &lp).unwrap();
    write_pairs_tsv(&pairs, &pp).unwrap();
    assert_eq!(read_labeled_tsv(&lp).unwrap(), labeled);
    assert_eq!(read_pairs_tsv(&pp).unwrap(), pairs);

    std::fs::write(&lp, "no label here\n").unwrap();
    assert!(matches!(read_labeled_tsv(&lp), Err(Error::Format(_))));
    std::fs::write(&pp, "a\tb\t2\n").unwrap();
    assert!(matches!(read_pairs_tsv(&pp), Err(Error::Format(_))));
}

struct Small {
    vocab: Vocab,
    enc: EncoderConfig,
    params: ParamStore,
    labeled: Vec<LabeledQuery>,
    pairs: Vec<QueryPair>,
}

fn small() -> Small {
    let data = gen_synthetic(&SynthConfig {
        n_queries: 60,
        n_classes: 3,
        beta_text: 0.6,
        n_pairs: 40,
        ..SynthConfig::default()
    })
    .unwrap();
    let vocab = build_vocab(data.labeled.iter().map(|q| q.text.as_str()), 500, 1).unwrap();
    let enc = EncoderConfig {
        vocab_size: vocab.len(),
        d_model: 16,
        layers: 1,
        heads: 2,
        ffn: 32,
        max_len: 12,
        dropout: 0.0,
    };
    let params = init_encoder(&enc, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    Small {
        vocab,
        enc,
        params,
        labeled: data.labeled,
        pairs: data.pairs,
    }
}

fn quick_ft() -> FinetuneConfig {
    FinetuneConfig {
        lr: 1e-3,
        batch_size: 16,
        epochs: 4,
        patience: 4,
        ..FinetuneConfig::default()
    }
}

#[test]
fn single_class_dataset_is_trivially_perfect() {
    let s = small();
    let one: Vec<LabeledQuery> = s.labeled.iter().map(|q| LabeledQuery { label: 0, ..q.clone() }).collect();
    let cfg = FinetuneConfig { epochs: 1, ..quick_ft() };
    let out = finetune_classification(&s.params, &s.enc, &s.vocab, &one, 1, &HeadConfig::new(16), &cfg).unwrap();
    assert_eq!(out.test.accuracy, 1.0);
}

#[test]
fn finetuning_leaves_the_checkpoint_file_alone() {
    let s = small();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pre.ckpt");
    save_checkpoint(&s.params, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    let before = loaded.clone();
    let out = finetune_classification(&loaded, &s.enc, &s.vocab, &s.labeled, 3, &HeadConfig::new(16), &quick_ft()).unwrap();
    finetune_matching(&loaded, &s.enc, &s.vocab, &s.pairs, &HeadConfig::new(16), &quick_ft()).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert!(loaded.bit_identical(&before, ""));
    assert!(out.params.with_prefix("head.").count() > 0);
}

#[test]
fn frozen_encoder_only_moves_the_head() {
    let s = small();
    let head = HeadConfig {
        freeze_encoder: true,
        ..HeadConfig::new(16)
    };
    let out = finetune_classification(&s.params, &s.enc, &s.vocab, &s.labeled, 3, &head, &quick_ft()).unwrap();
    assert!(out.params.bit_identical(&s.params, "trans."));
}

#[test]
fn matching_scores_are_symmetric_after_training() {
    let s = small();
    let out = finetune_matching(&s.params, &s.enc, &s.vocab, &s.pairs, &HeadConfig::new(16), &quick_ft()).unwrap();
    let seqs = |side: fn(&QueryPair) -> &str| -> Vec<Vec<u32>> {
        s.pairs.iter().map(|p| encode_query(&s.vocab, 0, side(p), s.enc.max_len).token_ids).collect()
    };
    let (a, b) = (seqs(|p| p.a.as_str()), seqs(|p| p.b.as_str()));
    let (ra, rb): (Vec<&[u32]>, Vec<&[u32]>) = (a.iter().map(Vec::as_slice).collect(), b.iter().map(Vec::as_slice).collect());
    let ha = embed_queries(&out.params, &s.enc, &ra).unwrap();
    let hb = embed_queries(&out.params, &s.enc, &rb).unwrap();
    let ab = match_scores(&out.params, &ha, &hb).unwrap();
    let ba = match_scores(&out.params, &hb, &ha).unwrap();
    for (x, y) in ab.iter().zip(&ba) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn identity_head_scores_identical_texts_above_half() {
    let s = small();
    let head = HeadConfig {
        identity_init: true,
        ..HeadConfig::new(16)
    };
    let mut params = s.params.clone();
    params.merge(&init_matching_head(16, &head, 0).unwrap());
    let seqs: Vec<Vec<u32>> = s.labeled.iter().take(10).map(|q| encode_query(&s.vocab, 0, &q.text, 12).token_ids).collect();
    let refs: Vec<&[u32]> = seqs.iter().map(|x| x.as_slice()).collect();
    let h = embed_queries(&params, &s.enc, &refs).unwrap();
    for (i, p) in match_scores(&params, &h, &h).unwrap().into_iter().enumerate() {
        let z: Real = h.row(i).iter().map(|v| v.max(0.0).powi(2)).sum();
        assert!((p - 1.0 / (1.0 + (-z).exp())).abs() < 1e-12);
        assert!(p > 0.5);
    }
    assert!(matches!(
        init_matching_head(16, &HeadConfig { hidden: 8, ..head }, 0),
        Err(Error::Config(_))
    ));
}

#[test]
fn finetuning_is_deterministic() {
    let s = small();
    let run = || finetune_classification(&s.params, &s.enc, &s.vocab, &s.labeled, 3, &HeadConfig::new(16), &quick_ft()).unwrap();
    let (a, b) = (run(), run());
    assert!(a.params.bit_identical(&b.params, ""));
    assert_eq!(a.test, b.test);
}
