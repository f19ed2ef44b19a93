mod common;

use common::tiny_setup;
use qgraph_core::clickgraph::project_bipartite;
use qgraph_core::gnn::GnnKind;
use qgraph_core::pretrain::{
    build_batch, encode_nodes, holdout_loss, load_checkpoint, phase_losses, save_checkpoint, train_bert_q, train_gnn_stage, train_joint,
    train_stage_by_stage, train_transfer_stage, Phase, PretrainData, RunLog, StepOptions, Strategy, TrainConfig,
    RUN_LOG_HEADER,
};
use qgraph_core::synth::{gen_synthetic, SynthConfig};
use qgraph_core::textproc::build_vocab;
use qgraph_core::Error;
use qgraph_numcore::{Adam, AdamConfig, ParamStore, Real, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn quick(strategy: Strategy) -> TrainConfig {
    TrainConfig {
        strategy,
        rounds: 1,
        lr: 1e-2,
        batch_size: 8,
        max_epochs: 3,
        patience: 3,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn without_secs(log: &RunLog) -> RunLog {
    let mut l = log.clone();
    for r in &mut l.epochs {
        r.secs = 0.0;
    }
    l
}

#[test]
fn gnn_stage_freezes_encoder() {
    let mut s = tiny_setup(24, GnnKind::Gcn, 1);
    let before = s.params.clone();
    let log = train_gnn_stage(&s.data, &s.arch, &mut s.params, &quick(Strategy::StageByStage), 0).unwrap();
    assert!(!log.is_empty());
    assert!(s.params.bit_identical(&before, "trans."));
    assert!(!s.params.bit_identical(&before, "gnn."));
}

#[test]
fn transfer_stage_freezes_gnn() {
    let mut s = tiny_setup(24, GnnKind::Gat, 2);
    let before = s.params.clone();
    train_transfer_stage(&s.data, &s.arch, &mut s.params, &quick(Strategy::StageByStage), 0).unwrap();
    assert!(s.params.bit_identical(&before, "gnn."));
    assert!(!s.params.bit_identical(&before, "trans."));
}

#[test]
fn zero_epochs_changes_nothing() {
    let mut s = tiny_setup(16, GnnKind::Gcn, 3);
    let before = s.params.clone();
    let cfg = TrainConfig {
        max_epochs: 0,
        ..quick(Strategy::Joint)
    };
    assert!(train_joint(&s.data, &s.arch, &mut s.params, &cfg).unwrap().is_empty());
    assert!(train_gnn_stage(&s.data, &s.arch, &mut s.params, &cfg, 0).unwrap().is_empty());
    assert!(s.params.bit_identical(&before, ""));
}

#[test]
fn lambda_zero_joint_logs_gnn_loss_exactly() {
    let mut s = tiny_setup(20, GnnKind::Gcn, 4);
    let cfg = TrainConfig {
        lambda: 0.0,
        ..quick(Strategy::Joint)
    };
    let log = train_joint(&s.data, &s.arch, &mut s.params, &cfg).unwrap();
    assert!(!log.steps.is_empty());
    for r in &log.steps {
        assert_eq!(r.l_j.to_bits(), r.l_gnn.to_bits());
    }
    for r in &log.epochs {
        assert_eq!(r.l_j.to_bits(), r.l_gnn.to_bits());
    }
}

#[test]
fn joint_loss_decomposes_at_every_step() {
    for lambda in [1.0, 0.37] {
        let mut s = tiny_setup(20, GnnKind::Gat, 5);
        let cfg = TrainConfig {
            lambda,
            ..quick(Strategy::Joint)
        };
        let log = train_joint(&s.data, &s.arch, &mut s.params, &cfg).unwrap();
        for r in &log.steps {
            assert!((r.l_j - (r.l_gnn + lambda * r.l_kl)).abs() < 1e-12);
        }
        for r in &log.epochs {
            assert!((r.l_j - (r.l_gnn + lambda * r.l_kl)).abs() < 1e-9);
        }
    }
}

#[test]
fn one_joint_step_descends_on_its_batch() {
    let mut s = tiny_setup(16, GnnKind::Gcn, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let anchors: Vec<usize> = s.data.anchors().into_iter().take(6).collect();
    let batch = build_batch(&s.data.train, &anchors, Some(2), 32, &mut rng).unwrap();
    let opts = StepOptions {
        phase: Phase::Joint,
        lambda: 1.0,
        stop_posterior_grad: false,
    };
    let eval = |params: &ParamStore, backward: bool| {
        let mut tape = Tape::with_trainable(Phase::Joint.trainable());
        let h = encode_nodes(&mut tape, params, &s.arch.encoder, &s.data.tokens, &batch.nodes, None).unwrap();
        let l = phase_losses(&mut tape, params, Some(&s.arch.gnn), h, batch.view.as_ref(), &batch.pairs, &batch.labels, opts)
            .unwrap();
        let v = tape.value(l.l_j).data()[0];
        let g = backward.then(|| tape.backward(l.l_j).unwrap());
        (v, g)
    };
    let (before, grads) = eval(&s.params, true);
    let mut adam = Adam::new(AdamConfig::with_lr(1e-3), &s.params, &Phase::Joint.trainable());
    s.params.accumulate_grads(&grads.unwrap());
    adam.step(&mut s.params).unwrap();
    let (after, _) = eval(&s.params, false);
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn bert_q_never_creates_gnn_parameters() {
    let s = tiny_setup(20, GnnKind::Gcn, 7);
    let mut enc_only = s.params.subset("trans.");
    train_bert_q(&s.data, &s.arch.encoder, &mut enc_only, &quick(Strategy::BertQ)).unwrap();
    assert_eq!(enc_only.with_prefix("gnn.").count(), 0);

    let mut full = s.params.clone();
    train_bert_q(&s.data, &s.arch.encoder, &mut full, &quick(Strategy::BertQ)).unwrap();
    assert!(full.bit_identical(&s.params, "gnn."));
}

#[test]
fn bert_q_starts_near_ln2_per_pair() {
    let s = tiny_setup(20, GnnKind::Gcn, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch = build_batch(&s.data.train, &s.data.anchors(), None, 32, &mut rng).unwrap();
    let mut tape = Tape::new();
    let h = encode_nodes(&mut tape, &s.params, &s.arch.encoder, &s.data.tokens, &batch.nodes, None).unwrap();
    let opts = StepOptions {
        phase: Phase::BertQ,
        lambda: 1.0,
        stop_posterior_grad: false,
    };
    let l = phase_losses(&mut tape, &s.params, None, h, None, &batch.pairs, &batch.labels, opts).unwrap();
    let per_pair = tape.value(l.l_gnn).data()[0] / batch.pairs.len() as Real;
    assert!((per_pair - std::f64::consts::LN_2).abs() < 0.01, "{per_pair}");
}

#[test]
fn runs_are_deterministic() {
    let run = || {
        let mut s = tiny_setup(20, GnnKind::Gat, 9);
        let log = train_joint(&s.data, &s.arch, &mut s.params, &quick(Strategy::Joint)).unwrap();
        (s.params, without_secs(&log))
    };
    let (p1, l1) = run();
    let (p2, l2) = run();
    assert!(p1.bit_identical(&p2, ""));
    assert_eq!(l1, l2);
}

#[test]
fn one_round_equals_stage_one_then_stage_two() {
    let cfg = quick(Strategy::StageByStage);
    let mut a = tiny_setup(18, GnnKind::Gcn, 10);
    let log_a = train_stage_by_stage(&a.data, &a.arch, &mut a.params, &cfg).unwrap();
    let mut b = tiny_setup(18, GnnKind::Gcn, 10);
    let mut log_b = train_gnn_stage(&b.data, &b.arch, &mut b.params, &cfg, 0).unwrap();
    log_b.append(train_transfer_stage(&b.data, &b.arch, &mut b.params, &cfg, 0).unwrap());
    assert!(a.params.bit_identical(&b.params, ""));
    assert_eq!(without_secs(&log_a), without_secs(&log_b));
}

#[test]
fn lambda_does_not_affect_transfer_stage() {
    let run = |lambda| {
        let mut s = tiny_setup(18, GnnKind::Gcn, 11);
        let cfg = TrainConfig {
            lambda,
            ..quick(Strategy::StageByStage)
        };
        let log = train_transfer_stage(&s.data, &s.arch, &mut s.params, &cfg, 0).unwrap();
        (s.params, without_secs(&log).steps)
    };
    let (p1, s1) = run(0.1);
    let (p2, s2) = run(10.0);
    assert!(p1.bit_identical(&p2, ""));
    let kl1: Vec<Real> = s1.iter().map(|r| r.l_kl).collect();
    let kl2: Vec<Real> = s2.iter().map(|r| r.l_kl).collect();
    assert_eq!(kl1, kl2);
}

#[test]
fn early_stopping_honours_patience_and_max_epochs() {
    let mut s = tiny_setup(20, GnnKind::Gcn, 12);
    let cfg = TrainConfig {
        max_epochs: 12,
        patience: 2,
        ..quick(Strategy::BertQ)
    };
    let log = train_bert_q(&s.data, &s.arch.encoder, &mut s.params, &cfg).unwrap();
    let h: Vec<Real> = log.epochs.iter().map(|r| r.holdout).collect();
    assert!(h.len() <= 12);
    if h.len() < 12 {
        let best = h[..h.len() - 2].iter().cloned().fold(Real::INFINITY, Real::min);
        assert!(h[h.len() - 2..].iter().all(|v| *v >= best));
    }
    for (i, r) in log.epochs.iter().enumerate() {
        assert_eq!(r.epoch, i);
    }
}

fn synthetic_200() -> (PretrainData, qgraph_core::pretrain::Architecture, ParamStore) {
    let data = gen_synthetic(&SynthConfig {
        n_queries: 200,
        ..SynthConfig::default()
    })
    .unwrap();
    let g = project_bipartite(&data.clicks);
    let vocab = build_vocab(g.texts(), 2000, 1).unwrap();
    let mut arch = common::tiny_arch(vocab.len(), GnnKind::Gcn);
    arch.encoder.max_len = 16;
    let pd = PretrainData::new(&g, &vocab, arch.encoder.max_len, 0.1, 0);
    let params = arch.init(0).unwrap();
    (pd, arch, params)
}

fn best_holdout(log: &RunLog) -> Real {
    log.epochs.iter().map(|r| r.holdout).fold(Real::INFINITY, Real::min)
}

#[test]
fn stages_improve_their_held_out_objectives_on_synthetic_graph() {
    let (data, arch, mut params) = synthetic_200();
    let cfg = TrainConfig {
        lr: 2e-2,
        batch_size: 64,
        max_epochs: 15,
        patience: 15,
        ..quick(Strategy::StageByStage)
    };
    let opts = |phase| StepOptions {
        phase,
        lambda: 1.0,
        stop_posterior_grad: true,
    };
    // The GNN stage needs an informative frozen encoder, so the encoder is
    // pre-trained on the query objective first.
    let mut enc = params.subset("trans.");
    let before = holdout_loss(&data, &enc, &arch.encoder, None, opts(Phase::BertQ)).unwrap();
    let b = train_bert_q(&data, &arch.encoder, &mut enc, &cfg).unwrap();
    assert!(best_holdout(&b) < before, "{before} {:?}", b.epochs);
    params.merge(&enc);

    let before = holdout_loss(&data, &params, &arch.encoder, Some(&arch.gnn), opts(Phase::Gnn)).unwrap();
    let g = train_gnn_stage(&data, &arch, &mut params, &cfg, 0).unwrap();
    assert!(best_holdout(&g) < before, "{before} {:?}", g.epochs);

    let before = holdout_loss(&data, &params, &arch.encoder, Some(&arch.gnn), opts(Phase::Transfer)).unwrap();
    let t = train_transfer_stage(&data, &arch, &mut params, &cfg, 0).unwrap();
    assert!(best_holdout(&t) < before, "{before} {:?}", t.epochs);
}

#[test]
fn stage_checkpoint_feeds_joint_training() {
    let mut s = tiny_setup(16, GnnKind::Gcn, 13);
    train_stage_by_stage(&s.data, &s.arch, &mut s.params, &quick(Strategy::StageByStage)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    save_checkpoint(&s.params, &p1).unwrap();
    let mut loaded = load_checkpoint(&p1).unwrap();
    save_checkpoint(&loaded, &p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    train_joint(&s.data, &s.arch, &mut loaded, &quick(Strategy::Joint)).unwrap();
}

#[test]
fn config_and_contract_errors() {
    let mut s = tiny_setup(12, GnnKind::Gcn, 14);
    for bad in [
        TrainConfig { lambda: -1.0, ..quick(Strategy::Joint) },
        TrainConfig { rounds: 0, ..quick(Strategy::Joint) },
        TrainConfig { lr: 0.0, ..quick(Strategy::Joint) },
    ] {
        assert!(matches!(train_joint(&s.data, &s.arch, &mut s.params, &bad), Err(Error::Config(_))));
    }
    let mut enc_only = s.params.subset("trans.");
    assert!(matches!(
        train_joint(&s.data, &s.arch, &mut enc_only, &quick(Strategy::Joint)),
        Err(Error::Contract(_))
    ));
    assert!("nope".parse::<Strategy>().is_err());
}

#[test]
fn run_log_csv_layout() {
    let mut s = tiny_setup(12, GnnKind::Gcn, 15);
    let log = train_joint(&s.data, &s.arch, &mut s.params, &quick(Strategy::Joint)).unwrap();
    let csv = log.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(RUN_LOG_HEADER));
    let first: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(first.len(), 7);
    assert_eq!(first[0], "joint");
    assert_eq!(first[1], "0");
}
