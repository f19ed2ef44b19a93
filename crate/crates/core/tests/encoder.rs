use qgraph_core::encoder::{embed_queries, encoder_forward, init_encoder, query_embedding, EncoderConfig};
use qgraph_core::textproc::TokenId;
use qgraph_core::Error;
use qgraph_numcore::gradcheck::{grad_check, GradCheckOptions};
use qgraph_numcore::{Real, Tape, Trainable};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cfg() -> EncoderConfig {
    EncoderConfig {
        vocab_size: 30,
        d_model: 8,
        layers: 2,
        heads: 2,
        ffn: 16,
        max_len: 10,
        dropout: 0.0,
    }
}

#[test]
fn defaults_and_validation() {
    let c = EncoderConfig::new(100);
    assert_eq!((c.d_model, c.layers, c.heads, c.ffn, c.max_len), (64, 2, 4, 256, 32));
    assert_eq!(c.dropout, 0.1);
    let bad = EncoderConfig { heads: 3, ..c };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
}

#[test]
fn initialization_statistics() {
    let c = EncoderConfig { d_model: 32, ..cfg() };
    let p = init_encoder(&c, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let emb = p.value("trans.tok_emb").unwrap().data();
    let mean: Real = emb.iter().sum::<Real>() / emb.len() as Real;
    let std = (emb.iter().map(|x| (x - mean).powi(2)).sum::<Real>() / emb.len() as Real).sqrt();
    assert!(mean.abs() < 0.005 && (std - 0.02).abs() < 0.003, "mean {mean} std {std}");
    assert!(p.value("trans.layer1.ln2.gain").unwrap().data().iter().all(|v| *v == 1.0));
    assert!(p.value("trans.layer0.attn.bq").unwrap().data().iter().all(|v| *v == 0.0));
}

#[test]
fn batching_matches_single_sequences() {
    let c = cfg();
    let p = init_encoder(&c, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let seqs: Vec<Vec<TokenId>> = vec![vec![2, 5, 7], vec![2, 9, 9, 11, 4, 3], vec![2]];
    let refs: Vec<&[TokenId]> = seqs.iter().map(|s| s.as_slice()).collect();
    let batched = embed_queries(&p, &c, &refs).unwrap();
    for (b, s) in seqs.iter().enumerate() {
        let single = embed_queries(&p, &c, &[s.as_slice()]).unwrap();
        for k in 0..c.d_model {
            assert!((batched.get2(b, k) - single.get2(0, k)).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_rows_are_distributions_over_real_tokens() {
    let c = cfg();
    let p = init_encoder(&c, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let seqs: Vec<&[TokenId]> = vec![&[2, 4, 6, 8], &[2, 3]];
    let mut tape = Tape::with_trainable(Trainable::Nothing);
    let out = encoder_forward(&mut tape, &p, &c, &seqs, None).unwrap();
    let seq = out.seq;
    for &a in &out.attention {
        let probs = tape.attention_probs(a).unwrap();
        for (b, &len) in out.lengths.iter().enumerate() {
            for h in 0..c.heads {
                for i in 0..len {
                    let base = ((b * c.heads + h) * seq + i) * seq;
                    let row = &probs[base..base + seq];
                    assert!((row.iter().sum::<Real>() - 1.0).abs() < 1e-12);
                    assert!(row[len..].iter().all(|v| *v == 0.0));
                }
            }
        }
    }
}

#[test]
fn bad_sequences_are_contract_errors() {
    let c = cfg();
    let p = init_encoder(&c, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let mut tape = Tape::new();
    assert!(matches!(query_embedding(&mut tape, &p, &c, &[&[]], None), Err(Error::Contract(_))));
    assert!(matches!(query_embedding(&mut tape, &p, &c, &[&[2, 99]], None), Err(Error::Contract(_))));
    let long = vec![2; 11];
    assert!(matches!(query_embedding(&mut tape, &p, &c, &[&long], None), Err(Error::Contract(_))));
    assert!(matches!(query_embedding(&mut tape, &p, &c, &[], None), Err(Error::Contract(_))));
}

#[test]
fn dropout_needs_an_rng_and_is_seeded() {
    let c = EncoderConfig { dropout: 0.3, ..cfg() };
    let p = init_encoder(&c, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let seqs: Vec<&[TokenId]> = vec![&[2, 4, 6]];
    let run = |seed: Option<u64>| {
        let mut tape = Tape::new();
        let mut rng = seed.map(ChaCha8Rng::seed_from_u64);
        let h = query_embedding(&mut tape, &p, &c, &seqs, rng.as_mut().map(|r| r as &mut dyn rand::RngCore)).unwrap();
        tape.value(h).clone()
    };
    assert_eq!(run(None), run(None));
    assert_eq!(run(Some(1)), run(Some(1)));
    assert_ne!(run(Some(1)), run(None));
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let c = EncoderConfig { layers: 1, ..cfg() };
    let p = init_encoder(&c, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let seqs: Vec<Vec<TokenId>> = vec![vec![2, 5, 7, 1], vec![2, 8]];
    let report = grad_check(
        |tape, params| {
            let refs: Vec<&[TokenId]> = seqs.iter().map(|s| s.as_slice()).collect();
            let h = query_embedding(tape, params, &c, &refs, None)?;
            let sq = tape.mul(h, h)?;
            let t = tape.tanh(sq);
            Ok::<_, Error>(tape.sum(t))
        },
        &p,
        &Trainable::All,
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed, "worst {:?}", report.worst());
}
