//! Recovers a substitution cipher with hard stepwise EM, given four of
//! its letter pairs as a prior.
//!
//! Run with `cargo run --release --example decipher`.

use std::collections::BTreeSet;
use std::time::Instant;

use uct::channel::{build_channel, build_prior, DelayBound};
use uct::charlm::{train_lm, Smoothing};
use uct::corpus::{induce_alphabet, tokenize, Alphabet};
use uct::em::{decode_best, train_em, EmConfig};
use uct::eval::corpus_cer;
use uct::synth::{cipher_fixture, CipherSpec, PRIOR_PAIRS};

fn main() -> uct::Result<()> {
    env_logger::init();
    let fx = cipher_fixture(&CipherSpec::default());
    let tok = |v: &[String]| v.iter().map(|s| tokenize(s)).collect::<Vec<_>>();
    let (tgt_train, src_train) = (tok(&fx.target_train), tok(&fx.source_train));
    let tgt = induce_alphabet(&tgt_train, 1.0, &BTreeSet::new())?;
    let src = induce_alphabet(&src_train, 1.0, &BTreeSet::new())?;

    let lm = train_lm(&tgt_train.iter().map(|s| tgt.encode(s)).collect::<Vec<_>>(), &tgt, 3, Smoothing::WittenBell)?;
    let lm_fst = lm.compile();
    // A few known letter pairs; the shared space is paired automatically.
    let pairs: Vec<_> = fx.prior_pairs(PRIOR_PAIRS).into_iter().map(|(p, c)| (p, c, None)).collect();
    let prior = build_prior(&tgt, &src, &[pairs], 0.01, 1.0)?;
    let config = EmConfig {
        delay: DelayBound(0),
        ..EmConfig::default()
    };
    let train_x: Vec<_> = src_train.iter().map(|s| src.encode(s)).collect();

    let t0 = Instant::now();
    let run = train_em(&train_x, &lm_fst, &prior, tgt.len(), src.len(), &config)?;
    println!("trained {} epochs in {:.1?}", run.history.len(), t0.elapsed());
    for e in &run.history {
        println!("  epoch {:>2}: joint weight {:.1}", e.epoch, e.joint_weight);
    }

    let argmax = run.state.params.row_argmax();
    let recovered = recovered_rows(&tgt, &src, &argmax, &fx.key);
    println!("cipher rows recovered: {recovered}/{}", fx.key.len());

    let channel = build_channel(&run.state.params, config.delay);
    let hyps: Vec<String> = fx
        .test_source
        .iter()
        .map(|s| decode_best(&src.encode(&tokenize(s)), &lm_fst, &channel.fst).map(|d| tgt.decode(&d.labels).detokenize()))
        .collect::<uct::Result<_>>()?;
    println!("test CER: {:.4}", corpus_cer(&hyps, &fx.test_target)?);
    for (h, r) in hyps.iter().zip(&fx.test_target).take(3) {
        println!("  ref {r:?}\n  hyp {h:?}");
    }
    Ok(())
}

fn recovered_rows(
    tgt: &Alphabet,
    src: &Alphabet,
    argmax: &[u32],
    key: &std::collections::BTreeMap<char, char>,
) -> usize {
    key.iter()
        .filter(|(p, c)| match (tgt.id(**p), src.id(**c)) {
            (Some(t), Some(s)) => argmax[t as usize - 1] == s,
            _ => false,
        })
        .count()
}
