//! Trains the character encoder-decoder on the synthetic cipher with
//! denoising and iterative back-translation, no parallel data.
//!
//! Run with `cargo run --release --example unmt_cipher`. Takes a few
//! minutes on one core.

use std::collections::BTreeSet;

use uct::corpus::{induce_alphabet, tokenize, Alphabet};
use uct::eval::corpus_cer;
use uct::neural::{train_unmt, Direction, JointVocab, UnmtConfig};
use uct::synth::{cipher_fixture, CipherSpec};

fn main() -> uct::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let fx = cipher_fixture(&CipherSpec::default());
    let tok = |v: &[String]| v.iter().map(|s| tokenize(s)).collect::<Vec<_>>();
    let tgt = induce_alphabet(&tok(&fx.target_train), 1.0, &BTreeSet::new())?;
    let src = induce_alphabet(&tok(&fx.source_train), 1.0, &BTreeSet::new())?;
    let enc = |a: &Alphabet, v: &[String]| v.iter().map(|s| a.encode(&tokenize(s))).collect::<Vec<_>>();

    let source = enc(&src, &fx.source_train);
    let target: Vec<_> = enc(&tgt, &fx.target_train).into_iter().take(source.len()).collect();
    let valid: Vec<_> = enc(&src, &fx.valid_source).into_iter().zip(enc(&tgt, &fx.valid_target)).collect();
    let mut config = UnmtConfig::default();
    config.schedule.max_epochs = 8;

    let run = train_unmt(&source, &target, &valid, JointVocab::new(&src, &tgt), &config)?;
    println!("best epoch {}", run.best_epoch);

    let hyps: Vec<String> = fx
        .test_source
        .iter()
        .map(|s| tgt.decode(&run.model.greedy_decode(&src.encode(&tokenize(s)), Direction::SRC_TO_TGT)).detokenize())
        .collect();
    println!("test CER {:.4}", corpus_cer(&hyps, &fx.test_target)?);
    for (h, r) in hyps.iter().zip(&fx.test_target).take(3) {
        println!("  ref {r:?}\n  hyp {h:?}");
    }
    Ok(())
}
