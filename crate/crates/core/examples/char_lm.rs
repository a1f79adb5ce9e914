//! Trains Witten-Bell character n-gram models of several orders on the
//! synthetic target corpus and reports held-out perplexity.
//!
//! Run with `cargo run --release --example char_lm`.

use std::collections::BTreeSet;

use uct::charlm::{train_lm, Event, Smoothing};
use uct::corpus::{induce_alphabet, tokenize};
use uct::synth::{cipher_fixture, CipherSpec};

fn main() -> uct::Result<()> {
    let fx = cipher_fixture(&CipherSpec::default());
    let train: Vec<_> = fx.target_train.iter().map(|s| tokenize(s)).collect();
    let alphabet = induce_alphabet(&train, 1.0, &BTreeSet::new())?;
    let corpus: Vec<_> = train.iter().map(|s| alphabet.encode(s)).collect();
    let held_out: Vec<_> = fx.test_target.iter().map(|s| alphabet.encode(&tokenize(s))).collect();

    for order in 1..=5 {
        let lm = train_lm(&corpus, &alphabet, order, Smoothing::WittenBell)?;
        let fst = lm.compile();
        println!(
            "order {order}: perplexity {:>6.3}, {} states, {} arcs",
            lm.perplexity(&held_out),
            fst.num_states(),
            fst.num_arcs()
        );
    }

    let lm = train_lm(&corpus, &alphabet, 3, Smoothing::WittenBell)?;
    let th = alphabet.encode(&tokenize("th"));
    let mut next: Vec<(f64, String)> = alphabet
        .symbol_ids()
        .map(|l| (lm.prob(Event::Symbol(l), &th), alphabet.symbol_name(l)))
        .collect();
    next.sort_by(|a, b| b.0.total_cmp(&a.0));
    println!("most likely after \"th\":");
    for (p, c) in next.iter().take(5) {
        println!("  {c:?} {p:.3}");
    }
    Ok(())
}
