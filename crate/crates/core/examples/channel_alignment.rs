//! Builds a bounded-delay edit channel and shows the best alignment of a
//! target string to a source string, plus the posterior edit counts.
//!
//! Run with `cargo run --example channel_alignment`.

use ndarray::Array2;
use uct::channel::{build_channel, DelayBound, EmissionParams};
use uct::corpus::{tokenize, Alphabet};
use uct::em::expected_counts;
use uct::fst::{compose, shortest_path, Wfst};

fn main() -> uct::Result<()> {
    let tgt = Alphabet::new("abc".chars());
    let src = Alphabet::new("xyz".chars());
    // Rows: ε then target symbols; columns: ε then source symbols.
    let mut table = Array2::from_elem((tgt.len(), src.len()), 0.02);
    table[[0, 0]] = 1.0;
    for i in 1..tgt.len() {
        table[[i, i]] = 1.0;
    }
    let params = EmissionParams::from_table(table)?;
    let channel = build_channel(&params, DelayBound(1));
    println!("channel: {} states, {} arcs", channel.fst.num_states(), channel.fst.num_arcs());

    let y = tgt.encode(&tokenize("abca"));
    let x = src.encode(&tokenize("xyz"));
    let lattice = compose(&compose(&Wfst::linear_acceptor(&y, tgt.len()), &channel.fst)?, &Wfst::linear_acceptor(&x, src.len()))?;
    if let Some(best) = shortest_path(&lattice)? {
        println!("best alignment, weight {:.3}:", best.weight);
        for &(q, i) in &best.arcs {
            let a = &lattice.arcs(q)[i as usize];
            println!("  {} -> {}", tgt.symbol_name(a.ilabel), src.symbol_name(a.olabel));
        }
    }

    let (counts, weight) = expected_counts(&y, &x, &channel)?;
    println!("-log P(x | y) = {weight:.3}");
    println!("expected counts:");
    for ((i, j), c) in counts.indexed_iter().filter(|(_, c)| **c > 1e-3) {
        println!("  ({}, {}) {c:.3}", tgt.symbol_name(i as u32), src.symbol_name(j as u32));
    }
    Ok(())
}
