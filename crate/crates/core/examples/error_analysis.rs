//! Scores a handful of hypotheses and prints the error profile: metrics,
//! the most frequent character confusions and word substitutions.
//!
//! Run with `cargo run --example error_analysis`.

use std::collections::HashSet;

use uct::eval::{align_chars, error_profile, EditCounts};

fn main() -> uct::Result<()> {
    let pairs: Vec<(String, String)> = [
        ("the cat sat on the mat", "the cat sat on the mat"),
        ("teh dog rans fast", "the dog runs fast"),
        ("a bird in tho hand", "a bird in the hand"),
        ("six seven", "six seven eight"),
    ]
    .iter()
    .map(|(h, r)| (h.to_string(), r.to_string()))
    .collect();
    let vocab: HashSet<String> = pairs.iter().flat_map(|p| p.1.split(' ').map(String::from)).collect();

    for (h, r) in &pairs {
        let e = EditCounts::of(&align_chars(h, r));
        println!("{h:?} vs {r:?}: {} sub, {} ins, {} del", e.sub, e.ins, e.del);
    }

    let profile = error_profile(&pairs, Some(&vocab), 3)?;
    println!();
    print!("{}", profile.summary("example"));
    let mut confusions: Vec<_> = profile.confusion.counts.iter().filter(|((r, h), _)| r != h).collect();
    confusions.sort_by(|a, b| b.1.cmp(a.1));
    println!("character confusions (reference, hypothesis):");
    for ((r, h), n) in confusions.iter().take(5) {
        println!("  {r:?} -> {h:?}: {n}");
    }
    Ok(())
}
