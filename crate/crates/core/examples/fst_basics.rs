//! Builds two small transducers by hand, composes them and reads off the
//! best paths and the total path weight.
//!
//! Run with `cargo run --example fst_basics`.

use uct::fst::{compose, n_shortest_paths, shortest_distance, Arc, Semiring, Wfst};

fn main() -> uct::Result<()> {
    // Rewrites label 1 as 1 or 2, and label 2 as 2.
    let mut rewrite = Wfst::new(3, 3);
    let s = rewrite.add_state();
    rewrite.set_start(s);
    rewrite.set_final(s, 0.0);
    rewrite.add_arc(s, Arc::new(1, 1, 0.2, s));
    rewrite.add_arc(s, Arc::new(1, 2, 1.6, s));
    rewrite.add_arc(s, Arc::new(2, 2, 0.1, s));

    let input = Wfst::linear_acceptor(&[1, 2, 1], 3);
    let lattice = compose(&input, &rewrite)?;
    println!("lattice: {} states, {} arcs", lattice.num_states(), lattice.num_arcs());

    for p in n_shortest_paths(&lattice, 4)? {
        println!("  {:?} -> {:?}  weight {:.2}", p.input, p.output, p.weight);
    }
    let dist = shortest_distance(&lattice, Semiring::Log)?;
    let total = lattice
        .states()
        .fold(f64::INFINITY, |acc, q| Semiring::Log.plus(acc, dist[q as usize] + lattice.final_weight(q)));
    println!("total weight over all paths: {total:.4}");
    print!("{}", lattice.to_text());
    Ok(())
}
