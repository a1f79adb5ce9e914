//! Writes the synthetic cipher fixture (corpora, key, prior, config).
//!
//! `cargo run --example write_fixture -- <dir>`

use std::path::PathBuf;

use uct::synth::{cipher_fixture, write_fixture, CipherSpec};

fn main() -> uct::Result<()> {
    let dir: PathBuf = std::env::args().nth(1).unwrap_or_else(|| "cipher".into()).into();
    let fixture = cipher_fixture(&CipherSpec::default());
    write_fixture(&fixture, &dir)?;
    println!("wrote {}", dir.display());
    for (p, c) in &fixture.key {
        println!("{p:?} -> {c:?}");
    }
    Ok(())
}
