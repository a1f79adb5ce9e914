//! Synthetic substitution-cipher corpora with a known key.
//!
//! Plaintext comes from a random order-3 character model over fourteen
//! Latin letters and space. The ciphertext replaces each letter with a
//! Greek letter through a seeded permutation and keeps spaces.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Gamma;

use crate::error::{IoContext, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CipherSpec {
    pub seed: u64,
    /// Dirichlet concentration of each context's next-symbol distribution;
    /// small values give peaked, predictable text.
    pub concentration: f64,
    /// Probability of a space after a letter.
    pub space_prob: f64,
    /// Probability of ending the sentence after a letter.
    pub eos_prob: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub target_train: usize,
    pub source_train: usize,
    pub validation: usize,
    pub test: usize,
}

impl Default for CipherSpec {
    fn default() -> Self {
        CipherSpec {
            seed: 7,
            concentration: 0.3,
            space_prob: 0.2,
            eos_prob: 0.06,
            min_len: 8,
            max_len: 40,
            target_train: 2000,
            source_train: 1000,
            validation: 100,
            test: 100,
        }
    }
}

/// Plaintext symbols: `a..=n` and space.
pub fn plain_symbols() -> Vec<char> {
    let mut v: Vec<char> = ('a'..='n').collect();
    v.push(' ');
    v
}

#[derive(Debug, Clone)]
pub struct CipherFixture {
    /// Plaintext symbol to ciphertext symbol.
    pub key: BTreeMap<char, char>,
    pub target_train: Vec<String>,
    pub source_train: Vec<String>,
    pub valid_source: Vec<String>,
    pub valid_target: Vec<String>,
    pub test_source: Vec<String>,
    pub test_target: Vec<String>,
}

impl CipherFixture {
    pub fn encipher(&self, plain: &str) -> String {
        plain.chars().map(|c| self.key[&c]).collect()
    }

    /// Key entries for the `k` most frequent target-side letters; ties
    /// break by letter.
    pub fn prior_pairs(&self, k: usize) -> Vec<(char, char)> {
        let mut counts: BTreeMap<char, usize> = BTreeMap::new();
        for c in self.target_train.iter().flat_map(|s| s.chars()).filter(|&c| c != ' ') {
            *counts.entry(c).or_default() += 1;
        }
        let mut ranked: Vec<(char, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.into_iter().take(k).map(|(c, _)| (c, self.key[&c])).collect()
    }
}

struct PlainModel {
    symbols: Vec<char>,
    /// Indexed by `(prev2, prev1)` with `symbols.len()` marking sentence
    /// start; the last weight of each row is EOS.
    rows: Vec<WeightedIndex<f64>>,
}

impl PlainModel {
    fn new(spec: &CipherSpec, rng: &mut ChaCha8Rng) -> Self {
        let symbols = plain_symbols();
        let n = symbols.len();
        let letters = n - 1;
        // Zipf-shaped base measure so unigram frequencies differ.
        let base: Vec<f64> = (0..letters).map(|i| 1.0 / (i as f64 + 1.0).sqrt()).collect();
        let zb: f64 = base.iter().sum();
        let mut rows = Vec::with_capacity((n + 1) * (n + 1));
        for _p2 in 0..=n {
            for p1 in 0..=n {
                let mut row: Vec<f64> = base
                    .iter()
                    .map(|&b| {
                        let shape = spec.concentration * letters as f64 * b / zb;
                        Gamma::new(shape, 1.0).unwrap().sample(rng).max(1e-300)
                    })
                    .collect();
                let z: f64 = row.iter().sum();
                // Spaces and EOS only follow letters.
                let after_letter = p1 < letters;
                let (space, eos) = if after_letter { (spec.space_prob, spec.eos_prob) } else { (0.0, 0.0) };
                row.iter_mut().for_each(|w| *w *= (1.0 - space - eos) / z);
                row.push(space);
                row.push(eos);
                rows.push(WeightedIndex::new(row).expect("row has positive mass"));
            }
        }
        PlainModel { symbols, rows }
    }

    fn sample(&self, spec: &CipherSpec, rng: &mut ChaCha8Rng) -> String {
        let n = self.symbols.len();
        loop {
            let (mut p2, mut p1) = (n, n);
            let mut out = String::new();
            let mut len = 0;
            while len < spec.max_len {
                let i = self.rows[p2 * (n + 1) + p1].sample(rng);
                if i == n {
                    break;
                }
                out.push(self.symbols[i]);
                len += 1;
                (p2, p1) = (p1, i);
            }
            if len >= spec.min_len && !out.ends_with(' ') {
                return out;
            }
        }
    }
}

/// Generates a fixture deterministically from `spec.seed`.
pub fn cipher_fixture(spec: &CipherSpec) -> CipherFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let model = PlainModel::new(spec, &mut rng);
    let mut greek: Vec<char> = ('α'..='ξ').collect();
    greek.shuffle(&mut rng);
    let mut key: BTreeMap<char, char> = ('a'..='n').zip(greek).collect();
    key.insert(' ', ' ');

    let mut draw = |k: usize| -> Vec<String> { (0..k).map(|_| model.sample(spec, &mut rng)).collect() };
    let target_train = draw(spec.target_train);
    let source_plain = draw(spec.source_train);
    let valid_target = draw(spec.validation);
    let test_target = draw(spec.test);
    let enc = |s: &String| -> String { s.chars().map(|c| key[&c]).collect() };
    let source_train = source_plain.iter().map(enc).collect();
    let valid_source = valid_target.iter().map(enc).collect();
    let test_source = test_target.iter().map(enc).collect();
    CipherFixture {
        key,
        target_train,
        source_train,
        valid_source,
        valid_target,
        test_source,
        test_target,
    }
}

/// Writes the fixture's corpora, key and an experiment config into `dir`.
pub fn write_fixture(fixture: &CipherFixture, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).ctx(|| format!("creating {}", dir.display()))?;
    let write = |name: &str, lines: &[String]| -> Result<()> {
        let path = dir.join(name);
        let mut text = lines.join("\n");
        text.push('\n');
        fs::write(&path, text).ctx(|| format!("writing {}", path.display()))
    };
    write("train.tgt", &fixture.target_train)?;
    write("train.src", &fixture.source_train)?;
    write("valid.src", &fixture.valid_source)?;
    write("valid.tgt", &fixture.valid_target)?;
    write("test.src", &fixture.test_source)?;
    write("test.tgt", &fixture.test_target)?;
    let mut key = String::new();
    for (p, c) in &fixture.key {
        let _ = writeln!(key, "U+{:04X}\tU+{:04X}", *p as u32, *c as u32);
    }
    fs::write(dir.join("key.tsv"), key).ctx(|| "writing key.tsv".into())?;
    let mut prior = String::from("# target\tsource\n");
    for (p, c) in fixture.prior_pairs(PRIOR_PAIRS) {
        let _ = writeln!(prior, "{p}\t{c}");
    }
    fs::write(dir.join("prior.tsv"), prior).ctx(|| "writing prior.tsv".into())?;
    fs::write(dir.join("config.toml"), FIXTURE_CONFIG).ctx(|| "writing config.toml".into())
}

/// Key pairs listed in the fixture's prior file.
pub const PRIOR_PAIRS: usize = 4;

/// Experiment config written next to the fixture corpora.
pub const FIXTURE_CONFIG: &str = r#"[paths]
priors = ["prior.tsv"]
output = "run"

[lm]
order = 3

[channel]
delay = 0

[seq2seq]
max_epochs = 8

[decode]
decoder = "wfst"
"#;
