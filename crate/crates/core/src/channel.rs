//! Emission transducer from target-script characters to source-script
//! characters, with substitutions, insertions and deletions.
//!
//! Parameters live in a table indexed by `(target label, source label)`
//! where label 0 is ε on either side:
//!
//! * `(c, o)` substitutes `c` by `o`,
//! * `(c, ε)` deletes `c`,
//! * `(ε, o)` inserts `o`,
//! * `(ε, ε)` stops inserting.
//!
//! Every row is a distribution. Before each target character, and once at
//! the end, the channel emits a geometric run of insertions drawn from the
//! ε row, so each substitution or deletion also pays for one stop event.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;
use ndarray::Array2;

use crate::corpus::{parse_codepoint, Alphabet, EPS, UNK};
use crate::error::{Error, IoContext, Result};
use crate::fst::{Arc, Label, StateId, Wfst};

/// Probabilities below this are raised to it before renormalization.
pub const PROB_FLOOR: f64 = 1e-12;

/// One emission event, as `(target label, source label)`.
pub type Cell = (Label, Label);

/// The stop event of the insertion row.
pub const STOP: Cell = (EPS, EPS);

#[derive(Debug, Clone, PartialEq)]
pub struct EmissionParams {
    probs: Array2<f64>,
}

impl EmissionParams {
    /// Wraps a `target × source` table, renormalizing each row. Rejects
    /// non-positive or non-finite entries.
    pub fn from_table(mut probs: Array2<f64>) -> Result<Self> {
        if probs.iter().any(|&p| !(p.is_finite() && p > 0.0)) {
            return Err(Error::InvalidArgument("emission probabilities must be positive and finite".into()));
        }
        for mut row in probs.rows_mut() {
            let z = row.sum();
            row /= z;
        }
        Ok(EmissionParams { probs })
    }

    /// Uniform rows.
    pub fn uniform(target_symbols: usize, source_symbols: usize) -> Self {
        EmissionParams {
            probs: Array2::from_elem((target_symbols, source_symbols), 1.0 / source_symbols as f64),
        }
    }

    pub fn target_symbols(&self) -> usize {
        self.probs.nrows()
    }

    pub fn source_symbols(&self) -> usize {
        self.probs.ncols()
    }

    pub fn prob(&self, cell: Cell) -> f64 {
        self.probs[[cell.0 as usize, cell.1 as usize]]
    }

    pub fn table(&self) -> &Array2<f64> {
        &self.probs
    }

    /// Negative log-probability of an edit, including the stop event that
    /// precedes every substitution and deletion.
    pub fn op_weight(&self, cell: Cell) -> f64 {
        let w = -self.prob(cell).ln();
        if cell.0 == EPS {
            w
        } else {
            w - self.prob(STOP).ln()
        }
    }

    /// Negative log-probability of ending the emission.
    pub fn final_weight(&self) -> f64 {
        -self.prob(STOP).ln()
    }

    /// Most likely source label for each target row `1..`, ignoring
    /// deletion.
    pub fn row_argmax(&self) -> Vec<Label> {
        self.probs
            .rows()
            .into_iter()
            .skip(1)
            .map(|row| {
                let mut best = UNK;
                for o in 1..row.len() {
                    if row[o] > row[best as usize] {
                        best = o as Label;
                    }
                }
                best
            })
            .collect()
    }

    /// Checkpoint lines `target<TAB>op<TAB>arg<TAB>prob`, with `op` one of
    /// `sub`, `del`, `ins`, `stop` and `-` for an absent symbol.
    pub fn to_tsv(&self, target: &Alphabet, source: &Alphabet) -> String {
        let mut out = String::new();
        for ((r, c), &p) in self.probs.indexed_iter() {
            let (op, t, a) = match (r as Label, c as Label) {
                (EPS, EPS) => ("stop", "-".to_string(), "-".to_string()),
                (EPS, o) => ("ins", "-".to_string(), symbol_field(source, o)),
                (t, EPS) => ("del", symbol_field(target, t), "-".to_string()),
                (t, o) => ("sub", symbol_field(target, t), symbol_field(source, o)),
            };
            let _ = writeln!(out, "{t}\t{op}\t{a}\t{p:e}");
        }
        out
    }

    pub fn from_tsv(text: &str, target: &Alphabet, source: &Alphabet, origin: &str) -> Result<Self> {
        let mut probs = Array2::from_elem((target.len(), source.len()), f64::NAN);
        for (n, line) in text.lines().enumerate() {
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let bad = |msg: String| Error::parse(origin, n + 1, msg);
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(bad(format!("expected 4 fields, got {}", f.len())));
            }
            let t = parse_symbol_field(target, f[0]).ok_or_else(|| bad(format!("unknown target symbol {:?}", f[0])))?;
            let a = parse_symbol_field(source, f[2]).ok_or_else(|| bad(format!("unknown source symbol {:?}", f[2])))?;
            let consistent = match f[1] {
                "stop" => t == EPS && a == EPS,
                "ins" => t == EPS && a != EPS,
                "del" => t != EPS && a == EPS,
                "sub" => t != EPS && a != EPS,
                other => return Err(bad(format!("unknown op {other:?}"))),
            };
            if !consistent {
                return Err(bad(format!("op {} does not match its symbols", f[1])));
            }
            let p: f64 = f[3].parse().map_err(|_| bad(format!("bad probability {:?}", f[3])))?;
            probs[[t as usize, a as usize]] = p;
        }
        if probs.iter().any(|p| p.is_nan()) {
            return Err(Error::parse(origin, 0, "incomplete emission table"));
        }
        Self::from_table(probs)
    }
}

fn symbol_field(alphabet: &Alphabet, id: Label) -> String {
    match alphabet.token(id) {
        Some(crate::corpus::Token::Char(c)) => format!("U+{:04X}", c as u32),
        Some(crate::corpus::Token::Unk) => "<unk>".into(),
        None => "-".into(),
    }
}

fn parse_symbol_field(alphabet: &Alphabet, s: &str) -> Option<Label> {
    match s {
        "-" => Some(EPS),
        "<unk>" => Some(UNK),
        _ => alphabet.id(parse_codepoint(s)?),
    }
}

/// Dirichlet pseudocounts over the emission table.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSpec {
    /// Pseudocount for every cell not otherwise listed.
    pub base: f64,
    /// Pseudocount of the stop event.
    pub stop: f64,
    pub pairs: BTreeMap<Cell, f64>,
}

impl PriorSpec {
    pub fn uniform(base: f64) -> Self {
        PriorSpec {
            base,
            stop: base,
            pairs: BTreeMap::new(),
        }
    }

    pub fn pseudocounts(&self, target_symbols: usize, source_symbols: usize) -> Array2<f64> {
        let mut a = Array2::from_elem((target_symbols, source_symbols), self.base);
        a[[0, 0]] = self.stop;
        for (&(t, s), &v) in &self.pairs {
            a[[t as usize, s as usize]] = v;
        }
        a
    }

    /// Prior mean of each row.
    pub fn mean(&self, target_symbols: usize, source_symbols: usize) -> EmissionParams {
        EmissionParams::from_table(self.pseudocounts(target_symbols, source_symbols))
            .expect("pseudocounts are positive")
    }
}

/// A similarity pair read from a priors file. A missing pseudocount means
/// the boost value.
pub type PriorPair = (char, char, Option<f64>);

/// Reads `target<TAB>source[<TAB>pseudocount]` lines; `#` starts a comment.
/// Characters may be literal or `U+XXXX`.
pub fn read_prior_pairs(path: &Path) -> Result<Vec<PriorPair>> {
    let text = fs::read_to_string(path).ctx(|| format!("reading {}", path.display()))?;
    parse_prior_pairs(&text, &path.display().to_string())
}

pub fn parse_prior_pairs(text: &str, origin: &str) -> Result<Vec<PriorPair>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::parse(origin, n + 1, msg);
        let f: Vec<&str> = line.split('\t').collect();
        if !(2..=3).contains(&f.len()) {
            return Err(bad(format!("expected 2 or 3 tab-separated fields, got {}", f.len())));
        }
        let ch = |s: &str| {
            parse_codepoint(s).or_else(|| {
                let mut it = s.chars();
                match (it.next(), it.next()) {
                    (Some(c), None) => Some(c),
                    _ => None,
                }
            })
        };
        let t = ch(f[0]).ok_or_else(|| bad(format!("expected one character, got {:?}", f[0])))?;
        let s = ch(f[1]).ok_or_else(|| bad(format!("expected one character, got {:?}", f[1])))?;
        let v = match f.get(2) {
            Some(v) => {
                let v: f64 = v.trim().parse().map_err(|_| bad(format!("bad pseudocount {v:?}")))?;
                if !(v > 0.0 && v.is_finite()) {
                    return Err(bad(format!("pseudocount must be positive, got {v}")));
                }
                Some(v)
            }
            None => None,
        };
        out.push((t, s, v));
    }
    Ok(out)
}

/// Builds the prior from similarity pair lists. Characters present in
/// both alphabets are paired automatically. Listed and shared pairs get
/// `boost` unless the pair carries its own pseudocount; pairs naming a
/// character outside the alphabets are skipped with a warning.
pub fn build_prior(
    target: &Alphabet,
    source: &Alphabet,
    pair_lists: &[Vec<PriorPair>],
    base: f64,
    boost: f64,
) -> Result<PriorSpec> {
    if !(base > 0.0 && boost > 0.0) {
        return Err(Error::InvalidArgument("pseudocounts must be positive".into()));
    }
    let mut prior = PriorSpec {
        base,
        stop: boost,
        pairs: BTreeMap::new(),
    };
    for &c in target.chars() {
        if let (Some(t), Some(s)) = (target.id(c), source.id(c)) {
            prior.pairs.insert((t, s), boost);
        }
    }
    for &(tc, sc, v) in pair_lists.iter().flatten() {
        match (target.id(tc), source.id(sc)) {
            (Some(t), Some(s)) => {
                prior.pairs.insert((t, s), v.unwrap_or(boost));
            }
            _ => warn!("prior pair ({tc:?}, {sc:?}) is outside the alphabets; skipped"),
        }
    }
    Ok(prior)
}

/// Maximum absolute difference between insertions and deletions on any
/// path prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DelayBound(pub usize);

/// Emission transducer plus the table cell behind each arc.
#[derive(Debug, Clone)]
pub struct Channel {
    pub fst: Wfst,
    pub cells: Vec<Vec<Cell>>,
    pub delay: DelayBound,
}

impl Channel {
    /// State holding delay `delay`, which must lie within the bound.
    pub fn state_of(&self, delay: isize) -> StateId {
        (delay + self.delay.0 as isize) as StateId
    }
}

/// `2d + 1` states, one per delay in `[-d, d]`; the start is delay 0 and
/// every state is final. Inputs are target labels, outputs source labels.
pub fn build_channel(params: &EmissionParams, delay: DelayBound) -> Channel {
    let d = delay.0 as isize;
    let (nt, ns) = (params.target_symbols(), params.source_symbols());
    let mut fst = Wfst::new(nt, ns);
    fst.add_states(2 * delay.0 + 1);
    let mut cells = vec![Vec::new(); fst.num_states()];
    fst.set_start(delay.0 as StateId);
    let state = |k: isize| (k + d) as StateId;
    for k in -d..=d {
        let s = state(k);
        fst.set_final(s, params.final_weight());
        let mut push = |fst: &mut Wfst, cell: Cell, to: isize| {
            fst.add_arc(s, Arc::new(cell.0, cell.1, params.op_weight(cell), state(to)));
            cells[s as usize].push(cell);
        };
        for t in 1..nt as Label {
            for o in 1..ns as Label {
                push(&mut fst, (t, o), k);
            }
            if k > -d {
                push(&mut fst, (t, EPS), k - 1);
            }
        }
        if k < d {
            for o in 1..ns as Label {
                push(&mut fst, (EPS, o), k + 1);
            }
        }
    }
    Channel { fst, cells, delay }
}

/// Expected or observed edit counts, shaped like the emission table.
pub type Counts = Array2<f64>;

/// MAP estimate under the Dirichlet prior: `(count + α - 1)` floored at
/// [`PROB_FLOOR`] and renormalized. Rows without any counts take the
/// prior mean.
pub fn map_update(counts: &Counts, prior: &PriorSpec) -> Result<EmissionParams> {
    if counts.iter().any(|&c| !(c >= 0.0 && c.is_finite())) {
        return Err(Error::InvalidArgument("counts must be finite and non-negative".into()));
    }
    let (nt, ns) = counts.dim();
    let alpha = prior.pseudocounts(nt, ns);
    let mut probs = Array2::zeros((nt, ns));
    for r in 0..nt {
        let crow = counts.row(r);
        let arow = alpha.row(r);
        let mut prow = probs.row_mut(r);
        if crow.sum() == 0.0 {
            prow.assign(&arow);
        } else {
            for j in 0..ns {
                prow[j] = (crow[j] + arow[j] - 1.0).max(PROB_FLOOR);
            }
        }
    }
    EmissionParams::from_table(probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fst::{compose, Semiring};

    fn toy_params() -> EmissionParams {
        // 2 target symbols + ε, 3 source symbols + ε.
        let t = ndarray::arr2(&[
            [0.7, 0.1, 0.1, 0.1],
            [0.05, 0.6, 0.3, 0.05],
            [0.1, 0.1, 0.7, 0.1],
        ]);
        EmissionParams::from_table(t).unwrap()
    }

    #[test]
    fn zero_delay_has_one_state_and_no_epsilons() {
        let ch = build_channel(&toy_params(), DelayBound(0));
        assert_eq!(ch.fst.num_states(), 1);
        assert!(ch.fst.arcs(0).iter().all(|a| a.ilabel != 0 && a.olabel != 0));
        assert_eq!(ch.fst.num_arcs(), 2 * 3);
    }

    #[test]
    fn delay_two_has_five_states() {
        let ch = build_channel(&toy_params(), DelayBound(2));
        assert_eq!(ch.fst.num_states(), 5);
        // Edge states lack one direction.
        assert!(ch.fst.arcs(0).iter().all(|a| a.olabel != 0));
        assert!(ch.fst.arcs(4).iter().all(|a| a.ilabel != 0));
    }

    #[test]
    fn single_insertion_alignment_weight() {
        // y = [1, 2], x = [1, 3, 2]; the best alignment is 1→1, insert 3,
        // 2→2, and it pays three stop events.
        let p = toy_params();
        let ch = build_channel(&p, DelayBound(0));
        let y = Wfst::linear_acceptor(&[1, 2], 3);
        let x = Wfst::linear_acceptor(&[1, 3, 2], 4);
        let lat = compose(&compose(&y, &ch.fst).unwrap(), &x).unwrap().connect();
        assert_eq!(lat.num_states(), 0, "d = 0 cannot change the length");

        let ch = build_channel(&p, DelayBound(1));
        let lat = compose(&compose(&y, &ch.fst).unwrap(), &x).unwrap().connect();
        let best = crate::fst::shortest_path(&lat).unwrap().unwrap();
        let direct = -(p.prob((1, 1)) * p.prob(STOP) * p.prob((EPS, 3)) * p.prob(STOP) * p.prob((2, 2)) * p.prob(STOP)).ln();
        assert!((best.weight - direct).abs() < 1e-12);
        let total = crate::fst::shortest_distance_to_final(&lat, Semiring::Log).unwrap()[lat.start().unwrap() as usize];
        assert!(total < best.weight);
    }

    #[test]
    fn prior_from_pairs_and_shared_symbols() {
        let tgt = Alphabet::new(['т', 'о', '.']);
        let src = Alphabet::new(['t', 'o', '.']);
        let pairs = vec![vec![('т', 't', None), ('ж', 'z', None)]];
        let prior = build_prior(&tgt, &src, &pairs, 0.1, 5.0).unwrap();
        let a = prior.pseudocounts(tgt.len(), src.len());
        let row_t = a.row(tgt.id('т').unwrap() as usize);
        assert_eq!(row_t.iter().filter(|&&v| v == 5.0).count(), 1);
        assert_eq!(row_t[src.id('t').unwrap() as usize], 5.0);
        assert_eq!(a[[tgt.id('.').unwrap() as usize, src.id('.').unwrap() as usize]], 5.0);
        assert_eq!(a[[tgt.id('о').unwrap() as usize, src.id('o').unwrap() as usize]], 0.1);
    }

    #[test]
    fn empty_prior_is_uniform() {
        let tgt = Alphabet::new(['a', 'b']);
        let src = Alphabet::new(['x', 'y']);
        let prior = build_prior(&tgt, &src, &[], 0.5, 0.5).unwrap();
        let m = prior.mean(tgt.len(), src.len());
        assert!(m.table().iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn map_examples() {
        let prior = PriorSpec::uniform(1.0);
        let zero = Counts::zeros((2, 3));
        let m = map_update(&zero, &prior).unwrap();
        assert!(m.table().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));

        let mut c = Counts::zeros((2, 3));
        c[[1, 1]] = 9.0;
        c[[1, 2]] = 1.0;
        let m = map_update(&c, &prior).unwrap();
        assert!((m.prob((1, 1)) - 0.9).abs() < 1e-9);
        assert!((m.prob((1, 2)) - 0.1).abs() < 1e-9);

        let prior = PriorSpec::uniform(2.0);
        let mut c = Counts::zeros((1, 2));
        c[[0, 0]] = 3.0;
        c[[0, 1]] = 1.0;
        let m = map_update(&c, &prior).unwrap();
        assert!((m.prob((0, 0)) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn tsv_round_trip() {
        let tgt = Alphabet::new(['a', '\t']);
        let src = Alphabet::new(['x']);
        let prior = build_prior(&tgt, &src, &[], 0.3, 1.0).unwrap();
        let mut p = prior.mean(tgt.len(), src.len());
        p.probs[[2, 2]] = 0.25;
        let p = EmissionParams::from_table(p.probs).unwrap();
        let text = p.to_tsv(&tgt, &src);
        let back = EmissionParams::from_tsv(&text, &tgt, &src, "mem").unwrap();
        for (a, b) in p.table().iter().zip(back.table()) {
            assert!((a - b).abs() <= 1e-15 * a);
        }
    }

    #[test]
    fn prior_file_parsing() {
        let pairs = parse_prior_pairs("# comment\nт\tt\nU+0436\tz\t2.5\n", "mem").unwrap();
        assert_eq!(pairs, vec![('т', 't', None), ('ж', 'z', Some(2.5))]);
        assert!(parse_prior_pairs("ab\tc\n", "mem").is_err());
        assert!(parse_prior_pairs("a\tc\t-1\n", "mem").is_err());
    }
}
