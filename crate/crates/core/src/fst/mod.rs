//! Weighted finite-state transducers over negative natural-log weights.
//!
//! Label 0 is ε on both tapes. A machine records the size of its input and
//! output label spaces so that composition can reject mismatched cascades.

mod compose;
mod shortest;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, IoContext, Result};

pub use compose::{compose, compose_with_origin, ArcRef, Composed};
pub use shortest::{n_shortest_paths, shortest_distance, shortest_distance_to_final, shortest_path, Path as FstPath};

pub type Label = u32;
pub type StateId = u32;

pub const EPSILON: Label = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Semiring {
    /// (min, +); used for decoding.
    Tropical,
    /// (-log(e^-a + e^-b), +); used for marginalization.
    Log,
}

impl Semiring {
    pub fn plus(self, a: f64, b: f64) -> f64 {
        match self {
            Semiring::Tropical => a.min(b),
            Semiring::Log => log_plus(a, b),
        }
    }
}

/// `-ln(exp(-a) + exp(-b))`, exact for infinite operands.
pub fn log_plus(a: f64, b: f64) -> f64 {
    if a == f64::INFINITY {
        return b;
    }
    if b == f64::INFINITY {
        return a;
    }
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    lo - (-(hi - lo)).exp().ln_1p()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arc {
    pub ilabel: Label,
    pub olabel: Label,
    pub weight: f64,
    pub nextstate: StateId,
}

impl Arc {
    pub fn new(ilabel: Label, olabel: Label, weight: f64, nextstate: StateId) -> Self {
        Arc {
            ilabel,
            olabel,
            weight,
            nextstate,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Wfst {
    start: Option<StateId>,
    arcs: Vec<Vec<Arc>>,
    finals: Vec<f64>,
    input_symbols: usize,
    output_symbols: usize,
}

impl Wfst {
    /// Empty machine whose labels lie in `0..input_symbols` and
    /// `0..output_symbols`.
    pub fn new(input_symbols: usize, output_symbols: usize) -> Self {
        Wfst {
            start: None,
            arcs: Vec::new(),
            finals: Vec::new(),
            input_symbols,
            output_symbols,
        }
    }

    pub fn input_symbols(&self) -> usize {
        self.input_symbols
    }

    pub fn output_symbols(&self) -> usize {
        self.output_symbols
    }

    pub fn add_state(&mut self) -> StateId {
        self.arcs.push(Vec::new());
        self.finals.push(f64::INFINITY);
        (self.arcs.len() - 1) as StateId
    }

    pub fn add_states(&mut self, n: usize) {
        for _ in 0..n {
            self.add_state();
        }
    }

    pub fn num_states(&self) -> usize {
        self.arcs.len()
    }

    pub fn num_arcs(&self) -> usize {
        self.arcs.iter().map(Vec::len).sum()
    }

    pub fn start(&self) -> Option<StateId> {
        self.start
    }

    pub fn set_start(&mut self, s: StateId) {
        assert!((s as usize) < self.num_states(), "start state {s} out of range");
        self.start = Some(s);
    }

    /// Adds an arc; panics on out-of-range states or labels, or on a
    /// negative or NaN weight.
    pub fn add_arc(&mut self, from: StateId, arc: Arc) {
        assert!((from as usize) < self.num_states() && (arc.nextstate as usize) < self.num_states());
        assert!((arc.ilabel as usize) < self.input_symbols, "input label {} out of range", arc.ilabel);
        assert!((arc.olabel as usize) < self.output_symbols, "output label {} out of range", arc.olabel);
        assert!(arc.weight >= 0.0, "arc weight must be non-negative, got {}", arc.weight);
        self.arcs[from as usize].push(arc);
    }

    pub fn set_final(&mut self, s: StateId, weight: f64) {
        assert!(weight >= 0.0, "final weight must be non-negative, got {weight}");
        self.finals[s as usize] = weight;
    }

    pub fn arcs(&self, s: StateId) -> &[Arc] {
        &self.arcs[s as usize]
    }

    /// `+inf` for non-final states.
    pub fn final_weight(&self, s: StateId) -> f64 {
        self.finals[s as usize]
    }

    pub fn is_final(&self, s: StateId) -> bool {
        self.finals[s as usize].is_finite()
    }

    pub fn states(&self) -> impl Iterator<Item = StateId> {
        0..self.num_states() as StateId
    }

    /// Linear acceptor for `labels`.
    pub fn linear_acceptor(labels: &[Label], symbols: usize) -> Self {
        let mut m = Wfst::new(symbols, symbols);
        m.add_states(labels.len() + 1);
        m.set_start(0);
        for (i, &l) in labels.iter().enumerate() {
            m.add_arc(i as StateId, Arc::new(l, l, 0.0, i as StateId + 1));
        }
        m.set_final(labels.len() as StateId, 0.0);
        m
    }

    /// One-state machine mapping every non-ε label to itself at zero cost.
    pub fn identity(symbols: usize) -> Self {
        let mut m = Wfst::new(symbols, symbols);
        m.add_state();
        m.set_start(0);
        m.set_final(0, 0.0);
        for l in 1..symbols as Label {
            m.add_arc(0, Arc::new(l, l, 0.0, 0));
        }
        m
    }

    /// Swaps input and output labels.
    pub fn invert(&self) -> Self {
        let mut m = self.clone();
        std::mem::swap(&mut m.input_symbols, &mut m.output_symbols);
        for arcs in &mut m.arcs {
            for a in arcs {
                std::mem::swap(&mut a.ilabel, &mut a.olabel);
            }
        }
        m
    }

    /// States reachable from the start, in BFS order.
    pub fn accessible(&self) -> Vec<bool> {
        let mut seen = vec![false; self.num_states()];
        let Some(start) = self.start else {
            return seen;
        };
        let mut stack = vec![start];
        seen[start as usize] = true;
        while let Some(s) = stack.pop() {
            for a in self.arcs(s) {
                if !seen[a.nextstate as usize] {
                    seen[a.nextstate as usize] = true;
                    stack.push(a.nextstate);
                }
            }
        }
        seen
    }

    /// States from which some final state is reachable.
    pub fn coaccessible(&self) -> Vec<bool> {
        let mut rev: Vec<Vec<StateId>> = vec![Vec::new(); self.num_states()];
        for s in self.states() {
            for a in self.arcs(s) {
                rev[a.nextstate as usize].push(s);
            }
        }
        let mut seen = vec![false; self.num_states()];
        let mut stack: Vec<StateId> = self.states().filter(|&s| self.is_final(s)).collect();
        for &s in &stack {
            seen[s as usize] = true;
        }
        while let Some(s) = stack.pop() {
            for &p in &rev[s as usize] {
                if !seen[p as usize] {
                    seen[p as usize] = true;
                    stack.push(p);
                }
            }
        }
        seen
    }

    /// Removes states that are not on any successful path. `arc_data`, when
    /// given, is filtered in parallel with the arcs.
    pub fn connect_with<T: Clone>(&self, arc_data: Option<&[Vec<T>]>) -> (Wfst, Option<Vec<Vec<T>>>) {
        let acc = self.accessible();
        let coacc = self.coaccessible();
        let mut map = vec![None; self.num_states()];
        let mut out = Wfst::new(self.input_symbols, self.output_symbols);
        for s in self.states() {
            if acc[s as usize] && coacc[s as usize] {
                map[s as usize] = Some(out.add_state());
            }
        }
        let mut data_out = arc_data.map(|_| vec![Vec::new(); out.num_states()]);
        for s in self.states() {
            let Some(ns) = map[s as usize] else { continue };
            out.finals[ns as usize] = self.finals[s as usize];
            for (i, a) in self.arcs(s).iter().enumerate() {
                if let Some(nt) = map[a.nextstate as usize] {
                    out.arcs[ns as usize].push(Arc { nextstate: nt, ..*a });
                    if let (Some(d), Some(src)) = (data_out.as_mut(), arc_data) {
                        d[ns as usize].push(src[s as usize][i].clone());
                    }
                }
            }
        }
        if let Some(start) = self.start {
            if let Some(ns) = map[start as usize] {
                out.start = Some(ns);
            }
        }
        (out, data_out)
    }

    pub fn connect(&self) -> Wfst {
        self.connect_with::<()>(None).0
    }

    /// Topological order of the states reachable from the start, or `None`
    /// if a reachable cycle exists.
    pub fn topological_order(&self) -> Option<Vec<StateId>> {
        let acc = self.accessible();
        let mut indeg = vec![0usize; self.num_states()];
        for s in self.states().filter(|&s| acc[s as usize]) {
            for a in self.arcs(s) {
                indeg[a.nextstate as usize] += 1;
            }
        }
        let mut order = Vec::new();
        let mut stack: Vec<StateId> = self.start.into_iter().filter(|&s| indeg[s as usize] == 0).collect();
        while let Some(s) = stack.pop() {
            order.push(s);
            for a in self.arcs(s).iter().rev() {
                let t = a.nextstate as usize;
                indeg[t] -= 1;
                if indeg[t] == 0 {
                    stack.push(a.nextstate);
                }
            }
        }
        let reachable = acc.iter().filter(|&&b| b).count();
        (order.len() == reachable).then_some(order)
    }

    pub fn is_acyclic(&self) -> bool {
        self.topological_order().is_some()
    }

    /// Text form: `states start`, then `src dst in out weight` per arc, then
    /// `state weight` per final state.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let start = self.start.map_or(-1, |s| s as i64);
        let _ = writeln!(out, "{} {}", self.num_states(), start);
        for s in self.states() {
            for a in self.arcs(s) {
                let _ = writeln!(out, "{} {} {} {} {}", s, a.nextstate, a.ilabel, a.olabel, a.weight);
            }
        }
        for s in self.states() {
            if self.is_final(s) {
                let _ = writeln!(out, "{} {}", s, self.final_weight(s));
            }
        }
        out
    }

    pub fn from_text(text: &str, input_symbols: usize, output_symbols: usize, origin: &str) -> Result<Self> {
        let err = |line: usize, msg: String| Error::parse(origin, line, msg);
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (hn, header) = lines.next().ok_or_else(|| err(1, "missing header".into()))?;
        let hf: Vec<&str> = header.split_whitespace().collect();
        if hf.len() != 2 {
            return Err(err(hn + 1, format!("expected `states start`, got {header:?}")));
        }
        let n: usize = hf[0].parse().map_err(|_| err(hn + 1, format!("bad state count {:?}", hf[0])))?;
        let start: i64 = hf[1].parse().map_err(|_| err(hn + 1, format!("bad start state {:?}", hf[1])))?;
        let mut m = Wfst::new(input_symbols, output_symbols);
        m.add_states(n);
        if start >= 0 {
            if start as usize >= n {
                return Err(err(hn + 1, format!("start state {start} out of range")));
            }
            m.set_start(start as StateId);
        }
        for (ln, line) in lines {
            let f: Vec<&str> = line.split_whitespace().collect();
            let state = |s: &str| -> Result<StateId> {
                let v: usize = s.parse().map_err(|_| err(ln + 1, format!("bad state {s:?}")))?;
                if v >= n {
                    return Err(err(ln + 1, format!("state {v} out of range")));
                }
                Ok(v as StateId)
            };
            let weight = |s: &str| -> Result<f64> {
                let w: f64 = s.parse().map_err(|_| err(ln + 1, format!("bad weight {s:?}")))?;
                if w.is_nan() || w < 0.0 {
                    return Err(err(ln + 1, format!("weight must be non-negative, got {s}")));
                }
                Ok(w)
            };
            match f.len() {
                5 => {
                    let label = |s: &str, lim: usize| -> Result<Label> {
                        let v: usize = s.parse().map_err(|_| err(ln + 1, format!("bad label {s:?}")))?;
                        if v >= lim {
                            return Err(err(ln + 1, format!("label {v} out of range")));
                        }
                        Ok(v as Label)
                    };
                    let arc = Arc::new(
                        label(f[2], input_symbols)?,
                        label(f[3], output_symbols)?,
                        weight(f[4])?,
                        state(f[1])?,
                    );
                    m.add_arc(state(f[0])?, arc);
                }
                2 => {
                    let s = state(f[0])?;
                    m.set_final(s, weight(f[1])?);
                }
                k => return Err(err(ln + 1, format!("expected 2 or 5 fields, got {k}"))),
            }
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).ctx(|| format!("writing {}", path.display()))
    }

    pub fn read(path: &Path, input_symbols: usize, output_symbols: usize) -> Result<Self> {
        let text = fs::read_to_string(path).ctx(|| format!("reading {}", path.display()))?;
        Self::from_text(&text, input_symbols, output_symbols, &path.display().to_string())
    }
}
