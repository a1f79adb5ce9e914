//! Decoding-time combinations of the WFST and the neural model: n-best
//! reranking in either direction and product-of-experts beam search.
//!
//! Lattices here have the target on their input side and the observed
//! source on their output side, so an arc `(c, o)` emits target symbol `c`
//! and consumes source symbol `o`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::rc::Rc;

use crate::em::decode_lattice;
use crate::error::{Error, Result};
use crate::fst::{compose, n_shortest_paths, shortest_distance, Label, Semiring, StateId, Wfst, EPSILON};
use crate::neural::{DecoderState, Direction, Memory, Seq2SeqModel};

/// Incremental next-symbol model over the target alphabet. Label 0 is
/// EOS.
pub trait NextCharScorer {
    type State: Clone;
    fn start(&self, x: &[Label]) -> Self::State;
    fn neg_log_prob(&self, state: &Self::State, o: Label) -> f64;
    fn advance(&self, state: &Self::State, o: Label) -> Self::State;
}

/// Uniform distribution over `symbols` outcomes (the target labels other
/// than ε, plus EOS).
#[derive(Debug, Clone, Copy)]
pub struct UniformScorer {
    pub symbols: usize,
}

impl NextCharScorer for UniformScorer {
    type State = ();

    fn start(&self, _x: &[Label]) {}

    fn neg_log_prob(&self, _state: &(), _o: Label) -> f64 {
        (self.symbols as f64).ln()
    }

    fn advance(&self, _state: &(), _o: Label) {}
}

/// Source-to-target scoring with a trained model.
pub struct Seq2SeqScorer<'a> {
    pub model: &'a Seq2SeqModel,
    pub dir: Direction,
}

impl NextCharScorer for Seq2SeqScorer<'_> {
    type State = (Rc<Memory>, Rc<DecoderState>);

    fn start(&self, x: &[Label]) -> Self::State {
        let mem = self.model.encode(x, self.dir.from);
        let st = self.model.start(&mem, self.dir.to);
        (Rc::new(mem), Rc::new(st))
    }

    fn neg_log_prob(&self, state: &Self::State, o: Label) -> f64 {
        state.1.neg_log_probs().get(o as usize).copied().unwrap_or(f64::INFINITY)
    }

    fn advance(&self, state: &Self::State, o: Label) -> Self::State {
        let st = self.model.advance(&state.0, &state.1, o, self.dir.to);
        (state.0.clone(), Rc::new(st))
    }
}

/// One arc taken by a hypothesis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub ilabel: Label,
    pub olabel: Label,
    pub weight: f64,
    /// Neural term paid on this arc; zero when `ilabel` is ε.
    pub neural: f64,
}

#[derive(Debug)]
struct Trace {
    step: Step,
    prev: Option<Rc<Trace>>,
}

/// Partial search path: lattice state `s`, `k` consumed inputs, emitted
/// prefix `y`.
#[derive(Debug, Clone)]
pub struct Hypothesis {
    pub s: StateId,
    pub k: usize,
    pub y: Vec<Label>,
    pub score: f64,
    back: Option<Rc<Trace>>,
}

impl Hypothesis {
    /// Arcs taken, in order.
    pub fn steps(&self) -> Vec<Step> {
        let mut out = Vec::new();
        let mut t = self.back.clone();
        while let Some(n) = t {
            out.push(n.step);
            t = n.prev.clone();
        }
        out.reverse();
        out
    }
}

#[derive(Debug, Clone)]
pub struct PoeResult {
    pub y: Vec<Label>,
    pub score: f64,
    pub steps: Vec<Step>,
    /// Lattice final weight plus the neural EOS term.
    pub final_cost: f64,
}

/// The product `lm ∘ channel`, shared across sentences.
pub fn poe_machine(lm: &Wfst, channel: &Wfst) -> Result<Wfst> {
    compose(lm, channel)
}

fn hyp_order(a: &Hypothesis, b: &Hypothesis) -> std::cmp::Ordering {
    a.score.total_cmp(&b.score).then_with(|| a.y.cmp(&b.y))
}

/// Product-of-experts beam search of `machine = lm ∘ channel` against the
/// observed `x`. Emitting target symbol `c` adds `-log p(c | x, y)` from
/// the scorer; arcs with ε target add their weight only. Hypotheses are
/// grouped by consumed input and the `beam` best per group survive, after
/// closing each group under arcs that consume nothing. `beam = None`
/// searches exhaustively.
pub fn poe_decode<S: NextCharScorer>(x: &[Label], machine: &Wfst, scorer: &S, beam: Option<usize>) -> Result<PoeResult> {
    if beam == Some(0) {
        return Err(Error::InvalidArgument("beam must be at least 1".into()));
    }
    let Some(start) = machine.start() else {
        return Err(Error::NoHypothesis(format!("{x:?}")));
    };
    let mut states: HashMap<Vec<Label>, S::State> = HashMap::new();
    states.insert(Vec::new(), scorer.start(x));
    let mut group = vec![Hypothesis {
        s: start,
        k: 0,
        y: Vec::new(),
        score: 0.0,
        back: None,
    }];
    let mut best: Option<PoeResult> = None;
    for k in 0..=x.len() {
        group = close_group(group, machine, scorer, &mut states, beam);
        if k == x.len() {
            for h in &group {
                let fw = machine.final_weight(h.s);
                if !fw.is_finite() {
                    continue;
                }
                let cost = fw + scorer.neg_log_prob(&states[&h.y], EPSILON);
                let total = h.score + cost;
                let better = match &best {
                    None => true,
                    Some(b) => total.total_cmp(&b.score).then_with(|| h.y.cmp(&b.y)).is_lt(),
                };
                if total.is_finite() && better {
                    best = Some(PoeResult {
                        y: h.y.clone(),
                        score: total,
                        steps: h.steps(),
                        final_cost: cost,
                    });
                }
            }
            break;
        }
        let mut next: HashMap<(StateId, Vec<Label>), Hypothesis> = HashMap::new();
        for h in &group {
            for a in machine.arcs(h.s) {
                if a.olabel != x[k] {
                    continue;
                }
                if let Some(h2) = extend(h, a.ilabel, a.olabel, a.weight, a.nextstate, h.k + 1, scorer, &mut states) {
                    keep_best(&mut next, h2);
                }
            }
        }
        group = prune(next.into_values().collect(), beam);
    }
    best.ok_or_else(|| Error::NoHypothesis(format!("{x:?}")))
}

#[allow(clippy::too_many_arguments)]
fn extend<S: NextCharScorer>(
    h: &Hypothesis,
    ilabel: Label,
    olabel: Label,
    weight: f64,
    next: StateId,
    k: usize,
    scorer: &S,
    states: &mut HashMap<Vec<Label>, S::State>,
) -> Option<Hypothesis> {
    let mut y = h.y.clone();
    let neural = if ilabel == EPSILON {
        0.0
    } else {
        let cost = scorer.neg_log_prob(&states[&h.y], ilabel);
        y.push(ilabel);
        if !states.contains_key(&y) {
            let st = scorer.advance(&states[&h.y], ilabel);
            states.insert(y.clone(), st);
        }
        cost
    };
    let score = h.score + weight + neural;
    if !score.is_finite() {
        return None;
    }
    Some(Hypothesis {
        s: next,
        k,
        y,
        score,
        back: Some(Rc::new(Trace {
            step: Step {
                ilabel,
                olabel,
                weight,
                neural,
            },
            prev: h.back.clone(),
        })),
    })
}

/// Hypotheses with the same state and prefix have the same future, so only
/// the lighter one is kept.
fn keep_best(map: &mut HashMap<(StateId, Vec<Label>), Hypothesis>, h: Hypothesis) {
    let key = (h.s, h.y.clone());
    match map.get(&key) {
        Some(old) if hyp_order(old, &h).is_le() => {}
        _ => {
            map.insert(key, h);
        }
    }
}

fn prune(mut hyps: Vec<Hypothesis>, beam: Option<usize>) -> Vec<Hypothesis> {
    hyps.sort_by(hyp_order);
    if let Some(n) = beam {
        hyps.truncate(n);
    }
    hyps
}

/// Expands a group along arcs that consume no input until nothing new
/// survives pruning.
fn close_group<S: NextCharScorer>(
    group: Vec<Hypothesis>,
    machine: &Wfst,
    scorer: &S,
    states: &mut HashMap<Vec<Label>, S::State>,
    beam: Option<usize>,
) -> Vec<Hypothesis> {
    let mut all: HashMap<(StateId, Vec<Label>), Hypothesis> = HashMap::new();
    for h in group {
        keep_best(&mut all, h);
    }
    let mut agenda: Vec<Hypothesis> = all.values().cloned().collect();
    agenda.sort_by(hyp_order);
    while !agenda.is_empty() {
        let mut fresh = Vec::new();
        for h in &agenda {
            for a in machine.arcs(h.s) {
                if a.olabel != EPSILON {
                    continue;
                }
                if let Some(h2) = extend(h, a.ilabel, a.olabel, a.weight, a.nextstate, h.k, scorer, states) {
                    let key = (h2.s, h2.y.clone());
                    if all.get(&key).is_none_or(|old| hyp_order(&h2, old).is_lt()) {
                        all.insert(key, h2.clone());
                        fresh.push(h2);
                    }
                }
            }
        }
        let kept = prune(all.into_values().collect(), beam);
        all = HashMap::new();
        for h in &kept {
            all.insert((h.s, h.y.clone()), h.clone());
        }
        agenda = fresh
            .into_iter()
            .filter(|h| all.get(&(h.s, h.y.clone())).is_some_and(|k| hyp_order(k, h).is_eq()))
            .collect();
    }
    prune(all.into_values().collect(), beam)
}

/// A scored output from one model, optionally rescored by the other.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub y: Vec<Label>,
    pub generator_score: f64,
    /// `+∞` until rescored, or when the rescorer cannot produce `y`.
    pub rescorer_score: f64,
}

impl Candidate {
    pub fn new(y: Vec<Label>, generator_score: f64) -> Self {
        Candidate {
            y,
            generator_score,
            rescorer_score: f64::INFINITY,
        }
    }
}

/// Rescores and sorts ascending by rescorer score. The sort is stable, so
/// unreachable (`+∞`) candidates stay in generator order at the tail.
pub fn rerank(mut candidates: Vec<Candidate>, mut rescorer: impl FnMut(&[Label]) -> Result<f64>) -> Result<Vec<Candidate>> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no candidates to rerank".into()));
    }
    for c in &mut candidates {
        c.rescorer_score = rescorer(&c.y)?;
    }
    candidates.sort_by(|a, b| a.rescorer_score.total_cmp(&b.rescorer_score));
    Ok(candidates)
}

/// `-log Σ P(y) P(x | y)` over all alignments, or `+∞` when no path
/// respects the delay bound.
pub fn wfst_score(y: &[Label], x: &[Label], lm: &Wfst, channel: &Wfst) -> Result<f64> {
    let ay = Wfst::linear_acceptor(y, lm.input_symbols());
    let lattice = compose(&compose(&ay, lm)?, &channel_on_input(x, channel)?)?;
    let d = shortest_distance(&lattice, Semiring::Log)?;
    Ok(lattice
        .states()
        .map(|s| d[s as usize] + lattice.final_weight(s))
        .fold(f64::INFINITY, |a, b| Semiring::Log.plus(a, b)))
}

fn channel_on_input(x: &[Label], channel: &Wfst) -> Result<Wfst> {
    compose(channel, &Wfst::linear_acceptor(x, channel.output_symbols()))
}

/// `-log p(y, EOS | x)`, optionally divided by `|y| + 1`.
pub fn seq2seq_score(model: &Seq2SeqModel, x: &[Label], y: &[Label], dir: Direction, normalize: bool) -> f64 {
    let s = model.sequence_logprob(x, y, dir);
    if normalize {
        s / (y.len() + 1) as f64
    } else {
        s
    }
}

/// The `n` best lattice paths as candidates; distinct alignments of the
/// same output stay separate.
pub fn generate_candidates_wfst(x: &[Label], lm: &Wfst, channel: &Wfst, n: usize) -> Result<Vec<Candidate>> {
    let lattice = decode_lattice(x, lm, channel)?;
    let paths = n_shortest_paths(&lattice, n)?;
    if paths.is_empty() {
        return Err(Error::EmptyLattice(format!("{x:?}")));
    }
    Ok(paths.into_iter().map(|p| Candidate::new(p.input, p.weight)).collect())
}

/// The `n` best beam outputs of the neural model.
pub fn generate_candidates_seq2seq(model: &Seq2SeqModel, x: &[Label], dir: Direction, n: usize) -> Vec<Candidate> {
    model
        .beam_decode(x, dir, n)
        .into_iter()
        .map(|(y, s)| Candidate::new(y, s))
        .collect()
}

/// `rank<TAB>score<TAB>output` lines, ranks from 1, using each candidate's
/// final ranking score.
pub fn nbest_tsv(candidates: &[Candidate], render: impl Fn(&[Label]) -> String, rescored: bool) -> String {
    let mut out = String::new();
    for (i, c) in candidates.iter().enumerate() {
        let score = if rescored { c.rescorer_score } else { c.generator_score };
        let _ = writeln!(out, "{}\t{}\t{}", i + 1, score, render(&c.y));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{build_channel, DelayBound, EmissionParams};
    use crate::charlm::{train_lm, Smoothing};
    use crate::corpus::Alphabet;
    use crate::em::decode_best;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// `p(o | previous output)` from a fixed random table.
    struct Bigram(Array2<f64>);

    impl NextCharScorer for Bigram {
        type State = Label;
        fn start(&self, _x: &[Label]) -> Label {
            0
        }
        fn neg_log_prob(&self, s: &Label, o: Label) -> f64 {
            -self.0[[*s as usize, o as usize]].ln()
        }
        fn advance(&self, _s: &Label, o: Label) -> Label {
            o
        }
    }

    fn setup(seed: u64, delay: usize) -> (Wfst, Wfst, Bigram, usize, usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tgt = Alphabet::new(['a', 'b']);
        let src = Alphabet::new(['x', 'y']);
        let corpus: Vec<Vec<Label>> = (0..6).map(|_| (0..rng.gen_range(1..5)).map(|_| rng.gen_range(2..4)).collect()).collect();
        let lm = train_lm(&corpus, &tgt, 2, Smoothing::WittenBell).unwrap().compile();
        let (nt, ns) = (tgt.len(), src.len());
        let table = Array2::from_shape_fn((nt, ns), |_| rng.gen_range(0.05..1.0));
        let channel = build_channel(&EmissionParams::from_table(table).unwrap(), DelayBound(delay)).fst;
        let mut bigram = Array2::from_shape_fn((nt, nt), |_| rng.gen_range(0.05..1.0));
        for mut row in bigram.rows_mut() {
            row[1] = 1e-9;
            let z = row.sum();
            row /= z;
        }
        (lm, channel, Bigram(bigram), nt, ns)
    }

    /// Best combined score over every path of `machine` that reads `x`.
    fn brute_force(machine: &Wfst, x: &[Label], scorer: &Bigram) -> (f64, Vec<Label>) {
        let mut best = (f64::INFINITY, Vec::new());
        let mut stack = vec![(machine.start().unwrap(), 0usize, Vec::<Label>::new(), 0.0)];
        while let Some((s, k, y, w)) = stack.pop() {
            if k == x.len() && machine.is_final(s) {
                let last = y.last().copied().unwrap_or(0);
                let total = w + machine.final_weight(s) + scorer.neg_log_prob(&last, 0);
                if total < best.0 - 1e-12 || ((total - best.0).abs() <= 1e-12 && y < best.1) {
                    best = (total, y.clone());
                }
            }
            for a in machine.arcs(s) {
                let k2 = if a.olabel == EPSILON {
                    k
                } else if k < x.len() && a.olabel == x[k] {
                    k + 1
                } else {
                    continue;
                };
                let mut y2 = y.clone();
                let mut w2 = w + a.weight;
                if a.ilabel != EPSILON {
                    w2 += scorer.neg_log_prob(&y.last().copied().unwrap_or(0), a.ilabel);
                    y2.push(a.ilabel);
                }
                stack.push((a.nextstate, k2, y2, w2));
            }
        }
        best
    }

    #[test]
    fn exhaustive_poe_matches_brute_force() {
        for seed in 0..10 {
            let (lm, channel, scorer, _, _) = setup(seed, 1);
            let machine = poe_machine(&lm, &channel).unwrap();
            let x: Vec<Label> = (0..(seed as usize % 3 + 1)).map(|i| 2 + (i as Label + seed as Label) % 2).collect();
            let got = poe_decode(&x, &machine, &scorer, None).unwrap();
            let (score, y) = brute_force(&machine, &x, &scorer);
            assert!((got.score - score).abs() < 1e-9, "seed {seed}: {} vs {score}", got.score);
            assert_eq!(got.y, y);
            let recomputed: f64 = got.steps.iter().map(|s| s.weight + s.neural).sum::<f64>() + got.final_cost;
            assert!((recomputed - got.score).abs() < 1e-9);
            assert!(got.steps.iter().filter(|s| s.ilabel == EPSILON).all(|s| s.neural == 0.0));
        }
    }

    #[test]
    fn uniform_scorer_keeps_wfst_argmax_at_fixed_length() {
        for seed in 0..5 {
            let (lm, channel, _, nt, _) = setup(seed, 0);
            let machine = poe_machine(&lm, &channel).unwrap();
            let x = [2, 3, 3];
            let uniform = UniformScorer { symbols: nt - 1 };
            let got = poe_decode(&x, &machine, &uniform, Some(5)).unwrap();
            assert_eq!(got.y, decode_best(&x, &lm, &channel).unwrap().labels);
        }
    }

    #[test]
    fn zero_beam_is_rejected() {
        let (lm, channel, scorer, _, _) = setup(0, 0);
        let machine = poe_machine(&lm, &channel).unwrap();
        assert!(poe_decode(&[2], &machine, &scorer, Some(0)).is_err());
    }

    #[test]
    fn rerank_sorts_by_rescorer() {
        let cands: Vec<Candidate> = (0..3).map(|i| Candidate::new(vec![i + 2], i as f64)).collect();
        let scores = [2.0, 1.0, 3.0];
        let out = rerank(cands.clone(), |y| Ok(scores[y[0] as usize - 2])).unwrap();
        let order: Vec<Label> = out.iter().map(|c| c.y[0]).collect();
        assert_eq!(order, vec![3, 2, 4]);
        let single = rerank(cands[..1].to_vec(), |_| Ok(0.5)).unwrap();
        assert_eq!(single[0].y, cands[0].y);
        assert!(rerank(Vec::new(), |_| Ok(0.0)).is_err());
    }

    #[test]
    fn unreachable_candidates_keep_generator_order() {
        let cands: Vec<Candidate> = (0..4).map(|i| Candidate::new(vec![i + 2], i as f64)).collect();
        let out = rerank(cands, |y| Ok(if y[0] % 2 == 0 { f64::INFINITY } else { 1.0 / y[0] as f64 })).unwrap();
        let order: Vec<Label> = out.iter().map(|c| c.y[0]).collect();
        assert_eq!(order, vec![5, 3, 2, 4]);
    }

    #[test]
    fn wfst_rescorer_rejects_out_of_bound_lengths() {
        let (lm, channel, _, _, _) = setup(1, 1);
        let x = [2, 3];
        assert!(wfst_score(&[2, 2], &x, &lm, &channel).unwrap().is_finite());
        assert_eq!(wfst_score(&[2, 2, 3, 3], &x, &lm, &channel).unwrap(), f64::INFINITY);
        assert_eq!(wfst_score(&[], &x, &lm, &channel).unwrap(), f64::INFINITY);
    }

    #[test]
    fn wfst_candidates_head_is_best_path() {
        let (lm, channel, _, _, _) = setup(2, 1);
        let x = [3, 2, 3];
        let c = generate_candidates_wfst(&x, &lm, &channel, 1).unwrap();
        let best = decode_best(&x, &lm, &channel).unwrap();
        assert_eq!(c[0].y, best.labels);
        assert!((c[0].generator_score - best.weight).abs() < 1e-12);
    }

    #[test]
    fn nbest_dump_format() {
        let c = vec![Candidate::new(vec![2], 1.5), Candidate::new(vec![3, 2], 2.25)];
        let tsv = nbest_tsv(&c, |y| format!("{y:?}"), false);
        assert_eq!(tsv, "1\t1.5\t[2]\n2\t2.25\t[3, 2]\n");
    }
}
