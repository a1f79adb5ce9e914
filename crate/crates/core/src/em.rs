//! Hard stepwise EM for the emission parameters.
//!
//! Each minibatch is decoded with the current cascade, then alignment
//! posteriors between each decoded target and its observed source are
//! blended into running sufficient statistics.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::channel::{build_channel, map_update, Channel, Counts, DelayBound, EmissionParams, PriorSpec, STOP};
use crate::corpus::{Alphabet, EPS};
use crate::error::{Error, IoContext, Result};
use crate::fst::{
    compose, compose_with_origin, shortest_distance, shortest_distance_to_final, shortest_path, Label, Semiring, Wfst,
};

/// Best target for an observed source sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub labels: Vec<Label>,
    /// Joint negative log-probability of the best path.
    pub weight: f64,
}

/// The lattice `lm ∘ channel ∘ x`, whose input side is the target.
pub fn decode_lattice(x: &[Label], lm: &Wfst, channel: &Wfst) -> Result<Wfst> {
    let acc = Wfst::linear_acceptor(x, channel.output_symbols());
    compose(lm, &compose(channel, &acc)?)
}

/// Tropical shortest path through `lm ∘ channel ∘ x`.
pub fn decode_best(x: &[Label], lm: &Wfst, channel: &Wfst) -> Result<Decoded> {
    let lattice = decode_lattice(x, lm, channel)?;
    match shortest_path(&lattice)? {
        Some(p) => Ok(Decoded {
            labels: p.input,
            weight: p.weight,
        }),
        None => Err(Error::EmptyLattice(format!("{x:?}"))),
    }
}

/// Posterior expected edit counts for the pair, with `-log P(x | y)`.
///
/// The stop event is counted once per substitution or deletion and once
/// for the end of the sequence.
pub fn expected_counts(y: &[Label], x: &[Label], channel: &Channel) -> Result<(Counts, f64)> {
    let ch = &channel.fst;
    let ay = Wfst::linear_acceptor(y, ch.input_symbols());
    let ax = Wfst::linear_acceptor(x, ch.output_symbols());
    let left = compose_with_origin(&ay, ch)?;
    let lat = compose_with_origin(&left.fst, &ax)?;
    let fwd = shortest_distance(&lat.fst, Semiring::Log)?;
    let bwd = shortest_distance_to_final(&lat.fst, Semiring::Log)?;
    let z = lat.fst.start().map_or(f64::INFINITY, |s| bwd[s as usize]);
    if !z.is_finite() {
        return Err(Error::ZeroProbability {
            y: format!("{y:?}"),
            x: format!("{x:?}"),
        });
    }
    let mut counts = Counts::zeros((ch.input_symbols(), ch.output_symbols()));
    for s in lat.fst.states() {
        let a = fwd[s as usize];
        if !a.is_finite() {
            continue;
        }
        for (arc, &(ra, _)) in lat.fst.arcs(s).iter().zip(&lat.origin[s as usize]) {
            let b = bwd[arc.nextstate as usize];
            if !b.is_finite() {
                continue;
            }
            let post = (z - a - arc.weight - b).exp();
            let (qs, qi) = ra.expect("the source acceptor never moves alone");
            let (_, rc) = left.origin[qs as usize][qi as usize];
            let (cs, ci) = rc.expect("the target acceptor has no ε-arcs");
            let cell = channel.cells[cs as usize][ci as usize];
            counts[[cell.0 as usize, cell.1 as usize]] += post;
            if cell.0 != EPS {
                counts[[STOP.0 as usize, STOP.1 as usize]] += post;
            }
        }
    }
    counts[[STOP.0 as usize, STOP.1 as usize]] += 1.0;
    Ok((counts, z))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    /// Stepsize exponent: η_k = (k + 2)^-alpha.
    pub alpha: f64,
    pub minibatch: usize,
    pub epochs: usize,
    /// Stop after this many epochs without a change in any row argmax.
    pub patience: usize,
    pub delay: DelayBound,
    pub seed: u64,
    /// Relative log-scale noise applied to the initial parameters.
    pub init_noise: f64,
    pub workers: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            alpha: 0.9,
            minibatch: 10,
            epochs: 20,
            patience: 3,
            delay: DelayBound(2),
            seed: 0,
            init_noise: 0.5,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmState {
    pub params: EmissionParams,
    /// Decayed expected counts, scaled to the full training set.
    pub stats: Counts,
    /// Number of minibatch updates applied so far.
    pub step: usize,
    pub alpha: f64,
    pub minibatch: usize,
    pub seed: u64,
}

impl EmState {
    /// Starts from the prior mean, randomly perturbed by `config.init_noise`.
    pub fn new(prior: &PriorSpec, target_symbols: usize, source_symbols: usize, config: &EmConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut table = prior.mean(target_symbols, source_symbols).table().clone();
        if config.init_noise > 0.0 {
            table.mapv_inplace(|p| p * (config.init_noise * rng.gen_range(-1.0..1.0)).exp());
        }
        EmState {
            params: EmissionParams::from_table(table).expect("perturbed prior mean is positive"),
            stats: Counts::zeros((target_symbols, source_symbols)),
            step: 0,
            alpha: config.alpha,
            minibatch: config.minibatch.max(1),
            seed: config.seed,
        }
    }

    pub fn stepsize(&self) -> f64 {
        (self.step as f64 + 2.0).powf(-self.alpha)
    }

    /// Folds one minibatch's counts into the statistics and re-estimates.
    /// `fraction` is the share of the training set the batch represents.
    pub fn update(&mut self, batch: &Counts, fraction: f64, prior: &PriorSpec) -> Result<()> {
        let eta = self.stepsize();
        self.stats = &self.stats * (1.0 - eta) + batch * (eta / fraction);
        self.step += 1;
        self.params = map_update(&self.stats, prior)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Sum of best-path weights of the decoded training sequences.
    pub joint_weight: f64,
    pub decoded: usize,
    pub skipped: usize,
}

/// Decodes then counts one sequence under a fixed channel.
fn e_step(x: &[Label], lm: &Wfst, channel: &Channel) -> Result<(Counts, f64)> {
    let best = decode_best(x, lm, &channel.fst)?;
    let (counts, _) = expected_counts(&best.labels, x, channel)?;
    Ok((counts, best.weight))
}

fn e_step_batch(batch: &[&Vec<Label>], lm: &Wfst, channel: &Channel, workers: usize) -> Vec<Result<(Counts, f64)>> {
    if workers <= 1 || batch.len() <= 1 {
        return batch.iter().map(|x| e_step(x, lm, channel)).collect();
    }
    let chunk = batch.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = batch
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|x| e_step(x, lm, channel)).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("decode worker panicked"))
            .collect()
    })
}

/// One pass over `train_x` in a seeded shuffled order.
pub fn em_epoch(
    state: &mut EmState,
    train_x: &[Vec<Label>],
    lm: &Wfst,
    prior: &PriorSpec,
    config: &EmConfig,
    epoch: usize,
) -> Result<EpochStats> {
    if train_x.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut order: Vec<&Vec<Label>> = train_x.iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(state.seed.wrapping_add(1 + epoch as u64)));
    let mut stats = EpochStats {
        epoch,
        joint_weight: 0.0,
        decoded: 0,
        skipped: 0,
    };
    let n = train_x.len() as f64;
    for batch in order.chunks(state.minibatch) {
        let channel = build_channel(&state.params, config.delay);
        let mut total = Counts::zeros(state.stats.dim());
        let mut used = 0usize;
        for (x, r) in batch.iter().zip(e_step_batch(batch, lm, &channel, config.workers)) {
            match r {
                Ok((c, w)) => {
                    total += &c;
                    stats.joint_weight += w;
                    used += 1;
                }
                Err(e) => {
                    warn!("skipping training sequence {x:?}: {e}");
                    stats.skipped += 1;
                }
            }
        }
        if used == 0 {
            continue;
        }
        stats.decoded += used;
        state.update(&total, used as f64 / n, prior)?;
    }
    if !stats.joint_weight.is_finite() {
        return Err(Error::Divergence {
            epoch,
            step: state.step,
            detail: "joint weight is not finite".into(),
        });
    }
    Ok(stats)
}

#[derive(Debug, Clone)]
pub struct EmRun {
    pub state: EmState,
    pub history: Vec<EpochStats>,
}

/// Runs up to `config.epochs` epochs, stopping early once the per-row
/// argmax has been stable for `config.patience` epochs.
pub fn train_em(
    train_x: &[Vec<Label>],
    lm: &Wfst,
    prior: &PriorSpec,
    target_symbols: usize,
    source_symbols: usize,
    config: &EmConfig,
) -> Result<EmRun> {
    if lm.input_symbols() != target_symbols {
        return Err(Error::AlphabetMismatch {
            left: lm.output_symbols(),
            right: target_symbols,
        });
    }
    let mut state = EmState::new(prior, target_symbols, source_symbols, config);
    let mut history = Vec::new();
    let mut argmax = state.params.row_argmax();
    let mut stable = 0;
    for epoch in 0..config.epochs {
        let stats = em_epoch(&mut state, train_x, lm, prior, config, epoch)?;
        info!(
            "epoch {epoch}: joint weight {:.3}, {} decoded, {} skipped",
            stats.joint_weight, stats.decoded, stats.skipped
        );
        history.push(stats);
        let now = state.params.row_argmax();
        stable = if now == argmax { stable + 1 } else { 0 };
        argmax = now;
        if stable >= config.patience {
            debug!("argmax stable for {stable} epochs; stopping");
            break;
        }
    }
    Ok(EmRun { state, history })
}

/// Writes the parameters with a `#`-prefixed metadata header.
pub fn write_checkpoint(path: &Path, state: &EmState, target: &Alphabet, source: &Alphabet) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "# step\t{}", state.step);
    let _ = writeln!(out, "# alpha\t{}", state.alpha);
    let _ = writeln!(out, "# minibatch\t{}", state.minibatch);
    let _ = writeln!(out, "# seed\t{}", state.seed);
    out.push_str(&state.params.to_tsv(target, source));
    fs::write(path, out).ctx(|| format!("writing {}", path.display()))
}

pub fn read_checkpoint(path: &Path, target: &Alphabet, source: &Alphabet) -> Result<EmissionParams> {
    let text = fs::read_to_string(path).ctx(|| format!("reading {}", path.display()))?;
    EmissionParams::from_tsv(&text, target, source, &path.display().to_string())
}
