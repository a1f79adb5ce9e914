use ndarray::{Array2, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{grad_norm, Direction, Domain, JointVocab, ModelConfig, Seq2SeqModel};
use super::tape::Grads;
use crate::error::{Error, Result};
use crate::eval::edit_distance;
use crate::fst::Label;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    pub drop: f64,
    pub shuffle_window: usize,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            drop: 0.1,
            shuffle_window: 3,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.drop) {
            return Err(Error::InvalidArgument(format!("drop probability {} outside [0, 1)", self.drop)));
        }
        if self.shuffle_window == 0 {
            return Err(Error::InvalidArgument("shuffle window must be at least 1".into()));
        }
        Ok(())
    }
}

/// Drops each symbol with probability `drop`, then permutes locally so
/// that no symbol moves more than `shuffle_window - 1` places.
pub fn add_noise(x: &[Label], noise: &NoiseConfig, rng: &mut impl Rng) -> Vec<Label> {
    let kept: Vec<Label> = x.iter().copied().filter(|_| rng.gen::<f64>() >= noise.drop).collect();
    let mut keyed: Vec<(f64, Label)> = kept
        .into_iter()
        .enumerate()
        .map(|(i, l)| (i as f64 + rng.gen::<f64>() * noise.shuffle_window as f64, l))
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
    keyed.into_iter().map(|(_, l)| l).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSchedule {
    /// Epochs over which the autoencoding weight falls from 1 to `ae_floor`.
    pub anneal_epochs: usize,
    pub ae_floor: f64,
    pub patience: usize,
    pub max_epochs: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            anneal_epochs: 3,
            ae_floor: 0.1,
            patience: 10,
            max_epochs: 30,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 {
            return Err(Error::InvalidArgument("patience must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.ae_floor) {
            return Err(Error::InvalidArgument(format!("autoencoding floor {} outside [0, 1]", self.ae_floor)));
        }
        Ok(())
    }

    pub fn ae_weight(&self, epoch: usize) -> f64 {
        if self.anneal_epochs == 0 {
            return self.ae_floor;
        }
        let t = (epoch as f64 / self.anneal_epochs as f64).min(1.0);
        1.0 - (1.0 - self.ae_floor) * t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Sgd,
    /// Adam with β = (0.9, 0.999).
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Optimizer {
    pub method: Method,
    pub learning_rate: f64,
    /// Gradient-norm clipping threshold, applied before the update.
    pub clip: f64,
    pub batch: usize,
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer {
            method: Method::Adam,
            learning_rate: 0.003,
            clip: 5.0,
            batch: 8,
        }
    }
}

/// Moment estimates carried between steps.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    step: i32,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnmtConfig {
    pub model: ModelConfig,
    pub noise: NoiseConfig,
    pub schedule: TrainSchedule,
    pub optimizer: Optimizer,
    pub seed: u64,
    /// Threads for on-the-fly translation and gradient evaluation.
    pub workers: usize,
    /// Epochs at the start whose back-translations come from a
    /// frequency-rank character dictionary instead of the model.
    pub dictionary_epochs: usize,
}

impl Default for UnmtConfig {
    fn default() -> Self {
        UnmtConfig {
            model: ModelConfig::default(),
            noise: NoiseConfig::default(),
            schedule: TrainSchedule::default(),
            optimizer: Optimizer::default(),
            seed: 0,
            workers: 1,
            dictionary_epochs: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnmtEpoch {
    pub epoch: usize,
    pub ae_weight: f64,
    /// Mean per-sentence training loss over all objectives.
    pub loss: f64,
    pub valid_cer: f64,
}

#[derive(Debug, Clone)]
pub struct UnmtRun {
    /// Model with the lowest validation CER.
    pub model: Seq2SeqModel,
    pub best_epoch: usize,
    pub history: Vec<UnmtEpoch>,
}

/// One-to-one character mapping between the domains, used to bootstrap
/// back-translation before the model can translate.
#[derive(Debug, Clone, PartialEq)]
pub struct CharDictionary {
    pub source_to_target: Vec<Label>,
    pub target_to_source: Vec<Label>,
}

impl CharDictionary {
    /// Pairs symbols of equal frequency rank; ties break by label. Symbols
    /// beyond the shorter ranking map to UNK.
    pub fn by_frequency(source: &[Vec<Label>], target: &[Vec<Label>], source_labels: usize, target_labels: usize) -> Self {
        let ranking = |corpus: &[Vec<Label>], n: usize| {
            let mut counts = vec![0usize; n];
            for &l in corpus.iter().flatten() {
                counts[l as usize] += 1;
            }
            let mut ids: Vec<Label> = (2..n as Label).filter(|&l| counts[l as usize] > 0).collect();
            ids.sort_by(|a, b| counts[*b as usize].cmp(&counts[*a as usize]).then(a.cmp(b)));
            ids
        };
        let (rs, rt) = (ranking(source, source_labels), ranking(target, target_labels));
        let mut s2t = vec![crate::corpus::UNK; source_labels];
        let mut t2s = vec![crate::corpus::UNK; target_labels];
        for (&s, &t) in rs.iter().zip(&rt) {
            s2t[s as usize] = t;
            t2s[t as usize] = s;
        }
        CharDictionary {
            source_to_target: s2t,
            target_to_source: t2s,
        }
    }

    /// Starts from [`CharDictionary::by_frequency`] and greedily swaps
    /// assignments while the source bigram counts, mapped into the target
    /// alphabet, gain likelihood under a smoothed target bigram model.
    pub fn fit(source: &[Vec<Label>], target: &[Vec<Label>], source_labels: usize, target_labels: usize) -> Self {
        let mut dict = Self::by_frequency(source, target, source_labels, target_labels);
        let bigrams = |corpus: &[Vec<Label>], n: usize| {
            // Index `n` is the sentence boundary.
            let mut c = Array2::<f64>::zeros((n + 1, n + 1));
            for s in corpus {
                let mut prev = n;
                for &l in s {
                    c[[prev, l as usize]] += 1.0;
                    prev = l as usize;
                }
                c[[prev, n]] += 1.0;
            }
            c
        };
        let cs = bigrams(source, source_labels);
        let ct = bigrams(target, target_labels);
        let logp = Array2::from_shape_fn(ct.dim(), |(a, b)| {
            let row = ct.row(a).sum();
            ((ct[[a, b]] + 0.1) / (row + 0.1 * ct.ncols() as f64)).ln()
        });
        let (sb, tb) = (source_labels, target_labels);
        let image = |m: &[Label], a: usize| if a == sb { Some(tb) } else { Some(m[a] as usize).filter(|&t| t >= 2) };
        let score = |m: &[Label]| {
            let mut total = 0.0;
            for ((a, b), &c) in cs.indexed_iter() {
                if c > 0.0 {
                    if let (Some(x), Some(y)) = (image(m, a), image(m, b)) {
                        total += c * logp[[x, y]];
                    }
                }
            }
            total
        };
        let mut map = dict.source_to_target.clone();
        let mut best = score(&map);
        let symbols: Vec<usize> = (2..source_labels).filter(|&a| cs.row(a).sum() > 0.0).collect();
        loop {
            let mut improved = false;
            for i in 0..symbols.len() {
                for j in i + 1..symbols.len() {
                    map.swap(symbols[i], symbols[j]);
                    let s = score(&map);
                    if s > best + 1e-9 {
                        best = s;
                        improved = true;
                    } else {
                        map.swap(symbols[i], symbols[j]);
                    }
                }
            }
            if !improved {
                break;
            }
        }
        dict.target_to_source = vec![crate::corpus::UNK; target_labels];
        for &a in &symbols {
            if map[a] >= 2 {
                dict.target_to_source[map[a] as usize] = a as Label;
            }
        }
        dict.source_to_target = map;
        dict
    }

    fn map(table: &[Label], xs: &[Vec<Label>]) -> Vec<Vec<Label>> {
        xs.iter()
            .map(|x| x.iter().map(|&l| table.get(l as usize).copied().unwrap_or(crate::corpus::UNK)).collect())
            .collect()
    }

    pub fn source_to_target(&self, xs: &[Vec<Label>]) -> Vec<Vec<Label>> {
        Self::map(&self.source_to_target, xs)
    }

    pub fn target_to_source(&self, ys: &[Vec<Label>]) -> Vec<Vec<Label>> {
        Self::map(&self.target_to_source, ys)
    }
}

/// One weighted batch of supervised pairs.
pub struct Batch<'a> {
    pub xs: Vec<&'a [Label]>,
    pub ys: Vec<&'a [Label]>,
    pub weight: f64,
    pub dir: Direction,
}

fn add_grads(acc: &mut Grads, g: Grads) {
    for (a, g) in acc.iter_mut().zip(g) {
        match (a.as_mut(), g) {
            (Some(a), Some(g)) => *a += &g,
            (None, Some(g)) => *a = Some(g),
            _ => {}
        }
    }
}

/// Evaluates `batches` (concurrently when `workers > 1`), then takes one
/// clipped optimizer step on the summed loss scaled by `1 / scale`.
/// Returns the summed unscaled loss; a divergence error carries epoch and
/// step 0 for the caller to fill in.
pub fn gradient_step(
    model: &mut Seq2SeqModel,
    batches: &[Batch],
    scale: f64,
    opt: &Optimizer,
    state: &mut OptimizerState,
    workers: usize,
) -> Result<f64> {
    let eval = |b: &Batch| {
        let w = vec![b.weight; b.xs.len()];
        model.loss_and_grads(&b.xs, &b.ys, &w, b.dir)
    };
    let results: Vec<(f64, Grads)> = if workers > 1 && batches.len() > 1 {
        std::thread::scope(|s| {
            let handles: Vec<_> = batches.iter().map(|b| s.spawn(move || eval(b))).collect();
            handles.into_iter().map(|h| h.join().expect("gradient worker panicked")).collect()
        })
    } else {
        batches.iter().map(eval).collect()
    };
    let mut loss = 0.0;
    let mut grads: Grads = vec![None; model.params.len()];
    for (l, g) in results {
        loss += l;
        add_grads(&mut grads, g);
    }
    if !loss.is_finite() {
        return Err(Error::Divergence {
            epoch: 0,
            step: 0,
            detail: format!("loss became {loss}"),
        });
    }
    let norm = grad_norm(&grads) / scale;
    log::debug!("step loss {:.4} grad norm {norm:.4}", loss / scale);
    if !norm.is_finite() {
        return Err(Error::Divergence {
            epoch: 0,
            step: 0,
            detail: format!("gradient norm became {norm}"),
        });
    }
    let factor = if norm > opt.clip { opt.clip / norm } else { 1.0 } / scale;
    match opt.method {
        Method::Sgd => {
            for (p, g) in model.params.iter_mut().zip(grads) {
                if let Some(g) = g {
                    p.scaled_add(-opt.learning_rate * factor, &g);
                }
            }
        }
        Method::Adam => {
            const B1: f64 = 0.9;
            const B2: f64 = 0.999;
            if state.m.is_empty() {
                state.m = model.params.iter().map(|p| Array2::zeros(p.raw_dim())).collect();
                state.v = state.m.clone();
            }
            state.step += 1;
            let c1 = 1.0 - B1.powi(state.step);
            let c2 = 1.0 - B2.powi(state.step);
            for (i, g) in grads.into_iter().enumerate() {
                let Some(g) = g else { continue };
                Zip::from(&mut model.params[i])
                    .and(&mut state.m[i])
                    .and(&mut state.v[i])
                    .and(&g)
                    .for_each(|p, m, v, &g| {
                        let g = g * factor;
                        *m = B1 * *m + (1.0 - B1) * g;
                        *v = B2 * *v + (1.0 - B2) * g * g;
                        *p -= opt.learning_rate * (*m / c1) / ((*v / c2).sqrt() + 1e-8);
                    });
            }
        }
    }
    Ok(loss)
}

fn at_step(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::Divergence { detail, .. } => Error::Divergence { epoch, step, detail },
        e => e,
    }
}

/// Greedy translations of `xs`, spread over `workers` threads.
pub fn translate_all(model: &Seq2SeqModel, xs: &[&[Label]], dir: Direction, workers: usize) -> Vec<Vec<Label>> {
    let workers = workers.max(1).min(xs.len().max(1));
    if workers == 1 {
        return xs.iter().map(|x| model.greedy_decode(x, dir)).collect();
    }
    let chunk = xs.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = xs
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|x| model.greedy_decode(x, dir)).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("decode worker panicked")).collect()
    })
}

/// Corpus CER of greedy translations against references.
pub fn validation_cer(model: &Seq2SeqModel, pairs: &[(Vec<Label>, Vec<Label>)], dir: Direction, workers: usize) -> f64 {
    let xs: Vec<&[Label]> = pairs.iter().map(|p| p.0.as_slice()).collect();
    let hyps = translate_all(model, &xs, dir, workers);
    let edits: usize = hyps.iter().zip(pairs).map(|(h, p)| edit_distance(h, &p.1)).sum();
    let len: usize = pairs.iter().map(|p| p.1.len()).sum();
    edits as f64 / len.max(1) as f64
}

/// Supervised training on fixed pairs, e.g. a copy task. Returns the mean
/// per-sentence loss of each epoch.
pub fn train_pairs(
    model: &mut Seq2SeqModel,
    pairs: &[(Vec<Label>, Vec<Label>)],
    dir: Direction,
    epochs: usize,
    opt: &Optimizer,
    seed: u64,
) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut state = OptimizerState::default();
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, chunk) in order.chunks(opt.batch.max(1)).enumerate() {
            let batch = Batch {
                xs: chunk.iter().map(|&i| pairs[i].0.as_slice()).collect(),
                ys: chunk.iter().map(|&i| pairs[i].1.as_slice()).collect(),
                weight: 1.0,
                dir,
            };
            total += gradient_step(model, &[batch], chunk.len() as f64, opt, &mut state, 1).map_err(|e| at_step(e, epoch, step))?;
        }
        history.push(total / pairs.len() as f64);
    }
    Ok(history)
}

/// Unsupervised training: denoising autoencoding in both domains plus
/// on-the-fly back-translation, with early stopping on validation CER
/// of source-to-target greedy output.
pub fn train_unmt(
    source: &[Vec<Label>],
    target: &[Vec<Label>],
    valid: &[(Vec<Label>, Vec<Label>)],
    vocab: JointVocab,
    config: &UnmtConfig,
) -> Result<UnmtRun> {
    let mut model = Seq2SeqModel::new(vocab, config.model, config.seed);
    train_unmt_from(&mut model, source, target, valid, config)
}

/// [`train_unmt`] starting from an existing model.
pub fn train_unmt_from(
    model: &mut Seq2SeqModel,
    source: &[Vec<Label>],
    target: &[Vec<Label>],
    valid: &[(Vec<Label>, Vec<Label>)],
    config: &UnmtConfig,
) -> Result<UnmtRun> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    config.noise.validate()?;
    config.schedule.validate()?;
    let opt = &config.optimizer;
    let bs = opt.batch.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut src_order: Vec<usize> = (0..source.len()).collect();
    let mut tgt_order: Vec<usize> = (0..target.len()).collect();
    let steps = source.len().max(target.len()).div_ceil(bs);
    let dict = CharDictionary::fit(
        source,
        target,
        model.vocab.labels(Domain::Source),
        model.vocab.labels(Domain::Target),
    );

    let mut state = OptimizerState::default();
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, 0usize, model.clone());
    let mut since_best = 0;
    for epoch in 0..config.schedule.max_epochs {
        let lambda = config.schedule.ae_weight(epoch);
        src_order.shuffle(&mut rng);
        tgt_order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut sentences = 0usize;
        for step in 0..steps {
            let pick = |order: &[usize], corpus: &'_ [Vec<Label>]| -> Vec<Vec<Label>> {
                (0..bs).map(|j| corpus[order[(step * bs + j) % order.len()]].clone()).collect()
            };
            let xs = pick(&src_order, source);
            let ys = pick(&tgt_order, target);
            let xs_noisy: Vec<Vec<Label>> = xs.iter().map(|x| add_noise(x, &config.noise, &mut rng)).collect();
            let ys_noisy: Vec<Vec<Label>> = ys.iter().map(|y| add_noise(y, &config.noise, &mut rng)).collect();
            let xs_ref: Vec<&[Label]> = xs.iter().map(Vec::as_slice).collect();
            let ys_ref: Vec<&[Label]> = ys.iter().map(Vec::as_slice).collect();
            let (y_hat, x_hat) = if epoch < config.dictionary_epochs {
                (dict.source_to_target(&xs), dict.target_to_source(&ys))
            } else {
                (
                    translate_all(model, &xs_ref, Direction::SRC_TO_TGT, config.workers),
                    translate_all(model, &ys_ref, Direction::TGT_TO_SRC, config.workers),
                )
            };
            fn view(v: &[Vec<Label>]) -> Vec<&[Label]> {
                v.iter().map(Vec::as_slice).collect()
            }
            let mut batches = vec![
                Batch {
                    xs: view(&y_hat),
                    ys: xs_ref.clone(),
                    weight: 1.0,
                    dir: Direction::TGT_TO_SRC,
                },
                Batch {
                    xs: view(&x_hat),
                    ys: ys_ref.clone(),
                    weight: 1.0,
                    dir: Direction::SRC_TO_TGT,
                },
            ];
            if lambda > 0.0 {
                batches.push(Batch {
                    xs: view(&xs_noisy),
                    ys: xs_ref.clone(),
                    weight: lambda,
                    dir: Direction::SRC_TO_SRC,
                });
                batches.push(Batch {
                    xs: view(&ys_noisy),
                    ys: ys_ref.clone(),
                    weight: lambda,
                    dir: Direction::TGT_TO_TGT,
                });
            }
            total += gradient_step(model, &batches, bs as f64, opt, &mut state, config.workers).map_err(|e| at_step(e, epoch, step))?;
            sentences += bs;
        }
        let cer = validation_cer(model, valid, Direction::SRC_TO_TGT, config.workers);
        log::info!("seq2seq epoch {epoch}: ae weight {lambda:.3}, loss {:.4}, valid CER {cer:.4}", total / sentences as f64);
        history.push(UnmtEpoch {
            epoch,
            ae_weight: lambda,
            loss: total / sentences as f64,
            valid_cer: cer,
        });
        if cer < best.0 {
            best = (cer, epoch, model.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.schedule.patience {
                break;
            }
        }
    }
    Ok(UnmtRun {
        model: best.2,
        best_epoch: best.1,
        history,
    })
}
