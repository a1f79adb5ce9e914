//! Experiment stages and their on-disk artifacts.
//!
//! Layout of the output directory:
//!
//! ```text
//! config.toml              resolved configuration
//! manifest.txt             config hash, seeds, version, finished stages
//! alphabet.src, .tgt       prepare
//! lm.fst, lm.arpa          train-lm
//! channel.tsv, em.tsv      train-wfst
//! seq2seq.{manifest,bin}   train-seq2seq (plus seq2seq.tsv history)
//! decode/<decoder>.txt     decode (plus .nbest.tsv and .report.txt)
//! metrics.csv              evaluate, one row per decoded system
//! analysis/<decoder>/      analyze
//! ```

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::channel::{build_channel, build_prior, read_prior_pairs, Channel, DelayBound, EmissionParams};
use crate::charlm::{train_lm, Smoothing};
use crate::combine::{
    generate_candidates_seq2seq, generate_candidates_wfst, nbest_tsv, poe_decode, poe_machine, rerank, seq2seq_score, wfst_score,
    Seq2SeqScorer,
};
use crate::config::{DecoderKind, ExperimentConfig};
use crate::corpus::{apply_unk, induce_alphabet, read_addbacks, read_corpus, shortest_sequences, Alphabet, Sequence};
use crate::em::{decode_best, read_checkpoint, train_em, write_checkpoint};
use crate::error::{Error, IoContext, Result};
use crate::eval::{error_profile, sig6, word_tokenize};
use crate::fst::{Label, Wfst};
use crate::neural::{train_unmt, Direction, JointVocab, Seq2SeqModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Prepare,
    TrainLm,
    TrainWfst,
    TrainSeq2seq,
    Decode,
    Evaluate,
    Analyze,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Prepare,
        Stage::TrainLm,
        Stage::TrainWfst,
        Stage::TrainSeq2seq,
        Stage::Decode,
        Stage::Evaluate,
        Stage::Analyze,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Prepare => "prepare",
            Stage::TrainLm => "train-lm",
            Stage::TrainWfst => "train-wfst",
            Stage::TrainSeq2seq => "train-seq2seq",
            Stage::Decode => "decode",
            Stage::Evaluate => "evaluate",
            Stage::Analyze => "analyze",
        }
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown command {s:?}")))
    }
}

/// A command: one stage, or every stage the configured decoder needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Stage(Stage),
    All,
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            Ok(Command::All)
        } else {
            s.parse().map(Command::Stage)
        }
    }
}

/// An experiment bound to its output directory.
pub struct Pipeline {
    pub config: ExperimentConfig,
    pub out: PathBuf,
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).ctx(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).ctx(|| format!("writing {}", path.display()))
}

fn lines(seqs: &[String]) -> String {
    let mut s = seqs.join("\n");
    if !seqs.is_empty() {
        s.push('\n');
    }
    s
}

impl Pipeline {
    pub fn new(config: ExperimentConfig) -> Self {
        let out = config.paths.output.clone();
        Pipeline { config, out }
    }

    pub fn run(&self, command: Command) -> Result<()> {
        for p in self.config.paths.inputs() {
            if !p.is_file() {
                return Err(Error::Io {
                    context: format!("input {}", p.display()),
                    source: std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
                });
            }
        }
        fs::create_dir_all(&self.out).ctx(|| format!("creating {}", self.out.display()))?;
        write_file(&self.out.join("config.toml"), &self.config.to_toml())?;
        let stages: Vec<Stage> = match command {
            Command::Stage(s) => vec![s],
            Command::All => {
                let d = self.config.decode.decoder;
                Stage::ALL
                    .into_iter()
                    .filter(|s| match s {
                        Stage::TrainWfst => d.needs_wfst(),
                        Stage::TrainSeq2seq => d.needs_seq2seq(),
                        _ => true,
                    })
                    .collect()
            }
        };
        for s in stages {
            log::info!("stage {}", s.name());
            match s {
                Stage::Prepare => self.prepare()?,
                Stage::TrainLm => self.train_lm()?,
                Stage::TrainWfst => self.train_wfst()?,
                Stage::TrainSeq2seq => self.train_seq2seq()?,
                Stage::Decode => self.decode()?,
                Stage::Evaluate => self.evaluate()?,
                Stage::Analyze => self.analyze()?,
            }
            self.record(s)?;
        }
        Ok(())
    }

    fn artifact(&self, name: &str, stage: Stage) -> Result<PathBuf> {
        let p = self.out.join(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact {
                path: p,
                stage: stage.name(),
            })
        }
    }

    /// Rewrites the manifest with `stage` added to the finished set.
    fn record(&self, stage: Stage) -> Result<()> {
        let path = self.out.join("manifest.txt");
        let mut done: BTreeSet<Stage> = BTreeSet::new();
        let hash = self.config.hash();
        if let Ok(old) = fs::read_to_string(&path) {
            if old.lines().any(|l| l == format!("config_sha256 {hash}")) {
                for l in old.lines() {
                    if let Some(name) = l.strip_prefix("stage ") {
                        if let Ok(s) = name.parse() {
                            done.insert(s);
                        }
                    }
                }
            }
        }
        done.insert(stage);
        let mut m = String::new();
        let _ = writeln!(m, "uct_version {}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(m, "config_sha256 {hash}");
        let _ = writeln!(m, "em_seed {}", self.config.em.seed);
        let _ = writeln!(m, "seq2seq_seed {}", self.config.seq2seq.seed);
        let _ = writeln!(m, "decoder {}", self.config.decode.decoder);
        for s in done {
            let _ = writeln!(m, "stage {}", s.name());
        }
        write_file(&path, &m)
    }

    fn read(&self, path: &Path) -> Result<Vec<Sequence>> {
        let seqs = read_corpus(path)?;
        if seqs.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(seqs)
    }

    fn alphabets(&self) -> Result<(Alphabet, Alphabet)> {
        let src = Alphabet::read(&self.artifact("alphabet.src", Stage::Prepare)?)?;
        let tgt = Alphabet::read(&self.artifact("alphabet.tgt", Stage::Prepare)?)?;
        Ok((src, tgt))
    }

    fn encoded(&self, path: &Path, a: &Alphabet) -> Result<Vec<Vec<Label>>> {
        Ok(self.read(path)?.iter().map(|s| a.encode(&apply_unk(s, a, false))).collect())
    }

    pub fn prepare(&self) -> Result<()> {
        let p = &self.config.paths;
        let addbacks = match &p.addbacks {
            Some(path) => read_addbacks(path)?,
            None => BTreeSet::new(),
        };
        let cov = self.config.alphabet.coverage;
        let src = induce_alphabet(&self.read(&p.source_train)?, cov, &addbacks)?;
        let tgt = induce_alphabet(&self.read(&p.target_train)?, cov, &addbacks)?;
        let (vs, vt) = (self.read(&p.valid_source)?, self.read(&p.valid_target)?);
        let (ts, tt) = (self.read(&p.test_source)?, self.read(&p.test_target)?);
        if vs.len() != vt.len() || ts.len() != tt.len() {
            return Err(Error::InvalidArgument("validation and test files must be line-aligned".into()));
        }
        src.write(&self.out.join("alphabet.src"))?;
        tgt.write(&self.out.join("alphabet.tgt"))
    }

    pub fn train_lm(&self) -> Result<()> {
        let (_, tgt) = self.alphabets()?;
        let corpus = self.encoded(&self.config.paths.target_train, &tgt)?;
        let lm = train_lm(&corpus, &tgt, self.config.lm.order, Smoothing::WittenBell)?;
        write_file(&self.out.join("lm.arpa"), &lm.to_arpa(&tgt))?;
        lm.compile().write(&self.out.join("lm.fst"))
    }

    fn lm(&self, tgt: &Alphabet) -> Result<Wfst> {
        Wfst::read(&self.artifact("lm.fst", Stage::TrainLm)?, tgt.len(), tgt.len())
    }

    pub fn train_wfst(&self) -> Result<()> {
        let (src, tgt) = self.alphabets()?;
        let lm = self.lm(&tgt)?;
        let pairs = self.config.paths.priors.iter().map(|p| read_prior_pairs(p)).collect::<Result<Vec<_>>>()?;
        let ch = &self.config.channel;
        let prior = build_prior(&tgt, &src, &pairs, ch.base_pseudocount, ch.boost_pseudocount)?;
        let train = shortest_sequences(&self.read(&self.config.paths.source_train)?, self.config.em.shortest);
        let train_x: Vec<Vec<Label>> = train.iter().map(|s| src.encode(&apply_unk(s, &src, false))).collect();
        let run = train_em(
            &train_x,
            &lm,
            &prior,
            tgt.len(),
            src.len(),
            &self.config.em_config(self.config.decode.workers),
        )?;
        let mut hist = String::from("epoch\tjoint_weight\tdecoded\tskipped\n");
        for e in &run.history {
            let _ = writeln!(hist, "{}\t{}\t{}\t{}", e.epoch, sig6(e.joint_weight), e.decoded, e.skipped);
        }
        write_file(&self.out.join("em.tsv"), &hist)?;
        write_checkpoint(&self.out.join("channel.tsv"), &run.state, &tgt, &src)
    }

    fn params(&self, src: &Alphabet, tgt: &Alphabet) -> Result<EmissionParams> {
        read_checkpoint(&self.artifact("channel.tsv", Stage::TrainWfst)?, tgt, src)
    }

    fn channel(&self, src: &Alphabet, tgt: &Alphabet) -> Result<Channel> {
        Ok(build_channel(&self.params(src, tgt)?, DelayBound(self.config.channel.delay)))
    }

    pub fn train_seq2seq(&self) -> Result<()> {
        let (src, tgt) = self.alphabets()?;
        let p = &self.config.paths;
        let source = self.encoded(&p.source_train, &src)?;
        let target = self.encoded(&p.target_train, &tgt)?;
        let valid: Vec<(Vec<Label>, Vec<Label>)> = self
            .encoded(&p.valid_source, &src)?
            .into_iter()
            .zip(self.encoded(&p.valid_target, &tgt)?)
            .collect();
        let run = train_unmt(&source, &target, &valid, JointVocab::new(&src, &tgt), &self.config.unmt())?;
        let mut hist = String::from("epoch\tae_weight\tloss\tvalid_cer\n");
        for e in &run.history {
            let _ = writeln!(hist, "{}\t{}\t{}\t{}", e.epoch, sig6(e.ae_weight), sig6(e.loss), sig6(e.valid_cer));
        }
        let _ = writeln!(hist, "# best epoch {}", run.best_epoch);
        write_file(&self.out.join("seq2seq.tsv"), &hist)?;
        run.model.save(&self.out.join("seq2seq"))
    }

    fn model(&self) -> Result<Seq2SeqModel> {
        self.artifact("seq2seq.manifest", Stage::TrainSeq2seq)?;
        Seq2SeqModel::load(&self.out.join("seq2seq"))
    }

    pub fn decode(&self) -> Result<()> {
        let (src, tgt) = self.alphabets()?;
        let kind = self.config.decode.decoder;
        let inputs = self.encoded(&self.config.paths.test_source, &src)?;
        let wfst = if kind.needs_wfst() {
            let lm = self.lm(&tgt)?;
            let ch = self.channel(&src, &tgt)?;
            let machine = if kind == DecoderKind::Poe { Some(poe_machine(&lm, &ch.fst)?) } else { None };
            Some((lm, ch.fst, machine))
        } else {
            None
        };
        let model = if kind.needs_seq2seq() { Some(self.model()?) } else { None };
        let ctx = DecodeContext {
            kind,
            beam: self.config.decode.beam,
            nbest: self.config.decode.nbest,
            normalize: self.config.decode.length_normalize,
            wfst: wfst.as_ref().map(|(lm, ch, m)| (lm, ch, m.as_ref())),
            model: model.as_ref(),
        };
        let results = decode_all(&ctx, &inputs, self.config.decode.workers);
        let render = |y: &[Label]| tgt.decode(y).detokenize();
        let mut outputs = Vec::with_capacity(results.len());
        let mut nbest = String::new();
        let (mut failed, mut unreachable, mut total_cands) = (0usize, 0usize, 0usize);
        for (i, r) in results.into_iter().enumerate() {
            match r {
                Ok(d) => {
                    outputs.push(render(&d.output));
                    if let Some(c) = d.candidates {
                        unreachable += c.iter().filter(|c| c.rescorer_score == f64::INFINITY).count();
                        total_cands += c.len();
                        for line in nbest_tsv(&c, render, true).lines() {
                            let _ = writeln!(nbest, "{}\t{line}", i + 1);
                        }
                    }
                }
                Err(e @ (Error::EmptyLattice(_) | Error::NoHypothesis(_) | Error::ZeroProbability { .. })) => {
                    log::warn!("sentence {}: {e}", i + 1);
                    failed += 1;
                    outputs.push(String::new());
                }
                Err(e) => return Err(e),
            }
        }
        let dir = self.out.join("decode");
        write_file(&dir.join(format!("{kind}.txt")), &lines(&outputs))?;
        let mut report = String::new();
        let _ = writeln!(report, "decoder {kind}");
        let _ = writeln!(report, "sentences {}", outputs.len());
        let _ = writeln!(report, "failed {failed}");
        if matches!(kind, DecoderKind::RerankWfst | DecoderKind::RerankSeq2seq) {
            write_file(&dir.join(format!("{kind}.nbest.tsv")), &format!("sentence\trank\tscore\toutput\n{nbest}"))?;
            let _ = writeln!(report, "candidates {total_cands}");
            let _ = writeln!(report, "unreachable_candidates {unreachable}");
        }
        write_file(&dir.join(format!("{kind}.report.txt")), &report)
    }

    /// `(decoder, hypotheses)` for every decoded system, in decoder order.
    fn decoded(&self) -> Result<Vec<(DecoderKind, Vec<String>)>> {
        let mut out = Vec::new();
        for kind in DecoderKind::ALL {
            let path = self.out.join("decode").join(format!("{kind}.txt"));
            if path.is_file() {
                let text = fs::read_to_string(&path).ctx(|| format!("reading {}", path.display()))?;
                out.push((kind, text.lines().map(str::to_string).collect()));
            }
        }
        if out.is_empty() {
            return Err(Error::MissingArtifact {
                path: self.out.join("decode"),
                stage: Stage::Decode.name(),
            });
        }
        Ok(out)
    }

    fn references(&self) -> Result<Vec<String>> {
        Ok(self.read(&self.config.paths.test_target)?.iter().map(Sequence::detokenize).collect())
    }

    fn pairs(&self, hyps: Vec<String>, refs: &[String]) -> Result<Vec<(String, String)>> {
        if hyps.len() != refs.len() {
            return Err(Error::InvalidArgument(format!(
                "{} hypotheses for {} references; rerun decode",
                hyps.len(),
                refs.len()
            )));
        }
        Ok(hyps.into_iter().zip(refs.iter().cloned()).collect())
    }

    pub fn evaluate(&self) -> Result<()> {
        let refs = self.references()?;
        let mut csv = String::new();
        for (kind, hyps) in self.decoded()? {
            let profile = error_profile(&self.pairs(hyps, &refs)?, None, self.config.analyze.top_k)?;
            let table = profile.metrics_csv(kind.name());
            if csv.is_empty() {
                csv.push_str(&table);
            } else {
                csv.push_str(table.lines().nth(1).unwrap_or_default());
                csv.push('\n');
            }
        }
        write_file(&self.out.join("metrics.csv"), &csv)
    }

    pub fn analyze(&self) -> Result<()> {
        let refs = self.references()?;
        let vocab: HashSet<String> = self
            .read(&self.config.paths.target_train)?
            .iter()
            .flat_map(|s| word_tokenize(&s.detokenize()))
            .collect();
        let (src, tgt) = self.alphabets()?;
        let entropy = self.params(&src, &tgt).ok().map(|p| row_entropies(&p, &tgt));
        for (kind, hyps) in self.decoded()? {
            let profile = error_profile(&self.pairs(hyps, &refs)?, Some(&vocab), self.config.analyze.top_k)?;
            let dir = self.out.join("analysis").join(kind.name());
            profile.write_reports(&dir, kind.name())?;
        }
        if let Some(rows) = entropy {
            let mut csv = String::from("target,entropy_nats\n");
            for (sym, h) in rows {
                let _ = writeln!(csv, "{sym},{}", sig6(h));
            }
            write_file(&self.out.join("analysis").join("channel_entropy.csv"), &csv)?;
        }
        Ok(())
    }
}

/// Entropy in nats of each target symbol's emission row.
fn row_entropies(params: &EmissionParams, tgt: &Alphabet) -> BTreeMap<String, f64> {
    params
        .table()
        .rows()
        .into_iter()
        .enumerate()
        .skip(1)
        .map(|(t, row)| {
            let h = -row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>();
            (tgt.symbol_name(t as Label), h)
        })
        .collect()
}

struct DecodeContext<'a> {
    kind: DecoderKind,
    beam: usize,
    nbest: usize,
    normalize: bool,
    wfst: Option<(&'a Wfst, &'a Wfst, Option<&'a Wfst>)>,
    model: Option<&'a Seq2SeqModel>,
}

struct Decoded {
    output: Vec<Label>,
    candidates: Option<Vec<crate::combine::Candidate>>,
}

fn decode_one(ctx: &DecodeContext, x: &[Label]) -> Result<Decoded> {
    let plain = |output| Ok(Decoded { output, candidates: None });
    match ctx.kind {
        DecoderKind::Wfst => {
            let (lm, ch, _) = ctx.wfst.expect("wfst loaded");
            plain(decode_best(x, lm, ch)?.labels)
        }
        DecoderKind::Seq2seq => plain(ctx.model.expect("model loaded").greedy_decode(x, Direction::SRC_TO_TGT)),
        DecoderKind::Poe => {
            let (_, _, machine) = ctx.wfst.expect("wfst loaded");
            let scorer = Seq2SeqScorer {
                model: ctx.model.expect("model loaded"),
                dir: Direction::SRC_TO_TGT,
            };
            plain(poe_decode(x, machine.expect("product machine"), &scorer, Some(ctx.beam))?.y)
        }
        DecoderKind::RerankWfst => {
            let (lm, ch, _) = ctx.wfst.expect("wfst loaded");
            let model = ctx.model.expect("model loaded");
            let cands = generate_candidates_wfst(x, lm, ch, ctx.nbest)?;
            let ranked = rerank(cands, |y| Ok(seq2seq_score(model, x, y, Direction::SRC_TO_TGT, ctx.normalize)))?;
            Ok(Decoded {
                output: ranked[0].y.clone(),
                candidates: Some(ranked),
            })
        }
        DecoderKind::RerankSeq2seq => {
            let (lm, ch, _) = ctx.wfst.expect("wfst loaded");
            let model = ctx.model.expect("model loaded");
            let cands = generate_candidates_seq2seq(model, x, Direction::SRC_TO_TGT, ctx.nbest);
            let ranked = rerank(cands, |y| wfst_score(y, x, lm, ch))?;
            Ok(Decoded {
                output: ranked[0].y.clone(),
                candidates: Some(ranked),
            })
        }
    }
}

/// Decodes every input, spreading sentences over `workers` threads while
/// keeping input order.
fn decode_all(ctx: &DecodeContext, inputs: &[Vec<Label>], workers: usize) -> Vec<Result<Decoded>> {
    let workers = workers.clamp(1, inputs.len().max(1));
    if workers == 1 {
        return inputs.iter().map(|x| decode_one(ctx, x)).collect();
    }
    let chunk = inputs.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = inputs
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|x| decode_one(ctx, x)).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("decode worker panicked")).collect()
    })
}
