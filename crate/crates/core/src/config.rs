//! Experiment configuration: a TOML file with one table per stage.
//!
//! Every key is optional; corpus paths default to `train.src`,
//! `train.tgt`, `valid.*` and `test.*`. Unknown keys are rejected.
//! Relative paths resolve against the config file's directory.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::DelayBound;
use crate::em::EmConfig;
use crate::error::{Error, IoContext, Result};
use crate::neural::{Method, ModelConfig, NoiseConfig, Optimizer, TrainSchedule, UnmtConfig};

/// Environment variable that relocates the output directory.
pub const OUTPUT_ROOT_VAR: &str = "UCT_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderKind {
    Wfst,
    Seq2seq,
    /// WFST n-best reranked by the seq2seq model.
    RerankWfst,
    /// Seq2seq n-best reranked by the WFST.
    RerankSeq2seq,
    Poe,
}

impl DecoderKind {
    pub const ALL: [DecoderKind; 5] = [
        DecoderKind::Wfst,
        DecoderKind::Seq2seq,
        DecoderKind::RerankWfst,
        DecoderKind::RerankSeq2seq,
        DecoderKind::Poe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DecoderKind::Wfst => "wfst",
            DecoderKind::Seq2seq => "seq2seq",
            DecoderKind::RerankWfst => "rerank-wfst",
            DecoderKind::RerankSeq2seq => "rerank-seq2seq",
            DecoderKind::Poe => "poe",
        }
    }

    pub fn needs_wfst(self) -> bool {
        self != DecoderKind::Seq2seq
    }

    pub fn needs_seq2seq(self) -> bool {
        self != DecoderKind::Wfst
    }
}

impl fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DecoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DecoderKind::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown decoder {s:?}; expected one of wfst, seq2seq, rerank-wfst, rerank-seq2seq, poe")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub source_train: PathBuf,
    pub target_train: PathBuf,
    pub valid_source: PathBuf,
    pub valid_target: PathBuf,
    pub test_source: PathBuf,
    pub test_target: PathBuf,
    /// Similarity-pair prior files.
    pub priors: Vec<PathBuf>,
    /// Codepoints always kept in both alphabets.
    pub addbacks: Option<PathBuf>,
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            source_train: "train.src".into(),
            target_train: "train.tgt".into(),
            valid_source: "valid.src".into(),
            valid_target: "valid.tgt".into(),
            test_source: "test.src".into(),
            test_target: "test.tgt".into(),
            priors: Vec::new(),
            addbacks: None,
            output: "run".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlphabetSection {
    pub coverage: f64,
}

impl Default for AlphabetSection {
    fn default() -> Self {
        AlphabetSection { coverage: 0.99 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmSection {
    pub order: usize,
}

impl Default for LmSection {
    fn default() -> Self {
        LmSection { order: 6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelSection {
    pub delay: usize,
    pub base_pseudocount: f64,
    pub boost_pseudocount: f64,
}

impl Default for ChannelSection {
    fn default() -> Self {
        ChannelSection {
            delay: 2,
            base_pseudocount: 0.01,
            boost_pseudocount: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmSection {
    pub alpha: f64,
    pub minibatch: usize,
    pub epochs: usize,
    pub patience: usize,
    /// Train on this many shortest source sequences.
    pub shortest: usize,
    pub init_noise: f64,
    pub seed: u64,
}

impl Default for EmSection {
    fn default() -> Self {
        let em = EmConfig::default();
        EmSection {
            alpha: em.alpha,
            minibatch: em.minibatch,
            epochs: em.epochs,
            patience: em.patience,
            shortest: 1000,
            init_noise: em.init_noise,
            seed: em.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seq2SeqSection {
    pub embedding: usize,
    pub hidden: usize,
    pub drop: f64,
    pub shuffle_window: usize,
    pub anneal_epochs: usize,
    pub ae_floor: f64,
    pub patience: usize,
    pub max_epochs: usize,
    /// `adam` or `sgd`.
    pub optimizer: String,
    pub learning_rate: f64,
    pub clip: f64,
    pub batch: usize,
    pub dictionary_epochs: usize,
    pub seed: u64,
}

impl Default for Seq2SeqSection {
    fn default() -> Self {
        let u = UnmtConfig::default();
        Seq2SeqSection {
            embedding: u.model.embedding,
            hidden: u.model.hidden,
            drop: u.noise.drop,
            shuffle_window: u.noise.shuffle_window,
            anneal_epochs: u.schedule.anneal_epochs,
            ae_floor: u.schedule.ae_floor,
            patience: u.schedule.patience,
            max_epochs: u.schedule.max_epochs,
            optimizer: "adam".into(),
            learning_rate: u.optimizer.learning_rate,
            clip: u.optimizer.clip,
            batch: u.optimizer.batch,
            dictionary_epochs: u.dictionary_epochs,
            seed: u.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeSection {
    pub decoder: DecoderKind,
    pub beam: usize,
    pub nbest: usize,
    /// Divide seq2seq rescores by output length plus one.
    pub length_normalize: bool,
    pub workers: usize,
}

impl Default for DecodeSection {
    fn default() -> Self {
        DecodeSection {
            decoder: DecoderKind::Wfst,
            beam: 5,
            nbest: 5,
            length_normalize: false,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeSection {
    pub top_k: usize,
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        AnalyzeSection { top_k: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub alphabet: AlphabetSection,
    #[serde(default)]
    pub lm: LmSection,
    #[serde(default)]
    pub channel: ChannelSection,
    #[serde(default)]
    pub em: EmSection,
    #[serde(default)]
    pub seq2seq: Seq2SeqSection,
    #[serde(default)]
    pub decode: DecodeSection,
    #[serde(default)]
    pub analyze: AnalyzeSection,
}

impl ExperimentConfig {
    /// Parses TOML text. Paths stay as written.
    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(0, |s| text[..s.start].matches('\n').count() + 1);
            Error::Config(format!("{origin}:{line}: {}", e.message()))
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.alphabet.coverage > 0.0 && self.alphabet.coverage <= 1.0) {
            return bad(format!("alphabet.coverage must be in (0, 1], got {}", self.alphabet.coverage));
        }
        if self.lm.order == 0 {
            return bad("lm.order must be at least 1".into());
        }
        if !(self.channel.base_pseudocount > 0.0 && self.channel.boost_pseudocount > 0.0) {
            return bad("channel pseudocounts must be positive".into());
        }
        if !(self.em.alpha > 0.5 && self.em.alpha <= 1.0) {
            return bad(format!("em.alpha must be in (0.5, 1], got {}", self.em.alpha));
        }
        if self.em.minibatch == 0 || self.em.patience == 0 || self.em.shortest == 0 {
            return bad("em.minibatch, em.patience and em.shortest must be at least 1".into());
        }
        if self.decode.beam == 0 || self.decode.nbest == 0 || self.decode.workers == 0 {
            return bad("decode.beam, decode.nbest and decode.workers must be at least 1".into());
        }
        if self.seq2seq.batch == 0 || self.seq2seq.embedding == 0 || self.seq2seq.hidden == 0 {
            return bad("seq2seq.batch, seq2seq.embedding and seq2seq.hidden must be at least 1".into());
        }
        if !matches!(self.seq2seq.optimizer.as_str(), "adam" | "sgd") {
            return bad(format!("seq2seq.optimizer must be \"adam\" or \"sgd\", got {:?}", self.seq2seq.optimizer));
        }
        self.unmt().noise.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.unmt().schedule.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Reads a config file and resolves its paths. When `UCT_OUTPUT_ROOT`
    /// is set, the output directory is placed under it.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).ctx(|| format!("reading config {}", path.display()))?;
        let mut config = Self::from_toml(&text, &path.display().to_string())?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.paths.resolve(base);
        if let Some(root) = std::env::var_os(OUTPUT_ROOT_VAR) {
            let name = config.paths.output.file_name().map(PathBuf::from).unwrap_or_else(|| "run".into());
            config.paths.output = PathBuf::from(root).join(name);
        }
        Ok(config)
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn em_config(&self, workers: usize) -> EmConfig {
        EmConfig {
            alpha: self.em.alpha,
            minibatch: self.em.minibatch,
            epochs: self.em.epochs,
            patience: self.em.patience,
            delay: DelayBound(self.channel.delay),
            seed: self.em.seed,
            init_noise: self.em.init_noise,
            workers,
        }
    }

    pub fn unmt(&self) -> UnmtConfig {
        let s = &self.seq2seq;
        UnmtConfig {
            model: ModelConfig {
                embedding: s.embedding,
                hidden: s.hidden,
            },
            noise: NoiseConfig {
                drop: s.drop,
                shuffle_window: s.shuffle_window,
            },
            schedule: TrainSchedule {
                anneal_epochs: s.anneal_epochs,
                ae_floor: s.ae_floor,
                patience: s.patience,
                max_epochs: s.max_epochs,
            },
            optimizer: Optimizer {
                method: if s.optimizer == "sgd" { Method::Sgd } else { Method::Adam },
                learning_rate: s.learning_rate,
                clip: s.clip,
                batch: s.batch,
            },
            seed: s.seed,
            workers: self.decode.workers,
            dictionary_epochs: s.dictionary_epochs,
        }
    }
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.source_train,
            &mut self.target_train,
            &mut self.valid_source,
            &mut self.valid_target,
            &mut self.test_source,
            &mut self.test_target,
            &mut self.output,
        ] {
            fix(p);
        }
        self.priors.iter_mut().for_each(fix);
        if let Some(a) = self.addbacks.as_mut() {
            fix(a);
        }
    }

    /// Input files that must exist before any stage runs.
    pub fn inputs(&self) -> Vec<&Path> {
        let mut v: Vec<&Path> = vec![
            &self.source_train,
            &self.target_train,
            &self.valid_source,
            &self.valid_target,
            &self.test_source,
            &self.test_target,
        ];
        v.extend(self.priors.iter().map(PathBuf::as_path));
        v.extend(self.addbacks.as_deref());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[paths]
source_train = "a.src"
target_train = "a.tgt"
valid_source = "v.src"
valid_target = "v.tgt"
test_source = "t.src"
test_target = "t.tgt"
"#;

    #[test]
    fn empty_file_is_all_defaults() {
        let c = ExperimentConfig::from_toml("", "t").unwrap();
        assert_eq!(c.paths, Paths::default());
        assert_eq!(c.channel, ChannelSection::default());
    }

    #[test]
    fn absent_sections_take_defaults() {
        let c = ExperimentConfig::from_toml(MINIMAL, "t").unwrap();
        assert_eq!(c.channel.delay, 2);
        assert_eq!(c.decode.beam, 5);
        assert_eq!(c.decode.nbest, 5);
        assert_eq!(c.seq2seq.patience, 10);
        assert_eq!(c.decode.decoder, DecoderKind::Wfst);
    }

    #[test]
    fn override_and_round_trip() {
        let text = format!("{MINIMAL}\n[channel]\ndelay = 3\n\n[decode]\ndecoder = \"rerank-seq2seq\"\n");
        let c = ExperimentConfig::from_toml(&text, "t").unwrap();
        assert_eq!(c.channel.delay, 3);
        assert_eq!(c.decode.decoder, DecoderKind::RerankSeq2seq);
        let again = ExperimentConfig::from_toml(&c.to_toml(), "t").unwrap();
        assert_eq!(again, c);
        assert_eq!(again.hash(), c.hash());
    }

    #[test]
    fn unknown_key_is_named() {
        let text = format!("{MINIMAL}\n[channel]\ndelya = 3\n");
        let err = ExperimentConfig::from_toml(&text, "cfg.toml").unwrap_err();
        assert_eq!(err.exit_code(), 1);
        let msg = err.to_string();
        assert!(msg.contains("delya") && msg.contains("cfg.toml:"), "{msg}");
    }

    #[test]
    fn type_mismatch_is_rejected() {
        let text = format!("{MINIMAL}\n[decode]\nbeam = \"five\"\n");
        assert!(ExperimentConfig::from_toml(&text, "t").is_err());
        let text = format!("{MINIMAL}\n[decode]\ndecoder = \"beam\"\n");
        assert!(ExperimentConfig::from_toml(&text, "t").is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        let text = format!("{MINIMAL}\n[seq2seq]\ndrop = 1.0\n");
        assert!(matches!(ExperimentConfig::from_toml(&text, "t"), Err(Error::Config(_))));
    }
}
