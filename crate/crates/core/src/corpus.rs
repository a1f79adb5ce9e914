//! Text ingestion: Unicode character tokenization, alphabet induction and
//! UNK filtering.
//!
//! Every sequence is lowercased and split into Unicode scalar values, so
//! combining marks and format characters such as ZWJ are ordinary tokens.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, IoContext, Result};
use crate::fst::Label;

/// Label reserved for the empty string.
pub const EPS: Label = 0;
/// Label reserved for filtered-out characters.
pub const UNK: Label = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Token {
    Char(char),
    Unk,
}

/// A tokenized sentence.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Sequence {
    pub tokens: Vec<Token>,
    pub raw: String,
}

impl Sequence {
    pub fn from_tokens(tokens: Vec<Token>) -> Self {
        let raw = tokens
            .iter()
            .filter_map(|t| match t {
                Token::Char(c) => Some(*c),
                Token::Unk => None,
            })
            .collect();
        Sequence { tokens, raw }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Concatenates the characters, dropping UNK tokens.
    pub fn detokenize(&self) -> String {
        self.tokens
            .iter()
            .filter_map(|t| match t {
                Token::Char(c) => Some(*c),
                Token::Unk => None,
            })
            .collect()
    }
}

impl fmt::Display for Sequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.detokenize())
    }
}

/// Lowercases `text` and splits it into codepoints.
pub fn tokenize(text: &str) -> Sequence {
    let lowered = text.to_lowercase();
    Sequence {
        tokens: lowered.chars().map(Token::Char).collect(),
        raw: lowered,
    }
}

/// Like [`tokenize`] but validates the bytes first.
pub fn tokenize_bytes(bytes: &[u8]) -> Result<Sequence> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Utf8 {
        offset: e.valid_up_to(),
    })?;
    Ok(tokenize(text))
}

/// Ordered symbol table. Ids 0 and 1 are ε and UNK; observed characters
/// start at id 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alphabet {
    chars: Vec<char>,
    index: HashMap<char, Label>,
}

impl Alphabet {
    pub fn new(chars: impl IntoIterator<Item = char>) -> Self {
        let mut out = Alphabet {
            chars: Vec::new(),
            index: HashMap::new(),
        };
        for c in chars {
            out.push(c);
        }
        out
    }

    fn push(&mut self, c: char) {
        if !self.index.contains_key(&c) {
            self.index.insert(c, self.chars.len() as Label + 2);
            self.chars.push(c);
        }
    }

    /// Number of ids, including ε and UNK.
    pub fn len(&self) -> usize {
        self.chars.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    /// Ids of the real symbols plus UNK, i.e. everything a sequence may hold.
    pub fn symbol_ids(&self) -> impl Iterator<Item = Label> + '_ {
        UNK..self.len() as Label
    }

    pub fn id(&self, c: char) -> Option<Label> {
        self.index.get(&c).copied()
    }

    pub fn contains(&self, c: char) -> bool {
        self.index.contains_key(&c)
    }

    pub fn token(&self, id: Label) -> Option<Token> {
        match id {
            EPS => None,
            UNK => Some(Token::Unk),
            _ => self.chars.get(id as usize - 2).map(|&c| Token::Char(c)),
        }
    }

    pub fn label(&self, t: Token) -> Label {
        match t {
            Token::Char(c) => self.id(c).unwrap_or(UNK),
            Token::Unk => UNK,
        }
    }

    /// Maps a sequence to labels; characters outside the alphabet map to UNK.
    pub fn encode(&self, seq: &Sequence) -> Vec<Label> {
        seq.tokens.iter().map(|&t| self.label(t)).collect()
    }

    pub fn decode(&self, ids: &[Label]) -> Sequence {
        Sequence::from_tokens(ids.iter().filter_map(|&i| self.token(i)).collect())
    }

    /// Display form of a label: the character, `<unk>` or `<eps>`.
    pub fn symbol_name(&self, id: Label) -> String {
        match self.token(id) {
            Some(Token::Char(c)) => c.to_string(),
            Some(Token::Unk) => "<unk>".into(),
            None => "<eps>".into(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).ctx(|| format!("writing {}", path.display()))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("<eps>\n<unk>\n");
        for c in &self.chars {
            out.push_str(&format!("U+{:04X}\n", *c as u32));
        }
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).ctx(|| format!("reading {}", path.display()))?;
        Self::from_text(&text, &path.display().to_string())
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        for expect in ["<eps>", "<unk>"] {
            match lines.next() {
                Some((_, l)) if l.trim() == expect => {}
                Some((n, l)) => {
                    return Err(Error::parse(origin, n + 1, format!("expected {expect}, got {l:?}")))
                }
                None => return Err(Error::parse(origin, 0, "truncated alphabet file")),
            }
        }
        let mut alphabet = Alphabet::new([]);
        for (n, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let c = parse_codepoint(line).ok_or_else(|| Error::parse(origin, n + 1, format!("bad codepoint {line:?}")))?;
            if alphabet.contains(c) {
                return Err(Error::parse(origin, n + 1, format!("duplicate codepoint {line}")));
            }
            alphabet.push(c);
        }
        Ok(alphabet)
    }
}

pub(crate) fn parse_codepoint(s: &str) -> Option<char> {
    let hex = s.strip_prefix("U+").or_else(|| s.strip_prefix("u+"))?;
    char::from_u32(u32::from_str_radix(hex, 16).ok()?)
}

/// Keeps the most frequent characters until they cover `coverage` of the
/// training tokens, then adds `addbacks`. Characters tied with the last one
/// kept are all kept.
pub fn induce_alphabet(
    train: &[Sequence],
    coverage: f64,
    addbacks: &BTreeSet<char>,
) -> Result<Alphabet> {
    if !(coverage > 0.0 && coverage <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "coverage must be in (0, 1], got {coverage}"
        )));
    }
    let mut counts: HashMap<char, u64> = HashMap::new();
    for seq in train {
        for t in &seq.tokens {
            if let Token::Char(c) = t {
                *counts.entry(*c).or_default() += 1;
            }
        }
    }
    let total: u64 = counts.values().sum();
    if total == 0 {
        return Err(Error::EmptyCorpus);
    }
    let mut ranked: Vec<(char, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));

    let threshold = coverage * total as f64 - 1e-9;
    let mut kept = Vec::new();
    let mut cum = 0u64;
    let mut boundary = None;
    for &(c, n) in &ranked {
        if boundary.is_some_and(|b| n < b) {
            break;
        }
        kept.push(c);
        cum += n;
        if boundary.is_none() && cum as f64 >= threshold {
            boundary = Some(n);
        }
    }
    let mut alphabet = Alphabet::new(kept);
    for &c in addbacks {
        alphabet.push(c);
    }
    Ok(alphabet)
}

/// Replaces characters outside `alphabet` with UNK, unless the sequence is
/// the target side of the test split.
pub fn apply_unk(seq: &Sequence, alphabet: &Alphabet, is_target_test: bool) -> Sequence {
    if is_target_test {
        return seq.clone();
    }
    let tokens = seq
        .tokens
        .iter()
        .map(|&t| match t {
            Token::Char(c) if alphabet.contains(c) => t,
            _ => Token::Unk,
        })
        .collect();
    Sequence {
        tokens,
        raw: seq.raw.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitRole {
    TrainSource,
    TrainTarget,
    Validation,
    Test,
}

#[derive(Debug, Clone)]
pub struct CorpusSplit {
    pub role: SplitRole,
    pub sequences: Vec<Sequence>,
}

/// Aligned source/target sentences (validation and test).
#[derive(Debug, Clone)]
pub struct ParallelSplit {
    pub role: SplitRole,
    pub source: Vec<Sequence>,
    pub target: Vec<Sequence>,
}

impl ParallelSplit {
    pub fn new(role: SplitRole, source: Vec<Sequence>, target: Vec<Sequence>) -> Result<Self> {
        if source.len() != target.len() {
            return Err(Error::InvalidArgument(format!(
                "parallel split has {} source and {} target sentences",
                source.len(),
                target.len()
            )));
        }
        Ok(ParallelSplit {
            role,
            source,
            target,
        })
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }
}

/// Reads a one-sentence-per-line UTF-8 file.
pub fn read_corpus(path: &Path) -> Result<Vec<Sequence>> {
    let bytes = fs::read(path).ctx(|| format!("reading {}", path.display()))?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: bytes[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count() + 1,
        msg: format!("invalid UTF-8 at byte offset {}", e.valid_up_to()),
    })?;
    Ok(text.lines().map(tokenize).collect())
}

pub fn write_corpus(path: &Path, seqs: &[Sequence]) -> Result<()> {
    let mut out = String::new();
    for s in seqs {
        out.push_str(&s.detokenize());
        out.push('\n');
    }
    fs::write(path, out).ctx(|| format!("writing {}", path.display()))
}

/// Reads an add-back file: one character (or `U+XXXX`) per line, `#` comments.
pub fn read_addbacks(path: &Path) -> Result<BTreeSet<char>> {
    let text = fs::read_to_string(path).ctx(|| format!("reading {}", path.display()))?;
    let mut out = BTreeSet::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches(['\r', '\n']);
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let c = parse_codepoint(line.trim())
            .or_else(|| {
                let mut it = line.chars();
                match (it.next(), it.next()) {
                    (Some(c), None) => Some(c),
                    _ => None,
                }
            })
            .ok_or_else(|| Error::parse(path.display().to_string(), n + 1, format!("expected one character, got {line:?}")))?;
        out.extend(c.to_lowercase());
    }
    Ok(out)
}

/// The `n` shortest sequences, ties broken by corpus order.
pub fn shortest_sequences(seqs: &[Sequence], n: usize) -> Vec<Sequence> {
    let mut idx: Vec<usize> = (0..seqs.len()).collect();
    idx.sort_by_key(|&i| (seqs[i].len(), i));
    idx.truncate(n);
    idx.into_iter().map(|i| seqs[i].clone()).collect()
}
