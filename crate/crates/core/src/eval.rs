//! Error rates, BLEU-4 and the error-analysis tables.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, IoContext, Result};

/// Unit-cost Levenshtein distance.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `dist(h, r) / len(r)` over arbitrary tokens.
pub fn error_rate<T: PartialEq>(h: &[T], r: &[T]) -> Result<f64> {
    if r.is_empty() {
        return Err(Error::InvalidArgument("empty reference".into()));
    }
    Ok(edit_distance(h, r) as f64 / r.len() as f64)
}

pub fn cer(h: &str, r: &str) -> Result<f64> {
    let h: Vec<char> = h.chars().collect();
    let r: Vec<char> = r.chars().collect();
    error_rate(&h, &r)
}

pub fn wer(h: &str, r: &str) -> Result<f64> {
    error_rate(&word_tokenize(h), &word_tokenize(r))
}

/// Corpus-level CER: total distance over total reference length.
pub fn corpus_cer(hyps: &[String], refs: &[String]) -> Result<f64> {
    corpus_rate(hyps, refs, |s| s.chars().map(String::from).collect())
}

pub fn corpus_wer(hyps: &[String], refs: &[String]) -> Result<f64> {
    corpus_rate(hyps, refs, word_tokenize)
}

fn corpus_rate(hyps: &[String], refs: &[String], split: impl Fn(&str) -> Vec<String>) -> Result<f64> {
    check_lengths(hyps, refs)?;
    let (mut dist, mut len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        let (h, r) = (split(h), split(r));
        dist += edit_distance(&h, &r);
        len += r.len();
    }
    if len == 0 {
        return Err(Error::InvalidArgument("empty reference".into()));
    }
    Ok(dist as f64 / len as f64)
}

fn check_lengths<A, B>(hyps: &[A], refs: &[B]) -> Result<()> {
    if hyps.len() != refs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    Ok(())
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || is_mark(c)
}

/// Combining marks and joiners travel with the word they modify.
fn is_mark(c: char) -> bool {
    matches!(c as u32, 0x0300..=0x036F | 0x0483..=0x0489 | 0x0591..=0x05C7 | 0x0610..=0x061A | 0x064B..=0x065F | 0x0900..=0x0903 | 0x093A..=0x094F | 0x0951..=0x0957 | 0x0962..=0x0963 | 0x0C80..=0x0CFF | 0x200C | 0x200D)
}

/// Splits on whitespace, then separates punctuation runs from words. A
/// hyphen or apostrophe between two word characters stays in the word.
pub fn word_tokenize(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in s.split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        let mut cur = String::new();
        let mut cur_word = None;
        for (i, &c) in chars.iter().enumerate() {
            let joiner = matches!(c, '-' | '\'' | '’')
                && i > 0
                && is_word_char(chars[i - 1])
                && chars.get(i + 1).is_some_and(|&n| is_word_char(n));
            let word = is_word_char(c) || joiner;
            if cur_word.is_some_and(|w| w != word) {
                out.push(std::mem::take(&mut cur));
            }
            cur.push(c);
            cur_word = Some(word);
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

fn ngrams(words: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if words.len() >= n {
        for g in words.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-4 in `[0, 100]`, unsmoothed.
pub fn bleu4(hyps: &[String], refs: &[String]) -> Result<f64> {
    check_lengths(hyps, refs)?;
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        let (h, r) = (word_tokenize(h), word_tokenize(r));
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let rc = ngrams(&r, n);
            for (g, c) in ngrams(&h, n) {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if matches.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = (0..4).map(|i| (matches[i] as f64 / totals[i] as f64).ln()).sum::<f64>() / 4.0;
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * log_p.exp())
}

/// One aligned position: `(reference symbol, hypothesis symbol)`, `None`
/// for ε.
pub type AlignedPair<T> = (Option<T>, Option<T>);

/// A minimum-cost alignment. The traceback runs from the end and prefers
/// match/substitution, then deletion, then insertion.
pub fn align<T: PartialEq + Clone>(h: &[T], r: &[T]) -> Vec<AlignedPair<T>> {
    let (n, m) = (r.len(), h.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let mut out = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1]) {
            out.push((Some(r[i - 1].clone()), Some(h[j - 1].clone())));
            i -= 1;
            j -= 1;
        } else if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            out.push((Some(r[i - 1].clone()), None));
            i -= 1;
        } else {
            out.push((None, Some(h[j - 1].clone())));
            j -= 1;
        }
    }
    out.reverse();
    out
}

pub fn align_chars(h: &str, r: &str) -> Vec<AlignedPair<char>> {
    let h: Vec<char> = h.chars().collect();
    let r: Vec<char> = r.chars().collect();
    align(&h, &r)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EditCounts {
    pub matches: usize,
    pub sub: usize,
    pub ins: usize,
    pub del: usize,
}

impl EditCounts {
    pub fn of<T: PartialEq>(alignment: &[AlignedPair<T>]) -> Self {
        let mut e = EditCounts::default();
        for p in alignment {
            match p {
                (Some(a), Some(b)) if a == b => e.matches += 1,
                (Some(_), Some(_)) => e.sub += 1,
                (Some(_), None) => e.del += 1,
                (None, Some(_)) => e.ins += 1,
                (None, None) => {}
            }
        }
        e
    }

    pub fn edits(&self) -> usize {
        self.sub + self.ins + self.del
    }

    pub fn add(&mut self, o: EditCounts) {
        self.matches += o.matches;
        self.sub += o.sub;
        self.ins += o.ins;
        self.del += o.del;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub cer: f64,
    pub wer: f64,
    pub bleu: f64,
    pub char_edits: EditCounts,
    pub word_edits: EditCounts,
    /// Insertions and deletions as a share of all character edits.
    pub insdel_share: f64,
}

/// Counts of `(reference char, hypothesis char)` over all alignments.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfusionMatrix {
    pub counts: BTreeMap<AlignedPair<char>, usize>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    /// Sum of the row for `r` (`None` is the insertion row).
    pub fn row_sum(&self, r: Option<char>) -> usize {
        self.counts.iter().filter(|((a, _), _)| *a == r).map(|(_, c)| c).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WordCerHistogram {
    /// `counts[i]` covers `[edges[i], edges[i + 1])`; the last bin is closed.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// CER above the last edge, plus hypothesis words aligned to nothing.
    pub overflow: usize,
}

impl WordCerHistogram {
    pub fn new(bins: usize, cap: f64) -> Self {
        WordCerHistogram {
            edges: (0..=bins).map(|i| cap * i as f64 / bins as f64).collect(),
            counts: vec![0; bins],
            overflow: 0,
        }
    }

    pub fn add(&mut self, cer: Option<f64>) {
        let cap = *self.edges.last().unwrap();
        match cer {
            Some(c) if c <= cap => {
                let bins = self.counts.len();
                let i = ((c / cap) * bins as f64).floor() as usize;
                self.counts[i.min(bins - 1)] += 1;
            }
            _ => self.overflow += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum::<usize>() + self.overflow
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubstitutionStats {
    /// Word substitution errors, by `(reference word, hypothesis word)`,
    /// most frequent first.
    pub types: Vec<((String, String), usize)>,
    pub total_errors: usize,
    pub top_k: usize,
    /// Share of substitution errors covered by the `top_k` most frequent
    /// types, ties at the cut included.
    pub top_k_coverage: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorProfile {
    pub report: EvalReport,
    pub confusion: ConfusionMatrix,
    pub histogram: WordCerHistogram,
    pub substitutions: SubstitutionStats,
    /// Share of hypothesis word tokens found in the target training
    /// vocabulary; `None` when no vocabulary was given.
    pub in_vocab_rate: Option<f64>,
}

/// Aggregates metrics and error tables over `(hypothesis, reference)`
/// pairs.
pub fn error_profile(pairs: &[(String, String)], vocab: Option<&HashSet<String>>, top_k: usize) -> Result<ErrorProfile> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no sentence pairs to analyze".into()));
    }
    let hyps: Vec<String> = pairs.iter().map(|p| p.0.clone()).collect();
    let refs: Vec<String> = pairs.iter().map(|p| p.1.clone()).collect();
    let mut confusion = ConfusionMatrix::default();
    let mut histogram = WordCerHistogram::new(10, 1.0);
    let mut char_edits = EditCounts::default();
    let mut word_edits = EditCounts::default();
    let mut types: HashMap<(String, String), usize> = HashMap::new();
    let (mut hyp_words, mut in_vocab) = (0usize, 0usize);
    for (h, r) in pairs {
        let ca = align_chars(h, r);
        char_edits.add(EditCounts::of(&ca));
        for p in ca {
            *confusion.counts.entry(p).or_insert(0) += 1;
        }
        let (hw, rw) = (word_tokenize(h), word_tokenize(r));
        let wa = align(&hw, &rw);
        word_edits.add(EditCounts::of(&wa));
        for (rword, hword) in wa {
            histogram.add(match (&rword, &hword) {
                (Some(rr), Some(hh)) => Some(cer(hh, rr)?),
                (Some(_), None) => Some(1.0),
                _ => None,
            });
            if let (Some(rr), Some(hh)) = (rword, hword) {
                if rr != hh {
                    *types.entry((rr, hh)).or_insert(0) += 1;
                }
            }
        }
        if let Some(v) = vocab {
            hyp_words += hw.len();
            in_vocab += hw.iter().filter(|w| v.contains(*w)).count();
        }
    }
    let mut types: Vec<((String, String), usize)> = types.into_iter().collect();
    types.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let total_errors: usize = types.iter().map(|t| t.1).sum();
    let covered: usize = match types.get(top_k.saturating_sub(1)) {
        Some(&(_, cut)) if top_k > 0 => types.iter().take_while(|t| t.1 >= cut).map(|t| t.1).sum(),
        _ if top_k > 0 => total_errors,
        _ => 0,
    };
    let edits = char_edits.edits();
    let report = EvalReport {
        cer: corpus_cer(&hyps, &refs)?,
        wer: corpus_wer(&hyps, &refs)?,
        bleu: bleu4(&hyps, &refs)?,
        char_edits,
        word_edits,
        insdel_share: if edits == 0 {
            0.0
        } else {
            (char_edits.ins + char_edits.del) as f64 / edits as f64
        },
    };
    Ok(ErrorProfile {
        report,
        confusion,
        histogram,
        substitutions: SubstitutionStats {
            types,
            total_errors,
            top_k,
            top_k_coverage: if total_errors == 0 {
                1.0
            } else {
                covered as f64 / total_errors as f64
            },
        },
        in_vocab_rate: vocab.map(|_| {
            if hyp_words == 0 {
                0.0
            } else {
                in_vocab as f64 / hyp_words as f64
            }
        }),
    })
}

/// Six significant digits.
pub fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let mag = x.abs().log10().floor() as i32;
    if !(-5..=15).contains(&mag) {
        return format!("{x:.5e}");
    }
    let decimals = (5 - mag).max(0) as usize;
    format!("{x:.decimals$}")
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) || s.starts_with(' ') || s.ends_with(' ') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn sym(c: Option<char>) -> String {
    match c {
        Some(c) => csv_field(&c.to_string()),
        None => "<eps>".into(),
    }
}

impl ErrorProfile {
    pub fn metrics_csv(&self, label: &str) -> String {
        let r = &self.report;
        let mut out = String::from("decoder,cer,wer,bleu,char_sub,char_ins,char_del,word_sub,word_ins,word_del,insdel_share,in_vocab_rate,top_k_coverage\n");
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            csv_field(label),
            sig6(r.cer),
            sig6(r.wer),
            sig6(r.bleu),
            r.char_edits.sub,
            r.char_edits.ins,
            r.char_edits.del,
            r.word_edits.sub,
            r.word_edits.ins,
            r.word_edits.del,
            sig6(r.insdel_share),
            self.in_vocab_rate.map(sig6).unwrap_or_default(),
            sig6(self.substitutions.top_k_coverage),
        );
        out
    }

    pub fn confusion_csv(&self) -> String {
        let mut out = String::from("reference,hypothesis,count\n");
        for (&(r, h), c) in &self.confusion.counts {
            let _ = writeln!(out, "{},{},{c}", sym(r), sym(h));
        }
        out
    }

    pub fn histogram_csv(&self) -> String {
        let h = &self.histogram;
        let mut out = String::from("lower,upper,count\n");
        for (i, c) in h.counts.iter().enumerate() {
            let _ = writeln!(out, "{},{},{c}", sig6(h.edges[i]), sig6(h.edges[i + 1]));
        }
        let _ = writeln!(out, "{},inf,{}", sig6(*h.edges.last().unwrap()), h.overflow);
        out
    }

    pub fn subst_types_csv(&self) -> String {
        let mut out = String::from("reference,hypothesis,count\n");
        for ((r, h), c) in &self.substitutions.types {
            let _ = writeln!(out, "{},{},{c}", csv_field(r), csv_field(h));
        }
        out
    }

    pub fn summary(&self, label: &str) -> String {
        let r = &self.report;
        let mut s = String::new();
        let _ = writeln!(s, "decoder: {label}");
        let _ = writeln!(s, "CER: {}  WER: {}  BLEU: {}", sig6(r.cer), sig6(r.wer), sig6(r.bleu));
        let _ = writeln!(
            s,
            "char edits: {} sub, {} ins, {} del ({} ins+del share)",
            r.char_edits.sub,
            r.char_edits.ins,
            r.char_edits.del,
            sig6(r.insdel_share)
        );
        let _ = writeln!(
            s,
            "word substitution types: {} covering {} errors; top {} cover {}",
            self.substitutions.types.len(),
            self.substitutions.total_errors,
            self.substitutions.top_k,
            sig6(self.substitutions.top_k_coverage)
        );
        if let Some(v) = self.in_vocab_rate {
            let _ = writeln!(s, "in-vocabulary rate: {}", sig6(v));
        }
        s
    }

    /// Writes metrics.csv, confusion.csv, histogram.csv, subst_types.csv
    /// and summary.txt into `dir`.
    pub fn write_reports(&self, dir: &Path, label: &str) -> Result<()> {
        fs::create_dir_all(dir).ctx(|| format!("creating {}", dir.display()))?;
        for (name, text) in [
            ("metrics.csv", self.metrics_csv(label)),
            ("confusion.csv", self.confusion_csv()),
            ("histogram.csv", self.histogram_csv()),
            ("subst_types.csv", self.subst_types_csv()),
            ("summary.txt", self.summary(label)),
        ] {
            let path = dir.join(name);
            fs::write(&path, text).ctx(|| format!("writing {}", path.display()))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn cer_examples() {
        assert_eq!(cer("abc", "abc").unwrap(), 0.0);
        assert_eq!(cer("", "ab").unwrap(), 1.0);
        assert!((cer("kot", "kit").unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(cer("a", "").is_err());
        assert_eq!(wer("a b c", "a x c").unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn tokenizer_rules() {
        assert_eq!(word_tokenize("a, b"), s(&["a", ",", "b"]));
        assert_eq!(word_tokenize("bor'by"), s(&["bor'by"]));
        assert_eq!(word_tokenize("svako ima pravo."), s(&["svako", "ima", "pravo", "."]));
        assert_eq!(word_tokenize("well-known \"quote\"!"), s(&["well-known", "\"", "quote", "\"!"]));
        assert_eq!(word_tokenize("-x- 'y"), s(&["-", "x", "-", "'", "y"]));
    }

    #[test]
    fn bleu_identity_and_zero() {
        let c = s(&["the cat sat on the mat", "a b c d e"]);
        assert!((bleu4(&c, &c).unwrap() - 100.0).abs() < 1e-9);
        let h = s(&["w x y z"]);
        let r = s(&["w x q z"]);
        assert_eq!(bleu4(&h, &r).unwrap(), 0.0);
        assert!(bleu4(&h, &c).is_err());
    }

    #[test]
    fn alignment_prefers_insertion_of_b() {
        let a = align_chars("abc", "ac");
        assert_eq!(a, vec![(Some('a'), Some('a')), (None, Some('b')), (Some('c'), Some('c'))]);
        let e = EditCounts::of(&a);
        assert_eq!((e.ins, e.edits()), (1, 1));
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(sig6(0.123456789), "0.123457");
        assert_eq!(sig6(34.5), "34.5000");
        assert_eq!(sig6(100.0), "100.000");
        assert_eq!(sig6(0.0), "0");
    }

    #[test]
    fn identical_corpora_profile() {
        let pairs = vec![("ab cd".to_string(), "ab cd".to_string())];
        let p = error_profile(&pairs, None, 1000).unwrap();
        assert!(p.confusion.counts.keys().all(|(r, h)| r == h));
        assert_eq!(p.histogram.counts[0], 2);
        assert_eq!(p.histogram.total(), 2);
        assert_eq!(p.report.cer, 0.0);
        assert_eq!(p.substitutions.top_k_coverage, 1.0);
    }

    #[test]
    fn hand_tallied_confusion() {
        // ref "kit a", hyp "kot": k=k, i→o, t=t, ' ' deleted, a deleted.
        let pairs = vec![("kot".to_string(), "kit a".to_string())];
        let p = error_profile(&pairs, None, 1).unwrap();
        let c = &p.confusion.counts;
        assert_eq!(c[&(Some('i'), Some('o'))], 1);
        assert_eq!(c[&(Some(' '), None)], 1);
        assert_eq!(c[&(Some('a'), None)], 1);
        assert_eq!(p.confusion.total(), 5);
        assert_eq!(p.report.char_edits, EditCounts { matches: 2, sub: 1, ins: 0, del: 2 });
        // Words tie between two alignments; the traceback substitutes at
        // the end first, so "a"→"kot" and "kit" is deleted.
        assert_eq!(p.substitutions.types, vec![(("a".to_string(), "kot".to_string()), 1)]);
        assert_eq!(p.histogram.total(), 2);
    }
}
