//! Character n-gram language model with Witten–Bell interpolation, and its
//! compilation into a backoff acceptor.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use crate::corpus::{Alphabet, EPS};
use crate::error::{Error, Result};
use crate::fst::{Arc, Label, StateId, Wfst};

/// Marks the sentence start inside a context. ε never occurs in sequences,
/// so its label is free for this.
const BOS: Label = EPS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Smoothing {
    /// Maximum likelihood with backoff only for unseen contexts.
    None,
    #[default]
    WittenBell,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Event {
    Symbol(Label),
    Eos,
}

#[derive(Debug, Clone, Default)]
struct ContextCounts {
    counts: BTreeMap<Event, u64>,
    total: u64,
}

impl ContextCounts {
    fn distinct(&self) -> u64 {
        self.counts.len() as u64
    }
}

#[derive(Debug, Clone)]
pub struct NGramLm {
    order: usize,
    smoothing: Smoothing,
    /// Symbol labels the model predicts, excluding EOS.
    vocab: Vec<Label>,
    symbols: usize,
    contexts: HashMap<Vec<Label>, ContextCounts>,
}

/// Trains an order-`order` model on label sequences drawn from `alphabet`.
pub fn train_lm(corpus: &[Vec<Label>], alphabet: &Alphabet, order: usize, smoothing: Smoothing) -> Result<NGramLm> {
    if order < 1 {
        return Err(Error::InvalidArgument("n-gram order must be at least 1".into()));
    }
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut contexts: HashMap<Vec<Label>, ContextCounts> = HashMap::new();
    let h = order - 1;
    for sent in corpus {
        let mut padded = Vec::with_capacity(sent.len() + 1);
        padded.push(BOS);
        padded.extend_from_slice(sent);
        for i in 0..=sent.len() {
            let event = match sent.get(i) {
                Some(&l) => Event::Symbol(l),
                None => Event::Eos,
            };
            // History available before position i, at most `h` symbols.
            let hist = &padded[(i + 1).saturating_sub(h)..=i];
            for k in 0..=hist.len().min(h) {
                let ctx = &hist[hist.len() - k..];
                let c = contexts.entry(ctx.to_vec()).or_default();
                *c.counts.entry(event).or_default() += 1;
                c.total += 1;
            }
        }
    }
    Ok(NGramLm {
        order,
        smoothing,
        vocab: alphabet.symbol_ids().collect(),
        symbols: alphabet.len(),
        contexts,
    })
}

impl NGramLm {
    pub fn order(&self) -> usize {
        self.order
    }

    /// Number of outcomes: every symbol plus EOS.
    fn outcomes(&self) -> usize {
        self.vocab.len() + 1
    }

    /// p(event | context). Contexts longer than `order - 1` are truncated.
    pub fn prob(&self, event: Event, context: &[Label]) -> f64 {
        let h = self.order - 1;
        let ctx = &context[context.len().saturating_sub(h)..];
        self.prob_rec(event, ctx)
    }

    fn prob_rec(&self, event: Event, ctx: &[Label]) -> f64 {
        let lower = || {
            if ctx.is_empty() {
                1.0 / self.outcomes() as f64
            } else {
                self.prob_rec(event, &ctx[1..])
            }
        };
        let Some(cc) = self.contexts.get(ctx) else {
            return lower();
        };
        let c = cc.counts.get(&event).copied().unwrap_or(0) as f64;
        let n = cc.total as f64;
        match self.smoothing {
            Smoothing::None => c / n,
            Smoothing::WittenBell => {
                let t = cc.distinct() as f64;
                (c + t * lower()) / (n + t)
            }
        }
    }

    /// Mass reserved for the lower order in `ctx`: p(w|ctx) = α·p(w|ctx')
    /// for every w unseen in `ctx`.
    pub fn backoff(&self, ctx: &[Label]) -> f64 {
        match (self.smoothing, self.contexts.get(ctx)) {
            (_, None) => 1.0,
            (Smoothing::None, Some(_)) => 0.0,
            (Smoothing::WittenBell, Some(cc)) => {
                let t = cc.distinct() as f64;
                t / (cc.total as f64 + t)
            }
        }
    }

    /// Chain-rule negative log-probability of `labels` followed by EOS.
    pub fn score(&self, labels: &[Label]) -> f64 {
        let mut ctx = vec![BOS];
        let mut total = 0.0;
        for &l in labels {
            total -= self.prob(Event::Symbol(l), &ctx).ln();
            ctx.push(l);
        }
        total - self.prob(Event::Eos, &ctx).ln()
    }

    /// Per-symbol perplexity over `corpus`, counting EOS.
    pub fn perplexity(&self, corpus: &[Vec<Label>]) -> f64 {
        let nll: f64 = corpus.iter().map(|s| self.score(s)).sum();
        let n: usize = corpus.iter().map(|s| s.len() + 1).sum();
        (nll / n as f64).exp()
    }

    /// Whether every n-gram of `labels` (with BOS/EOS, at full available
    /// order) was seen in training, so no backoff is needed to score it.
    pub fn is_backoff_free(&self, labels: &[Label]) -> bool {
        let h = self.order - 1;
        let mut padded = vec![BOS];
        padded.extend_from_slice(labels);
        (0..=labels.len()).all(|i| {
            let event = labels.get(i).map_or(Event::Eos, |&l| Event::Symbol(l));
            let ctx = &padded[(i + 1).saturating_sub(h)..=i];
            self.contexts.get(ctx).is_some_and(|c| c.counts.contains_key(&event))
        })
    }

    fn sorted_contexts(&self) -> Vec<&Vec<Label>> {
        let mut ctxs: Vec<&Vec<Label>> = self.contexts.keys().collect();
        ctxs.sort_by(|a, b| a.len().cmp(&b.len()).then(a.cmp(b)));
        ctxs
    }

    /// Backoff acceptor: one state per seen context. Seen symbols get direct
    /// arcs, everything else is reached through an ε-arc to the shorter
    /// context weighted by the backoff mass. Final weights are the exact
    /// EOS probabilities.
    ///
    /// The ε-arcs are also available where a direct arc exists, so the
    /// acceptor over-approximates: it is exact in the tropical semiring for
    /// strings whose n-grams were all seen, and otherwise an upper bound on
    /// the probability.
    pub fn compile(&self) -> Wfst {
        let mut fst = Wfst::new(self.symbols, self.symbols);
        let ctxs = self.sorted_contexts();
        let mut state_of: HashMap<&[Label], StateId> = HashMap::new();
        if !self.contexts.contains_key(&Vec::new()) {
            // Only possible for an untrained model; keep a root anyway.
            state_of.insert(&[], fst.add_state());
        }
        for c in &ctxs {
            state_of.insert(c.as_slice(), fst.add_state());
        }
        let h = self.order - 1;
        let next_state = |ctx: &[Label], l: Label| -> StateId {
            let mut cand: Vec<Label> = ctx.to_vec();
            cand.push(l);
            let mut from = cand.len().saturating_sub(h);
            loop {
                if let Some(&s) = state_of.get(&cand[from..]) {
                    return s;
                }
                from += 1;
            }
        };
        let start_ctx: &[Label] = if h == 0 { &[] } else { &[BOS] };
        fst.set_start(state_of[start_ctx]);

        for (&ctx, &s) in &state_of {
            fst.set_final(s, -self.prob(Event::Eos, ctx).ln());
            if ctx.is_empty() {
                for &l in &self.vocab {
                    let w = -self.prob(Event::Symbol(l), ctx).ln();
                    if w.is_finite() {
                        fst.add_arc(s, Arc::new(l, l, w, next_state(ctx, l)));
                    }
                }
                continue;
            }
            if let Some(cc) = self.contexts.get(ctx) {
                for ev in cc.counts.keys() {
                    if let Event::Symbol(l) = *ev {
                        let w = -self.prob(*ev, ctx).ln();
                        fst.add_arc(s, Arc::new(l, l, w, next_state(ctx, l)));
                    }
                }
            }
            let alpha = self.backoff(ctx);
            if alpha > 0.0 {
                fst.add_arc(s, Arc::new(EPS, EPS, -alpha.ln(), state_of[&ctx[1..]]));
            }
        }
        sort_arcs(&mut fst);
        fst
    }

    /// ARPA-style listing with log10 probabilities and backoff weights.
    /// Symbols are written as `U+XXXX`, `<unk>`, `<s>` and `</s>`.
    pub fn to_arpa(&self, alphabet: &Alphabet) -> String {
        let name = |l: Label| -> String {
            match l {
                BOS => "<s>".into(),
                crate::corpus::UNK => "<unk>".into(),
                _ => match alphabet.token(l) {
                    Some(crate::corpus::Token::Char(c)) => format!("U+{:04X}", c as u32),
                    _ => format!("#{l}"),
                },
            }
        };
        let mut sections: Vec<Vec<String>> = vec![Vec::new(); self.order];
        // Unigrams cover the whole vocabulary.
        for &l in &self.vocab {
            let p = self.prob(Event::Symbol(l), &[]);
            let bo = self.contexts.get(&vec![l]).map(|_| self.backoff(&[l]));
            sections[0].push(arpa_line(p, &name(l), bo));
        }
        sections[0].push(arpa_line(self.prob(Event::Eos, &[]), "</s>", None));
        if self.order > 1 {
            sections[0].push(arpa_line(0.0, "<s>", Some(self.backoff(&[BOS]))));
        }
        for ctx in self.sorted_contexts() {
            if ctx.is_empty() {
                continue;
            }
            let cc = &self.contexts[ctx];
            let prefix: Vec<String> = ctx.iter().map(|&l| name(l)).collect();
            for ev in cc.counts.keys() {
                let p = self.prob(*ev, ctx);
                let (word, bo) = match *ev {
                    Event::Symbol(l) => {
                        let mut next = ctx.clone();
                        next.push(l);
                        (name(l), self.contexts.get(&next).map(|_| self.backoff(&next)))
                    }
                    Event::Eos => ("</s>".to_string(), None),
                };
                let gram = format!("{} {}", prefix.join(" "), word);
                sections[ctx.len()].push(arpa_line(p, &gram, bo));
            }
        }
        let mut out = String::from("\\data\\\n");
        for (i, s) in sections.iter().enumerate() {
            let _ = writeln!(out, "ngram {}={}", i + 1, s.len());
        }
        for (i, s) in sections.iter().enumerate() {
            let _ = writeln!(out, "\n\\{}-grams:", i + 1);
            for line in s {
                out.push_str(line);
                out.push('\n');
            }
        }
        out.push_str("\n\\end\\\n");
        out
    }
}

fn arpa_line(p: f64, gram: &str, backoff: Option<f64>) -> String {
    // The BOS unigram is never predicted; ARPA convention writes -99.
    let lp = if gram == "<s>" { -99.0 } else { p.log10() };
    match backoff {
        Some(b) => format!("{lp:.6}\t{gram}\t{:.6}", b.log10()),
        None => format!("{lp:.6}\t{gram}"),
    }
}

fn sort_arcs(fst: &mut Wfst) {
    let mut sorted = Wfst::new(fst.input_symbols(), fst.output_symbols());
    sorted.add_states(fst.num_states());
    if let Some(s) = fst.start() {
        sorted.set_start(s);
    }
    for s in fst.states() {
        let mut arcs = fst.arcs(s).to_vec();
        arcs.sort_by_key(|a| (a.ilabel, a.nextstate));
        for a in arcs {
            sorted.add_arc(s, a);
        }
        if fst.is_final(s) {
            sorted.set_final(s, fst.final_weight(s));
        }
    }
    *fst = sorted;
}
