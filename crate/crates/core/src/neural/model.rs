use std::collections::HashMap;
use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Grads, Tape, Var};
use crate::corpus::{parse_codepoint, Alphabet, UNK};
use crate::error::{Error, IoContext, Result};
use crate::fst::Label;

/// Joint id of end-of-sequence, also used for padding.
pub const EOS_ID: usize = 0;
const UNK_ID: usize = 3;
const NEG: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    fn index(self) -> usize {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }

    fn tag(self) -> usize {
        1 + self.index()
    }

    pub fn other(self) -> Domain {
        match self {
            Domain::Source => Domain::Target,
            Domain::Target => Domain::Source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Direction {
    pub from: Domain,
    pub to: Domain,
}

impl Direction {
    pub const SRC_TO_TGT: Direction = Direction {
        from: Domain::Source,
        to: Domain::Target,
    };
    pub const TGT_TO_SRC: Direction = Direction {
        from: Domain::Target,
        to: Domain::Source,
    };
    pub const SRC_TO_SRC: Direction = Direction {
        from: Domain::Source,
        to: Domain::Source,
    };
    pub const TGT_TO_TGT: Direction = Direction {
        from: Domain::Target,
        to: Domain::Target,
    };
}

/// Codepoint-keyed vocabulary shared by both domains: EOS, two domain
/// tags, UNK, then every character of either alphabet.
#[derive(Debug, Clone, PartialEq)]
pub struct JointVocab {
    alphabets: [Alphabet; 2],
    chars: Vec<char>,
    /// Domain label to joint id; entry 0 (ε) maps to EOS.
    to_joint: [Vec<usize>; 2],
    /// Additive output masks, `1 × len`.
    masks: [Array2<f64>; 2],
}

impl JointVocab {
    pub fn new(source: &Alphabet, target: &Alphabet) -> Self {
        let mut chars: Vec<char> = Vec::new();
        let mut index: HashMap<char, usize> = HashMap::new();
        for &c in source.chars().iter().chain(target.chars()) {
            if !index.contains_key(&c) {
                index.insert(c, 4 + chars.len());
                chars.push(c);
            }
        }
        let len = 4 + chars.len();
        let alphabets = [source.clone(), target.clone()];
        let mut to_joint: [Vec<usize>; 2] = Default::default();
        let mut masks = [Array2::from_elem((1, len), NEG), Array2::from_elem((1, len), NEG)];
        for d in 0..2 {
            let a = &alphabets[d];
            to_joint[d] = vec![EOS_ID; a.len()];
            to_joint[d][UNK as usize] = UNK_ID;
            for &c in a.chars() {
                let l = a.id(c).expect("own char");
                to_joint[d][l as usize] = index[&c];
            }
            masks[d][[0, EOS_ID]] = 0.0;
            for &j in &to_joint[d][1..] {
                masks[d][[0, j]] = 0.0;
            }
        }
        JointVocab {
            alphabets,
            chars,
            to_joint,
            masks,
        }
    }

    pub fn len(&self) -> usize {
        4 + self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn alphabet(&self, d: Domain) -> &Alphabet {
        &self.alphabets[d.index()]
    }

    /// Size of the domain's label space; label 0 stands for EOS in
    /// distributions.
    pub fn labels(&self, d: Domain) -> usize {
        self.alphabets[d.index()].len()
    }

    fn joint(&self, d: Domain, l: Label) -> usize {
        self.to_joint[d.index()].get(l as usize).copied().unwrap_or(UNK_ID)
    }

    fn mask(&self, d: Domain) -> &Array2<f64> {
        &self.masks[d.index()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub embedding: usize,
    pub hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embedding: 32,
            hidden: 64,
        }
    }
}

// Parameter slots.
const EMB: usize = 0;
const ENC_W: usize = 1;
const ENC_B: usize = 2;
const DEC_W: usize = 3;
const DEC_B: usize = 4;
const ATT_W: usize = 5;
const COMB_W: usize = 6;
const COMB_B: usize = 7;
const OUT_W: usize = 8;
const OUT_B: usize = 9;
const ENC_BW_W: usize = 10;
const ENC_BW_B: usize = 11;
pub const N_PARAMS: usize = 12;

/// Character encoder–decoder: a bidirectional LSTM encoder, an LSTM
/// decoder, general (bilinear) attention and input feeding. Inputs are prefixed with their
/// domain tag; decoding starts from the output domain's tag.
#[derive(Debug, Clone, PartialEq)]
pub struct Seq2SeqModel {
    pub config: ModelConfig,
    pub vocab: JointVocab,
    pub params: Vec<Array2<f64>>,
    pub seed: u64,
}

/// Encoder output for one sequence.
#[derive(Debug, Clone)]
pub struct Memory {
    states: Array2<f64>,
    keys: Array2<f64>,
    h: Array1<f64>,
    c: Array1<f64>,
}

/// Decoder state after some prefix, holding the distribution over the
/// next output.
#[derive(Debug, Clone)]
pub struct DecoderState {
    h: Array1<f64>,
    c: Array1<f64>,
    feed: Array1<f64>,
    /// `-log p` over the output domain's labels; index 0 is EOS.
    neg_log_probs: Vec<f64>,
}

impl DecoderState {
    pub fn neg_log_probs(&self) -> &[f64] {
        &self.neg_log_probs
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn lstm(w: &Array2<f64>, b: &Array2<f64>, input: &Array1<f64>, c: &Array1<f64>) -> (Array1<f64>, Array1<f64>) {
    let hd = c.len();
    let gates = vecmat(input, w) + b.row(0);
    let i = gates.slice(s![0..hd]).mapv(sigmoid);
    let f = gates.slice(s![hd..2 * hd]).mapv(sigmoid);
    let g = gates.slice(s![2 * hd..3 * hd]).mapv(f64::tanh);
    let o = gates.slice(s![3 * hd..]).mapv(sigmoid);
    let c2 = &i * &g + &f * c;
    let h2 = &o * &c2.mapv(f64::tanh);
    (h2, c2)
}

/// `v · m`, routed through the matrix product kernel.
fn vecmat(v: &Array1<f64>, m: &Array2<f64>) -> Array1<f64> {
    v.view().insert_axis(Axis(0)).dot(m).remove_axis(Axis(0))
}

fn concat1(parts: &[&Array1<f64>]) -> Array1<f64> {
    let mut v = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
    for p in parts {
        v.extend(p.iter());
    }
    Array1::from(v)
}

/// Encoded batch on a tape.
struct TapeMemory {
    /// Step-major rows, `steps * batch` of them.
    states: Var,
    keys: Var,
    mask: Array2<f64>,
    h: Var,
    c: Var,
}

impl Seq2SeqModel {
    /// Weights drawn uniformly from `[-0.1, 0.1]`, biases zero.
    pub fn new(vocab: JointVocab, config: ModelConfig, seed: u64) -> Self {
        let (v, e, h) = (vocab.len(), config.embedding, config.hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = |r: usize, c: usize| Array2::from_shape_fn((r, c), |_| rng.gen_range(-0.1..0.1));
        let mut params = vec![
            init(v, e),
            init(e + h, 4 * h),
            Array2::zeros((1, 4 * h)),
            init(e + 2 * h, 4 * h),
            Array2::zeros((1, 4 * h)),
            init(2 * h, h),
            init(3 * h, h),
            Array2::zeros((1, h)),
            init(h, v),
            Array2::zeros((1, v)),
            init(e + h, 4 * h),
            Array2::zeros((1, 4 * h)),
        ];
        // Forget gates start open.
        for b in [ENC_B, DEC_B, ENC_BW_B] {
            params[b].slice_mut(s![.., h..2 * h]).fill(1.0);
        }
        Seq2SeqModel {
            config,
            vocab,
            params,
            seed,
        }
    }

    fn shapes(vocab: &JointVocab, config: &ModelConfig) -> Vec<(usize, usize)> {
        let (v, e, h) = (vocab.len(), config.embedding, config.hidden);
        vec![
            (v, e),
            (e + h, 4 * h),
            (1, 4 * h),
            (e + 2 * h, 4 * h),
            (1, 4 * h),
            (2 * h, h),
            (3 * h, h),
            (1, h),
            (h, v),
            (1, v),
            (e + h, 4 * h),
            (1, 4 * h),
        ]
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Zeroes the output projection so every distribution is uniform over
    /// its domain.
    pub fn zero_output_layer(&mut self) {
        self.params[OUT_W].fill(0.0);
        self.params[OUT_B].fill(0.0);
    }

    fn input_ids(&self, x: &[Label], from: Domain) -> Vec<usize> {
        let mut ids = Vec::with_capacity(x.len() + 1);
        ids.push(from.tag());
        ids.extend(x.iter().map(|&l| self.vocab.joint(from, l)));
        ids
    }

    pub fn encode(&self, x: &[Label], from: Domain) -> Memory {
        let p = &self.params;
        let hd = self.config.hidden;
        let ids = self.input_ids(x, from);
        let mut h = Array1::zeros(hd);
        let mut c = Array1::zeros(hd);
        let mut states = Array2::zeros((ids.len(), 2 * hd));
        for (t, &id) in ids.iter().enumerate() {
            let inp = concat1(&[&p[EMB].row(id).to_owned(), &h]);
            (h, c) = lstm(&p[ENC_W], &p[ENC_B], &inp, &c);
            states.slice_mut(s![t, ..hd]).assign(&h);
        }
        let (mut hb, mut cb) = (Array1::zeros(hd), Array1::zeros(hd));
        for (t, &id) in ids.iter().enumerate().rev() {
            let inp = concat1(&[&p[EMB].row(id).to_owned(), &hb]);
            (hb, cb) = lstm(&p[ENC_BW_W], &p[ENC_BW_B], &inp, &cb);
            states.slice_mut(s![t, hd..]).assign(&hb);
        }
        let keys = states.dot(&p[ATT_W]);
        Memory { states, keys, h, c }
    }

    fn output(&self, mem: &Memory, h: Array1<f64>, c: Array1<f64>, to: Domain) -> DecoderState {
        let p = &self.params;
        let scores = mem.keys.dot(&h);
        let max = scores.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let w = scores.mapv(|s| (s - max).exp());
        let w = &w / w.sum();
        let ctx = vecmat(&w, &mem.states);
        let feed = (vecmat(&concat1(&[&ctx, &h]), &p[COMB_W]) + p[COMB_B].row(0)).mapv(f64::tanh);
        let logits = vecmat(&feed, &p[OUT_W]) + p[OUT_B].row(0) + self.vocab.mask(to).row(0);
        let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + logits.mapv(|v| (v - max).exp()).sum().ln();
        let n = self.vocab.labels(to);
        let mut nlp = vec![f64::INFINITY; n];
        nlp[0] = lse - logits[EOS_ID];
        for (l, slot) in nlp.iter_mut().enumerate().skip(1) {
            *slot = lse - logits[self.vocab.joint(to, l as Label)];
        }
        DecoderState {
            h,
            c,
            feed,
            neg_log_probs: nlp,
        }
    }

    fn step(&self, mem: &Memory, state: &DecoderState, prev: usize, to: Domain) -> DecoderState {
        let p = &self.params;
        let inp = concat1(&[&p[EMB].row(prev).to_owned(), &state.feed, &state.h]);
        let (h, c) = lstm(&p[DEC_W], &p[DEC_B], &inp, &state.c);
        self.output(mem, h, c, to)
    }

    /// State before the first output symbol.
    pub fn start(&self, mem: &Memory, to: Domain) -> DecoderState {
        let init = DecoderState {
            h: mem.h.clone(),
            c: mem.c.clone(),
            feed: Array1::zeros(self.config.hidden),
            neg_log_probs: Vec::new(),
        };
        self.step(mem, &init, to.tag(), to)
    }

    /// State after emitting label `o` (non-ε) of the output domain.
    pub fn advance(&self, mem: &Memory, state: &DecoderState, o: Label, to: Domain) -> DecoderState {
        self.step(mem, state, self.vocab.joint(to, o), to)
    }

    /// `p(next | x, prefix)` over the output domain's labels; index 0 is
    /// EOS.
    pub fn next_char_dist(&self, x: &[Label], prefix: &[Label], dir: Direction) -> Vec<f64> {
        let mem = self.encode(x, dir.from);
        let mut st = self.start(&mem, dir.to);
        for &o in prefix {
            st = self.advance(&mem, &st, o, dir.to);
        }
        st.neg_log_probs.iter().map(|v| (-v).exp()).collect()
    }

    /// `-log p(y, EOS | x)`.
    pub fn sequence_logprob(&self, x: &[Label], y: &[Label], dir: Direction) -> f64 {
        let mem = self.encode(x, dir.from);
        let mut st = self.start(&mem, dir.to);
        let mut total = 0.0;
        for &o in y {
            total += st.neg_log_probs[o as usize];
            st = self.advance(&mem, &st, o, dir.to);
        }
        total + st.neg_log_probs[0]
    }

    /// Argmax decoding, capped at `|x|` output symbols.
    pub fn greedy_decode(&self, x: &[Label], dir: Direction) -> Vec<Label> {
        let mem = self.encode(x, dir.from);
        let mut st = self.start(&mem, dir.to);
        let mut out = Vec::new();
        while out.len() < x.len() {
            let mut best = 0;
            for (l, &v) in st.neg_log_probs.iter().enumerate() {
                if v < st.neg_log_probs[best] {
                    best = l;
                }
            }
            if best == 0 {
                break;
            }
            out.push(best as Label);
            st = self.advance(&mem, &st, best as Label, dir.to);
        }
        out
    }

    /// Up to `n` beam-search outputs with their `-log p`, best first.
    /// EOS competes with the other expansions; at `|x|` symbols it is
    /// forced. With `n = 1` this is greedy decoding.
    pub fn beam_decode(&self, x: &[Label], dir: Direction, n: usize) -> Vec<(Vec<Label>, f64)> {
        let n = n.max(1);
        let mem = self.encode(x, dir.from);
        let mut beam: Vec<(Vec<Label>, f64, DecoderState)> = vec![(Vec::new(), 0.0, self.start(&mem, dir.to))];
        let mut done: Vec<(Vec<Label>, f64)> = Vec::new();
        while !beam.is_empty() && done.len() < n {
            // (prefix index, next label or 0 for EOS, score)
            let mut next: Vec<(usize, Label, f64)> = Vec::new();
            for (bi, (y, score, st)) in beam.iter().enumerate() {
                next.push((bi, 0, score + st.neg_log_probs[0]));
                if y.len() < x.len() {
                    for (l, &v) in st.neg_log_probs.iter().enumerate().skip(1) {
                        if v.is_finite() {
                            next.push((bi, l as Label, score + v));
                        }
                    }
                }
            }
            next.sort_by(|a, b| a.2.total_cmp(&b.2).then_with(|| beam[a.0].0.cmp(&beam[b.0].0)).then(a.1.cmp(&b.1)));
            next.truncate(n - done.len());
            let mut open = Vec::new();
            for (bi, l, score) in next {
                let y = &beam[bi].0;
                if l == 0 {
                    done.push((y.clone(), score));
                } else {
                    let mut y2 = y.clone();
                    y2.push(l);
                    open.push((y2, score, self.advance(&mem, &beam[bi].2, l, dir.to)));
                }
            }
            beam = open;
        }
        done.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
        done
    }

    fn encode_tape(&self, tape: &mut Tape, p: &[Var], xs: &[&[Label]], from: Domain) -> TapeMemory {
        let hd = self.config.hidden;
        let b = xs.len();
        let ids: Vec<Vec<usize>> = xs.iter().map(|x| self.input_ids(x, from)).collect();
        let steps = ids.iter().map(Vec::len).max().unwrap_or(1);
        let mut h = tape.constant(Array2::zeros((b, hd)));
        let mut c = tape.constant(Array2::zeros((b, hd)));
        let mut mask = Array2::from_elem((b, steps), NEG);
        let live = |t: usize| Array2::from_shape_fn((b, 1), |(i, _)| f64::from(u8::from(t < ids[i].len())));
        let mut embs = Vec::with_capacity(steps);
        let mut forward = Vec::with_capacity(steps);
        for t in 0..steps {
            let col: Vec<usize> = ids.iter().map(|s| s.get(t).copied().unwrap_or(EOS_ID)).collect();
            for i in 0..b {
                if t < ids[i].len() {
                    mask[[i, t]] = 0.0;
                }
            }
            let emb = tape.gather(p[EMB], &col);
            embs.push(emb);
            let inp = tape.concat(&[emb, h]);
            let (h2, c2) = lstm_tape(tape, p[ENC_W], p[ENC_B], inp, c, hd);
            h = tape.blend(h2, h, live(t));
            c = tape.blend(c2, c, live(t));
            forward.push(h2);
        }
        // Padding sits at the end, so the reverse pass stays at zero until
        // it reaches each sequence's last symbol.
        let mut hb = tape.constant(Array2::zeros((b, hd)));
        let mut cb = tape.constant(Array2::zeros((b, hd)));
        let mut backward = vec![hb; steps];
        for t in (0..steps).rev() {
            let inp = tape.concat(&[embs[t], hb]);
            let (h2, c2) = lstm_tape(tape, p[ENC_BW_W], p[ENC_BW_B], inp, cb, hd);
            hb = tape.blend(h2, hb, live(t));
            cb = tape.blend(c2, cb, live(t));
            backward[t] = hb;
        }
        let fw = tape.stack(&forward);
        let bw = tape.stack(&backward);
        let states = tape.concat(&[fw, bw]);
        let keys = tape.matmul(states, p[ATT_W]);
        TapeMemory {
            states,
            keys,
            mask,
            h,
            c,
        }
    }

    /// Summed negative log-likelihood of `ys` given `xs`, each pair scaled
    /// by `weights`, recorded on `tape` over parameter leaves `p`.
    pub fn loss_on_tape(&self, tape: &mut Tape, p: &[Var], xs: &[&[Label]], ys: &[&[Label]], weights: &[f64], dir: Direction) -> Var {
        let hd = self.config.hidden;
        let b = xs.len();
        let mem = self.encode_tape(tape, p, xs, dir.from);
        let steps = ys.iter().map(|y| y.len() + 1).max().unwrap_or(1);
        let out_mask = self.vocab.mask(dir.to).broadcast((b, self.vocab.len())).unwrap().to_owned();
        let (mut h, mut c) = (mem.h, mem.c);
        let mut feed = tape.constant(Array2::zeros((b, hd)));
        let mut losses = Vec::with_capacity(steps);
        for t in 0..steps {
            let prev: Vec<usize> = ys
                .iter()
                .map(|y| match t {
                    0 => dir.to.tag(),
                    _ => y.get(t - 1).map_or(EOS_ID, |&l| self.vocab.joint(dir.to, l)),
                })
                .collect();
            let emb = tape.gather(p[EMB], &prev);
            let inp = tape.concat(&[emb, feed, h]);
            (h, c) = lstm_tape(tape, p[DEC_W], p[DEC_B], inp, c, hd);
            let ctx = tape.attend(h, mem.keys, mem.states, &mem.mask);
            let cat = tape.concat(&[ctx, h]);
            let comb = tape.matmul(cat, p[COMB_W]);
            let comb = tape.add_row(comb, p[COMB_B]);
            feed = tape.tanh(comb);
            let logits = tape.matmul(feed, p[OUT_W]);
            let logits = tape.add_row(logits, p[OUT_B]);
            let targets: Vec<usize> = ys
                .iter()
                .map(|y| y.get(t).map_or(EOS_ID, |&l| self.vocab.joint(dir.to, l)))
                .collect();
            let w: Vec<f64> = ys
                .iter()
                .zip(weights)
                .map(|(y, &w)| if t <= y.len() { w } else { 0.0 })
                .collect();
            losses.push(tape.cross_entropy(logits, &out_mask, &targets, &w));
        }
        tape.sum(&losses)
    }

    /// Loss and parameter gradients for one batch.
    pub fn loss_and_grads(&self, xs: &[&[Label]], ys: &[&[Label]], weights: &[f64], dir: Direction) -> (f64, Grads) {
        let mut tape = Tape::new();
        let p: Vec<Var> = self.params.iter().enumerate().map(|(i, a)| tape.param(a, i)).collect();
        let loss = self.loss_on_tape(&mut tape, &p, xs, ys, weights, dir);
        let value = tape.value(loss)[[0, 0]];
        (value, tape.backward(loss, N_PARAMS))
    }

    /// Writes `<stem>.manifest` (text) and `<stem>.bin` (tensors).
    pub fn save(&self, stem: &Path) -> Result<()> {
        let bin = stem.with_extension("bin");
        let mut manifest = String::from("format uct-seq2seq 1\n");
        manifest += &format!("embedding {}\nhidden {}\nseed {}\n", self.config.embedding, self.config.hidden, self.seed);
        for (name, d) in [("source", Domain::Source), ("target", Domain::Target)] {
            let cps: Vec<String> = self.vocab.alphabet(d).chars().iter().map(|c| format!("U+{:04X}", *c as u32)).collect();
            manifest += &format!("{name} {}\n", cps.join(","));
        }
        manifest += &format!("tensors {}\n", bin.file_name().unwrap().to_string_lossy());
        let mut blob: Vec<u8> = Vec::new();
        blob.extend_from_slice(b"UCTT");
        blob.extend_from_slice(&1u32.to_le_bytes());
        blob.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for t in &self.params {
            blob.extend_from_slice(&(t.nrows() as u32).to_le_bytes());
            blob.extend_from_slice(&(t.ncols() as u32).to_le_bytes());
            for v in t.iter() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mpath = stem.with_extension("manifest");
        fs::write(&mpath, manifest).ctx(|| format!("writing {}", mpath.display()))?;
        let mut f = fs::File::create(&bin).ctx(|| format!("creating {}", bin.display()))?;
        f.write_all(&blob).ctx(|| format!("writing {}", bin.display()))
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let mpath = stem.with_extension("manifest");
        let origin = mpath.display().to_string();
        let text = fs::read_to_string(&mpath).ctx(|| format!("reading {origin}"))?;
        let mut fields: HashMap<&str, &str> = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            let (k, v) = line.split_once(' ').unwrap_or((line, ""));
            if fields.insert(k, v).is_some() {
                return Err(Error::parse(&origin, n + 1, format!("duplicate key {k}")));
            }
        }
        if fields.get("format") != Some(&"uct-seq2seq 1") {
            return Err(Error::parse(&origin, 1, "not a version 1 seq2seq manifest"));
        }
        let num = |k: &str| -> Result<u64> {
            fields
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::parse(&origin, 0, format!("missing or bad {k}")))
        };
        let config = ModelConfig {
            embedding: num("embedding")? as usize,
            hidden: num("hidden")? as usize,
        };
        let seed = num("seed")?;
        let alpha = |k: &str| -> Result<Alphabet> {
            let v = fields.get(k).copied().unwrap_or("");
            let chars: Option<Vec<char>> = v.split(',').filter(|s| !s.is_empty()).map(parse_codepoint).collect();
            chars
                .map(Alphabet::new)
                .ok_or_else(|| Error::parse(&origin, 0, format!("bad {k} alphabet")))
        };
        let vocab = JointVocab::new(&alpha("source")?, &alpha("target")?);
        let bin = stem.with_extension("bin");
        let mut blob = Vec::new();
        fs::File::open(&bin)
            .and_then(|mut f| f.read_to_end(&mut blob))
            .ctx(|| format!("reading {}", bin.display()))?;
        let bad = |msg: &str| Error::parse(bin.display().to_string(), 0, msg);
        let mut at = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = blob.get(at..at + n).ok_or_else(|| bad("truncated tensor file"))?;
            at += n;
            Ok(s)
        };
        if take(4)? != b"UCTT" {
            return Err(bad("bad magic"));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
        if u32_at(take(4)?) != 1 {
            return Err(bad("unsupported tensor format version"));
        }
        let shapes = Self::shapes(&vocab, &config);
        if u32_at(take(4)?) as usize != shapes.len() {
            return Err(bad("wrong tensor count"));
        }
        let mut params = Vec::with_capacity(shapes.len());
        for &(r, c) in &shapes {
            let (rr, cc) = (u32_at(take(4)?) as usize, u32_at(take(4)?) as usize);
            if (rr, cc) != (r, c) {
                return Err(bad("tensor shape does not match manifest"));
            }
            let raw = take(8 * r * c)?;
            let vals: Vec<f64> = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
            params.push(Array2::from_shape_vec((r, c), vals).expect("shape checked"));
        }
        Ok(Seq2SeqModel {
            config,
            vocab,
            params,
            seed,
        })
    }
}

fn lstm_tape(tape: &mut Tape, w: Var, b: Var, inp: Var, c: Var, hd: usize) -> (Var, Var) {
    let gates = tape.matmul(inp, w);
    let gates = tape.add_row(gates, b);
    let i = tape.slice(gates, 0, hd);
    let i = tape.sigmoid(i);
    let f = tape.slice(gates, hd, 2 * hd);
    let f = tape.sigmoid(f);
    let g = tape.slice(gates, 2 * hd, 3 * hd);
    let g = tape.tanh(g);
    let o = tape.slice(gates, 3 * hd, 4 * hd);
    let o = tape.sigmoid(o);
    let ig = tape.mul(i, g);
    let fc = tape.mul(f, c);
    let c2 = tape.add(ig, fc);
    let tc = tape.tanh(c2);
    let h2 = tape.mul(o, tc);
    (h2, c2)
}

/// Global L2 norm of a gradient set.
pub fn grad_norm(grads: &Grads) -> f64 {
    grads
        .iter()
        .flatten()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}


/// Joint-id view of the output mask, for tests.
#[cfg(test)]
fn mask_row(model: &Seq2SeqModel, d: Domain) -> Vec<f64> {
    model.vocab.mask(d).row(0).to_vec()
}
