//! Compares WFST decoding, n-best reranking and product-of-experts search
//! on a noisy cipher, using an untrained neural scorer so it runs fast.
//!
//! Run with `cargo run --release --example combine_decoders`.

use ndarray::Array2;
use uct::channel::{build_channel, DelayBound, EmissionParams};
use uct::charlm::{train_lm, Smoothing};
use uct::combine::{generate_candidates_wfst, poe_decode, poe_machine, rerank, seq2seq_score, Seq2SeqScorer, UniformScorer};
use uct::corpus::{tokenize, Alphabet};
use uct::em::decode_best;
use uct::neural::{Direction, JointVocab, ModelConfig, Seq2SeqModel};

fn main() -> uct::Result<()> {
    let tgt = Alphabet::new("abcd ".chars());
    let src = Alphabet::new("wxyz ".chars());
    let text = ["abc dab", "cab bad", "dad cab", "bad abc", "a cab"];
    let corpus: Vec<_> = text.iter().map(|s| tgt.encode(&tokenize(s))).collect();
    let lm = train_lm(&corpus, &tgt, 3, Smoothing::WittenBell)?.compile();

    // Mostly a fixed substitution, with a little deletion and insertion.
    let mut table = Array2::from_elem((tgt.len(), src.len()), 0.01);
    table[[0, 0]] = 0.5;
    for i in 1..tgt.len() {
        table[[i, i]] = 1.0;
    }
    let channel = build_channel(&EmissionParams::from_table(table)?, DelayBound(1));
    let model = Seq2SeqModel::new(JointVocab::new(&src, &tgt), ModelConfig { embedding: 8, hidden: 16 }, 3);
    let x = src.encode(&tokenize("wxy zw"));
    let render = |y: &[u32]| tgt.decode(y).detokenize();

    let best = decode_best(&x, &lm, &channel.fst)?;
    println!("wfst:     {:?} ({:.3})", render(&best.labels), best.weight);

    // Distinct alignments of one output are separate candidates.
    let nbest = generate_candidates_wfst(&x, &lm, &channel.fst, 5)?;
    let reranked = rerank(nbest, |y| Ok(seq2seq_score(&model, &x, y, Direction::SRC_TO_TGT, false)))?;
    for c in &reranked {
        println!("rerank:   {:?} wfst {:.3}, neural {:.3}", render(&c.y), c.generator_score, c.rescorer_score);
    }

    let machine = poe_machine(&lm, &channel.fst)?;
    let uniform = poe_decode(&x, &machine, &UniformScorer { symbols: tgt.len() }, Some(16))?;
    println!("poe (uniform expert): {:?} ({:.3})", render(&uniform.y), uniform.score);
    let scorer = Seq2SeqScorer { model: &model, dir: Direction::SRC_TO_TGT };
    for beam in [Some(4), Some(16)] {
        let r = poe_decode(&x, &machine, &scorer, beam)?;
        println!("poe beam {beam:?}: {:?} ({:.3})", render(&r.y), r.score);
    }
    Ok(())
}
