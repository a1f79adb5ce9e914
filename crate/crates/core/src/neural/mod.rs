//! Character-level encoder–decoder with attention, trained without
//! parallel data by denoising and back-translation.

mod model;
pub mod tape;
mod train;

pub use model::{grad_norm, DecoderState, Direction, Domain, JointVocab, Memory, ModelConfig, Seq2SeqModel, EOS_ID, N_PARAMS};
pub use train::*;
