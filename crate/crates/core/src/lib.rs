pub mod channel;
pub mod combine;
pub mod config;
pub mod charlm;
pub mod corpus;
pub mod em;
pub mod error;
pub mod eval;
pub mod fst;
pub mod neural;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};
