//! Addition-subtraction twin-gated recurrent units (ATR) and their gated
//! baselines, an attentional encoder-decoder built on them, and the tooling
//! to train, decode, and inspect those models on small synthetic tasks.
//!
//! Everything runs on a small tape-based autodiff core ([`tensor`]) that
//! counts matrix transformations, so per-step costs of the cells can be
//! audited directly.

pub mod attribution;
pub mod bench;
pub mod cells;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod gradcheck;
pub mod seq2seq;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
