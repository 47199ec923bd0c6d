//! Modular multilingual neural machine translation.
//!
//! Every language owns an independent encoder and decoder. Pairs are trained
//! jointly so that both encoders map into one representation space; new
//! languages are added later by training only their own modules against
//! frozen ones, and any encoder can then be paired with any decoder.

pub mod analysis;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod objective;
pub mod tokenizer;
pub mod trainer;
pub mod translator;

pub use error::{NmtError, Result};
