//! Toolkit for detecting whether a decoder-only language model answers from
//! its parametric knowledge or from contradicting context.

pub mod backend;
pub mod cli;
pub mod error;
pub mod eval;
pub mod jsonl;
pub mod kb;
pub mod pipeline;
pub mod probe;
pub mod report;
pub mod storage;
pub mod synth;
pub mod toyformer;

pub use error::{Error, Result};
