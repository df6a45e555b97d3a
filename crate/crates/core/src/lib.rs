//! Probing toolkit for attention and embedding traces of vision-and-language transformers.
//!
//! Traces are read from trace directories ([`trace`]), then analysed for multimodal fusion
//! ([`fusion`]), per-head attention statistics ([`stats`]) and trained probers ([`probers`]).
//! [`synth`] generates traces with planted structure together with brute-force reference
//! statistics.

pub mod cli;
pub mod fusion;
pub mod probers;
pub mod report;
pub mod seed;
pub mod stats;
pub mod synth;
pub mod trace;
