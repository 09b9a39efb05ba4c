//! Masked-reconstruction pretraining for invasive spike recordings.
//!
//! Pipeline: [`spike_io`] containers and synthetic corpora, [`normalize`]
//! binning and area grouping, [`tokenizer`] context-conditioned tokens,
//! [`encoder`] interval-area attention, [`objective`] masked
//! reconstruction pretraining, [`downstream`] fine-tuning and metrics,
//! [`bench_diag`] complexity benchmarks and the embedding-expansion
//! diagnostic.

pub mod bench_diag;
pub mod config;
pub mod downstream;
pub mod encoder;
pub mod error;
pub mod normalize;
pub mod numerics;
pub mod objective;
pub mod spike_io;
pub mod tokenizer;

pub use error::{Error, Result};
