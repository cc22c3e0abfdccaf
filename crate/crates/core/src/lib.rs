//! Inference-time decomposition of activations.
//!
//! Activation vectors are decomposed by Matching Pursuit over a dictionary
//! whose atoms are themselves stored activations, each labeled with the
//! (dataset, sequence, token) it came from. Dictionaries are grown greedily:
//! a sample is appended whenever the current dictionary reconstructs it with
//! a squared error above a threshold. Because atoms carry labels, two
//! dictionaries trained on the same prompts can be compared across models by
//! the Jaccard index of their label sets.
//!
//! Module map:
//! - [`activation_store`]: `.acts` shards, atom labels, batch streaming.
//! - [`matching_pursuit`]: the MP encoder/decoder and vector primitives.
//! - [`dictionary`]: greedy training, dedup, crop, `.itda` persistence, decompose.
//! - [`similarity`]: Jaccard, label unions, layer matching, CE-loss score, linear CKA.
//! - [`synth_oracle`]: synthetic instances and brute-force oracles.
//! - [`cli`]: the `itda` command-line driver.
//!
//! ```no_run
//! use itda::activation_store::read_shard;
//! use itda::dictionary::{decompose, save_dictionary, train, TrainConfig};
//!
//! # fn main() -> itda::Result<()> {
//! let shard = read_shard("acts/l6.acts".as_ref())?;
//! let (dict, stats) = train([&shard], &TrainConfig::new(0.1, 8))?;
//! println!("{} atoms after {} tokens", dict.len(), stats.tokens_seen);
//! save_dictionary(&dict, "l6.itda".as_ref())?;
//! let codes = decompose(&shard, &dict, 8)?;
//! # let _ = codes;
//! # Ok(())
//! # }
//! ```

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod activation_store;
pub mod cli;
mod container;
pub mod dictionary;
mod error;
pub mod matching_pursuit;
pub mod matrix;
pub mod similarity;
pub mod synth_oracle;

pub use activation_store::{ActivationShard, AtomLabel, Batch, BatchCursor, LabelKey};
pub use dictionary::{Dictionary, Provenance, TrainConfig, TrainStats, Trainer};
pub use error::{Error, Result};
pub use matching_pursuit::{MpConfig, SparseCode};
pub use matrix::{DenseMatrix, MatrixView};
pub use similarity::{LabelSet, SimilarityMatrix};

/// Crate version, recorded in reproducibility lines and file headers.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
