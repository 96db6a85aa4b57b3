//! Additive vector quantization trained by dictionary annealing.
//!
//! The crate learns `M` full-dimensional dictionaries of `K` codewords whose sum
//! reconstructs each vector, encodes data with a beam search over the dictionaries,
//! and answers nearest-neighbor queries either exhaustively through asymmetric
//! distance tables or through a prefix tree built over the codes.
//!
//! Module map:
//!
//! * [`data_io`]: vector sets, `.fvecs`/`.bvecs`/`.ivecs` files, synthetic data, exact k-NN.
//! * [`clustering`]: PCA and Lloyd k-means, including the dimension-incremental variant.
//! * [`codebook`]: the additive codebook, beam-search encoding and ADC search.
//! * [`annealing`]: heat-up / cool-down training, offline and online.
//! * [`atree`]: the aggregating prefix tree and its budgeted search.
//! * [`diagnostics`]: entropy diagnostics and recall/latency evaluation.

pub mod annealing;
pub mod atree;
#[cfg(feature = "cli")]
pub mod cli;
pub mod clustering;
pub mod codebook;
pub mod counters;
pub mod data_io;
pub mod diagnostics;
pub mod meta;
pub(crate) mod binio;
mod error;
pub(crate) mod kernels;
pub(crate) mod parallel;
pub mod seeds;

pub use error::{Error, Result};
