//! Dataset condensation by knowledge factorization: per-class latent codes
//! and a bank of tiny shared decoders, trained by full-batch distribution
//! matching against randomly initialized feature extractors.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense tensors and a reverse-mode tape,
//! - [`nets`]: feature extractor, decoders, pretraining encoder, classifier,
//! - [`factorization`]: codebooks, decoder banks, synthesis and budgets,
//! - [`matching`]: the mean-embedding matching loss, exact gradients and the
//!   embedding-mean cache,
//! - [`diagnostics`]: bias and variance of subsampled gradients,
//! - [`pipeline`]: pretraining, condensation and evaluation,
//! - [`data`] and [`formats`]: dataset ingestion and on-disk containers.

pub mod data;
pub mod diagnostics;
mod error;
pub mod factorization;
pub mod formats;
pub mod matching;
pub mod nets;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tape, Tensor, TensorError, Var};
