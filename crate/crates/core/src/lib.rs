//! Two-stage composed retrieval at desk scale.
//!
//! A query is a reference item plus a modification text. Stage one
//! ([`filtering`]) fuses the two with a cross-attending text encoder and
//! ranks the whole corpus by cosine similarity against precomputed
//! candidate embeddings. Stage two ([`rerank`]) scores each of the top-K
//! survivors with a dual-encoder cross-attention model and re-orders them.
//!
//! Everything is trained from scratch on the synthetic compositional corpus
//! in [`data`], using the tape-based autodiff in [`autodiff`].

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod filtering;
pub mod gradcheck;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod rerank;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
