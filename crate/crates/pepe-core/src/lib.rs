//! Personalized automatic post-editing at desk scale.
//!
//! Given a source sentence, a machine translation of it, and a user identity,
//! the model in this crate produces a post-edit reflecting that user's style.
//! The pipeline is fully self-contained: a synthetic multi-user corpus
//! generator with oracle style profiles stands in for real post-editing logs,
//! a from-scratch dual-source transformer (f64, explicit backward passes)
//! stands in for a pretrained backbone, and a diagonal-covariance Gaussian
//! mixture over encoder embeddings supplies the semantic cluster labels that
//! drive the adversarial discriminator.
//!
//! Module map:
//! - [`vocab`] / [`corpus`] / [`synth`]: closed vocabulary, triplet corpus
//!   (generation, filtering, splits, JSONL round trip).
//! - [`cluster`]: sentence embeddings, GMM fitting, label assignment.
//! - [`tensor`] / [`model`]: numeric kernels and the encoder-decoder with
//!   user output biases, discriminator head, and beam search.
//! - [`train`]: losses, gradient reversal, AdamW, task-adaptive pretraining,
//!   and every baseline variant.
//! - [`eval`]: BLEU, TER with block shifts, the style-accuracy oracle, and
//!   report assembly.

pub mod cluster;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{PepeError, Result};
