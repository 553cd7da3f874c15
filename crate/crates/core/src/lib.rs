//! Desk-scale laboratory for prompt tuning of small vision transformers.
//!
//! The crate provides a self-contained stack: a dense tensor kernel with
//! reverse-mode differentiation, a trainable ViT backbone, prompt
//! attachment in shallow and deep variants, prompt initializers built from
//! harvested patch embeddings (k-means prototypes, window pooling, random
//! sampling), mutual-information and CKA diagnostics, an AdamW training
//! loop with warmup + cosine decay, and a binary tensor container shared
//! by every artifact the pipeline writes.

pub mod error;
pub mod prompt;
pub mod scalar;
pub mod tensor;
pub mod vit;

pub use error::{Result, SptError};
pub use scalar::Scalar;
pub use tensor::Tensor;
