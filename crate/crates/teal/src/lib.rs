//! Desk-scale token-in token-out multimodal language modeling.
//!
//! The recipe: discretize every modality into tokens (a word vocabulary for
//! text, k-means codebooks for audio frames, a small VQ autoencoder for image
//! patches), splice the resulting id spaces into one joint vocabulary around
//! a frozen text-only transformer backbone, and train only the alignment
//! surface — per-modality embedding/output projections first, then the
//! non-textual tables plus per-layer bias/norm parameters. Generated
//! non-text token spans are routed back through the matching de-tokenizer.
//!
//! The numeric core is generic over the scalar type ([`num::Scalar`]):
//! production runs in `f32`, while gradient checks instantiate the same
//! kernels in `f64`. Concrete `f32` aliases are exported at the crate root.

pub mod checkpoint;
pub mod cli;
pub mod datagen;
pub mod error;
pub mod generate;
pub mod graph;
pub mod harness;
pub mod image;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod num;
pub mod optim;
pub mod sampling;
pub mod tensor;
pub mod templates;
pub mod tokenizers;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
pub use graph::Graph;
pub use num::Scalar;
pub use optim::{AdamConfig, AdamW};
pub use tensor::Tensor;

/// Production-precision tensor.
pub type Tensor32 = Tensor<f32>;
/// Shadow-mode tensor used by finite-difference gradient checks.
pub type Tensor64 = Tensor<f64>;
/// Production-precision tape.
pub type Graph32 = Graph<f32>;
