//! Learned local image-patch descriptors.
//!
//! This crate trains a small convolutional network to map 64x64 grayscale
//! patches to compact descriptor vectors, using a siamese pair loss on the
//! L2 distance between descriptors and aggressive mining of hard positive
//! and negative pairs. It also ships the standard retrieval evaluation
//! protocol (precision-recall, ROC and CMC curves with their AUCs) and the
//! dataset plumbing needed to run experiments end to end.
//!
//! Module map:
//!
//! - [`tensor`] / [`rng`]: dense float arrays and the deterministic RNG
//!   every other module draws from.
//! - [`layers`]: forward/backward passes for the individual sublayers
//!   (convolution with sparse connection tables, Tanh/ReLU, L2/max pooling,
//!   local subtractive normalization, fully-connected).
//! - [`network`]: assembles sublayers into descriptor networks, owns the
//!   weights and the checkpoint format.
//! - [`loss`]: the hinge embedding pair loss and its gradient through both
//!   siamese branches.
//! - [`sampler`]: pair counting, stochastic pair sampling and hard-pair
//!   mining.
//! - [`trainer`]: SGD with momentum, the learning-rate schedule and the
//!   full training loop with validation-based model selection.
//! - [`eval`]: the matching benchmark protocol and curve/AUC computation.
//! - [`data`]: patch dataset loading (mosaic grids and a raw binary
//!   format) and the synthetic dataset generator used for desk-scale runs.
//! - [`gradcheck`]: finite-difference verification of every analytic
//!   gradient in the crate.

pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod io;
pub mod layers;
pub mod loss;
pub mod network;
pub mod rng;
pub mod sampler;
pub mod tensor;
pub mod trainer;

pub use error::Error;
pub use rng::Rng;
pub use tensor::{Element, Tensor};
