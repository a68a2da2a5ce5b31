//! Training and evaluation lab for composed text-to-image retrieval on toy
//! encoders: reverse-mode autodiff, a small dual text encoder with a visual
//! surrogate, rule-generated edit triplets, target-anchored contrastive
//! training, and deterministic retrieval benchmarks.

pub mod checkpoint;
pub mod diff;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod loss;
pub mod optim;
pub mod pipeline;
pub mod projection;
pub mod rng;
pub mod text;
pub mod train;
pub mod triplets;

pub use error::{Error, Result};
