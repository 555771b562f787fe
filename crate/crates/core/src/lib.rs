//! Tri-modal (video / text / audio) self-supervised pre-training sandbox.
//!
//! A single joint transformer encodes patch embeddings of all three
//! modalities, trained with two objectives: masked reconstruction of local
//! patches (LPMM) and audio-anchored global alignment (GAM). Everything runs
//! in `f64` on the CPU so analytic gradients can be validated against finite
//! differences, and every run is reproducible from an integer seed.

pub mod audio;
pub mod data;
pub mod embed;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod masking;
pub mod matching;
pub mod model;
pub mod parallel;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
