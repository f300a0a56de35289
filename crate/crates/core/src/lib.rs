//! Multi-view contrastive pre-training for speech emotion recognition.
//!
//! View-level encoders are pre-trained without labels by aligning projected
//! representations of the same utterance across views with a pairwise NT-Xent
//! objective, then fine-tuned (frozen or tuned) with sparse labels.

pub mod analysis;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod dsp;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
