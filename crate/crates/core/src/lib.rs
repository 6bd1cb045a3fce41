//! Landmark-based facial self-supervised learning at desk scale.

pub mod augment;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod geometry;
pub mod gradcheck;
pub(crate) mod kernels;
pub mod localizer;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod pretrain;
pub mod rng;
pub mod tensor;
pub mod vit;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{CheckpointError, Error, Result};
pub use tensor::Tensor;
