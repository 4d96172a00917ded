//! Joint generative and contrastive learning for unsupervised
//! re-identification, at desk scale on a synthetic articulated-figure world.

pub mod ablation;
pub mod augment;
pub mod clustering;
pub mod config;
pub mod contrastive;
pub mod error;
pub mod eval;
pub mod generative;
pub mod nets;
pub mod optim;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
