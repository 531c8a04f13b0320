//! Sparse-subnetwork transfer experiments at desk scale: a small autodiff
//! engine, convolutional classifiers with maskable weights, ℓ∞ adversaries,
//! iterative magnitude pruning with rewinding, robust transfer evaluation and
//! mask / loss-landscape analytics, driven by a config-file pipeline.

pub mod attack;
pub mod analytics;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod mask;
pub mod model;
pub mod optim;
pub mod prune;
pub mod report;
pub mod seed;
pub mod store;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
