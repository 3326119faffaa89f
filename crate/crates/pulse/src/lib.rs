//! Self-supervised pretraining of time-series encoders by
//! cross-reconstruction between windows that share system parameters,
//! together with a synthetic SDE benchmark, a linear-probe evaluation
//! harness, and an executable check of the shared-latent identifiability
//! result on the underlying generative graph.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod optim;
pub mod rng;
pub mod sde;
pub mod train;

pub use error::{PulseError, Result};
