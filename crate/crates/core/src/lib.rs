//! Immiscible diffusion laboratory.
//!
//! Batch-wise assignment of Gaussian noise to data before forward diffusion,
//! together with the minimal diffusion stack needed to train and sample small
//! models with it: an exact linear assignment solver, pairwise cost kernels
//! (full and 16-bit), linear schedules with deterministic DDIM sampling, an
//! MLP noise predictor with manual gradients, toy and CIFAR-10 data, and the
//! experiment harness that ties them together.

pub mod assign;
pub mod batch;
pub mod cost;
pub mod data;
pub mod denoiser;
pub mod diffusion;
mod error;
pub mod harness;
pub mod lap;
pub mod rng;

pub use assign::{AssignMode, AssignStats, Assigned, FlipKind};
pub use batch::{Batch, NoiseBatch};
pub use cost::Metric;
pub use error::{Error, Result};
pub use lap::{Assignment, CostMatrix};
