//! Two-track molecular pretraining: data model, scaffold sampling, a small
//! reverse-mode tensor core, the atom/pair transformer with its denoising
//! objectives, the training loop, and power-law scaling-law fitting.

pub mod diffcore;
pub mod model;
pub mod molgraph;
pub mod sampler;
pub mod scaling;
pub mod trainer;
