//! Underwater image enhancement toolkit: a scattering-model degradation
//! simulator, dark-channel transmission estimation, a three-branch
//! enhancement network trained with a composite loss, and no-reference /
//! full-reference quality metrics. Everything is deterministic for a fixed
//! seed.

pub mod cli;
pub mod imagio;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod physics;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;
