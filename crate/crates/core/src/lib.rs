//! Guided reverse-diffusion sampling for 3D point clouds.
//!
//! The sampler steers an unconditional denoising chain with gradients from
//! three sources: zeroth-order (SPSA) estimates of a black-box oracle such as
//! a force field or an external quantum-chemistry binary, a differentiable
//! property pulled back through the one-step denoised estimate ("noisy"
//! guidance), and gradient descent in the estimated clean space ("clean"
//! guidance). Bilevel combinations and an evolutionary selection baseline are
//! built from the same pieces.
//!
//! Everything is checkable at desk scale: the denoiser is the closed-form
//! optimal noise predictor for Gaussian or Gaussian-mixture targets, and the
//! toy oracle is a harmonic/Lennard-Jones potential with exact gradients.

pub mod cli;
pub mod denoiser;
pub mod error;
pub mod geomstate;
pub mod guidance;
pub mod metrics;
pub mod sampler;
pub mod schedule;
pub mod testbed;
pub mod toyoracle;
pub mod xtb;

pub use error::{Error, Result};
