//! Energy-based ConvNet image models learned by multi-grid minimal
//! contrastive divergence.
//!
//! A model is a pyramid of ConvNets, one per grid from 4x4 upwards, each
//! defining `p(Y) ∝ exp(f(Y)) q(Y)`. Synthesis starts from a 1x1 image and
//! runs a short Langevin chain at every grid, coarse to fine; learning
//! compares the scores of observed and synthesized images at each grid.

pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod inpaint;
pub mod io;
pub mod langevin;
pub mod network;
pub mod pyramid;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod textures;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Scalar, Shape, Tensor};
pub use trainer::{Method, TrainConfig, TrainState};
