//! procl — proportional-derivative controllable latent spaces from pixels.
//!
//! This crate learns an image embedding in which a plain PD controller
//! works: the latent state is a (configuration, velocity) pair, training
//! combines a contrastive predictive-coding objective with a Lyapunov risk
//! computed against hindsight-labeled pseudo-targets, and at execution time
//! goals and reference trajectories are reached by PD feedback directly in
//! latent space.
//!
//! Module map:
//!
//! - [`tensor`] — dense f64 tensors, the reverse-mode autodiff tape, Adam,
//!   gradient checking, checkpoint files
//! - [`env`] — point-mass and two-link reacher simulators, pixel renderers,
//!   random-policy collection, dataset files
//! - [`model`] — encoder and latent dynamics with the (h, v) structure
//! - [`objective`] — contrastive, consistency, curvature, and Lyapunov-risk
//!   losses plus hindsight target labeling
//! - [`train`] — the replay-buffer training loop and its config/log formats
//! - [`control`] — latent-space PD control for goal reaching and tracking
//!
//! The `procl` binary in the companion CLI crate drives collection,
//! training, and evaluation end to end; `book/` walks through the concepts
//! with runnable snippets.

pub mod control;
pub mod env;
pub mod error;
pub mod model;
pub mod objective;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
