//! Overestimation analysis for MSE-trained value functions, underestimated
//! Bellman operators, and an offline actor-critic agent that pairs expectile
//! critics with a conditional diffusion policy.
//!
//! The crate is organised bottom-up:
//!
//! - [`gumbel`]: Gumbel noise model, log-sum-exp operator, nested-error
//!   closed forms and their Monte-Carlo verification.
//! - [`finite_mdp`] and [`dataset`]: tabular MDPs, policy evaluation, offline
//!   datasets and their text format.
//! - [`operators`]: optimal and underestimated Bellman backups with
//!   contraction and fixed-point machinery.
//! - [`expectile`]: the asymmetric squared loss and scalar expectiles.
//! - [`approx`]: small MLPs with hand-written reverse mode, Adam and Polyak
//!   averaging.
//! - [`diffusion`]: the denoising diffusion policy.
//! - [`agent`]: the training loop, toy environments, presets and probes.

pub mod agent;
pub mod approx;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod expectile;
pub mod finite_mdp;
pub mod gumbel;
pub mod operators;
pub mod rng;

pub use error::{Error, Result};
