//! Latent neural stochastic differential equations with a diffusion-size
//! penalty.
//!
//! The crate bundles everything needed to train a latent SDE on trajectories
//! from a stochastic system and to check whether the trained prior reproduces
//! the system's noise level:
//!
//! - [`autodiff`]: batched reverse-mode differentiation through the whole
//!   Euler–Maruyama unroll.
//! - [`nets`]: drift MLPs, the positive diffusion net, the time-reversed GRU
//!   encoder and the initial-state map.
//! - [`sde`]: Brownian increments, Euler–Maruyama, posterior integration with
//!   the KL and diffusion-size accumulators, prior sampling.
//! - [`model`]: the latent SDE objective `L_E - β·L_KL + γ·L_G`.
//! - [`systems`]: ground-truth systems (energy balance model, OU,
//!   FitzHugh–Nagumo, triple well), normalization and windowing.
//! - [`trainer`]: ADAM with exponential learning-rate decay and KL annealing.
//! - [`diagnostics`]: Wasserstein-1, transition rates, Kramers–Moyal
//!   coefficients, marginals, drift/diffusion tables and the diffusion-balance
//!   scan.
//! - [`io`], [`config`], [`cli`]: file formats and the experiment pipeline
//!   behind the `lsde` binary.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod io;
pub mod model;
pub mod nets;
pub mod rng;
pub mod sde;
pub mod systems;
pub mod trainer;

pub use error::{Error, Result};
