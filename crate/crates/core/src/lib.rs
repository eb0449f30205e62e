//! Bivariate causal discovery with causal velocities.
//!
//! A bijective structural causal model `Y = f(X, ε)` is equivalent to a
//! velocity field `v(y, x)` whose flow (with the cause `x` playing the role of
//! time) maps a noise state to counterfactual outcomes. When the data come
//! from such a model, the joint and marginal scores satisfy
//!
//! ```text
//! s_x(x) − ∂y v(y, x) = s_x(x, y) + v(y, x) · s_y(x, y)
//! ```
//!
//! at every point. The crate estimates the scores nonparametrically
//! ([`scores`]), fits a parametric velocity in both candidate directions by
//! minimizing the mean squared violation of that identity ([`gof`]), and picks
//! the direction with the smaller value. [`flow`] integrates fitted velocities
//! into counterfactual curves, [`synth`] generates the synthetic benchmarks,
//! and [`harness`] runs whole benchmarks and computes accuracy and AUDRC.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod dataset;
pub mod error;
pub mod flow;
pub mod gof;
pub mod harness;
pub mod io;
pub mod mlp;
pub mod scores;
pub mod synth;
pub mod velocity;

pub use dataset::{DataPair, Direction};
pub use error::{Error, Result};
pub use velocity::{VelocityFamily, VelocityModel};
