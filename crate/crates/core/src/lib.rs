//! Score distillation as reparametrized DDIM, on a closed-form Gaussian
//! mixture denoiser.
//!
//! The crate is organised bottom-up: [`schedule`] defines `alpha(t)` and
//! `sigma(t)`, [`oracle`] the analytic noise predictor and guidance,
//! [`sampler`] DDIM stepping and inversion, [`reparam`] the `x0(t)` change of
//! variables and fixed-point residuals, [`kappa`] the noise-term strategies,
//! [`renderer`] the tomographic toy renderer, [`distill`] the SDS/SDI/ISM
//! loops, and [`harness`] configuration and experiment suites.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` deliberately rejects NaN

pub mod distill;
pub mod error;
pub mod harness;
pub mod kappa;
pub mod oracle;
pub mod renderer;
pub mod reparam;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod vecops;

pub use error::{Error, Result};
pub use oracle::{cfg_noise, Denoiser, MixtureModel, Prompt, PromptTag, ViewConditionedMixture};
pub use renderer::{CameraAngle, Canvas, CanvasShape, Renderer, Template};
pub use sampler::{DiffusionState, Trajectory};
pub use schedule::{make_grid, Schedule, ScheduleParams, TimeGrid};
