//! Guidance-scale scheduling on a 2D toy diffusion world.
//!
//! The crate trains small conditional denoisers and velocity fields on a
//! ring-shaped dataset, samples them with classifier-free guidance and its
//! variants, and learns a guidance scale `w(t, |delta|, lambda)` that balances
//! condition adherence against staying on the data manifold.

// `!(x > 0.0)` style checks are used on purpose so NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod annealer;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod guidance;
pub mod io;
pub mod nn;
pub mod plot;
pub mod point;
pub mod run;
pub mod schedule;
pub mod sweep;
pub mod toyworld;

pub use error::{LabError, Result};
pub use point::Vec2;
pub use schedule::{NoiseSchedule, ScheduleConfig, ScheduleKind};
pub use toyworld::{Condition, RingSpec};
