//! Minimal reverse-mode differentiation for the primitives the nowcasting
//! model needs, plus AdamW and a finite-difference checker.

mod gradcheck;
pub mod kernels;
mod optim;
mod params;
pub mod suite;
mod tape;

pub use gradcheck::{grad_check, relative_error, CoordinateCheck, GradCheckReport, REL_FLOOR};
pub use optim::{adamw_step, AdamWConfig, OptimizerState};
pub use params::{ParamId, ParamSet};
pub use tape::{Gradients, Tape, Var, BRANCH_EPS};
