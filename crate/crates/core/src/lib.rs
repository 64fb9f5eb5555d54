//! Treatment-effect estimation on staggered-adoption panels by factor-based
//! counterfactual imputation with interactive fixed effects.
//!
//! The estimation path runs
//! [`panel`] (outcome transform, blocks) → [`ife`] (slopes on the control
//! block) → [`impute`] (factors from the TALL block, per-unit loadings,
//! counterfactuals) → [`effects`] (unit, average and group effects with
//! closed-form variances). [`seir`] generates synthetic epidemic panels and
//! [`pipeline`] wires everything to CSV files and Monte Carlo studies.

pub mod effects;
pub mod error;
pub mod factor;
pub mod ife;
pub mod impute;
mod linalg;
pub mod panel;
pub mod pipeline;
pub mod seir;

pub use error::{Error, Result, Stage};
