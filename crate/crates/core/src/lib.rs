//! Mediation analysis for correlated exposure mixtures.
//!
//! Four pipelines share one [`data::Dataset`] model:
//!
//! * [`mediate`]: single-exposure mediation (with or without co-exposure
//!   adjustment) via the product and difference methods;
//! * [`pcma`]: principal-component scores as exposures;
//! * [`ersma`]: an elastic-net environmental risk score as a scalar exposure;
//! * [`bkmr`] and [`cma`]: Bayesian kernel machine regression and posterior
//!   counterfactual mediation effects.
//!
//! [`sim`] reproduces a block-correlated mixture simulation and scores the
//! pipelines by relative bias of the global indirect effect and by
//! true/false positive rates of active-exposure detection.

// `!(x > 0.0)` style checks are meant to reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod bkmr;
pub mod cma;
pub mod data;
pub mod error;
pub mod ersma;
pub mod linmod;
pub mod mediate;
pub mod pcma;
pub mod sim;

pub use error::{Error, ErrorClass, Result};
