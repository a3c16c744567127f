//! Penalized Poisson regression for station × day × hour count panels with a
//! multilayer network fused-Lasso penalty.
//!
//! The numeric core is generic over the scalar type ([`Float`], implemented
//! for `f32` and `f64`); the aliases below fix it to `f64`, which is what the
//! CLI and the tests use.

pub mod admm;
pub mod bundle;
pub mod complexity;
pub mod cv;
pub mod data;
pub mod error;
pub mod float;
pub mod graph;
pub mod linalg;
pub mod model;
pub mod penalty;
pub mod projection;
pub mod unionfind;

pub use error::{Error, Result};
pub use float::Float;

pub type Params = model::ParamState<f64>;
pub type Phi = model::PhiView<f64>;
pub type Blocks = model::StationBlocks<f64>;
pub type Plan = projection::ProjectionPlan<f64>;
pub type State = admm::AdmmState<f64>;
