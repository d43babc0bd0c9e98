//! Categorical and compositional generative modelling with flow matching in
//! Euclidean coordinates of the open probability simplex.
//!
//! The pipeline: categorical observations are lifted into the simplex by
//! Dirichlet interpolation ([`dequant`]), mapped to `R^{K-1}` by a logratio
//! bijection ([`geometry`]), and a velocity field ([`nn`]) is fitted with the
//! conditional flow-matching objective ([`flow`]). Sampling and density
//! evaluation integrate the learned ODE ([`ode`], [`density`]).

pub mod adam;
pub mod density;
pub mod data;
pub mod dequant;
pub mod error;
pub mod experiments;
pub mod flow;
pub mod geometry;
pub mod model;
pub mod nn;
pub mod ode;
pub mod ot;
pub mod special;

pub use error::{Error, Result};
