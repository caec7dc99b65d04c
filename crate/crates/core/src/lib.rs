//! Gibbs samplers for sparse Bayesian factor models.
//!
//! Two factor priors are supported: independent normal factors and
//! √n-orthonormal factors (Ω/√n uniform on the Stiefel manifold). Loadings use
//! a spike-and-slab Laplace prior with stick-breaking sparsity weights.

pub mod config;
pub mod diagnostics;
pub mod dist;
pub mod error;
pub mod io;
pub mod linalg;
pub mod map;
pub mod model;
pub mod pipeline;
pub mod sampler;
pub mod special;
pub mod trace;

pub use error::{Error, Result};
