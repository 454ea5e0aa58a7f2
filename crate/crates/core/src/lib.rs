//! Optimal-transport tools for finite-horizon distributional tracking.
//!
//! The crate is organised around the density representations in [`measures`]
//! and the transport solvers built on top of them:
//!
//! - [`discrete_ot`]: exact transportation-simplex solver for empirical measures.
//! - [`gaussian_ot`]: closed-form Brenier maps, distances and geodesics between Gaussians.
//! - [`lti_feedback`]: affine state feedback steering Gaussian densities of LTI systems.
//! - [`bb`]: dynamic (Benamou-Brenier) transport on staggered space-time grids.
//! - [`liouville`]: characteristic propagation of densities under known vector fields.
//! - [`refine`]: output-map refinement of baseline models by Brenier maps.
//! - [`io`]: JSON / CSV file formats shared with the command-line tool.

pub mod bb;
pub mod discrete_ot;
mod error;
pub mod gaussian_ot;
pub mod io;
pub mod liouville;
pub mod lti_feedback;
pub mod measures;
pub mod refine;

pub use error::{Error, Result};
