//! Scattering resonances of the Dirichlet and Neumann Laplacian on compactly
//! perturbed planar waveguides.
//!
//! The strip `R x (0, pi)` is perturbed inside a ball `B(0, M)`. The cutoff
//! resolvent continues meromorphically to an infinitely branched Riemann
//! surface whose branch points are the thresholds `n^2`. This crate provides
//!
//! * [`sheet`]: bookkeeping for points of that surface,
//! * [`greens`]: the free strip Green's function on any sheet,
//! * [`geometry`]: stepped waveguides built from rectangular segments,
//! * [`scattering`]: mode matching, S-matrices and matching determinants,
//! * [`search`]: argument-principle root finding and resonance counting,
//! * [`quasimode`]: two-mirror quasimode frequencies used as search seeds,
//! * [`fredholm`]: a grid realization of `det(I + (K rho)^3)`,
//! * [`io`]: file formats and run configuration for the `guidewave` CLI,
//! * [`cli`]: execution of a run configuration.

pub mod cli;
pub mod error;
pub mod fixtures;
pub mod fredholm;
pub mod geometry;
pub mod greens;
pub mod io;
pub mod linalg;
pub mod quasimode;
pub mod scattering;
pub mod search;
pub mod sheet;

pub use error::{Error, Result};
pub use geometry::{Geometry, Segment};
pub use sheet::{BoundaryCondition, SheetPoint};

pub use num_complex::Complex64;
