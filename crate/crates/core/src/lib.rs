//! Desk-scale numerical laboratory for the partial-data Calderón problem.
//!
//! The crate builds the objects that a partial-data uniqueness argument for
//! `(-Δ + q) u = 0` is made of and checks each of them numerically on box
//! lattices:
//!
//! * [`geometry`]: box domains, outward normals, surface weights and the
//!   front/back and signed boundary partitions.
//! * [`weights`]: linear and logarithmic limiting Carleman weights, their
//!   conjugated symbols, the Poisson bracket test and convexification.
//! * [`phases`]: the spherical-distance phase paired with the log weight, the
//!   linear-in-ν phase family `f(x; θ)` and its rank / injectivity probes.
//! * [`cgo`]: transport amplitudes, WKB residuals and discrete remainder
//!   solves for complex geometrical optics solutions.
//! * [`carleman`]: empirical interior and boundary Carleman constants.
//! * [`pde`]: Dirichlet solver, Dirichlet-to-Neumann maps and the
//!   conductivity bridge.
//! * [`identity`]: the Green-identity experiment and the nonlinear Fourier
//!   functional.
//! * [`reflection`]: reflected-wave CGO solutions vanishing on part of the
//!   boundary.
//! * [`cli`]: JSON-configured batch driver.

pub mod carleman;
pub mod cgo;
pub mod cli;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod identity;
pub mod io;
pub mod linalg;
pub mod pde;
pub mod phases;
pub mod reflection;
pub mod weights;

pub use error::{LabError, Result};
pub use num_complex::Complex64;
