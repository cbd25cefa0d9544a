//! Numerical laboratory for a nonisothermal Cahn-Hilliard system with thermal
//! memory and distributed optimal control.
//!
//! The forward model couples a Cahn-Hilliard equation with source term for the
//! order parameter to a second-order-in-time equation for the thermal
//! displacement (Green-Naghdi heat flux), closed with homogeneous Neumann
//! boundary conditions on a rectangle. The convex part of the double-well
//! potential is either a scaled logarithmic potential (`alpha * h`) or a
//! Moreau-Yosida penalization of the double-obstacle indicator; driving
//! `alpha` to zero recovers the obstacle problem ("deep quench" limit).
//!
//! Modules:
//! - [`grid`]: cell-centered Neumann grids, fields, means, discrete Laplacian,
//!   time-series quadrature and convolutions.
//! - [`spectral`]: DCT-based diagonal solvers for the constant-coefficient
//!   operators (inverse Neumann Laplacian, Helmholtz shifts) and the dual norm.
//! - [`potential`]: the double-well machinery and its derivatives.
//! - [`state`]: forward time integration (convex-implicit splitting, Newton).
//! - [`adjoint`]: backward-in-time adjoint solves and the optimality
//!   diagnostics (mean identity, complementarity slackness, reduced splitting).
//! - [`control`]: cost evaluation, reduced gradients, box projection, and
//!   projected-gradient descent with Armijo backtracking.
//! - [`study`]: quench-schedule drivers measuring state convergence rates and
//!   control continuation toward an anchor.
//! - [`snapshot`]: raw little-endian field snapshots with text sidecars.
//!
//! Field kernels are data-parallel over cells (rayon, behind the default
//! `parallel` feature) and all floating-point reductions run in a fixed order,
//! so results are bitwise reproducible across thread counts and across the
//! sequential fallback.

pub mod adjoint;
pub mod control;
pub mod grid;
pub mod linalg;
pub mod par;
pub mod potential;
pub mod snapshot;
pub mod spectral;
pub mod state;
pub mod study;

pub use grid::{Field, FieldSeries, Grid, GridError, TimeGrid};
pub use potential::{ConcavePart, ConvexMode, PotentialError};
pub use spectral::NeumannOps;
pub use state::{PhysParams, ProblemData, SolveError, StateSolver, StateTrajectory};
