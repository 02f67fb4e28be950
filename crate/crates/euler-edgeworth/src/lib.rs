//! Second-order error analysis for the Euler scheme of scalar diffusions
//! dX = a(X)dt + b(X)dW on [0, 1].
//!
//! The crate simulates the coupled pair (reference path, continuous Euler
//! path) on one Brownian path, computes the normalized error process
//! V^n = sqrt(n)(X^n - X) together with its martingale and second-order
//! expansion terms, evaluates the limit-law ingredients (kernel K, mixed
//! normal variance C, CLT coefficient processes, conditional means and
//! covariances) by quadrature along the path, differentiates them in the
//! Malliavin sense via variation processes, and assembles the resulting
//! random-symbol coefficients into Edgeworth-corrected densities for the
//! error and its studentized version. A campaign layer reproduces the
//! strong/weak error expansions and density-improvement experiments, and a
//! CLI drives everything from a JSON configuration with counter-based
//! randomness so results are bitwise reproducible at any worker count.

pub mod affine;
pub mod cli;
pub mod errorproc;
pub mod edgeworth;
pub mod experiments;
pub mod grid;
pub mod limitlaw;
pub mod malliavin;
pub mod model;
pub mod pathsim;
pub mod rng;
pub mod stats;

pub use grid::TimeGrid;
pub use model::{builtin_model, check_derivatives, BuiltinKind, CustomModel, DiffusionModel};
pub use pathsim::{sample_brownian, BrownianPath, CoupledPaths};
