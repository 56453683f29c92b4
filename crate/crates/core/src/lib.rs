//! Numerical solver for type-I backward stochastic Volterra integral equations
//! whose generators depend on the diagonal processes `(Y_t^t, Z_t^t)`.
//!
//! The equation is solved through an equivalent coupled system of backward
//! equations indexed by the Volterra parameter `s`: a Picard loop freezes the
//! diagonal pair, a regression Monte Carlo engine solves each member of the
//! family backward in time, and the diagonal is rebuilt from the family and
//! its `s`-derivative. A finite-difference backend solves the associated
//! semilinear PDEs in one space dimension for cross-validation.

pub mod bsde_engine;
pub mod container;
pub mod error;
pub mod field;
pub mod grid;
pub mod mc_forward;
pub mod metrics;
pub mod pde_backend;
pub mod spec;
pub mod volterra_system;

pub use bsde_engine::{Engine, RegressionBasis};
pub use error::{Error, Result};
pub use field::{BsvieSolution, FamilyField, FieldSolution, PathField, SolverKind};
pub use grid::{Grids, ParamGrid, TimeGrid};
pub use mc_forward::{simulate_paths, PathEnsemble};
pub use metrics::NormReport;
pub use pde_backend::{ControlSet, HjbSpec, PdeSolution, XGrid};
pub use spec::{Dims, GenArgs, GenFn, ProblemSpec, StateFn};
pub use volterra_system::{solve_system, solve_system_simplified, PicardOptions};
