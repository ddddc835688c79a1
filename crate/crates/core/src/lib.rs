//! Training-data reconstruction from a gradient-descent parameter trace.
//!
//! A single tanh neuron `ŷ = tanh(w·x + b)` is trained with full-batch
//! gradient descent on the mean squared error. Anyone who observes the
//! per-epoch `(w, b)` values, the learning rate and the dataset size can
//! set up a nonlinear system whose roots are the private `(x, y)` pairs.
//!
//! - [`model`]: forward pass, loss, analytic gradients and the training loop.
//! - [`trace`]: the parameter trace and its line-oriented text format.
//! - [`system`]: residuals and Jacobian of the inversion system, plus the
//!   equation/unknown counting for wider networks.
//! - [`solver`]: closed-form recovery for one instance, multi-start
//!   Levenberg-Marquardt for the general case, and permutation-aware matching.
//! - [`cli`]: the `traceinv` command-line front-end.

mod assignment;
pub mod cli;
mod error;
mod lm;
pub mod model;
pub mod solver;
pub mod system;
pub mod trace;

pub use error::{Error, Result};
pub use model::{forward, gradients, mse, train, Dataset, Gradients, Params, TrainConfig};
pub use solver::{
    match_solutions, reconstruct, solve, solve_n1, verify_reconstruction, BoxBounds, MatchReport,
    ReconstructionResult, SolverConfig, VerifyReport,
};
pub use system::{feasibility, FeasibilityReport, NetworkShape, ReconstructionProblem};
pub use trace::{load_trace, save_trace, DebugRecord, FloatFormat, ParamTrace};
