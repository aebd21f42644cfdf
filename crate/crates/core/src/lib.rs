//! Variational continual learning.
//!
//! Online mean-field variational inference for Bayesian neural networks,
//! with coreset episodic memory, the regularised-MLE baselines it is
//! compared against (MAP, diagonal Laplace propagation, EWC, SI), a
//! continual VAE, and an exact conjugate linear-regression oracle.

pub mod baselines;
pub mod bayes;
pub mod data;
pub mod error;
pub mod eval;
pub mod harness;
pub mod models;
pub mod oracle;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
