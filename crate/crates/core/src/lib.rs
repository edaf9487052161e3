//! Lottery-ticket pruning experiments on small MLPs: iterative magnitude
//! pruning with rewinding, continuous sparsification, spike-and-slab
//! PAC-Bayes bounds and Hessian curvature diagnostics.

pub mod artifact;
pub mod contsparse;
pub mod error;
pub mod harness;
pub mod hessian;
pub mod imp;
pub mod masking;
pub mod nn;
pub mod optim;
pub mod pacbayes;
pub mod rng;

pub use error::{Error, Result};
