//! Distributed Wasserstein proximal splitting for measure-valued convex
//! optimization on a fixed sample grid.
//!
//! The solver minimizes a sum of free-energy functionals `F_1 + .. + F_n` over
//! the probability simplex by consensus ADMM in the entropically regularized
//! Wasserstein geometry:
//!
//! * every worker `i` applies a Sinkhorn-Wasserstein proximal step to its own
//!   functional ([`functionals`]),
//! * a coordinator recovers the consensus measure from a barycentric proximal
//!   problem, solved through its dual by an inner Euclidean ADMM with Newton
//!   sub-solves ([`inner_admm`]),
//! * multipliers are updated by dual ascent ([`outer_admm`]).
//!
//! Iterating the scheme computes transient solutions of Wasserstein gradient
//! flows such as Fokker-Planck and aggregation-diffusion equations
//! ([`pde_flows`]).

pub mod config;
pub mod error;
pub mod functionals;
pub mod inner_admm;
pub mod measures;
pub mod outer_admm;
mod parallel;
pub mod pde_flows;
pub mod solve;
pub mod transport;
pub mod validation;

pub use error::{Error, Result};
