//! Sampling and volume estimation on constraint manifolds by intersecting
//! them with random search subspaces, weighted by Crofton-type formulas.

pub mod airy;
pub mod cli;
pub mod error;
pub mod geometry;
pub mod linalg;
pub mod manifold;
pub mod rng;
pub mod samplers;
pub mod solver;
pub mod stats;
pub mod validation;
pub mod weights;

pub use error::{Error, Result};
