//! Finite-element computation of the L¹ optimal transport density by
//! minimizing the discrete transport energy with gradient-flow schemes.

pub mod cli;
pub mod diagnostics;
pub mod energy;
pub mod error;
pub mod fem;
pub mod flow;
pub mod io;
pub mod linsolve;
pub mod mesh;
pub mod problems;

pub use error::{Error, Result};
