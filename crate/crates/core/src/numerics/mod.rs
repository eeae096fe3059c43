//! Numerical building blocks shared by the solvers.

pub mod lattice;
pub mod ode;
pub mod quad;
pub mod root;

pub use lattice::{Axis, Lattice};
