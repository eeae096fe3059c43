//! Linear multi-structured population dynamics.
//!
//! Individuals carry an age, a size and `m` auxiliary ages, move along
//! characteristic curves, die at a constant rate and divide into two halved
//! daughters. The crate evaluates the density along characteristics, solves the
//! renewal equation for the newborn flux, finds the Malthusian growth rate, and
//! ships an individual-based simulator that checks all of it.

pub mod characteristics;
pub mod cli;
pub mod cohort;
pub mod config;
pub mod error;
pub mod kinetics;
pub mod mc;
pub mod model;
pub mod numerics;
pub mod renewal;
pub mod rng;
pub mod spectral;
pub mod velocity;
pub mod verify;

pub use error::{Error, Result};
pub use model::{validate_model, DivisionRule, HazardSpec, Inheritance, ModelSpec, Region, StateVector, ValidatedModel};
