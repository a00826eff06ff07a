//! Finite-difference toolkit for Schrodinger quadratic forms
//! Q_V(xi) = int |grad xi|^2 + V xi^2 on boxes in R^N (N = 1, 2, 3):
//! criticality classification, harmonic capacity, positive supersolutions
//! and Hardy-type form improvements over a catalog of singular potentials.

pub mod aap;
pub mod cli;
pub mod config;
pub mod capacity;
pub mod criticality;
pub mod form;
pub mod mesh;
pub mod potential;
pub mod report;
pub mod solver;
pub mod spectral;

pub use form::{DiscreteForm, MassMatrix};
pub use mesh::{Grid, GridFunction, Mask};
pub use potential::{PotentialField, PotentialSpec};
