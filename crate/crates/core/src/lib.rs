//! Diffeomorphic image registration and longitudinal regression on regular grids.
//!
//! The crate is organized around geodesic shooting: a smoothing kernel links
//! momentum and velocity ([`kernel`]), the geodesic equations are integrated
//! forward in time ([`shooting`]), and registration optimizes the initial
//! momentum with an exact discrete adjoint ([`register`]). On top of that sit
//! a patch-wise learned momentum predictor with a correction stage
//! ([`predictor`]), closed-form geodesic regression over longitudinal series
//! ([`sgr`]), atrophy and correlation analytics ([`analytics`]), and a
//! synthetic longitudinal cohort generator used as ground truth ([`synth`]).

pub mod analytics;
pub mod error;
pub mod field;
pub mod kernel;
pub mod register;
pub mod shooting;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use field::{DeformationMap, GridSpec, Mask, ScalarField, VectorField};
pub use kernel::KernelParams;
pub use shooting::{GeodesicState, GeodesicTrajectory, Integrator, ShootConfig};
