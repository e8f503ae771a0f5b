//! Numerical laboratory for gradient flows of lattice spin systems with
//! continuous spins on the circle or the 2-sphere.

pub mod error;
pub mod evi;
pub mod experiment;
pub mod fpk;
pub mod geometry;
pub mod interaction;
pub mod jko;
pub mod langevin;
pub mod measures;
pub mod parallel;
pub mod plot;
pub mod transport;
pub mod vec3;

pub use error::{Error, Result};
