//! Local geometry of score fields.
//!
//! The crate evaluates score fields (analytic Gaussian/mixture oracles or a
//! trained MLP), samples them with a variance-preserving reverse diffusion, and
//! analyses their Jacobians: SVD, symmetric/skew splitting, local
//! dimensionality against the noise floor, and subspace overlap between left,
//! right and symmetrized eigen-directions.

pub mod checkpoint;
pub mod densities;
pub mod diffusion;
pub mod error;
pub mod field;
pub mod geometry;
pub mod linalg;
pub mod nn;
pub mod rng;
pub mod scoremodel;
pub mod vae;

pub use error::{Error, Result};
