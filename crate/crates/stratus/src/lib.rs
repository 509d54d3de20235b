//! Verification and generative-sampling toolkit for probabilistic ensemble
//! forecasts of global fields.
//!
//! The crate covers the full desk-scale loop for ensemble forecast systems
//! whose states live on regular latitude-longitude grids:
//!
//! * spherical geometry: grids, area weights, icosahedral meshes ([`grid`],
//!   [`mesh`]);
//! * probabilistic skill scores and their spatially pooled variants
//!   ([`metrics`], [`pooling`]);
//! * paired significance tests with block-bootstrap resampling
//!   ([`significance`]);
//! * initial-condition perturbations and isotropic noise on the sphere
//!   ([`perturb`], [`sht`]);
//! * the noise schedule, preconditioning, stochastic churn and second-order
//!   solver of a diffusion-based ensemble emulator ([`diffusion`]);
//! * tropical-cyclone detection, tracking and strike-probability maps
//!   ([`cyclone`]);
//! * regional wind-power aggregation scores ([`windpower`]);
//! * a self-describing binary field container and the `stratus` command-line
//!   front end ([`container`], [`cli`]).
//!
//! Every randomized routine takes an explicit seed and derives per-unit
//! substreams from it ([`rng`]), so results are bit-reproducible across
//! thread counts.

pub mod cli;
pub mod config;
pub mod container;
pub mod cyclone;
pub mod diffusion;
pub mod error;
pub mod fields;
pub mod grid;
pub mod mesh;
pub mod metrics;
pub mod numerics;
pub mod perturb;
pub mod pooling;
pub mod report;
pub mod rng;
pub mod sht;
pub mod significance;
pub mod windpower;

pub use error::{Error, Result};

/// Mean Earth radius in kilometres, shared by all geodesic computations.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Gravitational acceleration used to convert geopotential to elevation.
pub const STANDARD_GRAVITY: f64 = 9.806_65;
