//! Fiber orientation distribution (FOD) estimation from diffusion MRI
//! signals: a nonnegativity-constrained lasso on a spherical needlet frame,
//! nearest-neighbour adaptive smoothing across voxels, synthetic regions with
//! Rician noise, evaluation metrics and a simple streamline tracker.
//!
//! The numerical core is generic over the scalar type; the aliases below fix
//! it to `f64`.

pub mod admm;
pub mod bundle;
pub mod error;
pub mod fa_md;
pub mod io;
pub mod metrics;
pub mod narm;
pub mod scalar;
pub mod signal;
pub mod sphere;
pub mod synthetic;
pub mod tracking;
pub mod volume;

pub use error::{FodError, Result};

pub type BasisBundle = bundle::BasisBundle<f64>;
pub type LassoDesign = admm::LassoDesign<f64>;
pub type LassoSolver<'a> = admm::LassoSolver<'a, f64>;
pub type SignalVolume = volume::SignalVolume<f64>;
pub type FodField = volume::FodField<f64>;
pub type Direction = sphere::Direction<f64>;
pub type SphericalGrid = sphere::SphericalGrid<f64>;
pub type SmoothingResult = narm::SmoothingResult<f64>;
pub type VoxelFit = narm::VoxelFit<f64>;
