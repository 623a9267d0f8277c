//! Spherical bases: directions, real symmetric harmonics, icosphere grids and
//! the symmetric needlet frame.

mod direction;
pub mod icosphere;
pub mod needlet;
pub mod quadrature;
mod sh;

pub use direction::Direction;
pub use icosphere::{build_hemisphere, build_icosphere, gradient_scheme, split_scheme, GridProvenance, SphericalGrid};
pub use needlet::{build_needlet_frame, NeedletFrame, NeedletWindow};
pub use sh::{legendre, ShBasis};
