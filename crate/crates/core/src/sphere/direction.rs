use serde::{Deserialize, Serialize};

use crate::error::{FodError, Result};
use crate::scalar::{abs, lit, Real};

/// A unit vector on the sphere.
///
/// Antipodal pairs `v` and `-v` describe the same axis; [`Direction::axial_angle`]
/// measures angles modulo that symmetry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Direction<T> {
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Real> Direction<T> {
    /// Builds a direction, rejecting vectors whose norm deviates from one.
    pub fn new(x: T, y: T, z: T) -> Result<Self> {
        let d = Direction { x, y, z };
        d.validate()?;
        Ok(d)
    }

    /// Normalizes an arbitrary nonzero vector.
    pub fn normalized(x: T, y: T, z: T) -> Result<Self> {
        let n = (x * x + y * y + z * z).sqrt();
        if !(n > T::zero()) {
            return Err(FodError::validation("cannot normalize a zero vector"));
        }
        Ok(Direction {
            x: x / n,
            y: y / n,
            z: z / n,
        })
    }

    /// Tolerance used for the unit-norm check; `1e-12` in `f64`, scaled up for
    /// coarser types.
    pub fn unit_tolerance() -> T {
        let t: T = lit(1e-12);
        let e = T::eps() * lit(64.0);
        if e > t {
            e
        } else {
            t
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n2 = self.x * self.x + self.y * self.y + self.z * self.z;
        if !n2.is_finite() || abs(n2 - T::one()) > Self::unit_tolerance() {
            return Err(FodError::validation(format!(
                "direction ({:?}, {:?}, {:?}) is not a unit vector",
                self.x, self.y, self.z
            )));
        }
        Ok(())
    }

    pub fn dot(&self, other: &Self) -> T {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn neg(&self) -> Self {
        Direction {
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    pub fn to_array(&self) -> [T; 3] {
        [self.x, self.y, self.z]
    }

    /// Angle between the axes through `self` and `other`, in radians, folded
    /// into `[0, pi/2]`.
    pub fn axial_angle(&self, other: &Self) -> T {
        let c = abs(self.dot(other));
        let c = if c > T::one() { T::one() } else { c };
        c.acos()
    }

    /// Axial angle in degrees.
    pub fn axial_angle_deg(&self, other: &Self) -> T {
        self.axial_angle(other) * lit(180.0) / T::pi()
    }

    /// Maps the pair `{v, -v}` to a canonical member: positive `z`, then
    /// positive `y`, then positive `x` on the successive great circles.
    pub fn canonical_axis(&self) -> Self {
        let tol: T = lit(1e-12);
        let flip = if abs(self.z) > tol {
            self.z < T::zero()
        } else if abs(self.y) > tol {
            self.y < T::zero()
        } else {
            self.x < T::zero()
        };
        if flip {
            self.neg()
        } else {
            *self
        }
    }

    pub fn cast<U: Real>(&self) -> Direction<U> {
        Direction {
            x: nalgebra::convert(crate::scalar::to_f64(self.x)),
            y: nalgebra::convert(crate::scalar::to_f64(self.y)),
            z: nalgebra::convert(crate::scalar::to_f64(self.z)),
        }
    }
}

impl Direction<f64> {
    /// Spherical coordinates: polar angle from `+z` and azimuth from `+x`.
    pub fn from_spherical(theta: f64, phi: f64) -> Self {
        Direction {
            x: theta.sin() * phi.cos(),
            y: theta.sin() * phi.sin(),
            z: theta.cos(),
        }
    }

    /// Rotates about a unit `axis` by `angle` radians (Rodrigues).
    pub fn rotated(&self, axis: &Direction<f64>, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        let k = axis;
        let kv = [
            k.y * self.z - k.z * self.y,
            k.z * self.x - k.x * self.z,
            k.x * self.y - k.y * self.x,
        ];
        let kd = k.dot(self);
        Direction {
            x: self.x * c + kv[0] * s + k.x * kd * (1.0 - c),
            y: self.y * c + kv[1] * s + k.y * kd * (1.0 - c),
            z: self.z * c + kv[2] * s + k.z * kd * (1.0 - c),
        }
    }
}
