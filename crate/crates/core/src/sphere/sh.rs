//! Real symmetric spherical harmonics.
//!
//! Only even degrees are kept, so every basis function is antipodally
//! symmetric. The real basis follows the modified convention
//!
//! ```text
//! Phi_lm = sqrt(2) * N_l|m| * P_l^|m|(cos t) * cos(|m| p)   m < 0
//! Phi_l0 = N_l0 * P_l(cos t)                               m = 0
//! Phi_lm = sqrt(2) * N_lm * P_l^m(cos t) * sin(m p)         m > 0
//! ```
//!
//! with `N_lm = sqrt((2l+1)/(4 pi) * (l-m)!/(l+m)!)` and no Condon-Shortley
//! phase. Columns are ordered by `l = 0, 2, 4, ...` and, inside each degree,
//! `m = -l..=l`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::Direction;
use crate::error::{FodError, Result};
use crate::scalar::{lit, Real};

/// Even-degree real SH basis truncated at `l_max`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShBasis {
    l_max: usize,
}

impl ShBasis {
    pub fn new(l_max: usize) -> Result<Self> {
        if l_max % 2 != 0 {
            return Err(FodError::validation(format!(
                "l_max must be even, got {l_max}"
            )));
        }
        Ok(ShBasis { l_max })
    }

    pub fn l_max(&self) -> usize {
        self.l_max
    }

    /// Number of basis functions, `(l_max+1)(l_max+2)/2`.
    pub fn len(&self) -> usize {
        (self.l_max + 1) * (self.l_max + 2) / 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Column index of `(l, m)`.
    pub fn index(&self, l: usize, m: i64) -> usize {
        debug_assert!(l % 2 == 0 && l <= self.l_max && m.unsigned_abs() as usize <= l);
        // l(l-1)/2 columns belong to the even degrees below `l`.
        let before = (l * l - l) / 2;
        (before as i64 + l as i64 + m) as usize
    }

    /// `(l, m)` for every column, in column order.
    pub fn degrees(&self) -> Vec<(usize, i64)> {
        let mut out = Vec::with_capacity(self.len());
        for l in (0..=self.l_max).step_by(2) {
            for m in -(l as i64)..=(l as i64) {
                out.push((l, m));
            }
        }
        out
    }

    /// Degree `l` of every column.
    pub fn column_degrees(&self) -> Vec<usize> {
        self.degrees().into_iter().map(|(l, _)| l).collect()
    }

    /// Evaluates every basis function at `d`.
    pub fn eval<T: Real>(&self, d: &Direction<T>) -> Vec<T> {
        let mut out = vec![T::zero(); self.len()];
        self.eval_into(d, &mut out);
        out
    }

    pub(crate) fn eval_into<T: Real>(&self, d: &Direction<T>, out: &mut [T]) {
        let lmax = self.l_max;
        let (x, y, z) = (d.x, d.y, d.z);
        // Re/Im of (x + iy)^m, i.e. sin^m(t) cos(m p) and sin^m(t) sin(m p).
        let mut cm = vec![T::zero(); lmax + 1];
        let mut sm = vec![T::zero(); lmax + 1];
        cm[0] = T::one();
        for m in 1..=lmax {
            cm[m] = cm[m - 1] * x - sm[m - 1] * y;
            sm[m] = cm[m - 1] * y + sm[m - 1] * x;
        }
        let sqrt2: T = lit(std::f64::consts::SQRT_2);
        let mut q = vec![T::zero(); lmax + 1];
        for m in 0..=lmax {
            // q[l] holds P_l^m(z) / sin^m(t) for l >= m.
            let mut dfact = 1.0f64;
            for k in (1..2 * m).step_by(2) {
                dfact *= k as f64;
            }
            q[m] = lit(dfact);
            if m < lmax {
                q[m + 1] = z * lit::<T>((2 * m + 1) as f64) * q[m];
            }
            for l in (m + 2)..=lmax {
                let a: T = lit((2 * l - 1) as f64);
                let b: T = lit((l + m - 1) as f64);
                let c: T = lit((l - m) as f64);
                q[l] = (a * z * q[l - 1] - b * q[l - 2]) / c;
            }
            for l in (m..=lmax).filter(|l| l % 2 == 0) {
                let norm: T = lit(normalization(l, m));
                let base = q[l] * norm;
                if m == 0 {
                    out[self.index(l, 0)] = base;
                } else {
                    out[self.index(l, -(m as i64))] = sqrt2 * base * cm[m];
                    out[self.index(l, m as i64)] = sqrt2 * base * sm[m];
                }
            }
        }
    }

    /// Evaluation matrix with one row per direction and one column per basis
    /// function.
    pub fn eval_matrix<T: Real>(&self, dirs: &[Direction<T>]) -> Result<DMatrix<T>> {
        if dirs.is_empty() {
            return Err(FodError::validation("direction list is empty"));
        }
        let mut m = DMatrix::zeros(dirs.len(), self.len());
        let mut row = vec![T::zero(); self.len()];
        for (i, d) in dirs.iter().enumerate() {
            d.validate()?;
            self.eval_into(d, &mut row);
            for (j, v) in row.iter().enumerate() {
                m[(i, j)] = *v;
            }
        }
        Ok(m)
    }

    /// Zonal function `Phi_l0` as a function of `t = cos(theta)`.
    pub fn zonal<T: Real>(l: usize, t: T) -> T {
        let norm: T = lit(normalization(l, 0));
        norm * legendre(l, t)
    }
}

/// `N_lm = sqrt((2l+1)/(4 pi) * (l-m)!/(l+m)!)`.
fn normalization(l: usize, m: usize) -> f64 {
    let mut ratio = 1.0f64;
    for k in (l - m + 1)..=(l + m) {
        ratio /= k as f64;
    }
    ((2 * l + 1) as f64 / (4.0 * std::f64::consts::PI) * ratio).sqrt()
}

/// Legendre polynomial `P_l(t)` by the three-term recurrence.
pub fn legendre<T: Real>(l: usize, t: T) -> T {
    if l == 0 {
        return T::one();
    }
    let mut p0 = T::one();
    let mut p1 = t;
    for k in 2..=l {
        let kf: T = lit(k as f64);
        let p2 = ((lit::<T>(2.0) * kf - T::one()) * t * p1 - (kf - T::one()) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    p1
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn count_and_ordering() {
        let b = ShBasis::new(8).unwrap();
        assert_eq!(b.len(), 45);
        let deg = b.degrees();
        assert_eq!(deg[0], (0, 0));
        assert_eq!(deg[1], (2, -2));
        assert_eq!(deg[5], (2, 2));
        assert_eq!(deg[6], (4, -4));
        for (i, (l, m)) in deg.iter().enumerate() {
            assert_eq!(b.index(*l, *m), i);
        }
        assert!(ShBasis::new(7).is_err());
    }

    #[test]
    fn constant_and_zonal_values() {
        let b = ShBasis::new(8).unwrap();
        let d = Direction::normalized(0.3, -0.4, 0.5).unwrap();
        let v = b.eval(&d);
        assert!((v[0] - 1.0 / (4.0 * PI).sqrt()).abs() < 1e-15);
        let pole = Direction::new(0.0, 0.0, 1.0).unwrap();
        let v = b.eval(&pole);
        assert!((v[b.index(2, 0)] - (5.0 / (4.0 * PI)).sqrt()).abs() < 1e-14);
        assert!((v[b.index(2, 0)] - 0.6307831).abs() < 1e-7);
        // Non-zonal functions vanish at the pole.
        assert!(v[b.index(4, 3)].abs() < 1e-15);
    }

    #[test]
    fn antipodal_symmetry() {
        let b = ShBasis::new(10).unwrap();
        let d = Direction::normalized(-0.2f64, 0.7, 0.1).unwrap();
        let a = b.eval(&d);
        let c = b.eval(&d.neg());
        for (x, y) in a.iter().zip(&c) {
            assert!((x - y).abs() < 1e-13);
        }
    }

    #[test]
    fn matches_explicit_degree_two_formulas() {
        // Independent closed forms for l = 2 in the chosen convention.
        let b = ShBasis::new(2).unwrap();
        let (th, ph) = (0.9f64, 2.1f64);
        let d = Direction::from_spherical(th, ph);
        let v = b.eval(&d);
        let n = (15.0 / (4.0 * PI)).sqrt();
        let s = th.sin();
        let c = th.cos();
        let expect = [
            1.0 / (4.0 * PI).sqrt(),
            n / 2.0 * s * s * (2.0 * ph).cos(),
            n * s * c * ph.cos(),
            (5.0 / (16.0 * PI)).sqrt() * (3.0 * c * c - 1.0),
            n * s * c * ph.sin(),
            n / 2.0 * s * s * (2.0 * ph).sin(),
        ];
        for (x, y) in v.iter().zip(expect.iter()) {
            assert!((x - y).abs() < 1e-13, "{x} vs {y}");
        }
    }

    #[test]
    fn eval_matrix_validates_and_permutes() {
        let b = ShBasis::new(4).unwrap();
        let bad = Direction {
            x: 1.0,
            y: 1.0,
            z: 0.0,
        };
        assert!(b.eval_matrix(&[bad]).is_err());
        assert!(b.eval_matrix::<f64>(&[]).is_err());
        let d1 = Direction::normalized(1.0, 2.0, 3.0).unwrap();
        let d2 = Direction::normalized(-1.0, 0.5, 0.2).unwrap();
        let m1 = b.eval_matrix(&[d1, d2]).unwrap();
        let m2 = b.eval_matrix(&[d2, d1]).unwrap();
        assert_eq!(m1.row(0), m2.row(1));
        assert_eq!(m1.row(1), m2.row(0));
    }

    #[test]
    fn single_precision_agrees() {
        let b = ShBasis::new(8).unwrap();
        let d = Direction::normalized(0.1, 0.2, 0.9).unwrap();
        let v64 = b.eval(&d);
        let v32 = b.eval(&d.cast::<f32>());
        for (x, y) in v64.iter().zip(&v32) {
            assert!((x - *y as f64).abs() < 1e-5);
        }
    }
}
