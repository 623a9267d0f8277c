//! Spherical convolution forward model.
//!
//! A voxel's signal is the convolution of its FOD with an axially symmetric
//! response kernel. In the SH domain this is a diagonal operator with entries
//! `sqrt(4 pi / (2l+1)) r_l`, so the measurement model for needlet
//! coefficients `beta` is `y = Phi R C beta`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{FodError, Result};
use crate::scalar::{lit, Real};
use crate::sphere::quadrature::gauss_legendre;
use crate::sphere::{Direction, ShBasis};

/// Single-tensor, axially symmetric response
/// `R(t) = S0 exp(-b (lambda_perp (1 - t^2) + lambda_par t^2))`, `t = cos(theta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResponseFunction {
    pub s0: f64,
    /// b-value in s/mm^2.
    pub b: f64,
    /// Perpendicular diffusivity (mm^2/s).
    pub lambda_perp: f64,
    /// Axial diffusivity (mm^2/s).
    pub lambda_par: f64,
}

impl ResponseFunction {
    pub fn new(s0: f64, b: f64, lambda_perp: f64, lambda_par: f64) -> Result<Self> {
        let rf = ResponseFunction {
            s0,
            b,
            lambda_perp,
            lambda_par,
        };
        rf.validate()?;
        Ok(rf)
    }

    /// Fiber kernel with `lambda_par = ratio * lambda_perp`. With
    /// `axial_leading = false` the ratio is applied the other way round.
    pub fn with_ratio(b: f64, lambda_perp: f64, ratio: f64, axial_leading: bool) -> Result<Self> {
        if axial_leading {
            Self::new(1.0, b, lambda_perp, ratio * lambda_perp)
        } else {
            Self::new(1.0, b, lambda_perp / ratio, lambda_perp)
        }
    }

    /// Isotropic kernel (both diffusivities equal).
    pub fn isotropic(b: f64, lambda: f64) -> Result<Self> {
        Self::new(1.0, b, lambda, lambda)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.s0 > 0.0
            && self.b >= 0.0
            && self.lambda_perp > 0.0
            && self.lambda_perp <= self.lambda_par
            && self.lambda_par.is_finite();
        if ok {
            Ok(())
        } else {
            Err(FodError::validation(format!("invalid response function {self:?}")))
        }
    }

    /// Kernel value at `t = cos(theta)`.
    pub fn eval<T: Real>(&self, t: T) -> T {
        let t2 = t * t;
        let b: T = lit(self.b);
        let lp: T = lit(self.lambda_perp);
        let la: T = lit(self.lambda_par);
        lit::<T>(self.s0) * (-(b * (lp * (T::one() - t2) + la * t2))).exp()
    }
}

/// Gauss-Legendre order used for the kernel's SH coefficients.
pub const RESPONSE_QUADRATURE_ORDER: usize = 64;

/// `r_l = 2 pi * int_{-1}^{1} R(t) Phi_l0(t) dt` for `l = 0, 2, ..., l_max`.
pub fn response_sh_coeffs<T: Real>(rf: &ResponseFunction, l_max: usize) -> Result<Vec<T>> {
    rf.validate()?;
    ShBasis::new(l_max)?;
    let (x, w) = gauss_legendre(RESPONSE_QUADRATURE_ORDER);
    let two_pi: T = lit(2.0 * std::f64::consts::PI);
    Ok((0..=l_max)
        .step_by(2)
        .map(|l| {
            let s = x.iter().zip(&w).fold(T::zero(), |acc, (xi, wi)| {
                let t: T = lit(*xi);
                acc + lit::<T>(*wi) * rf.eval(t) * ShBasis::zonal(l, t)
            });
            two_pi * s
        })
        .collect())
}

/// Diagonal of `R`: `sqrt(4 pi / (2l+1)) r_l` repeated over the `2l+1` orders.
pub fn response_diagonal<T: Real>(r: &[T], sh: &ShBasis) -> Result<DVector<T>> {
    if r.len() != sh.l_max() / 2 + 1 {
        return Err(FodError::validation(format!(
            "expected {} response coefficients, got {}",
            sh.l_max() / 2 + 1,
            r.len()
        )));
    }
    let four_pi: T = lit(4.0 * std::f64::consts::PI);
    Ok(DVector::from_iterator(
        sh.len(),
        sh.column_degrees().into_iter().map(|l| {
            (four_pi / lit::<T>((2 * l + 1) as f64)).sqrt() * r[l / 2]
        }),
    ))
}

/// `Phi * diag(r_diag) * C`.
pub fn build_design<T: Real>(phi: &DMatrix<T>, r_diag: &DVector<T>, c: &DMatrix<T>) -> Result<DMatrix<T>> {
    if phi.ncols() != r_diag.len() || r_diag.len() != c.nrows() {
        return Err(FodError::validation(format!(
            "design dimensions do not line up: Phi {}x{}, R {}, C {}x{}",
            phi.nrows(),
            phi.ncols(),
            r_diag.len(),
            c.nrows(),
            c.ncols()
        )));
    }
    let mut scaled = phi.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= r_diag[j];
    }
    Ok(scaled * c)
}

/// Row-concatenates per-shell design blocks and measurement vectors in order.
pub fn stack_designs<T: Real>(blocks: &[DMatrix<T>], signals: &[DVector<T>]) -> Result<(DMatrix<T>, DVector<T>)> {
    if blocks.is_empty() || blocks.len() != signals.len() {
        return Err(FodError::validation(format!(
            "{} design blocks for {} signal vectors",
            blocks.len(),
            signals.len()
        )));
    }
    let p = blocks[0].ncols();
    for (b, s) in blocks.iter().zip(signals) {
        if b.nrows() != s.len() || b.ncols() != p {
            return Err(FodError::validation(format!(
                "block {}x{} does not match signal length {} / width {p}",
                b.nrows(),
                b.ncols(),
                s.len()
            )));
        }
    }
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut d = DMatrix::zeros(n, p);
    let mut y = DVector::zeros(n);
    let mut row = 0;
    for (b, s) in blocks.iter().zip(signals) {
        d.view_mut((row, 0), (b.nrows(), p)).copy_from(b);
        y.rows_mut(row, s.len()).copy_from(s);
        row += b.nrows();
    }
    Ok((d, y))
}

/// Precomputed model for one b-value shell.
#[derive(Debug, Clone)]
pub struct ShellDesign<T: Real> {
    pub response: ResponseFunction,
    pub gradients: Vec<Direction<T>>,
    /// `n x L` SH evaluation at the gradients.
    pub phi: DMatrix<T>,
    /// Diagonal of `R`.
    pub r_diag: DVector<T>,
    /// `Phi * R` (`n x L`).
    pub sh_design: DMatrix<T>,
    /// `Phi * R * C` (`n x N`).
    pub design: DMatrix<T>,
}

impl<T: Real> ShellDesign<T> {
    pub fn new(sh: &ShBasis, rf: ResponseFunction, gradients: Vec<Direction<T>>, c: &DMatrix<T>) -> Result<Self> {
        let phi = sh.eval_matrix(&gradients)?;
        let r = response_sh_coeffs::<T>(&rf, sh.l_max())?;
        let r_diag = response_diagonal(&r, sh)?;
        let identity = DMatrix::<T>::identity(sh.len(), sh.len());
        let sh_design = build_design(&phi, &r_diag, &identity)?;
        let design = &sh_design * c;
        Ok(ShellDesign {
            response: rf,
            gradients,
            phi,
            r_diag,
            sh_design,
            design,
        })
    }

    pub fn len(&self) -> usize {
        self.gradients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gradients.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn fiber() -> ResponseFunction {
        ResponseFunction::with_ratio(1000.0, 1e-3, 10.0, true).unwrap()
    }

    #[test]
    fn isotropic_kernel_is_pure_l0() {
        let rf = ResponseFunction::isotropic(1000.0, 1e-3).unwrap();
        let r = response_sh_coeffs::<f64>(&rf, 8).unwrap();
        assert!((r[0] - (-1f64).exp() * (4.0 * PI).sqrt()).abs() < 1e-12);
        assert!((r[0] - 1.30410).abs() < 1e-5);
        for v in &r[1..] {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn zero_b_kernel_is_constant() {
        let rf = ResponseFunction::new(2.0, 0.0, 1e-3, 1e-2).unwrap();
        let r = response_sh_coeffs::<f64>(&rf, 8).unwrap();
        assert!((r[0] - 2.0 * (4.0 * PI).sqrt()).abs() < 1e-12);
        assert!(r[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn anisotropic_kernel_matches_adaptive_quadrature() {
        // Independent adaptive Simpson on the same integrand.
        fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
            let c = 0.5 * (a + b);
            let whole = (b - a) / 6.0 * (f(a) + 4.0 * f(c) + f(b));
            let left = (c - a) / 6.0 * (f(a) + 4.0 * f(0.5 * (a + c)) + f(c));
            let right = (b - c) / 6.0 * (f(c) + 4.0 * f(0.5 * (c + b)) + f(b));
            if depth == 0 || (left + right - whole).abs() < 15.0 * tol {
                left + right + (left + right - whole) / 15.0
            } else {
                simpson(f, a, c, tol / 2.0, depth - 1) + simpson(f, c, b, tol / 2.0, depth - 1)
            }
        }
        let rf = fiber();
        let r = response_sh_coeffs::<f64>(&rf, 8).unwrap();
        for (i, l) in (0..=8).step_by(2).enumerate() {
            let f = |t: f64| {
                let p = legendre_direct(l, t);
                2.0 * PI * rf.eval(t) * ((2 * l + 1) as f64 / (4.0 * PI)).sqrt() * p
            };
            let oracle = simpson(&f, -1.0, 1.0, 1e-14, 40);
            assert!((r[i] - oracle).abs() < 1e-10, "l={l}: {} vs {oracle}", r[i]);
        }
        assert!(r[1] < 0.0);
    }

    // Explicit Legendre polynomials for the oracle.
    fn legendre_direct(l: usize, t: f64) -> f64 {
        match l {
            0 => 1.0,
            2 => 0.5 * (3.0 * t * t - 1.0),
            4 => (35.0 * t.powi(4) - 30.0 * t * t + 3.0) / 8.0,
            6 => (231.0 * t.powi(6) - 315.0 * t.powi(4) + 105.0 * t * t - 5.0) / 16.0,
            8 => (6435.0 * t.powi(8) - 12012.0 * t.powi(6) + 6930.0 * t.powi(4) - 1260.0 * t * t + 35.0) / 128.0,
            _ => unreachable!(),
        }
    }

    #[test]
    fn diagonal_has_block_structure() {
        let sh = ShBasis::new(8).unwrap();
        let r = response_sh_coeffs::<f64>(&fiber(), 8).unwrap();
        let d = response_diagonal(&r, &sh).unwrap();
        for (i, l) in sh.column_degrees().iter().enumerate() {
            let expect = (4.0 * PI / (2 * l + 1) as f64).sqrt() * r[l / 2];
            assert_eq!(d[i], expect);
        }
        assert!(response_diagonal(&r[..3], &sh).is_err());
    }

    #[test]
    fn isotropic_design_with_identity_transition() {
        let sh = ShBasis::new(8).unwrap();
        let rf = ResponseFunction::isotropic(1000.0, 1e-3).unwrap();
        let dirs = crate::sphere::gradient_scheme(21).unwrap().points;
        let c = DMatrix::<f64>::identity(45, 45);
        let shell = ShellDesign::new(&sh, rf, dirs, &c).unwrap();
        let scale = (-1f64).exp() * 4.0 * PI;
        for i in 0..shell.len() {
            assert!((shell.design[(i, 0)] - scale * shell.phi[(i, 0)]).abs() < 1e-12);
            for j in 1..45 {
                assert!(shell.design[(i, j)].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn design_dimension_mismatch() {
        let phi = DMatrix::<f64>::zeros(3, 6);
        let r = DVector::<f64>::zeros(5);
        let c = DMatrix::<f64>::zeros(6, 4);
        assert!(build_design(&phi, &r, &c).is_err());
    }

    #[test]
    fn stacking_preserves_order() {
        let a = DMatrix::<f64>::from_element(2, 3, 1.0);
        let b = DMatrix::<f64>::from_element(1, 3, 2.0);
        let ya = DVector::from_vec(vec![1.0, 2.0]);
        let yb = DVector::from_vec(vec![3.0]);
        let (d, y) = stack_designs(&[a.clone(), b], &[ya.clone(), yb]).unwrap();
        assert_eq!(d.nrows(), 3);
        assert_eq!(d[(2, 0)], 2.0);
        assert_eq!(y.as_slice(), &[1.0, 2.0, 3.0]);
        let (d1, y1) = stack_designs(&[a.clone()], &[ya.clone()]).unwrap();
        assert_eq!(d1, a);
        assert_eq!(y1, ya);
        assert!(stack_designs(&[a], &[DVector::zeros(3)]).is_err());
    }
}
