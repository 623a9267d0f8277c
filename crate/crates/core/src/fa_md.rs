//! Single-tensor fractional anisotropy and mean diffusivity.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{FodError, Result};
use crate::sphere::Direction;

/// Tensor eigenvalues in mm^2/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TensorEigenvalues(pub [f64; 3]);

impl TensorEigenvalues {
    pub fn new(l1: f64, l2: f64, l3: f64) -> Result<Self> {
        let ev = TensorEigenvalues([l1, l2, l3]);
        if ev.0.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(FodError::validation(format!("eigenvalues must be non-negative, got {:?}", ev.0)));
        }
        Ok(ev)
    }
}

/// Fractional anisotropy and a flag that is set when all eigenvalues are zero
/// (FA is then reported as 0).
pub fn fa(ev: &TensorEigenvalues) -> (f64, bool) {
    let [a, b, c] = ev.0;
    let den = a * a + b * b + c * c;
    if den == 0.0 {
        return (0.0, true);
    }
    let num = (a - b).powi(2) + (b - c).powi(2) + (c - a).powi(2);
    ((0.5 * num / den).sqrt(), false)
}

pub fn md(ev: &TensorEigenvalues) -> f64 {
    ev.0.iter().sum::<f64>() / 3.0
}

/// Log-linear least-squares tensor fit `ln S = ln S0 - b g^T D g`; signals
/// below `floor` are clamped before taking logs. With a known `s0` the
/// intercept is fixed, which single-shell data without `b = 0` requires.
/// Returns the eigenvalues of the fitted tensor clamped at zero, largest
/// first.
pub fn fit_tensor(
    signals: &[f64],
    bvals: &[f64],
    gradients: &[Direction<f64>],
    s0: Option<f64>,
    floor: f64,
) -> Result<TensorEigenvalues> {
    let n = signals.len();
    if bvals.len() != n || gradients.len() != n {
        return Err(FodError::validation("signals, b-values and gradients must have equal lengths"));
    }
    if n < 7 {
        return Err(FodError::validation(format!("tensor fit needs at least 7 measurements, got {n}")));
    }
    let a = DMatrix::from_fn(n, 7, |i, j| {
        let g = gradients[i];
        let b = bvals[i];
        match j {
            0 => 1.0,
            1 => -b * g.x * g.x,
            2 => -b * g.y * g.y,
            3 => -b * g.z * g.z,
            4 => -2.0 * b * g.x * g.y,
            5 => -2.0 * b * g.x * g.z,
            _ => -2.0 * b * g.y * g.z,
        }
    });
    let mut y = DVector::from_iterator(n, signals.iter().map(|s| s.max(floor).ln()));
    let a = match s0 {
        Some(s0) => {
            y.add_scalar_mut(-s0.ln());
            let mut a = a;
            a.column_mut(0).fill(0.0);
            a
        }
        None => a,
    };
    let sol = a
        .svd(true, true)
        .solve(&y, 1e-12)
        .map_err(|e| FodError::validation(format!("tensor fit failed: {e}")))?;
    let d = Matrix3::new(sol[1], sol[4], sol[5], sol[4], sol[2], sol[6], sol[5], sol[6], sol[3]);
    let mut ev: Vec<f64> = SymmetricEigen::new(d).eigenvalues.iter().map(|v| v.max(0.0)).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    TensorEigenvalues::new(ev[0], ev[1], ev[2])
}
