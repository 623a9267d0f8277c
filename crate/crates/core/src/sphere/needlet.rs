//! Symmetric spherical needlet frame.
//!
//! Level `j` needlets are
//! `psi_jk(x) = sqrt(w_jk) * sum_l b(l / 2^j) sum_m Phi_lm(xi_jk) Phi_lm(x)`
//! over even `l`, where `(xi_jk, w_jk)` is a cubature rule exact for products
//! of the level's harmonics. The window `b` is supported on `[1/2, 2]` and its
//! squares telescope, `sum_j b^2(l / 2^j) = 1` for `1 <= l <= 2^j_max`. At
//! level 0 the window is extended by `b(0) = 1`, which adds the constant
//! function and makes the frame tight on the whole even-degree space:
//! `C C^T = I`.

use nalgebra::DMatrix;

use super::quadrature::{integrate, SymmetricCubature};
use super::{Direction, ShBasis};
use crate::error::{FodError, Result};
use crate::scalar::{lit, Real};

/// Smooth window on `[1/2, 2]` with dilation factor 2.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeedletWindow;

impl NeedletWindow {
    fn bump(t: f64) -> f64 {
        if t.abs() >= 1.0 {
            0.0
        } else {
            (-1.0 / (1.0 - t * t)).exp()
        }
    }

    /// Smooth step equal to 1 on `[0, 1/2]` and 0 on `[1, inf)`.
    pub fn step(t: f64) -> f64 {
        if t <= 0.5 {
            return 1.0;
        }
        if t >= 1.0 {
            return 0.0;
        }
        // Map [1/2, 1] onto the bump's support [-1, 1].
        let lo = 1.0 - 4.0 * (t - 0.5);
        let total = integrate(Self::bump, -1.0, 1.0, 96);
        integrate(Self::bump, lo, 1.0, 96) / total
    }

    /// `b(t) = sqrt(step(t/2) - step(t))`.
    pub fn b(t: f64) -> f64 {
        if t <= 0.5 || t >= 2.0 {
            return 0.0;
        }
        (Self::step(t / 2.0) - Self::step(t)).max(0.0).sqrt()
    }

    /// Window of level `j` at degree `l`, with the level-0 extension at `l = 0`.
    pub fn level_weight(j: usize, l: usize) -> f64 {
        if l == 0 {
            return if j == 0 { 1.0 } else { 0.0 };
        }
        Self::b(l as f64 / (1u64 << j) as f64)
    }
}

/// One resolution level of the frame.
#[derive(Debug, Clone)]
pub struct NeedletLevel<T> {
    pub level: usize,
    pub nodes: Vec<Direction<T>>,
    pub weights: Vec<T>,
    /// Window value for every even degree `0, 2, ..., l_max`.
    pub window: Vec<T>,
    pub cubature_degree: usize,
}

/// Needlet frame up to `j_max = ceil(log2(l_max))`.
#[derive(Debug, Clone)]
pub struct NeedletFrame<T> {
    pub l_max: usize,
    pub j_max: usize,
    pub levels: Vec<NeedletLevel<T>>,
}

impl<T: Real> NeedletFrame<T> {
    /// Total number of needlets.
    pub fn len(&self) -> usize {
        self.levels.iter().map(|l| l.nodes.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(level, node index within level)` for every needlet in column order.
    pub fn columns(&self) -> Vec<(usize, usize)> {
        self.levels
            .iter()
            .flat_map(|lv| (0..lv.nodes.len()).map(move |k| (lv.level, k)))
            .collect()
    }
}

/// `ceil(log2(l_max))`.
pub fn j_max_for(l_max: usize) -> usize {
    let mut j = 0;
    while (1usize << j) < l_max {
        j += 1;
    }
    j
}

/// Builds the frame and the `L x N` transition matrix
/// `C[(l,m),(j,k)] = sqrt(w_jk) * b(l/2^j) * Phi_lm(xi_jk)`.
pub fn build_needlet_frame<T: Real>(l_max: usize) -> Result<(NeedletFrame<T>, DMatrix<T>)> {
    if l_max < 2 || l_max % 2 != 0 {
        return Err(FodError::validation(format!(
            "needlet frame needs an even l_max >= 2, got {l_max}"
        )));
    }
    let sh = ShBasis::new(l_max)?;
    let j_max = j_max_for(l_max);
    let mut levels: Vec<NeedletLevel<T>> = Vec::new();
    for j in 0..=j_max {
        let window: Vec<f64> = (0..=l_max)
            .step_by(2)
            .map(|l| NeedletWindow::level_weight(j, l))
            .collect();
        let top = (0..=l_max)
            .step_by(2)
            .zip(&window)
            .filter(|(_, w)| **w > 0.0)
            .map(|(l, _)| l)
            .max();
        let Some(top) = top else { continue };
        let degree = 2 * top;
        let rule = SymmetricCubature::product(degree);
        check_exactness(&sh, top, &rule).map_err(|e| {
            FodError::Config(format!("needlet level {j}: cubature not exact ({e:.3e})"))
        })?;
        levels.push(NeedletLevel {
            level: j,
            nodes: rule.nodes.iter().map(|d| d.cast()).collect(),
            weights: rule.weights.iter().map(|w| lit(*w)).collect(),
            window: window.iter().map(|w| lit(*w)).collect(),
            cubature_degree: degree,
        });
    }
    let frame = NeedletFrame {
        l_max,
        j_max,
        levels,
    };
    let degrees = sh.column_degrees();
    let mut c = DMatrix::<T>::zeros(sh.len(), frame.len());
    let mut col = 0;
    for lv in &frame.levels {
        for (node, w) in lv.nodes.iter().zip(&lv.weights) {
            let phi = sh.eval(node);
            let sw = w.sqrt();
            for (row, l) in degrees.iter().enumerate() {
                c[(row, col)] = sw * lv.window[l / 2] * phi[row];
            }
            col += 1;
        }
    }
    Ok((frame, c))
}

/// Largest deviation of the cubature Gram matrix of harmonics up to `top` from
/// the identity.
fn check_exactness(sh: &ShBasis, top: usize, rule: &SymmetricCubature) -> std::result::Result<(), f64> {
    let degrees = sh.column_degrees();
    let cols: Vec<usize> = (0..sh.len()).filter(|&i| degrees[i] <= top).collect();
    let mut gram = vec![0.0f64; cols.len() * cols.len()];
    for (node, w) in rule.nodes.iter().zip(&rule.weights) {
        let v = sh.eval(node);
        for (a, &ia) in cols.iter().enumerate() {
            for (b, &ib) in cols.iter().enumerate() {
                gram[a * cols.len() + b] += w * v[ia] * v[ib];
            }
        }
    }
    let mut worst = 0.0f64;
    for a in 0..cols.len() {
        for b in 0..cols.len() {
            let target = if a == b { 1.0 } else { 0.0 };
            worst = worst.max((gram[a * cols.len() + b] - target).abs());
        }
    }
    if worst <= 1e-9 {
        Ok(())
    } else {
        Err(worst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn j_max_is_ceil_log2() {
        assert_eq!(j_max_for(8), 3);
        assert_eq!(j_max_for(6), 3);
        assert_eq!(j_max_for(4), 2);
        assert_eq!(j_max_for(2), 1);
        assert_eq!(j_max_for(10), 4);
    }

    #[test]
    fn window_partition_of_unity() {
        for j_max in 1..=4usize {
            for l in 1..=(1usize << j_max) {
                let s: f64 = (0..=j_max)
                    .map(|j| NeedletWindow::b(l as f64 / (1u64 << j) as f64).powi(2))
                    .sum();
                assert!((s - 1.0).abs() < 1e-10, "l={l} j_max={j_max}: {s}");
            }
        }
        // Non-integer arguments as well.
        for i in 0..200 {
            let t = 1.0 + 7.0 * i as f64 / 200.0;
            let s: f64 = (0..=3).map(|j| NeedletWindow::b(t / (1u64 << j) as f64).powi(2)).sum();
            assert!((s - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn window_support_and_range() {
        assert_eq!(NeedletWindow::b(0.5), 0.0);
        assert_eq!(NeedletWindow::b(2.0), 0.0);
        assert!((NeedletWindow::b(1.0) - 1.0).abs() < 1e-12);
        for i in 0..100 {
            let t = 0.5 + 1.5 * i as f64 / 100.0;
            let v = NeedletWindow::b(t);
            assert!((0.0..=1.0 + 1e-12).contains(&v));
        }
    }

    #[test]
    fn frame_is_tight() {
        let (frame, c) = build_needlet_frame::<f64>(8).unwrap();
        assert_eq!(frame.j_max, 3);
        assert_eq!(c.nrows(), 45);
        assert_eq!(c.ncols(), frame.len());
        let g = &c * c.transpose();
        let dev = (g - DMatrix::<f64>::identity(45, 45)).abs().max();
        assert!(dev < 1e-8, "{dev}");
    }

    #[test]
    fn rejects_odd_or_tiny_l_max() {
        assert!(build_needlet_frame::<f64>(7).is_err());
        assert!(build_needlet_frame::<f64>(0).is_err());
    }
}
