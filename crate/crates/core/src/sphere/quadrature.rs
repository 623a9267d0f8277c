//! Gauss-Legendre rules and symmetric product cubature on the sphere.

use std::f64::consts::PI;

use super::Direction;

/// Nodes and weights of the `n`-point Gauss-Legendre rule on `[-1, 1]`,
/// nodes ascending.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n > 0, "Gauss-Legendre rule needs at least one node");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    for i in 0..(n + 1) / 2 {
        // Tricomi initial guess followed by Newton on P_n.
        let mut x = (PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        dp = if d != 0.0 { d } else { dp };
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    if n == 0 {
        return (1.0, 0.0);
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Integrates `f` over `[a, b]` with an `n`-point Gauss-Legendre rule.
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let (x, w) = gauss_legendre(n);
    let half = 0.5 * (b - a);
    let mid = 0.5 * (b + a);
    x.iter()
        .zip(&w)
        .map(|(xi, wi)| wi * f(mid + half * xi))
        .sum::<f64>()
        * half
}

/// A cubature rule restricted to one representative per antipodal pair.
///
/// Weights are doubled so that, for any even function `g`,
/// `sum_i w_i g(x_i)` equals the integral of `g` over the whole sphere.
#[derive(Debug, Clone)]
pub struct SymmetricCubature {
    pub nodes: Vec<Direction<f64>>,
    pub weights: Vec<f64>,
    /// Polynomial degree integrated exactly.
    pub degree: usize,
}

impl SymmetricCubature {
    /// Gauss-Legendre in `cos(theta)` times an equiangular azimuth grid, exact
    /// for spherical polynomials of degree `<= degree`, folded to one
    /// hemisphere.
    pub fn product(degree: usize) -> Self {
        let n_theta = (degree + 2) / 2; // 2 n_theta - 1 >= degree
        let mut n_phi = degree + 1;
        if n_phi % 2 == 1 {
            n_phi += 1;
        }
        let (zs, wz) = gauss_legendre(n_theta);
        let dphi = 2.0 * PI / n_phi as f64;
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        for (z, w) in zs.iter().zip(&wz) {
            let on_equator = z.abs() < 1e-14;
            if *z < 0.0 && !on_equator {
                continue;
            }
            let z = if on_equator { 0.0 } else { *z };
            let s = (1.0 - z * z).max(0.0).sqrt();
            let k_max = if on_equator { n_phi / 2 } else { n_phi };
            for k in 0..k_max {
                let phi = k as f64 * dphi;
                nodes.push(Direction {
                    x: s * phi.cos(),
                    y: s * phi.sin(),
                    z,
                });
                weights.push(2.0 * w * dphi);
            }
        }
        SymmetricCubature {
            nodes,
            weights,
            degree,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}
