//! Icosphere meshes, hemisphere reduction and gradient schemes.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::Direction;
use crate::error::{FodError, Result};
use crate::scalar::Real;

/// Where a grid came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GridProvenance {
    /// Vertices of an icosphere subdivided `subdiv` times; `hemisphere` keeps
    /// one vertex per antipodal pair.
    Icosphere { subdiv: u32, hemisphere: bool },
    /// Subset of the hemisphere of an icosphere, chosen by farthest-point
    /// sampling from the pole.
    IcosphereSubset { subdiv: u32, count: u32, complement: bool },
    Custom,
}

/// A set of directions with optional adjacency.
#[derive(Debug, Clone)]
pub struct SphericalGrid<T> {
    pub points: Vec<Direction<T>>,
    /// Mesh neighbours of each point (indices into `points`); empty when the
    /// grid has no mesh.
    pub neighbors: Vec<Vec<usize>>,
    pub provenance: GridProvenance,
}

impl<T: Real> SphericalGrid<T> {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn custom(points: Vec<Direction<T>>) -> Result<Self> {
        for p in &points {
            p.validate()?;
        }
        Ok(SphericalGrid {
            neighbors: vec![Vec::new(); points.len()],
            points,
            provenance: GridProvenance::Custom,
        })
    }
}

/// Full icosphere mesh in `f64`.
#[derive(Debug, Clone)]
pub struct IcoMesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
}

impl IcoMesh {
    /// Icosahedron with a vertex on each pole, subdivided `subdiv` times.
    pub fn new(subdiv: u32) -> Self {
        let mut vertices = Vec::with_capacity(12);
        vertices.push([0.0, 0.0, 1.0]);
        let zr = 1.0 / 5f64.sqrt();
        let rr = 2.0 / 5f64.sqrt();
        let step = std::f64::consts::PI / 5.0;
        for k in 0..5 {
            let a = 2.0 * step * k as f64;
            vertices.push([rr * a.cos(), rr * a.sin(), zr]);
        }
        for k in 0..5 {
            let a = 2.0 * step * k as f64 + step;
            vertices.push([rr * a.cos(), rr * a.sin(), -zr]);
        }
        vertices.push([0.0, 0.0, -1.0]);
        let mut faces = Vec::with_capacity(20);
        for k in 0..5 {
            let u0 = 1 + k;
            let u1 = 1 + (k + 1) % 5;
            let l0 = 6 + k;
            let l1 = 6 + (k + 1) % 5;
            faces.push([0, u0, u1]);
            faces.push([u0, l0, u1]);
            faces.push([u1, l0, l1]);
            faces.push([11, l1, l0]);
        }
        let mut mesh = IcoMesh { vertices, faces };
        for _ in 0..subdiv {
            mesh = mesh.subdivide();
        }
        mesh
    }

    fn subdivide(&self) -> Self {
        let mut vertices = self.vertices.clone();
        let mut mid: HashMap<(usize, usize), usize> = HashMap::new();
        let mut midpoint = |a: usize, b: usize, vs: &mut Vec<[f64; 3]>| -> usize {
            let key = if a < b { (a, b) } else { (b, a) };
            *mid.entry(key).or_insert_with(|| {
                let (p, q) = (vs[a], vs[b]);
                let m = [p[0] + q[0], p[1] + q[1], p[2] + q[2]];
                let n = (m[0] * m[0] + m[1] * m[1] + m[2] * m[2]).sqrt();
                vs.push([m[0] / n, m[1] / n, m[2] / n]);
                vs.len() - 1
            })
        };
        let mut faces = Vec::with_capacity(self.faces.len() * 4);
        for f in &self.faces {
            let a = midpoint(f[0], f[1], &mut vertices);
            let b = midpoint(f[1], f[2], &mut vertices);
            let c = midpoint(f[2], f[0], &mut vertices);
            faces.push([f[0], a, c]);
            faces.push([f[1], b, a]);
            faces.push([f[2], c, b]);
            faces.push([a, b, c]);
        }
        IcoMesh { vertices, faces }
    }

    fn edges(&self) -> Vec<(usize, usize)> {
        let mut e = Vec::with_capacity(self.faces.len() * 3);
        for f in &self.faces {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                e.push(if a < b { (a, b) } else { (b, a) });
            }
        }
        e.sort_unstable();
        e.dedup();
        e
    }
}

/// Vertices of the icosphere subdivided `subdiv` times (12, 42, 162, 642, ...).
pub fn build_icosphere<T: Real>(subdiv: u32) -> SphericalGrid<T> {
    let mesh = IcoMesh::new(subdiv);
    let mut neighbors = vec![Vec::new(); mesh.vertices.len()];
    for (a, b) in mesh.edges() {
        neighbors[a].push(b);
        neighbors[b].push(a);
    }
    SphericalGrid {
        points: mesh.vertices.iter().map(to_dir).collect(),
        neighbors,
        provenance: GridProvenance::Icosphere {
            subdiv,
            hemisphere: false,
        },
    }
}

/// One vertex per antipodal pair of the icosphere (6, 21, 81, 321, ...).
///
/// Representatives have positive `z` (ties broken by `y`, then `x`); the
/// adjacency wraps across the equator through the antipodal identification.
pub fn build_hemisphere<T: Real>(subdiv: u32) -> SphericalGrid<T> {
    let mesh = IcoMesh::new(subdiv);
    let n = mesh.vertices.len();
    let mut class = vec![usize::MAX; n];
    let mut reps: Vec<[f64; 3]> = Vec::new();
    // Vertices arrive in generation order; the antipode of each is found by
    // exact lookup on rounded coordinates.
    let key = |v: &[f64; 3]| {
        (
            (v[0] * 1e9).round() as i64,
            (v[1] * 1e9).round() as i64,
            (v[2] * 1e9).round() as i64,
        )
    };
    let lookup: HashMap<_, usize> = mesh
        .vertices
        .iter()
        .enumerate()
        .map(|(i, v)| (key(v), i))
        .collect();
    for i in 0..n {
        if class[i] != usize::MAX {
            continue;
        }
        let v = mesh.vertices[i];
        let anti = lookup[&key(&[-v[0], -v[1], -v[2]])];
        let d = to_dir::<f64>(&v);
        let canon = d.canonical_axis();
        class[i] = reps.len();
        class[anti] = reps.len();
        reps.push([canon.x, canon.y, canon.z]);
    }
    let mut neighbors = vec![Vec::new(); reps.len()];
    for (a, b) in mesh.edges() {
        let (ca, cb) = (class[a], class[b]);
        if ca != cb {
            neighbors[ca].push(cb);
            neighbors[cb].push(ca);
        }
    }
    for nb in &mut neighbors {
        nb.sort_unstable();
        nb.dedup();
    }
    SphericalGrid {
        points: reps.iter().map(to_dir).collect(),
        neighbors,
        provenance: GridProvenance::Icosphere {
            subdiv,
            hemisphere: true,
        },
    }
}

fn to_dir<T: Real>(v: &[f64; 3]) -> Direction<T> {
    Direction {
        x: nalgebra::convert(v[0]),
        y: nalgebra::convert(v[1]),
        z: nalgebra::convert(v[2]),
    }
}

/// Greedy farthest-point ordering of hemisphere directions by axial angle,
/// starting from the pole vertex (index 0).
fn farthest_point_order(points: &[Direction<f64>], count: usize) -> Vec<usize> {
    let mut chosen = vec![0usize];
    let mut min_angle: Vec<f64> = points.iter().map(|p| p.axial_angle(&points[0])).collect();
    min_angle[0] = -1.0;
    while chosen.len() < count {
        let mut best = usize::MAX;
        let mut best_val = -1.0;
        for (i, &a) in min_angle.iter().enumerate() {
            if a > best_val + 1e-12 {
                best_val = a;
                best = i;
            }
        }
        chosen.push(best);
        min_angle[best] = -1.0;
        for (i, p) in points.iter().enumerate() {
            if min_angle[i] >= 0.0 {
                let a = p.axial_angle(&points[best]);
                if a < min_angle[i] {
                    min_angle[i] = a;
                }
            }
        }
    }
    chosen
}

/// Gradient table with `n` antipodally distinct directions.
///
/// `n` equal to a hemisphere count (6, 21, 81, 321, ...) returns the whole
/// hemisphere. Otherwise `n` directions are picked by farthest-point sampling
/// from the hemisphere of the smallest icosphere with more than `n` classes,
/// keeping the pole. `n = 41` and `n = 40` are complementary halves of the
/// 81-direction scheme.
pub fn gradient_scheme(n: usize) -> Result<SphericalGrid<f64>> {
    if n == 0 {
        return Err(FodError::validation("gradient scheme needs at least one direction"));
    }
    let mut subdiv = 0u32;
    loop {
        let count = 10 * 4usize.pow(subdiv) / 2 + 1;
        if count == n {
            return Ok(build_hemisphere(subdiv));
        }
        if count > n {
            break;
        }
        subdiv += 1;
        if subdiv > 6 {
            return Err(FodError::validation(format!("unsupported gradient count {n}")));
        }
    }
    let hemi: SphericalGrid<f64> = build_hemisphere(subdiv);
    let total = hemi.len();
    let (idx, complement) = if 2 * n < total {
        // Complement scheme: the directions left after taking `total - n`.
        let taken = farthest_point_order(&hemi.points, total - n);
        let mut rest: Vec<usize> = (0..total).filter(|i| !taken.contains(i)).collect();
        rest.sort_unstable();
        (rest, true)
    } else {
        let mut taken = farthest_point_order(&hemi.points, n);
        taken.sort_unstable();
        (taken, false)
    };
    Ok(SphericalGrid {
        points: idx.iter().map(|&i| hemi.points[i]).collect(),
        neighbors: vec![Vec::new(); idx.len()],
        provenance: GridProvenance::IcosphereSubset {
            subdiv,
            count: n as u32,
            complement,
        },
    })
}

/// Splits the `n_total`-direction hemisphere scheme into the farthest-point
/// subset of size `n_first` and its complement.
pub fn split_scheme(n_total: usize, n_first: usize) -> Result<(SphericalGrid<f64>, SphericalGrid<f64>)> {
    let full = gradient_scheme(n_total)?;
    if n_first == 0 || n_first >= full.len() {
        return Err(FodError::validation("split size must be inside the scheme"));
    }
    let mut first = farthest_point_order(&full.points, n_first);
    first.sort_unstable();
    let rest: Vec<usize> = (0..full.len()).filter(|i| !first.contains(i)).collect();
    let pick = |ix: &[usize]| SphericalGrid {
        points: ix.iter().map(|&i| full.points[i]).collect(),
        neighbors: vec![Vec::new(); ix.len()],
        provenance: GridProvenance::Custom,
    };
    Ok((pick(&first), pick(&rest)))
}
