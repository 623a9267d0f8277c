//! Voxel grids, measured signals and fitted coefficient fields.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{FodError, Result};
use crate::scalar::Real;
use crate::signal::ResponseFunction;
use crate::sphere::Direction;

/// Rectangular voxel grid with unit spacing; `dims[2] == 1` for 2D regions.
///
/// Voxels are numbered x-fastest: `i = x + nx * (y + ny * z)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoxelGrid {
    pub dims: [usize; 3],
}

impl VoxelGrid {
    pub fn new(dims: [usize; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(FodError::validation(format!("grid dimensions must be positive, got {dims:?}")));
        }
        Ok(VoxelGrid { dims })
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_2d(&self) -> bool {
        self.dims[2] == 1
    }

    pub fn coords(&self, i: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [i % nx, (i / nx) % ny, i / (nx * ny)]
    }

    pub fn index(&self, c: [usize; 3]) -> usize {
        c[0] + self.dims[0] * (c[1] + self.dims[1] * c[2])
    }

    /// Index of the voxel containing a continuous position (voxel centres at
    /// integer coordinates), or `None` outside the grid.
    pub fn locate(&self, p: [f64; 3]) -> Option<usize> {
        let mut c = [0usize; 3];
        for k in 0..3 {
            let r = p[k].round();
            if r < 0.0 || r >= self.dims[k] as f64 {
                return None;
            }
            c[k] = r as usize;
        }
        Some(self.index(c))
    }

    /// Integer offsets with Euclidean length `<= radius`, sorted by length
    /// and then lexicographically; the zero offset comes first.
    pub fn offsets_within(&self, radius: f64) -> Vec<([i64; 3], f64)> {
        let r = radius.floor() as i64;
        let rz = if self.is_2d() { 0 } else { r };
        let mut out = Vec::new();
        for dz in -rz..=rz {
            for dy in -r..=r {
                for dx in -r..=r {
                    let d = ((dx * dx + dy * dy + dz * dz) as f64).sqrt();
                    if d <= radius + 1e-12 {
                        out.push(([dx, dy, dz], d));
                    }
                }
            }
        }
        out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        out
    }

    /// Voxels of the grid within `radius` of voxel `i`, with their distances.
    pub fn neighbors_within(&self, i: usize, offsets: &[([i64; 3], f64)]) -> Vec<(usize, f64)> {
        let c = self.coords(i);
        offsets
            .iter()
            .filter_map(|(o, d)| {
                let mut q = [0usize; 3];
                for k in 0..3 {
                    let v = c[k] as i64 + o[k];
                    if v < 0 || v >= self.dims[k] as i64 {
                        return None;
                    }
                    q[k] = v as usize;
                }
                Some((self.index(q), *d))
            })
            .collect()
    }

    /// Face neighbours (distance exactly 1) inside the grid.
    pub fn face_neighbors(&self, i: usize) -> Vec<usize> {
        let offs: Vec<_> = self.offsets_within(1.0).into_iter().filter(|(_, d)| *d > 0.5).collect();
        self.neighbors_within(i, &offs).into_iter().map(|(j, _)| j).collect()
    }
}

/// Acquisition description of one shell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShellInfo {
    pub b: f64,
    pub gradients: Vec<Direction<f64>>,
    /// Fiber response used for this shell.
    pub response: ResponseFunction,
}

/// Measurements for every voxel; each voxel vector is the concatenation of
/// its shells in order.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalVolume<T: Real> {
    pub grid: VoxelGrid,
    pub shells: Vec<ShellInfo>,
    pub data: Vec<DVector<T>>,
}

impl<T: Real> SignalVolume<T> {
    pub fn new(grid: VoxelGrid, shells: Vec<ShellInfo>, data: Vec<DVector<T>>) -> Result<Self> {
        let n: usize = shells.iter().map(|s| s.gradients.len()).sum();
        if data.len() != grid.len() {
            return Err(FodError::validation(format!(
                "{} voxel vectors for a grid of {} voxels",
                data.len(),
                grid.len()
            )));
        }
        if let Some(bad) = data.iter().position(|d| d.len() != n) {
            return Err(FodError::validation(format!(
                "voxel {bad} has {} measurements, expected {n}",
                data[bad].len()
            )));
        }
        Ok(SignalVolume { grid, shells, data })
    }

    /// Row range of shell `s` inside each voxel vector.
    pub fn shell_range(&self, s: usize) -> std::ops::Range<usize> {
        let start: usize = self.shells[..s].iter().map(|x| x.gradients.len()).sum();
        start..start + self.shells[s].gradients.len()
    }

    /// Per-voxel measurement vectors restricted to the listed shells, in order.
    pub fn select_shells(&self, shells: &[usize]) -> Result<Vec<DVector<T>>> {
        if let Some(bad) = shells.iter().find(|&&s| s >= self.shells.len()) {
            return Err(FodError::validation(format!("shell {bad} does not exist")));
        }
        let ranges: Vec<_> = shells.iter().map(|&s| self.shell_range(s)).collect();
        let n: usize = ranges.iter().map(|r| r.len()).sum();
        Ok(self
            .data
            .iter()
            .map(|d| {
                let mut out = DVector::zeros(n);
                let mut k = 0;
                for r in &ranges {
                    for i in r.clone() {
                        out[k] = d[i];
                        k += 1;
                    }
                }
                out
            })
            .collect())
    }
}

/// Needlet coefficients for every voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct FodField<T: Real> {
    pub grid: VoxelGrid,
    pub betas: Vec<DVector<T>>,
}
