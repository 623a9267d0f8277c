//! Precomputed matrices shared by every voxel of a run.

use nalgebra::{DMatrix, DVector};

use crate::admm::LassoDesign;
use crate::error::{FodError, Result};
use crate::scalar::Real;
use crate::signal::{ResponseFunction, ShellDesign};
use crate::sphere::{build_hemisphere, build_needlet_frame, Direction, GridProvenance, ShBasis, SphericalGrid};

/// SH basis, needlet transition matrix, dense evaluation grid and one design
/// block per shell.
#[derive(Debug, Clone)]
pub struct BasisBundle<T: Real> {
    pub sh: ShBasis,
    pub j_max: usize,
    /// `L x N` transition matrix.
    pub c: DMatrix<T>,
    pub dense_grid: SphericalGrid<T>,
    /// `Phi~`: SH evaluated on the dense grid.
    pub dense_sh: DMatrix<T>,
    /// `Phi~ C`: needlets evaluated on the dense grid (the constraint matrix).
    pub dense_frame: DMatrix<T>,
    pub shells: Vec<ShellDesign<T>>,
}

impl<T: Real> BasisBundle<T> {
    /// Builds the bundle with the hemisphere of the icosphere subdivided
    /// `dense_subdiv` times as the dense grid.
    pub fn new(l_max: usize, dense_subdiv: u32, shells: Vec<(ResponseFunction, Vec<Direction<T>>)>) -> Result<Self> {
        let grid = build_hemisphere::<T>(dense_subdiv);
        Self::with_grid(l_max, grid, shells)
    }

    pub fn with_grid(
        l_max: usize,
        dense_grid: SphericalGrid<T>,
        shells: Vec<(ResponseFunction, Vec<Direction<T>>)>,
    ) -> Result<Self> {
        let sh = ShBasis::new(l_max)?;
        let (frame, c) = build_needlet_frame::<T>(l_max)?;
        let dense_sh = sh.eval_matrix(&dense_grid.points)?;
        let dense_frame = &dense_sh * &c;
        let shells = shells
            .into_iter()
            .map(|(rf, g)| ShellDesign::new(&sh, rf, g, &c))
            .collect::<Result<Vec<_>>>()?;
        Ok(BasisBundle {
            sh,
            j_max: frame.j_max,
            c,
            dense_grid,
            dense_sh,
            dense_frame,
            shells,
        })
    }

    /// Number of needlet coefficients.
    pub fn n_coeffs(&self) -> usize {
        self.c.ncols()
    }

    /// Total measurements over the selected shells.
    pub fn n_measurements(&self, shells: &[usize]) -> usize {
        shells.iter().map(|&s| self.shells[s].len()).sum()
    }

    /// Stacked lasso design for the listed shells, in the given order.
    pub fn design(&self, shells: &[usize]) -> Result<LassoDesign<T>> {
        if shells.is_empty() {
            return Err(FodError::validation("no shells selected"));
        }
        let mut rows = 0;
        for &s in shells {
            let shell = self
                .shells
                .get(s)
                .ok_or_else(|| FodError::validation(format!("shell {s} does not exist")))?;
            rows += shell.len();
        }
        let mut u = DMatrix::zeros(rows, self.sh.len());
        let mut r = 0;
        for &s in shells {
            let block = &self.shells[s].sh_design;
            u.view_mut((r, 0), (block.nrows(), block.ncols())).copy_from(block);
            r += block.nrows();
        }
        LassoDesign::framed(u, self.dense_sh.clone(), self.c.clone())
    }

    /// SH coefficients `C beta`.
    pub fn sh_coeffs(&self, beta: &DVector<T>) -> DVector<T> {
        &self.c * beta
    }

    /// FOD values on the dense grid, `Phi~ C beta`.
    pub fn dense_fod(&self, beta: &DVector<T>) -> DVector<T> {
        &self.dense_sh * (&self.c * beta)
    }

    /// FOD values on the dense grid from SH coefficients.
    pub fn dense_fod_from_sh(&self, f: &DVector<T>) -> DVector<T> {
        &self.dense_sh * f
    }

    pub fn dense_provenance(&self) -> GridProvenance {
        self.dense_grid.provenance
    }
}
