//! Synthetic regions of interest: crossing-bundle geometries, dirac-mixture
//! ground truth, noiseless convolution signals and Rician noise.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FodError, Result};
use crate::scalar::{lit, Real};
use crate::signal::ResponseFunction;
use crate::sphere::{Direction, ShBasis};
use crate::volume::{ShellInfo, SignalVolume, VoxelGrid};

/// Ground-truth configuration of one voxel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VoxelTruth {
    /// Constant FOD `1 / (4 pi)`.
    Isotropic,
    /// Dirac mixture with `(direction, fraction)` pairs summing to one.
    Fibers { fibers: Vec<(Direction<f64>, f64)> },
}

impl VoxelTruth {
    pub fn fiber_count(&self) -> usize {
        match self {
            VoxelTruth::Isotropic => 0,
            VoxelTruth::Fibers { fibers } => fibers.len(),
        }
    }

    pub fn directions(&self) -> Vec<Direction<f64>> {
        match self {
            VoxelTruth::Isotropic => Vec::new(),
            VoxelTruth::Fibers { fibers } => fibers.iter().map(|f| f.0).collect(),
        }
    }

    /// Equal-weight mixture of the given directions.
    pub fn equal_mixture(dirs: &[Direction<f64>]) -> Self {
        if dirs.is_empty() {
            return VoxelTruth::Isotropic;
        }
        let p = 1.0 / dirs.len() as f64;
        VoxelTruth::Fibers {
            fibers: dirs.iter().map(|&d| (d, p)).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let VoxelTruth::Fibers { fibers } = self {
            if fibers.is_empty() {
                return Err(FodError::validation("fibered voxel without fibers"));
            }
            for (d, p) in fibers {
                d.validate()?;
                if !(*p > 0.0) {
                    return Err(FodError::validation("fiber fractions must be positive"));
                }
            }
            let total: f64 = fibers.iter().map(|f| f.1).sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(FodError::validation(format!("fiber fractions sum to {total}, not 1")));
            }
        }
        Ok(())
    }
}

/// Ground truth for a whole region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiTruth {
    pub grid: VoxelGrid,
    pub voxels: Vec<VoxelTruth>,
}

impl RoiTruth {
    pub fn new(grid: VoxelGrid, voxels: Vec<VoxelTruth>) -> Result<Self> {
        if voxels.len() != grid.len() {
            return Err(FodError::validation(format!(
                "{} truth voxels for a grid of {} voxels",
                voxels.len(),
                grid.len()
            )));
        }
        for v in &voxels {
            v.validate()?;
        }
        Ok(RoiTruth { grid, voxels })
    }

    /// Number of voxels with 0, 1 and 2 (or more) fibers.
    pub fn counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for v in &self.voxels {
            c[v.fiber_count().min(2)] += 1;
        }
        c
    }
}

/// The named regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RoiKind {
    #[serde(rename = "roi2d-1")]
    Roi2dI,
    #[serde(rename = "roi2d-2")]
    Roi2dII,
    #[serde(rename = "roi3d")]
    Roi3d,
}

/// Two crossing bundles whose centrelines are mirror-image quadratic arcs.
///
/// Bundle A runs along `y = c + slope (x - c) - curvature (x - c)^2 + offset +
/// z_shift (z - c_z)`, bundle B along its mirror image `x -> nx - 1 - x`, so
/// the bundles cross at `2 atan(slope)` in the centre.
/// Fiber directions follow the tangent of the parallel arc through each voxel,
/// lifted out of the plane by `tilt` (the slope of the z component against the
/// in-plane length).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BundleGeometry {
    pub slope: f64,
    pub curvature: f64,
    pub offset: f64,
    pub tilt: f64,
    pub z_shift: f64,
}

/// Region layout: grid size, voxel-type counts and bundle geometry.
///
/// Voxel types are assigned by rank: the `zero` voxels farthest from both
/// centrelines are isotropic, the `two` remaining voxels closest to both are
/// crossings and every other voxel carries the nearer bundle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiSpec {
    pub kind: RoiKind,
    pub dims: [usize; 3],
    /// Target number of 0-, 1- and 2-fiber voxels.
    pub counts: [usize; 3],
    pub geometry: BundleGeometry,
}

impl RoiSpec {
    pub fn named(kind: RoiKind) -> Self {
        match kind {
            RoiKind::Roi2dI => RoiSpec {
                kind,
                dims: [10, 10, 1],
                counts: [0, 72, 28],
                geometry: BundleGeometry {
                    slope: 1.0,
                    curvature: 0.04,
                    offset: 0.0,
                    tilt: 0.0,
                    z_shift: 0.0,
                },
            },
            RoiKind::Roi2dII => RoiSpec {
                kind,
                dims: [10, 10, 1],
                counts: [22, 66, 12],
                geometry: BundleGeometry {
                    slope: 1.0,
                    curvature: 0.04,
                    offset: 0.0,
                    tilt: 0.0,
                    z_shift: 0.0,
                },
            },
            RoiKind::Roi3d => RoiSpec {
                kind,
                dims: [10, 10, 5],
                counts: [52, 163, 285],
                geometry: BundleGeometry {
                    slope: 1.0,
                    curvature: 0.04,
                    offset: 0.0,
                    tilt: 0.5,
                    z_shift: 0.5,
                },
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let grid = VoxelGrid::new(self.dims)?;
        let total: usize = self.counts.iter().sum();
        if total != grid.len() {
            return Err(FodError::Config(format!(
                "voxel-type counts {:?} add up to {total}, but the grid has {} voxels",
                self.counts,
                grid.len()
            )));
        }
        let g = &self.geometry;
        if ![g.slope, g.curvature, g.offset, g.tilt, g.z_shift].iter().all(|v| v.is_finite()) {
            return Err(FodError::Config("bundle geometry parameters must be finite".into()));
        }
        Ok(())
    }
}

fn arc_direction(slope: f64, tilt: f64) -> Direction<f64> {
    let planar = (1.0 + slope * slope).sqrt();
    Direction::normalized(1.0, slope, tilt * planar).expect("arc tangent is never zero")
}

/// Builds the ground truth of a region.
pub fn make_roi(spec: &RoiSpec) -> Result<RoiTruth> {
    spec.validate()?;
    let grid = VoxelGrid::new(spec.dims)?;
    let g = spec.geometry;
    let [nx, _, nz] = spec.dims;
    let c = (nx as f64 - 1.0) / 2.0;
    let cz = (nz as f64 - 1.0) / 2.0;
    let centre = |x: f64, z: f64| c + g.slope * (x - c) - g.curvature * (x - c).powi(2) + g.offset + g.z_shift * (z - cz);
    let slope = |x: f64| g.slope - 2.0 * g.curvature * (x - c);

    let n = grid.len();
    let mut dist = vec![[0.0f64; 2]; n];
    let mut dirs = vec![[Direction::new(1.0f64, 0.0, 0.0)?; 2]; n];
    for (i, (d, dir)) in dist.iter_mut().zip(dirs.iter_mut()).enumerate() {
        let [x, y, z] = grid.coords(i).map(|v| v as f64);
        let xm = nx as f64 - 1.0 - x;
        let (sa, sb) = (slope(x), -slope(xm));
        d[0] = (y - centre(x, z)).abs() / (1.0 + sa * sa).sqrt();
        d[1] = (y - centre(xm, z)).abs() / (1.0 + sb * sb).sqrt();
        dir[0] = arc_direction(sa, g.tilt);
        dir[1] = arc_direction(sb, g.tilt);
    }

    let near = |i: usize| dist[i][0].min(dist[i][1]);
    let far = |i: usize| dist[i][0].max(dist[i][1]);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| near(b).total_cmp(&near(a)).then(a.cmp(&b)));
    let mut kind = vec![1usize; n];
    for &i in &order[..spec.counts[0]] {
        kind[i] = 0;
    }
    let mut rest: Vec<usize> = order[spec.counts[0]..].to_vec();
    rest.sort_by(|&a, &b| far(a).total_cmp(&far(b)).then(a.cmp(&b)));
    for &i in &rest[..spec.counts[2]] {
        kind[i] = 2;
    }

    let voxels: Vec<VoxelTruth> = (0..n)
        .map(|i| match kind[i] {
            0 => VoxelTruth::Isotropic,
            2 => VoxelTruth::equal_mixture(&dirs[i]),
            _ => {
                let k = if dist[i][0] <= dist[i][1] { 0 } else { 1 };
                VoxelTruth::equal_mixture(&dirs[i][k..=k])
            }
        })
        .collect();
    let truth = RoiTruth::new(grid, voxels)?;
    if truth.counts() != spec.counts {
        return Err(FodError::Config(format!(
            "geometry produced voxel-type counts {:?}, expected {:?}",
            truth.counts(),
            spec.counts
        )));
    }
    Ok(truth)
}

/// Noiseless signal of one voxel: `S(u) = sum_k p_k R(u . d_k)` for fibers and
/// the isotropic kernel `exp(-b lambda_perp)` for isotropic voxels.
pub fn noiseless_signal<T: Real>(truth: &VoxelTruth, rf: &ResponseFunction, gradients: &[Direction<T>]) -> DVector<T> {
    match truth {
        VoxelTruth::Isotropic => {
            let iso = ResponseFunction {
                lambda_par: rf.lambda_perp,
                ..*rf
            };
            DVector::from_element(gradients.len(), iso.eval(T::zero()))
        }
        VoxelTruth::Fibers { fibers } => DVector::from_iterator(
            gradients.len(),
            gradients.iter().map(|u| {
                fibers
                    .iter()
                    .fold(T::zero(), |acc, (d, p)| acc + lit::<T>(*p) * rf.eval(u.dot(&d.cast::<T>())))
            }),
        ),
    }
}

/// SH projection of the true FOD: dirac sifting `f_lm = sum_k p_k Phi_lm(d_k)`,
/// or `1 / sqrt(4 pi)` in the constant term for isotropic voxels.
pub fn true_fod_sh<T: Real>(truth: &VoxelTruth, sh: &ShBasis) -> DVector<T> {
    let mut f = DVector::zeros(sh.len());
    match truth {
        VoxelTruth::Isotropic => f[0] = lit::<T>(1.0 / (4.0 * std::f64::consts::PI).sqrt()),
        VoxelTruth::Fibers { fibers } => {
            for (d, p) in fibers {
                for (fi, phi) in f.iter_mut().zip(sh.eval(&d.cast::<T>())) {
                    *fi += lit::<T>(*p) * phi;
                }
            }
        }
    }
    f
}

/// Rician noise level and seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn from_snr(s0: f64, snr: f64, seed: u64) -> Result<Self> {
        let spec = NoiseSpec { sigma: s0 / snr, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma > 0.0 && self.sigma.is_finite() {
            Ok(())
        } else {
            Err(FodError::validation(format!("noise level must be positive, got {}", self.sigma)))
        }
    }
}

/// Independent random stream for one voxel: the ChaCha stream number is the
/// voxel index.
pub fn voxel_rng(seed: u64, voxel: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(voxel);
    rng
}

/// `y_i = sqrt((S_i + e1)^2 + e2^2)` with independent `N(0, sigma^2)` channels.
pub fn add_rician_noise<T: Real, R: Rng>(s: &DVector<T>, sigma: f64, rng: &mut R) -> DVector<T> {
    s.map(|v| {
        let e1: f64 = rng.sample(StandardNormal);
        let e2: f64 = rng.sample(StandardNormal);
        let re = v + lit::<T>(sigma * e1);
        let im: T = lit(sigma * e2);
        (re * re + im * im).sqrt()
    })
}

/// Simulated measurements of a region on the given shells; the noise of each
/// voxel is drawn from its own stream, shells in order.
pub fn simulate<T: Real>(truth: &RoiTruth, shells: &[ShellInfo], noise: Option<NoiseSpec>) -> Result<SignalVolume<T>> {
    if shells.is_empty() {
        return Err(FodError::validation("at least one shell is required"));
    }
    for s in shells {
        s.response.validate()?;
    }
    if let Some(n) = noise {
        n.validate()?;
    }
    let grads: Vec<Vec<Direction<T>>> = shells
        .iter()
        .map(|s| s.gradients.iter().map(|d| d.cast::<T>()).collect())
        .collect();
    let data: Vec<DVector<T>> = truth
        .voxels
        .par_iter()
        .enumerate()
        .map(|(i, vt)| {
            let parts: Vec<DVector<T>> = shells
                .iter()
                .zip(&grads)
                .map(|(s, g)| noiseless_signal(vt, &s.response, g))
                .collect();
            let mut y = DVector::from_iterator(
                parts.iter().map(|p| p.len()).sum(),
                parts.iter().flat_map(|p| p.iter().copied()),
            );
            if let Some(n) = noise {
                y = add_rician_noise(&y, n.sigma, &mut voxel_rng(n.seed, i as u64));
            }
            y
        })
        .collect();
    SignalVolume::new(truth.grid, shells.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere::gradient_scheme;

    fn rf() -> ResponseFunction {
        ResponseFunction::with_ratio(1000.0, 1e-3, 10.0, true).unwrap()
    }

    #[test]
    fn named_rois_have_expected_counts() {
        for (k, want) in [
            (RoiKind::Roi2dI, [0, 72, 28]),
            (RoiKind::Roi2dII, [22, 66, 12]),
            (RoiKind::Roi3d, [52, 163, 285]),
        ] {
            let t = make_roi(&RoiSpec::named(k)).unwrap();
            assert_eq!(t.counts(), want, "{k:?}");
        }
    }

    #[test]
    fn bad_counts_are_config_errors() {
        let mut s = RoiSpec::named(RoiKind::Roi2dI);
        s.counts = [0, 70, 28];
        assert!(matches!(make_roi(&s), Err(FodError::Config(_))));
    }

    #[test]
    fn direction_fields_are_smooth() {
        for k in [RoiKind::Roi2dI, RoiKind::Roi2dII, RoiKind::Roi3d] {
            let t = make_roi(&RoiSpec::named(k)).unwrap();
            let g = t.grid;
            for i in 0..g.len() {
                for j in g.face_neighbors(i) {
                    for a in t.voxels[i].directions() {
                        // The same bundle in the neighbour is its closest direction.
                        let best = t.voxels[j]
                            .directions()
                            .iter()
                            .map(|b| a.axial_angle_deg(b))
                            .fold(f64::INFINITY, f64::min);
                        if best.is_finite() && best < 45.0 {
                            assert!(best <= 15.0, "{k:?} {i}->{j}: {best}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn noiseless_signal_examples() {
        let d = Direction::new(0.0f64, 0.0, 1.0).unwrap();
        let perp = Direction::new(1.0f64, 0.0, 0.0).unwrap();
        let v = VoxelTruth::equal_mixture(&[d]);
        let s = noiseless_signal(&v, &rf(), &[d, perp, d.neg()]);
        assert!((s[0] - (-10.0f64).exp()).abs() < 1e-15);
        assert!((s[1] - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(s[0], s[2]);
        let iso = noiseless_signal(&VoxelTruth::Isotropic, &rf(), &[d, perp]);
        assert!((iso[0] - (-1.0f64).exp()).abs() < 1e-15 && iso[0] == iso[1]);
    }

    #[test]
    fn true_fod_projection() {
        let sh = ShBasis::new(8).unwrap();
        let iso: DVector<f64> = true_fod_sh(&VoxelTruth::Isotropic, &sh);
        assert!(iso.iter().skip(1).all(|&v| v == 0.0));
        let d = Direction::normalized(0.3f64, -0.2, 0.9).unwrap();
        let f: DVector<f64> = true_fod_sh(&VoxelTruth::equal_mixture(&[d]), &sh);
        assert_eq!(f.as_slice(), sh.eval(&d).as_slice());
        assert!((f[0] * (4.0 * std::f64::consts::PI).sqrt() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn rician_limits_and_reproducibility() {
        let s = DVector::from_element(5, 0.5f64);
        let y = add_rician_noise(&s, 1e-300, &mut voxel_rng(1, 0));
        assert_eq!(y, s);
        let a = add_rician_noise(&s, 0.05, &mut voxel_rng(7, 3));
        let b = add_rician_noise(&s, 0.05, &mut voxel_rng(7, 3));
        let c = add_rician_noise(&s, 0.05, &mut voxel_rng(7, 4));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn simulated_volume_shapes() {
        let truth = make_roi(&RoiSpec::named(RoiKind::Roi2dI)).unwrap();
        let shell = ShellInfo {
            b: 1000.0,
            gradients: gradient_scheme(41).unwrap().points,
            response: rf(),
        };
        let vol: SignalVolume<f64> = simulate(&truth, &[shell], NoiseSpec::from_snr(1.0, 20.0, 1).ok()).unwrap();
        assert_eq!(vol.data.len(), 100);
        assert!(vol.data.iter().all(|d| d.len() == 41 && d.iter().all(|v| *v >= 0.0)));
    }
}
