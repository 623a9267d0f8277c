//! Peak extraction and the evaluation metrics: fiber-count success rates,
//! angular error and Hellinger-distance summaries.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{FodError, Result};
use crate::narm::hellinger_distance;
use crate::scalar::{to_f64, Real};
use crate::sphere::{Direction, ShBasis, SphericalGrid};
use crate::synthetic::RoiTruth;

/// Peak detection parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PeakConfig {
    /// Peaks below `tau_rel * max(f)` are discarded.
    pub tau_rel: f64,
    /// Peaks closer than this (degrees, axial) are merged into the larger one.
    pub merge_angle_deg: f64,
    /// A voxel is isotropic when `max(f) / mean(f) < kappa_iso`.
    pub kappa_iso: f64,
    /// Polish grid maxima by hill climbing on the SH expansion.
    pub refine: bool,
}

impl Default for PeakConfig {
    fn default() -> Self {
        PeakConfig {
            tau_rel: 0.25,
            merge_angle_deg: 20.0,
            kappa_iso: 4.5,
            refine: true,
        }
    }
}

impl PeakConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau_rel) || !(self.merge_angle_deg >= 0.0) || !(self.kappa_iso >= 0.0) {
            return Err(FodError::validation(format!("invalid peak configuration {self:?}")));
        }
        Ok(())
    }
}

/// A detected fiber direction and the FOD value there.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub direction: Direction<f64>,
    pub value: f64,
}

/// Peaks of one voxel, strongest first.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct VoxelPeaks {
    pub peaks: Vec<Peak>,
    pub isotropic: bool,
}

impl VoxelPeaks {
    /// Number of fibers reported (zero for isotropic voxels).
    pub fn count(&self) -> usize {
        if self.isotropic {
            0
        } else {
            self.peaks.len()
        }
    }

    pub fn directions(&self) -> Vec<Direction<f64>> {
        if self.isotropic {
            Vec::new()
        } else {
            self.peaks.iter().map(|p| p.direction).collect()
        }
    }
}

fn merge_close(mut peaks: Vec<Peak>, angle_deg: f64) -> Vec<Peak> {
    peaks.sort_by(|a, b| b.value.total_cmp(&a.value));
    let mut kept: Vec<Peak> = Vec::new();
    for p in peaks {
        if kept.iter().all(|k| k.direction.axial_angle_deg(&p.direction) >= angle_deg) {
            kept.push(p);
        }
    }
    kept
}

/// Finds the peaks of a dense-grid FOD on an antipodally identified grid with
/// mesh adjacency.
pub fn detect_peaks<T: Real>(f: &DVector<T>, grid: &SphericalGrid<T>, cfg: &PeakConfig) -> VoxelPeaks {
    let vals: Vec<f64> = f.iter().map(|&v| to_f64(v).max(0.0)).collect();
    let max = vals.iter().copied().fold(0.0, f64::max);
    if !(max > 0.0) {
        return VoxelPeaks {
            peaks: Vec::new(),
            isotropic: true,
        };
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let isotropic = max / mean < cfg.kappa_iso;
    let mut peaks = Vec::new();
    for (i, &v) in vals.iter().enumerate() {
        if v < cfg.tau_rel * max || v <= 0.0 {
            continue;
        }
        let is_max = grid.neighbors[i].iter().all(|&j| v > vals[j] || (v == vals[j] && i < j));
        if is_max {
            peaks.push(Peak {
                direction: grid.points[i].cast(),
                value: v,
            });
        }
    }
    VoxelPeaks {
        peaks: merge_close(peaks, cfg.merge_angle_deg),
        isotropic,
    }
}

fn sh_value(sh: &ShBasis, coeffs: &DVector<f64>, d: &Direction<f64>) -> f64 {
    sh.eval(d).iter().zip(coeffs.iter()).map(|(a, b)| a * b).sum()
}

/// Moves a direction uphill on the SH expansion until the step falls below
/// `1e-3` degrees.
pub fn refine_direction(sh: &ShBasis, coeffs: &DVector<f64>, start: Direction<f64>) -> Peak {
    let mut d = start;
    let mut v = sh_value(sh, coeffs, &d);
    let mut step = 2.0f64.to_radians();
    while step > 1e-3f64.to_radians() {
        let a = d.to_array();
        let helper = if a[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
        let e1 = cross(a, helper);
        let e1 = scale(e1, 1.0 / norm(e1));
        let e2 = cross(a, e1);
        let mut best = None;
        for k in 0..8 {
            let t = k as f64 * std::f64::consts::FRAC_PI_4;
            let dir = [
                e1[0] * t.cos() + e2[0] * t.sin(),
                e1[1] * t.cos() + e2[1] * t.sin(),
                e1[2] * t.cos() + e2[2] * t.sin(),
            ];
            let c = Direction::normalized(
                a[0] * step.cos() + dir[0] * step.sin(),
                a[1] * step.cos() + dir[1] * step.sin(),
                a[2] * step.cos() + dir[2] * step.sin(),
            )
            .expect("rotated unit vector is nonzero");
            let cv = sh_value(sh, coeffs, &c);
            if cv > v && best.map_or(true, |(bv, _)| cv > bv) {
                best = Some((cv, c));
            }
        }
        match best {
            Some((bv, c)) => {
                v = bv;
                d = c;
            }
            None => step *= 0.5,
        }
    }
    Peak {
        direction: d.canonical_axis(),
        value: v,
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norm(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn scale(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

/// Peaks of an FOD given by SH coefficients: grid detection on `dense_sh * f`,
/// optionally refined on the SH expansion and merged again.
pub fn peaks_from_sh<T: Real>(
    f_sh: &DVector<T>,
    sh: &ShBasis,
    dense_sh: &nalgebra::DMatrix<T>,
    grid: &SphericalGrid<T>,
    cfg: &PeakConfig,
) -> VoxelPeaks {
    let dense = dense_sh * f_sh;
    let mut out = detect_peaks(&dense, grid, cfg);
    if cfg.refine && !out.peaks.is_empty() {
        let coeffs: DVector<f64> = f_sh.map(to_f64);
        let refined = out.peaks.iter().map(|p| refine_direction(sh, &coeffs, p.direction)).collect();
        out.peaks = merge_close(refined, cfg.merge_angle_deg);
    }
    out
}

/// Per-class fiber-count outcome and angular error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    /// True number of fibers.
    pub fibers: usize,
    pub voxels: usize,
    pub correct: f64,
    pub over: f64,
    pub under: f64,
    /// Median angular error (degrees) over matched pairs of correctly
    /// counted voxels.
    pub median_angle_deg: Option<f64>,
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Summary { mean, sd: var.sqrt() })
    }
}

/// All metrics of one estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub classes: Vec<ClassReport>,
    pub hellinger_truth: Option<Summary>,
    pub hellinger_reference: Option<Summary>,
}

impl MetricReport {
    pub fn class(&self, fibers: usize) -> Option<&ClassReport> {
        self.classes.iter().find(|c| c.fibers == fibers)
    }

    /// CSV header matching [`MetricReport::csv_row`].
    pub fn csv_header() -> &'static str {
        "method,co0,ov0,co1,ov1,un1,angle1,co2,ov2,un2,angle2,hellinger_truth_mean,hellinger_truth_sd,hellinger_ref_mean,hellinger_ref_sd"
    }

    /// One table row: 0-fiber Co/Ov, then Co/Ov/Un and median angle for 1
    /// and 2 fibers, then the Hellinger summaries. Missing cells are empty.
    pub fn csv_row(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
        let mut cells = vec![csv_escape(&self.label)];
        let c0 = self.class(0);
        cells.push(f(c0.map(|c| c.correct)));
        cells.push(f(c0.map(|c| c.over)));
        for k in [1, 2] {
            let c = self.class(k);
            cells.push(f(c.map(|c| c.correct)));
            cells.push(f(c.map(|c| c.over)));
            cells.push(f(c.map(|c| c.under)));
            cells.push(f(c.and_then(|c| c.median_angle_deg)));
        }
        for s in [self.hellinger_truth, self.hellinger_reference] {
            cells.push(f(s.map(|s| s.mean)));
            cells.push(f(s.map(|s| s.sd)));
        }
        cells.join(",")
    }
}

fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Smallest total angle (degrees) over one-to-one matchings of `detected` to
/// `truth`, returned as the per-pair angles of the best matching. Both lists
/// must have the same length.
pub fn match_angles(detected: &[Direction<f64>], truth: &[Direction<f64>]) -> Vec<f64> {
    assert_eq!(detected.len(), truth.len(), "matching needs equal counts");
    let n = truth.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best: Option<(f64, Vec<f64>)> = None;
    loop {
        let angles: Vec<f64> = (0..n).map(|i| detected[perm[i]].axial_angle_deg(&truth[i])).collect();
        let total: f64 = angles.iter().sum();
        if best.as_ref().map_or(true, |(b, _)| total < *b) {
            best = Some((total, angles));
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    best.map(|b| b.1).unwrap_or_default()
}

fn next_permutation(p: &mut [usize]) -> bool {
    if p.len() < 2 {
        return false;
    }
    let mut i = p.len() - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = p.len() - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Median with the usual midpoint convention for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Fiber-count classification and angular errors against the truth, one
/// report row per true class present in the region.
pub fn classify_counts(peaks: &[VoxelPeaks], truth: &RoiTruth) -> Result<Vec<ClassReport>> {
    if peaks.len() != truth.voxels.len() {
        return Err(FodError::validation(format!(
            "{} peak sets for {} truth voxels",
            peaks.len(),
            truth.voxels.len()
        )));
    }
    let mut out = Vec::new();
    for k in 0..=2 {
        let members: Vec<usize> = (0..peaks.len()).filter(|&i| truth.voxels[i].fiber_count().min(2) == k).collect();
        if members.is_empty() {
            continue;
        }
        let (mut co, mut ov, mut un) = (0usize, 0usize, 0usize);
        let mut angles = Vec::new();
        for &i in &members {
            let m = peaks[i].count();
            let t = truth.voxels[i].fiber_count();
            if m == t {
                co += 1;
                if t > 0 {
                    angles.extend(match_angles(&peaks[i].directions(), &truth.voxels[i].directions()));
                }
            } else if m > t {
                ov += 1;
            } else {
                un += 1;
            }
        }
        let n = members.len() as f64;
        out.push(ClassReport {
            fibers: k,
            voxels: members.len(),
            correct: co as f64 / n,
            over: ov as f64 / n,
            under: un as f64 / n,
            median_angle_deg: median(&angles),
        });
    }
    Ok(out)
}

/// Per-voxel Hellinger distances between two dense-grid FOD fields and their
/// summary.
pub fn hellinger_summary<T: Real>(estimates: &[DVector<T>], reference: &[DVector<T>]) -> Result<(Vec<f64>, Summary)> {
    if estimates.len() != reference.len() || estimates.is_empty() {
        return Err(FodError::validation("hellinger summary needs two non-empty fields of equal size"));
    }
    let d: Vec<f64> = estimates
        .iter()
        .zip(reference)
        .map(|(a, b)| to_f64(hellinger_distance(a, b)))
        .collect();
    let s = Summary::of(&d).expect("non-empty");
    Ok((d, s))
}
