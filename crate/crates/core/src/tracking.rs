//! Deterministic streamline tracking over a peak field.

use serde::{Deserialize, Serialize};

use crate::error::{FodError, Result};
use crate::metrics::{median, VoxelPeaks};
use crate::volume::VoxelGrid;

/// Tracking parameters (lengths in voxel units).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackingConfig {
    pub step: f64,
    pub max_turn_deg: f64,
    pub min_length: f64,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        TrackingConfig {
            step: 0.5,
            max_turn_deg: 60.0,
            min_length: 2.0,
        }
    }
}

impl TrackingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) || !(0.0..=180.0).contains(&self.max_turn_deg) || !(self.min_length >= 0.0) {
            return Err(FodError::validation(format!("invalid tracking configuration {self:?}")));
        }
        Ok(())
    }
}

/// One tract: positions in voxel coordinates and its length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Streamline {
    pub seed_voxel: usize,
    pub seed_peak: usize,
    pub points: Vec<[f64; 3]>,
    pub length: f64,
}

/// Number of tracts and their median length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackingSummary {
    pub count: usize,
    pub median_length: f64,
}

fn aligned_peak(peaks: &VoxelPeaks, incoming: [f64; 3]) -> Option<[f64; 3]> {
    if peaks.isotropic {
        return None;
    }
    let mut best: Option<(f64, [f64; 3])> = None;
    for p in &peaks.peaks {
        let d = p.direction.to_array();
        let dot = d[0] * incoming[0] + d[1] * incoming[1] + d[2] * incoming[2];
        let oriented = if dot < 0.0 { [-d[0], -d[1], -d[2]] } else { d };
        // Ties keep the earlier peak, so the choice does not depend on list
        // order unless two peaks are exactly equally aligned.
        if best.map_or(true, |(b, _)| dot.abs() > b) {
            best = Some((dot.abs(), oriented));
        }
    }
    best.map(|b| b.1)
}

fn trace_half(
    grid: &VoxelGrid,
    peaks: &[VoxelPeaks],
    start: [f64; 3],
    dir: [f64; 3],
    cfg: &TrackingConfig,
    max_steps: usize,
) -> Vec<[f64; 3]> {
    let cos_max = cfg.max_turn_deg.to_radians().cos();
    let mut out = Vec::new();
    let mut pos = start;
    let mut dir = dir;
    for _ in 0..max_steps {
        let next = [pos[0] + cfg.step * dir[0], pos[1] + cfg.step * dir[1], pos[2] + cfg.step * dir[2]];
        let Some(w) = grid.locate(next) else { break };
        let Some(nd) = aligned_peak(&peaks[w], dir) else { break };
        let cos = nd[0] * dir[0] + nd[1] * dir[1] + nd[2] * dir[2];
        if cos < cos_max {
            break;
        }
        out.push(next);
        pos = next;
        dir = nd;
    }
    out
}

/// Seeds one streamline per peak at every voxel centre and follows the
/// best-aligned peak of the containing voxel in both directions.
pub fn track(grid: &VoxelGrid, peaks: &[VoxelPeaks], cfg: &TrackingConfig) -> Result<(Vec<Streamline>, TrackingSummary)> {
    cfg.validate()?;
    if peaks.len() != grid.len() {
        return Err(FodError::validation(format!(
            "{} peak sets for a grid of {} voxels",
            peaks.len(),
            grid.len()
        )));
    }
    let extent: usize = grid.dims.iter().sum();
    let max_steps = ((4 * extent) as f64 / cfg.step).ceil() as usize;
    let mut tracts = Vec::new();
    for (v, vp) in peaks.iter().enumerate() {
        if vp.isotropic {
            continue;
        }
        let c = grid.coords(v).map(|x| x as f64);
        for (k, p) in vp.peaks.iter().enumerate() {
            let d = p.direction.to_array();
            let fwd = trace_half(grid, peaks, c, d, cfg, max_steps);
            let bwd = trace_half(grid, peaks, c, [-d[0], -d[1], -d[2]], cfg, max_steps);
            let mut points: Vec<[f64; 3]> = bwd.into_iter().rev().collect();
            points.push(c);
            points.extend(fwd);
            let length = points
                .windows(2)
                .map(|w| ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2) + (w[1][2] - w[0][2]).powi(2)).sqrt())
                .sum();
            if length >= cfg.min_length {
                tracts.push(Streamline {
                    seed_voxel: v,
                    seed_peak: k,
                    points,
                    length,
                });
            }
        }
    }
    let lengths: Vec<f64> = tracts.iter().map(|t| t.length).collect();
    let summary = TrackingSummary {
        count: tracts.len(),
        median_length: median(&lengths).unwrap_or(0.0),
    };
    Ok((tracts, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::Peak;
    use crate::sphere::Direction;

    fn field(dirs: &[Option<Direction<f64>>]) -> Vec<VoxelPeaks> {
        dirs.iter()
            .map(|d| match d {
                Some(d) => VoxelPeaks {
                    peaks: vec![Peak { direction: *d, value: 1.0 }],
                    isotropic: false,
                },
                None => VoxelPeaks {
                    peaks: Vec::new(),
                    isotropic: true,
                },
            })
            .collect()
    }

    #[test]
    fn straight_line() {
        let g = VoxelGrid::new([10, 1, 1]).unwrap();
        let x = Direction::new(1.0, 0.0, 0.0).unwrap();
        let (t, s) = track(&g, &field(&[Some(x); 10]), &TrackingConfig::default()).unwrap();
        assert_eq!(s.count, 10);
        assert!((s.median_length - 9.0).abs() < 1e-9);
        assert!(t.iter().all(|t| (t.length - 9.0).abs() < 1e-9));
    }

    #[test]
    fn isotropic_field_has_no_tracts() {
        let g = VoxelGrid::new([4, 4, 1]).unwrap();
        let (_, s) = track(&g, &field(&[None; 16]), &TrackingConfig::default()).unwrap();
        assert_eq!(s.count, 0);
        assert_eq!(s.median_length, 0.0);
    }

    #[test]
    fn sharp_turn_stops() {
        let g = VoxelGrid::new([4, 1, 1]).unwrap();
        let x = Direction::new(1.0, 0.0, 0.0).unwrap();
        let y = Direction::new(0.0, 1.0, 0.0).unwrap();
        let (t, _) = track(&g, &field(&[Some(x), Some(x), Some(y), Some(y)]), &TrackingConfig::default()).unwrap();
        assert!(t.iter().all(|t| t.points.iter().all(|p| p[0] <= 1.5 + 1e-12) || t.seed_voxel >= 2));
    }
}
