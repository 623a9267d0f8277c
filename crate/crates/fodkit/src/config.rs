//! Run configuration with defaults for the synthetic experiments.

use std::path::Path;

use serde::{Deserialize, Serialize};

use fodkit::admm::{LambdaPath, SolverConfig};
use fodkit::metrics::PeakConfig;
use fodkit::narm::{LambdaPolicy, Schedule, SmootherConfig, Variant};
use fodkit::synthetic::{RoiKind, RoiSpec};
use fodkit::tracking::TrackingConfig;

use crate::CliError;

/// Named experiments understood by `reproduce`.
pub const PRESETS: [&str; 5] = ["roi2d-1", "roi2d-2", "roi3d-b1000", "roi3d-b3000", "roi3d-multib"];

/// One b-value shell of the acquisition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShellConfig {
    pub b: f64,
    /// Number of directions of the scheme assigned to this shell; `None`
    /// takes every direction not claimed by the other shells.
    #[serde(default)]
    pub count: Option<usize>,
}

/// Gradient scheme, shells and tissue diffusivities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcquisitionConfig {
    /// Size of the hemisphere gradient scheme shared by the shells.
    pub directions: usize,
    pub shells: Vec<ShellConfig>,
    /// Perpendicular diffusivity of the fiber kernel (mm^2/s). Isotropic
    /// voxels diffuse with the kernel's perpendicular diffusivity.
    pub lambda_perp: f64,
    /// Axial over perpendicular diffusivity of the fiber kernel.
    pub ratio: f64,
    /// With `false`, `lambda_perp` is taken as the axial diffusivity and the
    /// perpendicular one is `lambda_perp / ratio`.
    pub axial_leading: bool,
    pub s0: f64,
    /// `S0 / sigma`; `None` simulates noiseless signals.
    pub snr: Option<f64>,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        AcquisitionConfig {
            directions: 41,
            shells: vec![ShellConfig { b: 1000.0, count: None }],
            lambda_perp: 1e-3,
            ratio: 10.0,
            axial_leading: true,
            s0: 1.0,
            snr: Some(20.0),
        }
    }
}

/// SH order and dense evaluation grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BasisConfig {
    pub l_max: usize,
    /// Icosphere subdivision level of the dense hemisphere grid.
    pub dense_subdiv: u32,
}

impl Default for BasisConfig {
    fn default() -> Self {
        BasisConfig { l_max: 8, dense_subdiv: 3 }
    }
}

/// Descending log-spaced `lambda` grid and the RSS rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LambdaConfig {
    pub hi: f64,
    pub lo: f64,
    pub count: usize,
    pub window: usize,
    pub threshold: f64,
}

impl Default for LambdaConfig {
    fn default() -> Self {
        LambdaConfig {
            hi: 1.0,
            lo: 1e-5,
            count: 100,
            window: 5,
            threshold: 1e-3,
        }
    }
}

impl LambdaConfig {
    pub fn path(&self, threshold: Option<f64>) -> Result<LambdaPath, CliError> {
        Ok(LambdaPath::log_spaced(
            self.hi,
            self.lo,
            self.count,
            self.window,
            threshold.unwrap_or(self.threshold),
        )?)
    }
}

/// Estimator of one table row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "estimator", rename_all = "snake_case")]
pub enum Estimator {
    Voxelwise,
    Smoothed {
        variant: Variant,
        /// Defaults to the variant's default.
        #[serde(default)]
        gamma: Option<f64>,
        #[serde(default = "default_alpha")]
        alpha: f64,
        /// Defaults to the 2D or 3D schedule of the region.
        #[serde(default)]
        schedule: Option<Schedule>,
        #[serde(default)]
        lambda_policy: LambdaPolicy,
    },
}

fn default_alpha() -> f64 {
    0.15
}

/// One fitted estimate of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    /// Row label; derived from the estimator when absent.
    #[serde(default)]
    pub label: Option<String>,
    #[serde(flatten)]
    pub estimator: Estimator,
    /// Shell indices whose measurements are stacked for this fit; all
    /// shells when absent.
    #[serde(default)]
    pub shells: Option<Vec<usize>>,
    /// Overrides the RSS threshold of the `lambda` rule.
    #[serde(default)]
    pub rss_threshold: Option<f64>,
}

impl MethodConfig {
    pub fn voxelwise() -> Self {
        MethodConfig {
            label: None,
            estimator: Estimator::Voxelwise,
            shells: None,
            rss_threshold: None,
        }
    }

    pub fn smoothed(variant: Variant) -> Self {
        MethodConfig {
            label: None,
            estimator: Estimator::Smoothed {
                variant,
                gamma: None,
                alpha: default_alpha(),
                schedule: None,
                lambda_policy: LambdaPolicy::default(),
            },
            shells: None,
            rss_threshold: None,
        }
    }

    pub fn with_label(mut self, label: &str) -> Self {
        self.label = Some(label.to_string());
        self
    }

    pub fn with_gamma(mut self, g: f64) -> Self {
        if let Estimator::Smoothed { gamma, .. } = &mut self.estimator {
            *gamma = Some(g);
        }
        self
    }

    pub fn label(&self) -> String {
        if let Some(l) = &self.label {
            return l.clone();
        }
        match &self.estimator {
            Estimator::Voxelwise => "SN-lasso(voxel-wise)".into(),
            Estimator::Smoothed { variant, alpha, .. } => match variant {
                Variant::Narm => format!("NARM(alpha={alpha})"),
                v => v.label(),
            },
        }
    }

    /// Smoother settings for a region of the given dimensionality.
    pub fn smoother(&self, is_2d: bool) -> Option<SmootherConfig> {
        match &self.estimator {
            Estimator::Voxelwise => None,
            Estimator::Smoothed {
                variant,
                gamma,
                alpha,
                schedule,
                lambda_policy,
            } => Some(SmootherConfig {
                schedule: schedule.unwrap_or(if is_2d { Schedule::two_d() } else { Schedule::three_d() }),
                gamma: gamma.unwrap_or(variant.default_gamma()),
                alpha: *alpha,
                variant: *variant,
                lambda_policy: *lambda_policy,
            }),
        }
    }
}

/// Tracking switch and parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackConfig {
    pub enabled: bool,
    #[serde(flatten)]
    pub params: TrackingConfig,
}

impl Default for TrackConfig {
    fn default() -> Self {
        TrackConfig {
            enabled: false,
            params: TrackingConfig::default(),
        }
    }
}

/// Everything a run needs. Every field has a default, so an empty file is a
/// valid configuration (ROI-2D-I, b = 1000, 41 directions, SNR 20).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Preset name recorded in outputs.
    pub experiment: String,
    pub roi: RoiSpec,
    pub acquisition: AcquisitionConfig,
    pub seeds: Vec<u64>,
    pub basis: BasisConfig,
    pub solver: SolverConfig,
    pub lambda: LambdaConfig,
    pub methods: Vec<MethodConfig>,
    /// Fit the noiseless signals voxel-wise as the Hellinger reference.
    pub noiseless_reference: bool,
    pub peaks: PeakConfig,
    pub tracking: TrackConfig,
    /// Largest tolerated share of non-converged voxel solves per fit.
    pub max_failure_rate: f64,
    /// Also write dense-grid FOD arrays for every fit.
    pub export_dense: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            experiment: "custom".into(),
            roi: RoiSpec::named(RoiKind::Roi2dI),
            acquisition: AcquisitionConfig::default(),
            seeds: vec![1, 2, 3, 4, 5],
            basis: BasisConfig::default(),
            solver: SolverConfig {
                eps_abs: 1e-5,
                eps_rel: 1e-3,
                ..SolverConfig::default()
            },
            lambda: LambdaConfig::default(),
            methods: vec![MethodConfig::voxelwise(), MethodConfig::smoothed(Variant::Narm)],
            noiseless_reference: true,
            peaks: PeakConfig::default(),
            tracking: TrackConfig::default(),
            max_failure_rate: 0.05,
            export_dense: true,
        }
    }
}

impl RunConfig {
    /// Configuration of a named experiment.
    pub fn preset(name: &str) -> Result<Self, CliError> {
        let mut cfg = RunConfig {
            experiment: name.to_string(),
            ..RunConfig::default()
        };
        let b1000 = ShellConfig { b: 1000.0, count: None };
        let b3000 = ShellConfig { b: 3000.0, count: None };
        match name {
            "roi2d-1" | "roi2d-2" => {
                cfg.roi = RoiSpec::named(if name == "roi2d-1" { RoiKind::Roi2dI } else { RoiKind::Roi2dII });
                cfg.methods = vec![
                    MethodConfig::voxelwise(),
                    MethodConfig::smoothed(Variant::Narm),
                    MethodConfig::smoothed(Variant::NoStoppingRescaling),
                    MethodConfig::smoothed(Variant::Pmarm { c: 0.05 }),
                ];
            }
            "roi3d-b1000" | "roi3d-b3000" => {
                let gamma = if name == "roi3d-b1000" { 2.0 } else { 4.0 };
                cfg.roi = RoiSpec::named(RoiKind::Roi3d);
                cfg.acquisition.shells = vec![if name == "roi3d-b1000" { b1000 } else { b3000 }];
                cfg.seeds = vec![1];
                cfg.methods = vec![
                    MethodConfig::voxelwise(),
                    MethodConfig::smoothed(Variant::Narm).with_gamma(gamma),
                    MethodConfig::smoothed(Variant::NoStoppingRescaling).with_gamma(gamma),
                ];
                cfg.tracking.enabled = true;
            }
            "roi3d-multib" => {
                cfg.roi = RoiSpec::named(RoiKind::Roi3d);
                cfg.acquisition.directions = 81;
                cfg.acquisition.shells = vec![ShellConfig { b: 1000.0, count: Some(41) }, b3000];
                cfg.seeds = vec![1];
                let mut methods = Vec::new();
                for eps in [1e-3, 5e-3] {
                    for (shells, name) in [(vec![0], "b=1000"), (vec![1], "b=3000"), (vec![0, 1], "b=1000&3000")] {
                        let mut m = MethodConfig::voxelwise().with_label(&format!("SN-lasso({name}, eps={eps})"));
                        m.shells = Some(shells);
                        m.rss_threshold = Some(eps);
                        methods.push(m);
                    }
                }
                let mut narm = MethodConfig::smoothed(Variant::Narm)
                    .with_gamma(4.0)
                    .with_label("NARM(b=1000&3000, eps=0.001)");
                narm.rss_threshold = Some(1e-3);
                methods.push(narm);
                cfg.methods = methods;
                cfg.tracking.enabled = true;
            }
            other => {
                return Err(CliError::Validation(format!(
                    "unknown experiment {other:?}; expected one of {}",
                    PRESETS.join(", ")
                )))
            }
        }
        Ok(cfg)
    }

    /// Reads a JSON (`.json`) or TOML (any other extension) file.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.roi.validate()?;
        self.solver.validate()?;
        self.peaks.validate()?;
        self.tracking.params.validate()?;
        self.lambda.path(None)?;
        let a = &self.acquisition;
        if a.shells.is_empty() {
            return Err(CliError::Validation("at least one shell is required".into()));
        }
        if a.shells.len() > 2 {
            return Err(CliError::Validation("at most two shells are supported".into()));
        }
        if a.shells.len() == 2 && a.shells.iter().filter(|s| s.count.is_some()).count() != 1 {
            return Err(CliError::Validation(
                "with two shells exactly one must give its direction count".into(),
            ));
        }
        if let Some(snr) = a.snr {
            if !(snr > 0.0) {
                return Err(CliError::Validation("snr must be positive".into()));
            }
        }
        if !(a.lambda_perp > 0.0 && a.ratio >= 1.0 && a.s0 > 0.0) {
            return Err(CliError::Validation("diffusivities need lambda_perp > 0, ratio >= 1, s0 > 0".into()));
        }
        if self.seeds.is_empty() {
            return Err(CliError::Validation("at least one seed is required".into()));
        }
        if self.methods.is_empty() {
            return Err(CliError::Validation("at least one method is required".into()));
        }
        if self.basis.l_max % 2 != 0 || self.basis.l_max < 2 {
            return Err(CliError::Validation("l_max must be even and at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.max_failure_rate) {
            return Err(CliError::Validation("max_failure_rate must lie in [0, 1]".into()));
        }
        let mut labels = std::collections::HashSet::new();
        for m in &self.methods {
            if !labels.insert(m.label()) {
                return Err(CliError::Validation(format!("duplicate method label {:?}", m.label())));
            }
            if let Some(sh) = &m.shells {
                if sh.is_empty() || sh.iter().any(|&s| s >= a.shells.len()) {
                    return Err(CliError::Validation(format!("method {:?} selects unknown shells", m.label())));
                }
            }
            if let Some(t) = m.rss_threshold {
                if !(t > 0.0) {
                    return Err(CliError::Validation("rss_threshold must be positive".into()));
                }
            }
            if let Some(s) = m.smoother(self.roi.dims[2] == 1) {
                s.validate()?;
            }
        }
        Ok(())
    }
}
