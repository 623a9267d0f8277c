//! Simulate, fit, evaluate and track, reading and writing a run directory.
//!
//! Layout of a run directory:
//!
//! ```text
//! config.json              resolved configuration
//! truth.json               ground truth of the region
//! dense_grid.json          dense evaluation directions
//! bundle.fodb              cached basis bundle
//! table.csv, table.json    metrics averaged over seeds
//! reference/               noiseless signals and voxel-wise reference fits
//! seed-<n>/signals.*       simulated measurements
//! seed-<n>/fa.*, md.*      single-tensor maps
//! seed-<n>/<method>.*      beta and dense FOD arrays, traces, peaks, tracts
//! seed-<n>/metrics.*       per-seed metrics
//! ```

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use fodkit::admm::LambdaPath;
use fodkit::bundle::BasisBundle;
use fodkit::fa_md::{fa, fit_tensor, md};
use fodkit::io::{
    flatten, read_array, read_bundle, read_json, unflatten, write_array, write_atomic, write_bundle, write_json,
    Document, Provenance,
};
use fodkit::metrics::{classify_counts, hellinger_summary, peaks_from_sh, ClassReport, MetricReport, Summary, VoxelPeaks};
use fodkit::narm::{fit_voxelwise, run_smoother_from, SmoothingInput, VoxelFit, VoxelTrace};
use fodkit::signal::ResponseFunction;
use fodkit::sphere::{gradient_scheme, split_scheme, Direction};
use fodkit::synthetic::{make_roi, simulate, true_fod_sh, NoiseSpec, RoiTruth};
use fodkit::tracking::{track, Streamline, TrackingSummary};
use fodkit::volume::{ShellInfo, SignalVolume, VoxelGrid};

use crate::config::{MethodConfig, RunConfig};
use crate::CliError;

/// Paths inside a run directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn truth(&self) -> PathBuf {
        self.root.join("truth.json")
    }

    pub fn bundle(&self) -> PathBuf {
        self.root.join("bundle.fodb")
    }

    pub fn reference_dir(&self) -> PathBuf {
        self.root.join("reference")
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.root.join(format!("seed-{seed}"))
    }
}

/// File-name form of a method label: lower case, runs of other characters
/// replaced by single dashes.
pub fn slug(label: &str) -> String {
    let mut out = String::new();
    for c in label.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('-') {
            out.push('-');
        }
    }
    out.trim_matches('-').to_string()
}

/// Sidecar metadata of a signal array.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SignalMeta {
    pub dims: [usize; 3],
    pub shells: Vec<ShellInfo>,
    /// Rician noise level; `None` for noiseless signals.
    pub sigma: Option<f64>,
    pub seed: Option<u64>,
}

/// Sidecar metadata of a coefficient array.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitMeta {
    pub label: String,
    pub method: MethodConfig,
    pub seed: Option<u64>,
    pub dims: [usize; 3],
    pub shells: Vec<usize>,
    /// Selected `lambda` per voxel (voxel-wise selection for smoothed fits).
    pub lambdas: Vec<f64>,
    pub rule_fired: Vec<bool>,
    pub failed_solves: usize,
    pub solves: usize,
}

/// Sidecar metadata of a dense-grid FOD array.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseMeta {
    pub label: String,
    pub dims: [usize; 3],
    /// Index of the direction set in `dense_grid.json`.
    pub grid: String,
}

/// Sidecar metadata of a scalar map.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapMeta {
    pub name: String,
    pub dims: [usize; 3],
    /// Voxels whose tensor had only zero eigenvalues (FA reported as 0).
    pub degenerate: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthBody {
    pub counts: [usize; 3],
    pub truth: RoiTruth,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridBody {
    pub points: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceBody {
    pub label: String,
    pub seed: u64,
    pub voxels: Vec<VoxelTrace>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PeaksBody {
    pub label: String,
    pub seed: u64,
    pub voxels: Vec<VoxelPeaks>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsBody {
    pub seed: Option<u64>,
    /// Set when no reference fit was available.
    pub reference_missing: bool,
    pub reports: Vec<MetricReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TractsBody {
    pub label: String,
    pub seed: u64,
    pub tracts_file: String,
    pub summary: TrackingSummary,
}

/// One fitted coefficient field with its diagnostics.
#[derive(Debug, Clone)]
pub struct FitOutput {
    pub label: String,
    pub betas: Vec<DVector<f64>>,
    pub lambdas: Vec<f64>,
    pub rule_fired: Vec<bool>,
    pub trace: Option<Vec<VoxelTrace>>,
    pub failed: usize,
    pub solves: usize,
}

impl FitOutput {
    pub fn failure_rate(&self) -> f64 {
        if self.solves == 0 {
            0.0
        } else {
            self.failed as f64 / self.solves as f64
        }
    }
}

/// Tracking result of one method on one seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrackRecord {
    pub label: String,
    pub seed: u64,
    pub summary: TrackingSummary,
}

/// What a full run produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub table: Vec<MetricReport>,
    pub per_seed: Vec<(u64, Vec<MetricReport>)>,
    pub tracking: Vec<TrackRecord>,
}

/// Voxel-wise fits shared between methods with the same shells and RSS
/// threshold.
type InitCache = BTreeMap<String, Vec<VoxelFit<f64>>>;

/// A configuration with its region, shells and basis.
pub struct Experiment {
    pub cfg: RunConfig,
    pub provenance: Provenance,
    pub truth: RoiTruth,
    pub shells: Vec<ShellInfo>,
    pub bundle: BasisBundle<f64>,
    truth_dense: Vec<DVector<f64>>,
}

impl Experiment {
    /// Builds the region and shells; the basis bundle is read from
    /// `bundle_cache` when it exists and matches, else built and written there.
    pub fn new(cfg: RunConfig, bundle_cache: Option<&Path>) -> Result<Self, CliError> {
        cfg.validate()?;
        let provenance = Provenance::for_config(&cfg)?;
        let truth = make_roi(&cfg.roi)?;
        let shells = build_shells(&cfg)?;
        let bundle = load_or_build_bundle(&cfg, &shells, bundle_cache)?;
        let truth_dense = truth
            .voxels
            .iter()
            .map(|v| bundle.dense_fod_from_sh(&true_fod_sh(v, &bundle.sh)))
            .collect();
        Ok(Experiment {
            cfg,
            provenance,
            truth,
            shells,
            bundle,
            truth_dense,
        })
    }

    pub fn grid(&self) -> VoxelGrid {
        self.truth.grid
    }

    /// Noisy signals for `seed`, or noiseless ones for `None` (also when the
    /// configuration has no SNR).
    pub fn simulate(&self, seed: Option<u64>) -> Result<SignalVolume<f64>, CliError> {
        let noise = match (seed, self.cfg.acquisition.snr) {
            (Some(seed), Some(snr)) => Some(NoiseSpec::from_snr(self.cfg.acquisition.s0, snr, seed)?),
            _ => None,
        };
        Ok(simulate(&self.truth, &self.shells, noise)?)
    }

    fn method_shells(&self, m: &MethodConfig) -> Vec<usize> {
        m.shells.clone().unwrap_or_else(|| (0..self.shells.len()).collect())
    }

    fn method_path(&self, m: &MethodConfig) -> Result<LambdaPath, CliError> {
        self.cfg.lambda.path(m.rss_threshold)
    }

    fn init_key(&self, m: &MethodConfig) -> String {
        let t = m.rss_threshold.unwrap_or(self.cfg.lambda.threshold);
        format!("{:?}/{t:e}", self.method_shells(m))
    }

    /// Fits one method; voxel-wise fits are cached and reused as the
    /// starting point of smoothed methods with the same data and threshold.
    pub fn fit(&self, volume: &SignalVolume<f64>, m: &MethodConfig, cache: &mut InitCache) -> Result<FitOutput, CliError> {
        let shells = self.method_shells(m);
        let design = self.bundle.design(&shells)?;
        let signals = volume.select_shells(&shells)?;
        let path = self.method_path(m)?;
        let key = self.init_key(m);
        let initial = match cache.get(&key) {
            Some(f) => f.clone(),
            None => {
                let f = fit_voxelwise(&design, &signals, &path, &self.cfg.solver)?;
                cache.insert(key, f.clone());
                f
            }
        };
        let lambdas: Vec<f64> = initial.iter().map(|f| f.lambda).collect();
        let rule_fired: Vec<bool> = initial.iter().map(|f| f.rule_fired).collect();
        let label = m.label();
        match m.smoother(self.grid().is_2d()) {
            None => {
                let failed = initial.iter().filter(|f| !f.converged).count();
                Ok(FitOutput {
                    label,
                    betas: initial.into_iter().map(|f| f.beta).collect(),
                    lambdas,
                    rule_fired,
                    trace: None,
                    failed,
                    solves: signals.len(),
                })
            }
            Some(sc) => {
                let input = SmoothingInput {
                    grid: self.grid(),
                    design: &design,
                    dense_frame: &self.bundle.dense_frame,
                    signals: &signals,
                    path: &path,
                    solver: &self.cfg.solver,
                };
                let res = run_smoother_from(input, &sc, initial)?;
                let (failed, solves) = (res.nonconverged(), res.solves());
                Ok(FitOutput {
                    label,
                    betas: res.betas,
                    lambdas,
                    rule_fired,
                    trace: Some(res.trace),
                    failed,
                    solves,
                })
            }
        }
    }

    /// Noiseless voxel-wise fit matching the data and threshold of `m`.
    pub fn reference_fit(&self, noiseless: &SignalVolume<f64>, m: &MethodConfig, cache: &mut InitCache) -> Result<FitOutput, CliError> {
        let mut r = MethodConfig::voxelwise().with_label(&reference_label(&self.method_shells(m), self.threshold(m)));
        r.shells = Some(self.method_shells(m));
        r.rss_threshold = m.rss_threshold;
        self.fit(noiseless, &r, cache)
    }

    fn threshold(&self, m: &MethodConfig) -> f64 {
        m.rss_threshold.unwrap_or(self.cfg.lambda.threshold)
    }

    pub fn dense(&self, betas: &[DVector<f64>]) -> Vec<DVector<f64>> {
        betas.par_iter().map(|b| self.bundle.dense_fod(b)).collect()
    }

    pub fn peaks(&self, betas: &[DVector<f64>]) -> Vec<VoxelPeaks> {
        betas
            .par_iter()
            .map(|b| {
                peaks_from_sh(
                    &self.bundle.sh_coeffs(b),
                    &self.bundle.sh,
                    &self.bundle.dense_sh,
                    &self.bundle.dense_grid,
                    &self.cfg.peaks,
                )
            })
            .collect()
    }

    /// Peak counts, angular errors and Hellinger distances of one estimate.
    pub fn evaluate(
        &self,
        label: &str,
        betas: &[DVector<f64>],
        reference: Option<&[DVector<f64>]>,
    ) -> Result<(MetricReport, Vec<VoxelPeaks>), CliError> {
        let peaks = self.peaks(betas);
        let classes = classify_counts(&peaks, &self.truth)?;
        let dense = self.dense(betas);
        let (_, h_truth) = hellinger_summary(&dense, &self.truth_dense)?;
        let h_ref = match reference {
            Some(r) => Some(hellinger_summary(&dense, &self.dense(r))?.1),
            None => None,
        };
        Ok((
            MetricReport {
                label: label.to_string(),
                classes,
                hellinger_truth: Some(h_truth),
                hellinger_reference: h_ref,
            },
            peaks,
        ))
    }

    /// FA and MD of a single-tensor fit with the known `S0`, plus the
    /// voxels whose tensor vanished.
    pub fn fa_md(&self, volume: &SignalVolume<f64>) -> Result<(Vec<f64>, Vec<f64>, Vec<usize>), CliError> {
        let bvals: Vec<f64> = volume.shells.iter().flat_map(|s| vec![s.b; s.gradients.len()]).collect();
        let grads: Vec<Direction<f64>> = volume.shells.iter().flat_map(|s| s.gradients.iter().copied()).collect();
        let s0 = self.cfg.acquisition.s0;
        let ev = volume
            .data
            .par_iter()
            .map(|y| fit_tensor(y.as_slice(), &bvals, &grads, Some(s0), 1e-6 * s0))
            .collect::<Result<Vec<_>, _>>()?;
        let mut degenerate = Vec::new();
        let mut fas = Vec::with_capacity(ev.len());
        for (i, e) in ev.iter().enumerate() {
            let (f, zero) = fa(e);
            if zero {
                degenerate.push(i);
            }
            fas.push(f);
        }
        Ok((fas, ev.iter().map(md).collect(), degenerate))
    }
}

fn reference_label(shells: &[usize], threshold: f64) -> String {
    let s: Vec<String> = shells.iter().map(|s| s.to_string()).collect();
    format!("reference-shells-{}-eps-{threshold:e}", s.join("-"))
}

/// Shells of the acquisition: one shell takes the whole scheme, two shells
/// split it with the farthest-point subset going to the shell with a count.
pub fn build_shells(cfg: &RunConfig) -> Result<Vec<ShellInfo>, CliError> {
    let a = &cfg.acquisition;
    let grads: Vec<Vec<Direction<f64>>> = match a.shells.len() {
        1 => vec![gradient_scheme(a.directions)?.points],
        _ => {
            let first_counted = a.shells[0].count.is_some();
            let k = a.shells.iter().find_map(|s| s.count).expect("validated");
            let (sub, rest) = split_scheme(a.directions, k)?;
            if first_counted {
                vec![sub.points, rest.points]
            } else {
                vec![rest.points, sub.points]
            }
        }
    };
    a.shells
        .iter()
        .zip(grads)
        .map(|(s, g)| {
            let response = response_for(cfg, s.b)?;
            Ok(ShellInfo {
                b: s.b,
                gradients: g,
                response,
            })
        })
        .collect()
}

fn response_for(cfg: &RunConfig, b: f64) -> Result<ResponseFunction, CliError> {
    let a = &cfg.acquisition;
    let (perp, par) = if a.axial_leading {
        (a.lambda_perp, a.ratio * a.lambda_perp)
    } else {
        (a.lambda_perp / a.ratio, a.lambda_perp)
    };
    Ok(ResponseFunction::new(a.s0, b, perp, par)?)
}

fn bundle_matches(b: &BasisBundle<f64>, cfg: &RunConfig, shells: &[ShellInfo]) -> bool {
    b.sh.l_max() == cfg.basis.l_max
        && b.dense_provenance()
            == fodkit::sphere::GridProvenance::Icosphere {
                subdiv: cfg.basis.dense_subdiv,
                hemisphere: true,
            }
        && b.shells.len() == shells.len()
        && b.shells
            .iter()
            .zip(shells)
            .all(|(d, s)| d.response == s.response && d.gradients == s.gradients)
}

fn load_or_build_bundle(cfg: &RunConfig, shells: &[ShellInfo], cache: Option<&Path>) -> Result<BasisBundle<f64>, CliError> {
    if let Some(path) = cache {
        if path.exists() {
            match read_bundle(path) {
                Ok(b) if bundle_matches(&b, cfg, shells) => {
                    info!("using cached basis bundle {}", path.display());
                    return Ok(b);
                }
                Ok(_) => warn!("cached basis bundle {} does not match the configuration; rebuilding", path.display()),
                Err(e) => warn!("ignoring unreadable basis bundle {}: {e}", path.display()),
            }
        }
    }
    let bundle = BasisBundle::new(
        cfg.basis.l_max,
        cfg.basis.dense_subdiv,
        shells.iter().map(|s| (s.response, s.gradients.clone())).collect(),
    )?;
    if let Some(path) = cache {
        write_bundle(path, &bundle)?;
    }
    Ok(bundle)
}

fn write_doc<M: Serialize>(path: &Path, prov: &Provenance, body: M) -> Result<(), CliError> {
    Ok(write_json(
        path,
        &Document {
            provenance: prov.clone(),
            body,
        },
    )?)
}

fn write_signals(dir: &Path, exp: &Experiment, vol: &SignalVolume<f64>, seed: Option<u64>) -> Result<(), CliError> {
    let sigma = match (seed, exp.cfg.acquisition.snr) {
        (Some(_), Some(snr)) => Some(exp.cfg.acquisition.s0 / snr),
        _ => None,
    };
    let meta = SignalMeta {
        dims: vol.grid.dims,
        shells: vol.shells.clone(),
        sigma,
        seed,
    };
    let (shape, values) = flatten(&vol.data);
    write_array(dir, "signals", &shape, &values, &exp.provenance, &meta)?;
    Ok(())
}

fn read_signals(dir: &Path) -> Result<SignalVolume<f64>, CliError> {
    let path = dir.join("signals.json");
    if !path.exists() {
        return Err(CliError::Validation(format!(
            "{} not found; run `fodkit simulate` with this configuration first",
            path.display()
        )));
    }
    let (side, values) = read_array::<SignalMeta>(&path)?;
    let data = unflatten(&side.shape, &values)?;
    Ok(SignalVolume::new(VoxelGrid::new(side.meta.dims)?, side.meta.shells, data)?)
}

fn read_betas(path: &Path) -> Result<Vec<DVector<f64>>, CliError> {
    if !path.exists() {
        return Err(CliError::Validation(format!(
            "{} not found; run `fodkit fit` with this configuration first",
            path.display()
        )));
    }
    let (side, values) = read_array::<serde_json::Value>(path)?;
    Ok(unflatten(&side.shape, &values)?)
}

fn check_provenance(layout: &Layout, exp: &Experiment) -> Result<(), CliError> {
    let path = layout.config();
    if path.exists() {
        let doc: Document<serde_json::Value> = read_json(&path)?;
        if doc.provenance.config_sha256 != exp.provenance.config_sha256 {
            warn!(
                "{} was written by a different configuration; its outputs will be overwritten",
                layout.root.display()
            );
        }
    }
    Ok(())
}

/// Writes the configuration, truth, dense grid and simulated signals.
pub fn cmd_simulate(exp: &Experiment, layout: &Layout) -> Result<(), CliError> {
    check_provenance(layout, exp)?;
    write_doc(&layout.config(), &exp.provenance, &exp.cfg)?;
    write_doc(
        &layout.truth(),
        &exp.provenance,
        TruthBody {
            counts: exp.truth.counts(),
            truth: exp.truth.clone(),
        },
    )?;
    write_doc(
        &layout.root.join("dense_grid.json"),
        &exp.provenance,
        GridBody {
            points: exp.bundle.dense_grid.points.iter().map(|p| p.to_array()).collect(),
        },
    )?;
    if exp.cfg.noiseless_reference {
        let vol = exp.simulate(None)?;
        write_signals(&layout.reference_dir(), exp, &vol, None)?;
    }
    for &seed in &exp.cfg.seeds {
        let vol = exp.simulate(Some(seed))?;
        let dir = layout.seed_dir(seed);
        write_signals(&dir, exp, &vol, Some(seed))?;
        let (fas, mds, degenerate) = exp.fa_md(&vol)?;
        let n = fas.len();
        for (name, values) in [("fa", fas), ("md", mds)] {
            let meta = MapMeta {
                name: name.into(),
                dims: vol.grid.dims,
                degenerate: degenerate.clone(),
            };
            write_array(&dir, name, &[n], &values, &exp.provenance, &meta)?;
        }
        info!("simulated seed {seed}");
    }
    Ok(())
}

fn write_fit(dir: &Path, exp: &Experiment, m: &MethodConfig, seed: Option<u64>, fit: &FitOutput, stem: &str) -> Result<(), CliError> {
    let meta = FitMeta {
        label: fit.label.clone(),
        method: m.clone(),
        seed,
        dims: exp.grid().dims,
        shells: exp.method_shells(m),
        lambdas: fit.lambdas.clone(),
        rule_fired: fit.rule_fired.clone(),
        failed_solves: fit.failed,
        solves: fit.solves,
    };
    let (shape, values) = flatten(&fit.betas);
    write_array(dir, &format!("{stem}.beta"), &shape, &values, &exp.provenance, &meta)?;
    if exp.cfg.export_dense {
        let (shape, values) = flatten(&exp.dense(&fit.betas));
        let meta = DenseMeta {
            label: fit.label.clone(),
            dims: exp.grid().dims,
            grid: "dense_grid.json".into(),
        };
        write_array(dir, &format!("{stem}.fod"), &shape, &values, &exp.provenance, &meta)?;
    }
    if let (Some(trace), Some(seed)) = (&fit.trace, seed) {
        write_doc(
            &dir.join(format!("{stem}.trace.json")),
            &exp.provenance,
            TraceBody {
                label: fit.label.clone(),
                seed,
                voxels: trace.clone(),
            },
        )?;
    }
    Ok(())
}

/// Fits every method on every seed (and the noiseless references), writing
/// coefficient fields, dense FODs and smoothing traces. Fails with
/// [`CliError::NonConvergence`] after writing everything when a fit exceeds
/// the tolerated share of non-converged solves.
pub fn cmd_fit(exp: &Experiment, layout: &Layout) -> Result<(), CliError> {
    let mut worst: Option<(f64, CliError)> = None;
    let limit = exp.cfg.max_failure_rate;
    let mut note = |fit: &FitOutput| {
        let rate = fit.failure_rate();
        if fit.failed > 0 {
            warn!("{}: {} of {} solves did not converge", fit.label, fit.failed, fit.solves);
        }
        if rate > limit && worst.as_ref().map_or(true, |(r, _)| rate > *r) {
            worst = Some((
                rate,
                CliError::NonConvergence {
                    method: fit.label.clone(),
                    failed: fit.failed,
                    solves: fit.solves,
                    limit,
                },
            ));
        }
    };
    if exp.cfg.noiseless_reference {
        let dir = layout.reference_dir();
        let vol = read_signals(&dir)?;
        let mut cache = InitCache::new();
        let mut done = std::collections::BTreeSet::new();
        for m in &exp.cfg.methods {
            let fit = exp.reference_fit(&vol, m, &mut cache)?;
            if done.insert(fit.label.clone()) {
                note(&fit);
                write_fit(&dir, exp, &MethodConfig::voxelwise(), None, &fit, &slug(&fit.label))?;
            }
        }
    }
    for &seed in &exp.cfg.seeds {
        let dir = layout.seed_dir(seed);
        let vol = read_signals(&dir)?;
        let mut cache = InitCache::new();
        for m in &exp.cfg.methods {
            let t0 = std::time::Instant::now();
            let fit = exp.fit(&vol, m, &mut cache)?;
            info!("seed {seed}: fitted {} in {:.1?}", fit.label, t0.elapsed());
            note(&fit);
            write_fit(&dir, exp, m, Some(seed), &fit, &slug(&fit.label))?;
        }
    }
    match worst {
        Some((_, e)) => Err(e),
        None => Ok(()),
    }
}

/// Evaluates the fitted fields of every seed and writes per-seed metrics,
/// peaks and the seed-averaged table.
pub fn cmd_metrics(exp: &Experiment, layout: &Layout) -> Result<Vec<(u64, Vec<MetricReport>)>, CliError> {
    let mut per_seed = Vec::new();
    for &seed in &exp.cfg.seeds {
        let dir = layout.seed_dir(seed);
        let mut reports = Vec::new();
        let mut missing = false;
        for m in &exp.cfg.methods {
            let label = m.label();
            let stem = slug(&label);
            let betas = read_betas(&dir.join(format!("{stem}.beta.json")))?;
            let ref_path = layout.reference_dir().join(format!(
                "{}.beta.json",
                slug(&reference_label(&exp.method_shells(m), exp.threshold(m)))
            ));
            let reference = if ref_path.exists() {
                Some(read_betas(&ref_path)?)
            } else {
                missing = true;
                None
            };
            let (report, peaks) = exp.evaluate(&label, &betas, reference.as_deref())?;
            write_doc(
                &dir.join(format!("{stem}.peaks.json")),
                &exp.provenance,
                PeaksBody {
                    label: label.clone(),
                    seed,
                    voxels: peaks,
                },
            )?;
            reports.push(report);
        }
        if missing {
            warn!("seed {seed}: reference fits missing; Hellinger-vs-reference columns left empty");
        }
        write_doc(
            &dir.join("metrics.json"),
            &exp.provenance,
            MetricsBody {
                seed: Some(seed),
                reference_missing: missing,
                reports: reports.clone(),
            },
        )?;
        write_atomic(&dir.join("metrics.csv"), csv(&reports).as_bytes())?;
        per_seed.push((seed, reports));
    }
    let table = aggregate(&per_seed);
    write_doc(
        &layout.root.join("table.json"),
        &exp.provenance,
        MetricsBody {
            seed: None,
            reference_missing: table.iter().any(|r| r.hellinger_reference.is_none()),
            reports: table.clone(),
        },
    )?;
    write_atomic(&layout.root.join("table.csv"), csv(&table).as_bytes())?;
    Ok(per_seed)
}

/// Tracks every fitted field and writes the streamlines (one JSON object per
/// line) and their summaries.
pub fn cmd_track(exp: &Experiment, layout: &Layout) -> Result<Vec<TrackRecord>, CliError> {
    let mut records = Vec::new();
    for &seed in &exp.cfg.seeds {
        let dir = layout.seed_dir(seed);
        for m in &exp.cfg.methods {
            let label = m.label();
            let stem = slug(&label);
            let betas = read_betas(&dir.join(format!("{stem}.beta.json")))?;
            let peaks = exp.peaks(&betas);
            let (tracts, summary) = track(&exp.grid(), &peaks, &exp.cfg.tracking.params)?;
            let file = format!("{stem}.tracts.jsonl");
            write_atomic(&dir.join(&file), &jsonl(&tracts)?)?;
            write_doc(
                &dir.join(format!("{stem}.tracts.json")),
                &exp.provenance,
                TractsBody {
                    label: label.clone(),
                    seed,
                    tracts_file: file,
                    summary,
                },
            )?;
            info!(
                "seed {seed}: {label}: {} tracts, median length {:.2}",
                summary.count, summary.median_length
            );
            records.push(TrackRecord { label, seed, summary });
        }
    }
    Ok(records)
}

/// Simulation, fits, metrics and (when enabled) tracking in one go.
pub fn cmd_reproduce(exp: &Experiment, layout: &Layout) -> Result<RunSummary, CliError> {
    cmd_simulate(exp, layout)?;
    cmd_fit(exp, layout)?;
    let per_seed = cmd_metrics(exp, layout)?;
    let tracking = if exp.cfg.tracking.enabled {
        cmd_track(exp, layout)?
    } else {
        Vec::new()
    };
    Ok(RunSummary {
        table: aggregate(&per_seed),
        per_seed,
        tracking,
    })
}

fn jsonl(tracts: &[Streamline]) -> Result<Vec<u8>, CliError> {
    let mut out = Vec::new();
    for t in tracts {
        serde_json::to_writer(&mut out, t).map_err(fodkit::error::FodError::from)?;
        out.write_all(b"\n").expect("writing to a vector");
    }
    Ok(out)
}

fn csv(reports: &[MetricReport]) -> String {
    let mut s = String::from(MetricReport::csv_header());
    s.push('\n');
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Seed average of per-seed reports: rates, median angles and Hellinger
/// summaries are averaged over the seeds that report them.
pub fn aggregate(per_seed: &[(u64, Vec<MetricReport>)]) -> Vec<MetricReport> {
    let Some((_, first)) = per_seed.first() else {
        return Vec::new();
    };
    first
        .iter()
        .enumerate()
        .map(|(i, r0)| {
            let rows: Vec<&MetricReport> = per_seed.iter().map(|(_, r)| &r[i]).collect();
            let classes = r0
                .classes
                .iter()
                .map(|c0| {
                    let cs: Vec<&ClassReport> = rows.iter().filter_map(|r| r.class(c0.fibers)).collect();
                    ClassReport {
                        fibers: c0.fibers,
                        voxels: c0.voxels,
                        correct: mean(cs.iter().map(|c| c.correct)).unwrap_or(0.0),
                        over: mean(cs.iter().map(|c| c.over)).unwrap_or(0.0),
                        under: mean(cs.iter().map(|c| c.under)).unwrap_or(0.0),
                        median_angle_deg: mean(cs.iter().filter_map(|c| c.median_angle_deg)),
                    }
                })
                .collect();
            let summary = |f: fn(&MetricReport) -> Option<Summary>| {
                let s: Vec<Summary> = rows.iter().filter_map(|r| f(r)).collect();
                (s.len() == rows.len()).then(|| Summary {
                    mean: mean(s.iter().map(|x| x.mean)).unwrap_or(0.0),
                    sd: mean(s.iter().map(|x| x.sd)).unwrap_or(0.0),
                })
            };
            MetricReport {
                label: r0.label.clone(),
                classes,
                hellinger_truth: summary(|r| r.hellinger_truth),
                hellinger_reference: summary(|r| r.hellinger_reference),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slugs_are_file_safe() {
        assert_eq!(slug("NARM(alpha=0.15)"), "narm-alpha-0-15");
        assert_eq!(slug("SN-lasso(b=1000&3000, eps=0.005)"), "sn-lasso-b-1000-3000-eps-0-005");
        assert_eq!(slug("SN-lasso(voxel-wise)"), "sn-lasso-voxel-wise");
    }

    #[test]
    fn aggregate_averages_seeds() {
        let rep = |co: f64, h: f64| MetricReport {
            label: "m".into(),
            classes: vec![ClassReport {
                fibers: 1,
                voxels: 10,
                correct: co,
                over: 1.0 - co,
                under: 0.0,
                median_angle_deg: Some(2.0 * co),
            }],
            hellinger_truth: Some(Summary { mean: h, sd: 0.1 }),
            hellinger_reference: None,
        };
        let t = aggregate(&[(1, vec![rep(0.5, 1.0)]), (2, vec![rep(1.0, 2.0)])]);
        let c = t[0].class(1).unwrap();
        assert!((c.correct - 0.75).abs() < 1e-15 && (c.over - 0.25).abs() < 1e-15);
        assert!((c.median_angle_deg.unwrap() - 1.5).abs() < 1e-15);
        assert!((t[0].hellinger_truth.unwrap().mean - 1.5).abs() < 1e-15);
        assert!(t[0].hellinger_reference.is_none());
    }
}
