//! Nearest-neighbour adaptive smoothing of FOD estimates.
//!
//! Starting from voxel-wise estimates, each step `s` grows the neighbourhood
//! radius to `d_s`, weights neighbours by location and by the similarity of
//! their step-`s-1` FODs, averages the raw signals with those weights and
//! refits. Variants switch the similarity measure, the percentile rescaling
//! of distances and the stopping rule.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::admm::{AdmmState, LambdaPath, LassoDesign, LassoSolver, SolverConfig};
use crate::error::{FodError, Result};
use crate::scalar::{lit, to_f64, Real};
use crate::volume::VoxelGrid;

/// How dissimilarity between two dense-grid FODs is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMetric {
    /// `(1/sqrt 2) |sqrt f - sqrt f'|` on l2-normalized FODs. Not bounded by
    /// one: `|sqrt f|^2` is the l1 norm of a unit l2 vector.
    Hellinger,
    /// `|f - f'|` on l2-normalized FODs.
    L2,
}

/// Normalized form of a dense FOD used by the distance computations; `None`
/// when the clamped FOD is identically zero.
pub fn signature<T: Real>(f: &DVector<T>, metric: SimilarityMetric) -> Option<DVector<T>> {
    let clamped = f.map(|v| if v > T::zero() { v } else { T::zero() });
    let n = clamped.norm();
    if n <= T::zero() {
        return None;
    }
    let unit = clamped / n;
    Some(match metric {
        SimilarityMetric::Hellinger => unit.map(|v| v.sqrt()),
        SimilarityMetric::L2 => unit,
    })
}

/// Distance between two signatures. A zero FOD is at distance 0 from another
/// zero FOD and at distance 1 from anything else.
pub fn signature_distance<T: Real>(a: Option<&DVector<T>>, b: Option<&DVector<T>>, metric: SimilarityMetric) -> T {
    match (a, b) {
        (Some(a), Some(b)) => {
            let d = (a - b).norm();
            match metric {
                SimilarityMetric::Hellinger => d * lit::<T>(std::f64::consts::FRAC_1_SQRT_2),
                SimilarityMetric::L2 => d,
            }
        }
        (None, None) => T::zero(),
        _ => T::one(),
    }
}

/// Hellinger distance between two dense FODs (clamped at zero, then
/// l2-normalized).
pub fn hellinger_distance<T: Real>(f: &DVector<T>, g: &DVector<T>) -> T {
    let m = SimilarityMetric::Hellinger;
    signature_distance(signature(f, m).as_ref(), signature(g, m).as_ref(), m)
}

/// l2 distance between two dense FODs after clamping and l2 normalization.
pub fn normalized_l2_distance<T: Real>(f: &DVector<T>, g: &DVector<T>) -> T {
    let m = SimilarityMetric::L2;
    signature_distance(signature(f, m).as_ref(), signature(g, m).as_ref(), m)
}

/// Radii `d_0 = 0`, `d_s = r^s` for `s = 1..=steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub r: f64,
    pub steps: usize,
}

impl Schedule {
    pub fn two_d() -> Self {
        Schedule { r: 1.15, steps: 10 }
    }

    pub fn three_d() -> Self {
        Schedule { r: 1.15, steps: 6 }
    }

    pub fn radius(&self, s: usize) -> f64 {
        if s == 0 {
            0.0
        } else {
            self.r.powi(s as i32)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps > 0 && !(self.r > 1.0 && self.r.is_finite()) {
            return Err(FodError::validation(format!(
                "neighbourhood growth factor must exceed 1, got {}",
                self.r
            )));
        }
        Ok(())
    }
}

/// Location kernel `(1 - u^2)_+`.
pub fn k_loc(u: f64) -> f64 {
    (1.0 - u * u).max(0.0)
}

/// Similarity kernel `exp(-gamma u^2)`.
pub fn k_sim(u: f64, gamma: f64) -> f64 {
    (-gamma * u * u).exp()
}

/// Normalized weights for neighbourhood members given as
/// `(spatial distance, FOD distance)`.
pub fn compute_weights(members: &[(f64, f64)], radius: f64, gamma: f64) -> Vec<f64> {
    let raw: Vec<f64> = members
        .iter()
        .map(|&(loc, dist)| {
            let u = if radius > 0.0 { loc / radius } else if loc == 0.0 { 0.0 } else { f64::INFINITY };
            k_loc(u) * k_sim(dist, gamma)
        })
        .collect();
    let total: f64 = raw.iter().sum();
    if total > 0.0 {
        raw.iter().map(|w| w / total).collect()
    } else {
        // Only reachable when every similarity underflows; fall back to self.
        members.iter().map(|&(loc, _)| if loc == 0.0 { 1.0 } else { 0.0 }).collect()
    }
}

/// Minimum of the distances to the face neighbours; `+inf` when there are none.
pub fn mnn_distance(distances: &[f64]) -> f64 {
    distances.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Sample percentile with linear interpolation between order statistics
/// (`q` in `[0, 1]`).
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (pos - lo as f64) * (v[hi] - v[lo]))
}

/// Factor applied to all of a voxel's distances so that its MNN distance is
/// pulled into `[lo, hi]`. Voxels with a zero or infinite MNN are left alone.
pub fn rescale_factor(mnn: f64, lo: f64, hi: f64) -> f64 {
    if !(mnn > 0.0 && mnn.is_finite()) {
        return 1.0;
    }
    (hi / mnn).min(1.0) * (lo / mnn).max(1.0)
}

/// Rescales every distance of one voxel by [`rescale_factor`].
pub fn rescale_distances(distances: &[f64], mnn: f64, lo: f64, hi: f64) -> Vec<f64> {
    let f = rescale_factor(mnn, lo, hi);
    distances.iter().map(|d| d * f).collect()
}

/// MNN stopping predicate on `(MNN_{s-2}, MNN_{s-1}, MNN_s)`: stop when the
/// smaller of the last two is not below the first.
pub fn stopping_check(history: [f64; 3]) -> bool {
    history[1].min(history[2]) >= history[0]
}

/// Upper-`a` quantile of the chi-square distribution with one degree of
/// freedom: the `x` with `P(X > x) = a`.
pub fn chi2_1_upper_quantile(a: f64) -> f64 {
    let z = Normal::standard().inverse_cdf(1.0 - a / 2.0);
    z * z
}

/// Consecutive-estimate threshold `c_s` of the chi-square stopping rule.
pub fn chi2_threshold(s: usize, c: f64) -> f64 {
    chi2_1_upper_quantile(0.6 / s as f64) * c
}

/// Chi-square stopping predicate: stop when the change between consecutive
/// estimates exceeds `c_s`.
pub fn chi2_stopping_check(change: f64, s: usize, c: f64) -> bool {
    change > chi2_threshold(s, c)
}

/// Smoothing variants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Variant {
    Narm,
    NoStopping,
    NoRescaling,
    NoStoppingRescaling,
    /// Hellinger weights and rescaling with the chi-square stopping rule.
    Chi2Stopping { c: f64 },
    /// l2 weights, no rescaling, chi-square stopping.
    Pmarm { c: f64 },
}

impl Variant {
    pub fn metric(&self) -> SimilarityMetric {
        match self {
            Variant::Pmarm { .. } => SimilarityMetric::L2,
            _ => SimilarityMetric::Hellinger,
        }
    }

    pub fn rescales(&self) -> bool {
        matches!(self, Variant::Narm | Variant::NoStopping | Variant::Chi2Stopping { .. })
    }

    pub fn mnn_stopping(&self) -> bool {
        matches!(self, Variant::Narm | Variant::NoRescaling)
    }

    pub fn chi2_c(&self) -> Option<f64> {
        match self {
            Variant::Chi2Stopping { c } | Variant::Pmarm { c } => Some(*c),
            _ => None,
        }
    }

    /// Default similarity sharpness.
    pub fn default_gamma(&self) -> f64 {
        match self {
            Variant::Pmarm { .. } => 20.0,
            _ => 2.0,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Variant::Narm => "NARM".into(),
            Variant::NoStopping => "NARM(no stopping)".into(),
            Variant::NoRescaling => "NARM(no rescaling)".into(),
            Variant::NoStoppingRescaling => "NARM(no stopping&rescaling)".into(),
            Variant::Chi2Stopping { c } => format!("NARM(chi2-stopping, c={c})"),
            Variant::Pmarm { c } => format!("PMARM(c={c})"),
        }
    }
}

/// How `lambda` is chosen during smoothing steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaPolicy {
    /// Run the RSS-rule path selection for every voxel at every step.
    #[default]
    FullPath,
    /// Reuse each voxel's voxel-wise `lambda`.
    ReuseInitial,
}

/// Smoother parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmootherConfig {
    pub schedule: Schedule,
    pub gamma: f64,
    /// Rescaling percentile in `[0, 0.5)`.
    pub alpha: f64,
    pub variant: Variant,
    #[serde(default)]
    pub lambda_policy: LambdaPolicy,
}

impl SmootherConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if !(self.gamma > 0.0) {
            return Err(FodError::validation("gamma must be positive"));
        }
        if !(0.0..0.5).contains(&self.alpha) {
            return Err(FodError::validation(format!("alpha must lie in [0, 0.5), got {}", self.alpha)));
        }
        if let Some(c) = self.variant.chi2_c() {
            if !(c > 0.0) {
                return Err(FodError::validation("chi-square stopping constant must be positive"));
            }
        }
        Ok(())
    }
}

/// Outcome of one voxel fit.
#[derive(Debug, Clone)]
pub struct VoxelFit<T: Real> {
    pub beta: DVector<T>,
    pub lambda: f64,
    /// Whether the RSS rule fired (always true for a fixed `lambda`).
    pub rule_fired: bool,
    pub converged: bool,
    pub iterations: usize,
    /// Solver iterates at the selected `lambda`, for warm starts.
    pub state: AdmmState<T>,
}

/// Fits one voxel, either along the full `lambda` path or at a fixed `lambda`
/// (optionally warm-started).
pub fn fit_voxel<T: Real>(
    design: &LassoDesign<T>,
    y: &DVector<T>,
    path: &LambdaPath,
    solver: &SolverConfig,
    fixed: Option<(f64, Option<&AdmmState<T>>)>,
) -> Result<VoxelFit<T>> {
    let mut s = LassoSolver::new(design, *solver)?;
    match fixed {
        Some((lam, warm)) => {
            let out = s.solve(y, lit(lam), warm)?;
            Ok(VoxelFit {
                beta: out.estimate,
                lambda: lam,
                rule_fired: true,
                converged: out.converged,
                iterations: out.state.iterations,
                state: out.state,
            })
        }
        None => {
            let fit = s.fit_path(y, path)?;
            Ok(VoxelFit {
                beta: fit.outcome.estimate,
                lambda: fit.lambda,
                rule_fired: fit.fired,
                converged: fit.all_converged,
                iterations: fit.iterations,
                state: fit.outcome.state,
            })
        }
    }
}

/// Voxel-wise fits of every voxel.
pub fn fit_voxelwise<T: Real>(
    design: &LassoDesign<T>,
    signals: &[DVector<T>],
    path: &LambdaPath,
    solver: &SolverConfig,
) -> Result<Vec<VoxelFit<T>>> {
    signals
        .par_iter()
        .map(|y| fit_voxel(design, y, path, solver, None))
        .collect()
}

/// Why a voxel stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MnnRule,
    Chi2Rule,
    NonConvergence,
}

/// Per-voxel record of the smoothing run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelTrace {
    /// Step at which the voxel stopped, if it did.
    pub stop_step: Option<usize>,
    pub stop_reason: Option<StopReason>,
    /// Step whose estimate the voxel finally holds.
    pub final_step: usize,
    /// MNN distance for steps `1..=S` (`null` once stopped or without neighbours).
    pub mnn: Vec<Option<f64>>,
    /// `lambda` per step `0..=S` (`null` when the voxel was not refit).
    pub lambdas: Vec<Option<f64>>,
    pub converged: Vec<Option<bool>>,
    pub rule_fired: Vec<Option<bool>>,
}

/// Everything the smoother needs besides its configuration.
#[derive(Debug, Clone, Copy)]
pub struct SmoothingInput<'a, T: Real> {
    pub grid: VoxelGrid,
    pub design: &'a LassoDesign<T>,
    /// Needlets on the dense grid (`Phi~ C`).
    pub dense_frame: &'a DMatrix<T>,
    pub signals: &'a [DVector<T>],
    pub path: &'a LambdaPath,
    pub solver: &'a SolverConfig,
}

/// Result of a smoothing run.
#[derive(Debug, Clone)]
pub struct SmoothingResult<T: Real> {
    pub betas: Vec<DVector<T>>,
    pub trace: Vec<VoxelTrace>,
    /// Per-step coefficient fields, `history[s][v]` (step 0 is voxel-wise).
    pub history: Vec<Vec<DVector<T>>>,
    /// Voxel-wise `lambda` of each voxel.
    pub initial_lambdas: Vec<f64>,
}

impl<T: Real> SmoothingResult<T> {
    /// Number of voxel solves that failed to converge.
    pub fn nonconverged(&self) -> usize {
        self.trace
            .iter()
            .map(|t| t.converged.iter().filter(|c| **c == Some(false)).count())
            .sum()
    }

    /// Number of voxel solves attempted.
    pub fn solves(&self) -> usize {
        self.trace.iter().map(|t| t.converged.iter().filter(|c| c.is_some()).count()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Active,
    Stopped,
}

enum StepOutcome<T: Real> {
    Refit(VoxelFit<T>, Option<bool>),
    Revert { to_step: usize, reason: StopReason },
    Frozen,
}

/// Runs voxel-wise fits followed by `schedule.steps` smoothing steps.
pub fn run_smoother<T: Real>(input: SmoothingInput<'_, T>, cfg: &SmootherConfig) -> Result<SmoothingResult<T>> {
    cfg.validate()?;
    let initial = fit_voxelwise(input.design, input.signals, input.path, input.solver)?;
    run_smoother_from(input, cfg, initial)
}

/// Like [`run_smoother`], starting from precomputed voxel-wise fits.
pub fn run_smoother_from<T: Real>(
    input: SmoothingInput<'_, T>,
    cfg: &SmootherConfig,
    initial: Vec<VoxelFit<T>>,
) -> Result<SmoothingResult<T>> {
    cfg.validate()?;
    let nv = input.grid.len();
    if input.signals.len() != nv || initial.len() != nv {
        return Err(FodError::validation(format!(
            "grid has {nv} voxels but {} signals and {} initial fits were given",
            input.signals.len(),
            initial.len()
        )));
    }
    let steps = cfg.schedule.steps;
    let metric = cfg.variant.metric();

    let mut trace: Vec<VoxelTrace> = initial
        .iter()
        .map(|f| {
            let mut lambdas = vec![None; steps + 1];
            let mut converged = vec![None; steps + 1];
            let mut fired = vec![None; steps + 1];
            lambdas[0] = Some(f.lambda);
            converged[0] = Some(f.converged);
            fired[0] = Some(f.rule_fired);
            VoxelTrace {
                stop_step: None,
                stop_reason: None,
                final_step: 0,
                mnn: vec![None; steps],
                lambdas,
                converged,
                rule_fired: fired,
            }
        })
        .collect();
    let initial_lambdas: Vec<f64> = initial.iter().map(|f| f.lambda).collect();
    let mut states: Vec<AdmmState<T>> = initial.iter().map(|f| f.state.clone()).collect();
    let mut history: Vec<Vec<DVector<T>>> = vec![initial.into_iter().map(|f| f.beta).collect()];
    let mut status = vec![Status::Active; nv];
    let mut mnn_hist: Vec<Vec<f64>> = vec![Vec::with_capacity(steps); nv];
    let face: Vec<Vec<usize>> = (0..nv).map(|v| input.grid.face_neighbors(v)).collect();

    for s in 1..=steps {
        let current = history.last().expect("history is never empty");
        let radius = cfg.schedule.radius(s);
        let offsets = input.grid.offsets_within(radius);

        let sigs: Vec<Option<DVector<T>>> = current
            .par_iter()
            .map(|b| signature(&(input.dense_frame * b), metric))
            .collect();

        let mnn: Vec<f64> = (0..nv)
            .map(|v| {
                let d: Vec<f64> = face[v]
                    .iter()
                    .map(|&w| to_f64(signature_distance(sigs[v].as_ref(), sigs[w].as_ref(), metric)))
                    .collect();
                mnn_distance(&d)
            })
            .collect();
        for v in 0..nv {
            mnn_hist[v].push(mnn[v]);
            if status[v] == Status::Active {
                trace[v].mnn[s - 1] = Some(mnn[v]);
            }
        }
        let finite: Vec<f64> = mnn.iter().copied().filter(|m| m.is_finite()).collect();
        let lo = percentile(&finite, cfg.alpha).unwrap_or(0.0);
        let hi = percentile(&finite, 1.0 - cfg.alpha).unwrap_or(f64::INFINITY);

        let outcomes: Vec<Result<StepOutcome<T>>> = (0..nv)
            .into_par_iter()
            .map(|v| {
                if status[v] == Status::Stopped {
                    return Ok(StepOutcome::Frozen);
                }
                if cfg.variant.mnn_stopping() && s >= 3 && mnn[v].is_finite() {
                    let h = &mnn_hist[v];
                    if stopping_check([h[s - 3], h[s - 2], h[s - 1]]) {
                        return Ok(StepOutcome::Revert {
                            to_step: s - 2,
                            reason: StopReason::MnnRule,
                        });
                    }
                }
                let members = input.grid.neighbors_within(v, &offsets);
                let mut dists: Vec<f64> = members
                    .iter()
                    .map(|&(w, _)| to_f64(signature_distance(sigs[v].as_ref(), sigs[w].as_ref(), metric)))
                    .collect();
                if cfg.variant.rescales() {
                    dists = rescale_distances(&dists, mnn[v], lo, hi);
                }
                let pairs: Vec<(f64, f64)> = members.iter().zip(&dists).map(|(&(_, loc), &d)| (loc, d)).collect();
                let weights = compute_weights(&pairs, radius, cfg.gamma);
                let mut y = DVector::<T>::zeros(input.signals[v].len());
                for (&(w, _), &wt) in members.iter().zip(&weights) {
                    if wt != 0.0 {
                        y.axpy(lit(wt), &input.signals[w], T::one());
                    }
                }
                let fixed = match cfg.lambda_policy {
                    LambdaPolicy::FullPath => None,
                    LambdaPolicy::ReuseInitial => Some((initial_lambdas[v], Some(&states[v]))),
                };
                let fit = fit_voxel(input.design, &y, input.path, input.solver, fixed)?;
                let chi2_stop = cfg.variant.chi2_c().map(|c| {
                    let before = input.dense_frame * &current[v];
                    let after = input.dense_frame * &fit.beta;
                    chi2_stopping_check(to_f64(normalized_l2_distance(&before, &after)), s, c)
                });
                Ok(StepOutcome::Refit(fit, chi2_stop))
            })
            .collect();

        let mut next = Vec::with_capacity(nv);
        for (v, out) in outcomes.into_iter().enumerate() {
            match out? {
                StepOutcome::Frozen => next.push(current[v].clone()),
                StepOutcome::Revert { to_step, reason } => {
                    status[v] = Status::Stopped;
                    trace[v].stop_step = Some(s);
                    trace[v].stop_reason = Some(reason);
                    trace[v].final_step = to_step;
                    next.push(history[to_step][v].clone());
                }
                StepOutcome::Refit(fit, chi2_stop) => {
                    trace[v].lambdas[s] = Some(fit.lambda);
                    trace[v].converged[s] = Some(fit.converged);
                    trace[v].rule_fired[s] = Some(fit.rule_fired);
                    if !fit.converged {
                        status[v] = Status::Stopped;
                        trace[v].stop_step = Some(s);
                        trace[v].stop_reason = Some(StopReason::NonConvergence);
                        next.push(current[v].clone());
                    } else if chi2_stop == Some(true) {
                        status[v] = Status::Stopped;
                        trace[v].stop_step = Some(s);
                        trace[v].stop_reason = Some(StopReason::Chi2Rule);
                        next.push(current[v].clone());
                    } else {
                        trace[v].final_step = s;
                        states[v] = fit.state;
                        next.push(fit.beta);
                    }
                }
            }
        }
        history.push(next);
    }

    Ok(SmoothingResult {
        betas: history.last().expect("history is never empty").clone(),
        trace,
        history,
        initial_lambdas,
    })
}
