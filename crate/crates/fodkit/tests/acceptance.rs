//! Acceptance suite. Every test prints one `PASS` or `FAIL` line with the
//! measured values and the bound they are held to, then asserts.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use clarabel::algebra::CscMatrix;
use clarabel::solver::{DefaultSettingsBuilder, DefaultSolver, IPSolver, NonnegativeConeT, SolverStatus};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fodkit::admm::{kkt_report, objective, solve_constrained_lasso, LassoDesign, SolverConfig};
use fodkit::metrics::MetricReport;
use fodkit::narm::{
    percentile, rescale_factor, run_smoother, stopping_check, LambdaPolicy, Schedule, SmootherConfig, SmoothingInput,
    StopReason, Variant,
};
use fodkit::sphere::quadrature::SymmetricCubature;
use fodkit::sphere::{build_needlet_frame, ShBasis};
use fodkit::synthetic::RoiKind;
use fodkit_cli::config::{MethodConfig, RunConfig};
use fodkit_cli::pipeline::{cmd_reproduce, Experiment, Layout, RunSummary};

fn verdict(name: &str, pass: bool, detail: &str) {
    println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{name}: {detail}");
}

/// Runtime bounds are wall-clock, so the checks take turns.
fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn minutes(d: Duration) -> f64 {
    d.as_secs_f64() / 60.0
}

struct Run {
    summary: RunSummary,
    elapsed: Duration,
}

impl Run {
    fn row(&self, label: &str) -> &MetricReport {
        self.summary
            .table
            .iter()
            .find(|r| r.label == label)
            .unwrap_or_else(|| panic!("no row {label}"))
    }

    fn co(&self, label: &str, fibers: usize) -> f64 {
        self.row(label).class(fibers).unwrap().correct
    }

    fn angle(&self, label: &str, fibers: usize) -> f64 {
        self.row(label).class(fibers).unwrap().median_angle_deg.unwrap_or(f64::NAN)
    }

    fn hellinger(&self, label: &str) -> f64 {
        self.row(label).hellinger_truth.unwrap().mean
    }
}

fn execute(cfg: RunConfig) -> Run {
    let dir = tempfile::tempdir().unwrap();
    let layout = Layout::new(dir.path());
    let t0 = Instant::now();
    let exp = Experiment::new(cfg, Some(&layout.bundle())).unwrap();
    let summary = cmd_reproduce(&exp, &layout).unwrap();
    let run = Run {
        summary,
        elapsed: t0.elapsed(),
    };
    for r in &run.summary.table {
        println!("    {}", r.csv_row());
    }
    run
}

const VOXELWISE: &str = "SN-lasso(voxel-wise)";
const NARM: &str = "NARM(alpha=0.15)";
const NO_SR: &str = "NARM(no stopping&rescaling)";

fn roi2d_1() -> &'static Run {
    static R: OnceLock<Run> = OnceLock::new();
    R.get_or_init(|| {
        let mut cfg = RunConfig::preset("roi2d-1").unwrap();
        cfg.methods = vec![MethodConfig::voxelwise(), MethodConfig::smoothed(Variant::Narm)];
        execute(cfg)
    })
}

// ---------------------------------------------------------------------------

#[test]
fn frame_exactness() {
    let _turn = serial();
    let t0 = Instant::now();
    let (_, c) = build_needlet_frame::<f64>(8).unwrap();
    let cct = &c * c.transpose();
    let frame_err = (&cct - DMatrix::<f64>::identity(cct.nrows(), cct.ncols())).amax();
    let sh = ShBasis::new(8).unwrap();
    let cub = SymmetricCubature::product(16);
    let y = sh.eval_matrix(&cub.nodes).unwrap();
    let w = DMatrix::from_diagonal(&DVector::from_vec(cub.weights.clone()));
    let gram = y.transpose() * w * &y;
    let gram_err = (&gram - DMatrix::<f64>::identity(sh.len(), sh.len())).amax();
    let secs = t0.elapsed().as_secs_f64();
    let pass = frame_err <= 1e-8 && gram_err <= 1e-6 && secs < 1.0;
    verdict(
        "frame exactness",
        pass,
        &format!("|CC'-I|max = {frame_err:.2e} (<= 1e-8), |Gram-I|max = {gram_err:.2e} (<= 1e-6), {secs:.2} s (< 1 s)"),
    );
}

// ---------------------------------------------------------------------------

struct Instance {
    x: DMatrix<f64>,
    cc: DMatrix<f64>,
    y: DVector<f64>,
    lambda: f64,
}

fn instance(rng: &mut ChaCha8Rng) -> Instance {
    let n = rng.random_range(10..=40);
    let p = rng.random_range(4..=20);
    let l = rng.random_range(5..=30);
    let lambda = 10f64.powf(rng.random_range(-3.0..0.0));
    let x = DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0));
    let cc = DMatrix::from_fn(l, p, |_, j| if j == 0 { 1.0 } else { rng.random_range(-1.0..1.0) });
    let truth = DVector::from_fn(p, |i, _| if i % 3 == 0 { rng.random_range(-1.0..2.0) } else { 0.0 });
    let noise = DVector::from_fn(n, |_, _| rng.random_range(-0.1..0.1));
    let y = &x * truth + noise;
    Instance { x, cc, y, lambda }
}

fn push_block(m: &DMatrix<f64>, upper: bool, r0: usize, c0: usize, t: &mut (Vec<usize>, Vec<usize>, Vec<f64>)) {
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if (!upper || i <= j) && m[(i, j)] != 0.0 {
                t.0.push(r0 + i);
                t.1.push(c0 + j);
                t.2.push(m[(i, j)]);
            }
        }
    }
}

/// Optimal objective from an interior-point solve of the epigraph form
/// `min 1/2 b'X'Xb - y'Xb + lambda 1's` subject to `|b| <= s`, `Cc b >= 0`.
fn oracle_objective(inst: &Instance) -> f64 {
    let p = inst.x.ncols();
    let l = inst.cc.nrows();
    let mut pt = (vec![], vec![], vec![]);
    push_block(&inst.x.tr_mul(&inst.x), true, 0, 0, &mut pt);
    let pm = CscMatrix::new_from_triplets(2 * p, 2 * p, pt.0, pt.1, pt.2);
    let mut q: Vec<f64> = inst.x.tr_mul(&inst.y).iter().map(|v| -v).collect();
    q.extend(std::iter::repeat_n(inst.lambda, p));
    let eye = DMatrix::<f64>::identity(p, p);
    let mut at = (vec![], vec![], vec![]);
    push_block(&eye, false, 0, 0, &mut at);
    push_block(&(-&eye), false, 0, p, &mut at);
    push_block(&(-&eye), false, p, 0, &mut at);
    push_block(&(-&eye), false, p, p, &mut at);
    push_block(&(-&inst.cc), false, 2 * p, 0, &mut at);
    let a = CscMatrix::new_from_triplets(2 * p + l, 2 * p, at.0, at.1, at.2);
    let settings = DefaultSettingsBuilder::default()
        .verbose(false)
        .tol_gap_abs(1e-12)
        .tol_gap_rel(1e-12)
        .tol_feas(1e-12)
        .build()
        .unwrap();
    let mut solver =
        DefaultSolver::new(&pm, &q, &a, &vec![0.0; 2 * p + l], &[NonnegativeConeT(2 * p + l)], settings).unwrap();
    solver.solve();
    assert!(matches!(
        solver.solution.status,
        SolverStatus::Solved | SolverStatus::AlmostSolved
    ));
    let beta = DVector::from_column_slice(&solver.solution.x[..p]);
    let r = &inst.y - &inst.x * &beta;
    0.5 * r.norm_squared() + inst.lambda * beta.iter().map(|v| v.abs()).sum::<f64>()
}

#[test]
fn solver_vs_oracle() {
    let _turn = serial();
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20240611);
    let cfg = SolverConfig {
        eps_abs: 1e-9,
        eps_rel: 1e-9,
        max_iters: 200_000,
        ..Default::default()
    };
    let (mut worst_rel, mut worst_kkt, mut worst_neg) = (0.0f64, 0.0f64, 0.0f64);
    let mut all_converged = true;
    for _ in 0..50 {
        let inst = instance(&mut rng);
        let design = LassoDesign::dense(inst.x.clone(), inst.cc.clone()).unwrap();
        let out = solve_constrained_lasso(&design, &inst.y, inst.lambda, &cfg, None).unwrap();
        all_converged &= out.converged;
        let f = objective(&design, &inst.y, inst.lambda, &out.estimate);
        let f_star = oracle_objective(&inst);
        worst_rel = worst_rel.max((f - f_star).abs() / f_star.abs().max(1e-12));
        let kkt = kkt_report(&design, &inst.y, inst.lambda, &out);
        worst_kkt = worst_kkt.max(kkt.stationarity).max(kkt.complementarity);
        worst_neg = worst_neg.max(kkt.infeasibility);
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = all_converged && worst_rel <= 1e-4 && worst_kkt <= 1e-4 && worst_neg <= 1e-6 && secs < 30.0;
    verdict(
        "solver vs oracle",
        pass,
        &format!(
            "50 instances, worst objective gap {worst_rel:.2e} (<= 1e-4), KKT {worst_kkt:.2e} (<= 1e-4), \
             constraint violation {worst_neg:.2e} (<= 1e-6), {secs:.1} s (< 30 s)"
        ),
    );
}

// ---------------------------------------------------------------------------

#[test]
fn noiseless_calibration() {
    let _turn = serial();
    let t0 = Instant::now();
    let mut cfg = RunConfig::preset("roi2d-1").unwrap();
    cfg.acquisition.snr = None;
    cfg.methods = vec![MethodConfig::voxelwise()];
    let exp = Experiment::new(cfg, None).unwrap();
    let vol = exp.simulate(None).unwrap();
    let fit = exp.fit(&vol, &exp.cfg.methods[0], &mut Default::default()).unwrap();
    let (rep, _) = exp.evaluate(VOXELWISE, &fit.betas, None).unwrap();
    let c1 = rep.class(1).unwrap();
    let c2 = rep.class(2).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let a1 = c1.median_angle_deg.unwrap_or(f64::NAN);
    let a2 = c2.median_angle_deg.unwrap_or(f64::NAN);
    let pass = c1.correct == 1.0 && c2.correct == 1.0 && a1 <= 3.0 && a2 <= 3.0 && secs <= 120.0;
    verdict(
        "noiseless calibration",
        pass,
        &format!(
            "Co 1f {:.2} / 2f {:.2} (= 1.00), median error 1f {a1:.2} / 2f {a2:.2} deg (<= 3), {secs:.0} s (<= 120 s)",
            c1.correct, c2.correct
        ),
    );
}

// ---------------------------------------------------------------------------

#[test]
fn roi2d_1_reproduction() {
    let _turn = serial();
    let r = roi2d_1();
    let vw_co2 = r.co(VOXELWISE, 2);
    let vw_err2 = r.angle(VOXELWISE, 2);
    let narm_co1 = r.co(NARM, 1);
    let narm_co2 = r.co(NARM, 2);
    let narm_err2 = r.angle(NARM, 2);
    let checks = [
        (0.65..=0.90).contains(&vw_co2),
        (6.0..=12.0).contains(&vw_err2),
        narm_co1 >= 0.96,
        narm_co2 >= 0.96,
        narm_err2 <= 5.5,
        minutes(r.elapsed) <= 20.0,
    ];
    verdict(
        "ROI-2D-I reproduction",
        checks.iter().all(|c| *c),
        &format!(
            "5 seeds: voxel-wise 2f Co {vw_co2:.3} (in [0.65, 0.90]), 2f error {vw_err2:.2} deg (in [6, 12]); \
             NARM 1f Co {narm_co1:.3}, 2f Co {narm_co2:.3} (>= 0.96), 2f error {narm_err2:.2} deg (<= 5.5); \
             {:.1} min (<= 20)",
            minutes(r.elapsed)
        ),
    );
}

#[test]
fn hellinger_ordering() {
    let _turn = serial();
    let r = roi2d_1();
    let narm = r.hellinger(NARM);
    let vw = r.hellinger(VOXELWISE);
    verdict(
        "Hellinger ordering",
        narm + 0.01 <= vw,
        &format!("5-seed mean Hellinger to truth: NARM {narm:.4} vs voxel-wise {vw:.4} (margin >= 0.01)"),
    );
}

// ---------------------------------------------------------------------------

#[test]
fn roi2d_2_zero_fiber_recovery() {
    let _turn = serial();
    let mut cfg = RunConfig::preset("roi2d-2").unwrap();
    cfg.seeds = vec![1, 2, 3];
    cfg.methods = vec![
        MethodConfig::smoothed(Variant::Narm),
        MethodConfig::smoothed(Variant::NoStoppingRescaling),
    ];
    let r = execute(cfg);
    let narm = r.co(NARM, 0);
    let nosr = r.co(NO_SR, 0);
    let pass = narm >= 0.90 && nosr <= 0.20 && minutes(r.elapsed) <= 20.0;
    verdict(
        "ROI-2D-II zero-fiber recovery",
        pass,
        &format!(
            "3 seeds: NARM 0f Co {narm:.3} (>= 0.90), no stopping & rescaling 0f Co {nosr:.3} (<= 0.20); \
             {:.1} min (<= 20)",
            minutes(r.elapsed)
        ),
    );
}

// ---------------------------------------------------------------------------

#[test]
fn multi_b_stacking() {
    let _turn = serial();
    let cfg = RunConfig::preset("roi3d-multib").unwrap();
    let r = execute(cfg);
    let co = |shells: &str, eps: &str| r.co(&format!("SN-lasso({shells}, eps={eps})"), 2);
    let stacked_1 = co("b=1000&3000", "0.001");
    let stacked_5 = co("b=1000&3000", "0.005");
    let single_1 = co("b=1000", "0.001");
    let single_5 = co("b=1000", "0.005");
    let best_single = single_1.max(single_5);
    let checks = [
        stacked_1.max(stacked_5) >= best_single + 0.10,
        (stacked_1 - stacked_5).abs() <= 0.02,
        stacked_5 >= 0.9,
        single_5 <= 0.10,
        minutes(r.elapsed) <= 45.0,
    ];
    verdict(
        "multi-b stacking",
        checks.iter().all(|c| *c),
        &format!(
            "2f Co stacked {stacked_1:.3} / {stacked_5:.3} at eps 1e-3 / 5e-3 (>= b=1000 best {best_single:.3} + 0.10, \
             change <= 0.02, >= 0.9 at 5e-3); b=1000 only {single_1:.3} / {single_5:.3} (<= 0.10 at 5e-3); \
             {:.1} min (<= 45)",
            minutes(r.elapsed)
        ),
    );
}

// ---------------------------------------------------------------------------

#[test]
fn stopping_rule_semantics() {
    let _turn = serial();
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut failures = Vec::new();

    // The predicate on constructed sequences.
    for _ in 0..2000 {
        let h = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
        if stopping_check(h) != (h[1].min(h[2]) >= h[0]) {
            failures.push(format!("predicate on {h:?}"));
        }
    }
    let decreasing: Vec<f64> = (0..10).map(|k| 1.0 - 0.05 * k as f64).collect();
    if decreasing.windows(3).any(|w| stopping_check([w[0], w[1], w[2]])) {
        failures.push("fired on a decreasing sequence".into());
    }

    // Rescaled MNN distances stay within the alpha percentiles.
    for _ in 0..200 {
        let n = rng.random_range(2..80);
        let mnn: Vec<f64> = (0..n).map(|_| rng.random_range(1e-3..2.0)).collect();
        let (lo, hi) = (percentile(&mnn, 0.15).unwrap(), percentile(&mnn, 0.85).unwrap());
        for &m in &mnn {
            let r = m * rescale_factor(m, lo, hi);
            if r < lo * (1.0 - 1e-12) || r > hi * (1.0 + 1e-12) {
                failures.push(format!("rescaled {m} to {r} outside [{lo}, {hi}]"));
            }
        }
    }

    // A smoothing run on a noisy ROI-2D-II patch: the recorded MNN sequence
    // decides the stop step and stopped voxels keep their estimate bitwise.
    let mut cfg = RunConfig::preset("roi2d-2").unwrap();
    cfg.lambda.count = 40;
    cfg.lambda.window = 3;
    let exp = Experiment::new(cfg, None).unwrap();
    let vol = exp.simulate(Some(3)).unwrap();
    let design = exp.bundle.design(&[0]).unwrap();
    let path = exp.cfg.lambda.path(None).unwrap();
    let input = SmoothingInput {
        grid: exp.grid(),
        design: &design,
        dense_frame: &exp.bundle.dense_frame,
        signals: &vol.data,
        path: &path,
        solver: &exp.cfg.solver,
    };
    let sc = SmootherConfig {
        schedule: Schedule { r: 1.15, steps: 6 },
        gamma: 2.0,
        alpha: 0.15,
        variant: Variant::Narm,
        lambda_policy: LambdaPolicy::ReuseInitial,
    };
    let res = run_smoother(input, &sc).unwrap();
    let mut stopped = 0;
    for (v, t) in res.trace.iter().enumerate() {
        let mnn: Vec<f64> = t.mnn.iter().map_while(|m| *m).collect();
        let first = (3..=mnn.len()).find(|&s| stopping_check([mnn[s - 3], mnn[s - 2], mnn[s - 1]]));
        match (t.stop_reason, t.stop_step) {
            (Some(StopReason::MnnRule), Some(s)) => {
                stopped += 1;
                if first != Some(s) || t.final_step != s - 2 {
                    failures.push(format!("voxel {v} stopped at {s}, predicate first holds at {first:?}"));
                }
                let held = &res.history[t.final_step][v];
                if res.history[s..].iter().any(|h| &h[v] != held) {
                    failures.push(format!("voxel {v} changed after stopping"));
                }
            }
            (Some(StopReason::NonConvergence), _) => {}
            _ => {
                if first.is_some() {
                    failures.push(format!("voxel {v} never stopped although the rule holds at {first:?}"));
                }
            }
        }
    }
    if stopped == 0 {
        failures.push("no voxel stopped".into());
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        "stopping-rule semantics",
        failures.is_empty(),
        &format!(
            "2000 predicate cases, 200 rescaling fields, {stopped} stopped voxels checked; {} violations{}; {secs:.0} s",
            failures.len(),
            failures.first().map(|f| format!(" (first: {f})")).unwrap_or_default()
        ),
    );
}

// ---------------------------------------------------------------------------

fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn determinism() {
    let _turn = serial();
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_fodkit"))
            .args(["reproduce", "roi2d-1", "--seed", "1", "--out", out.to_str().unwrap()])
            .env("RUST_LOG", "warn")
            .status()
            .unwrap();
        assert!(status.success());
        read_tree(&out)
    };
    let a = run("a");
    let b = run("b");
    let differing: Vec<&String> = a.keys().filter(|k| b.get(*k) != a.get(*k)).collect();
    let pass = !a.is_empty() && a.len() == b.len() && differing.is_empty();
    verdict(
        "determinism",
        pass,
        &format!(
            "`reproduce roi2d-1 --seed 1` twice: {} files, {} differ{}",
            a.len(),
            differing.len(),
            differing.first().map(|f| format!(" (first: {f})")).unwrap_or_default()
        ),
    );
}

// ---------------------------------------------------------------------------

#[test]
fn tracking_ordering() {
    let _turn = serial();
    let mut cfg = RunConfig::preset("roi3d-b1000").unwrap();
    cfg.methods = vec![MethodConfig::voxelwise(), MethodConfig::smoothed(Variant::Narm)];
    assert_eq!(cfg.roi.kind, RoiKind::Roi3d);
    let r = execute(cfg);
    let length = |label: &str| {
        r.summary
            .tracking
            .iter()
            .find(|t| t.label == label)
            .map(|t| t.summary.median_length)
            .unwrap()
    };
    let (narm, vw) = (length(NARM), length(VOXELWISE));
    verdict(
        "tracking ordering",
        narm > vw,
        &format!(
            "ROI-3D median fiber length NARM {narm:.2} > voxel-wise {vw:.2}; run {:.1} min",
            minutes(r.elapsed)
        ),
    );
}
