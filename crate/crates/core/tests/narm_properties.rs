//! Properties of the smoothing weights, the distance rescaling and the
//! stopping rules, on constructed inputs and on small smoothing runs.

use std::sync::OnceLock;

use fodkit::admm::{LambdaPath, SolverConfig};
use fodkit::bundle::BasisBundle;
use fodkit::narm::{
    compute_weights, percentile, rescale_distances, rescale_factor, run_smoother, stopping_check,
    LambdaPolicy, Schedule, SmootherConfig, SmoothingInput, SmoothingResult, StopReason, Variant,
};
use fodkit::signal::ResponseFunction;
use fodkit::sphere::{gradient_scheme, Direction};
use fodkit::synthetic::{simulate, NoiseSpec, RoiTruth, VoxelTruth};
use fodkit::volume::{ShellInfo, VoxelGrid};
use proptest::prelude::*;

fn bundle() -> &'static (BasisBundle<f64>, ShellInfo) {
    static B: OnceLock<(BasisBundle<f64>, ShellInfo)> = OnceLock::new();
    B.get_or_init(|| {
        let rf = ResponseFunction::with_ratio(1000.0, 1e-3, 10.0, true).unwrap();
        let g = gradient_scheme(41).unwrap().points;
        let b = BasisBundle::new(8, 3, vec![(rf, g.clone())]).unwrap();
        (
            b,
            ShellInfo {
                b: 1000.0,
                gradients: g,
                response: rf,
            },
        )
    })
}

fn path() -> LambdaPath {
    LambdaPath::log_spaced(1.0, 1e-5, 40, 3, 2e-3).unwrap()
}

fn solver() -> SolverConfig {
    SolverConfig {
        eps_abs: 1e-5,
        eps_rel: 1e-3,
        ..Default::default()
    }
}

/// 5 x 5 region: one bundle along x in the lower rows, one along y in the
/// upper rows, isotropic voxels on the right edge.
fn small_truth() -> RoiTruth {
    let grid = VoxelGrid::new([5, 5, 1]).unwrap();
    let x = Direction::new(1.0, 0.0, 0.0).unwrap();
    let y = Direction::normalized(0.1, 1.0, 0.2).unwrap();
    let voxels = (0..grid.len())
        .map(|i| {
            let [cx, cy, _] = grid.coords(i);
            if cx == 4 {
                VoxelTruth::Isotropic
            } else if cy < 2 {
                VoxelTruth::equal_mixture(&[x])
            } else if cy == 2 {
                VoxelTruth::equal_mixture(&[x, y])
            } else {
                VoxelTruth::equal_mixture(&[y])
            }
        })
        .collect();
    RoiTruth::new(grid, voxels).unwrap()
}

fn run(truth: &RoiTruth, variant: Variant, seed: Option<u64>) -> SmoothingResult<f64> {
    let (b, shell) = bundle();
    let noise = seed.map(|s| NoiseSpec::from_snr(1.0, 20.0, s).unwrap());
    let vol = simulate::<f64>(truth, std::slice::from_ref(shell), noise).unwrap();
    let design = b.design(&[0]).unwrap();
    let path = path();
    let solver = solver();
    let input = SmoothingInput {
        grid: truth.grid,
        design: &design,
        dense_frame: &b.dense_frame,
        signals: &vol.data,
        path: &path,
        solver: &solver,
    };
    let cfg = SmootherConfig {
        schedule: Schedule { r: 1.15, steps: 8 },
        gamma: 2.0,
        alpha: 0.15,
        variant,
        lambda_policy: LambdaPolicy::FullPath,
    };
    run_smoother(input, &cfg).unwrap()
}

fn uniform_truth(n: usize) -> RoiTruth {
    let grid = VoxelGrid::new([n, n, 1]).unwrap();
    let d = Direction::normalized(0.3, 0.5, 0.8).unwrap();
    RoiTruth::new(grid, vec![VoxelTruth::equal_mixture(&[d]); n * n]).unwrap()
}

/// Alternating single-bundle voxels along x and y: every neighbour differs,
/// so smoothing cannot shrink the nearest neighbour distances.
fn checkerboard_truth(n: usize) -> RoiTruth {
    let grid = VoxelGrid::new([n, n, 1]).unwrap();
    let x = Direction::new(1.0, 0.0, 0.0).unwrap();
    let y = Direction::new(0.0, 1.0, 0.0).unwrap();
    let voxels = (0..grid.len())
        .map(|i| {
            let [cx, cy, _] = grid.coords(i);
            VoxelTruth::equal_mixture(&[if (cx + cy) % 2 == 0 { x } else { y }])
        })
        .collect();
    RoiTruth::new(grid, voxels).unwrap()
}

fn noisy_narm() -> &'static [SmoothingResult<f64>] {
    static R: OnceLock<Vec<SmoothingResult<f64>>> = OnceLock::new();
    R.get_or_init(|| {
        vec![
            run(&small_truth(), Variant::Narm, Some(11)),
            run(&checkerboard_truth(5), Variant::Narm, Some(12)),
        ]
    })
}

#[test]
fn stopped_voxels_are_bitwise_frozen() {
    let mut stopped = 0;
    for res in noisy_narm() {
        for (v, t) in res.trace.iter().enumerate() {
            if let Some(s) = t.stop_step {
                stopped += 1;
                let held = &res.history[t.final_step][v];
                for later in &res.history[s..] {
                    assert_eq!(
                        &later[v], held,
                        "voxel {v} changed after stopping at step {s}"
                    );
                }
                assert!(t.mnn[s..].iter().all(|m| m.is_none()));
                assert!(t.lambdas[s + 1..].iter().all(|l| l.is_none()));
            }
        }
    }
    assert!(stopped > 0, "no voxel stopped; the check is vacuous");
}

#[test]
fn stop_step_matches_the_predicate_on_recorded_mnn() {
    for res in noisy_narm() {
        for (v, t) in res.trace.iter().enumerate() {
            let mnn: Vec<f64> = t.mnn.iter().map_while(|m| *m).collect();
            let first =
                (3..=mnn.len()).find(|&s| stopping_check([mnn[s - 3], mnn[s - 2], mnn[s - 1]]));
            match t.stop_reason {
                Some(StopReason::MnnRule) => {
                    let s = t.stop_step.unwrap();
                    assert_eq!(first, Some(s), "voxel {v}: mnn {mnn:?}");
                    assert_eq!(t.final_step, s - 2);
                }
                Some(StopReason::NonConvergence) => {}
                _ => assert_eq!(
                    first, None,
                    "voxel {v} never stopped although the rule holds: {mnn:?}"
                ),
            }
        }
    }
}

#[test]
fn variants_without_stopping_never_stop() {
    let res = run(&small_truth(), Variant::NoStoppingRescaling, Some(11));
    for t in &res.trace {
        assert!(t.stop_reason.is_none() || t.stop_reason == Some(StopReason::NonConvergence));
        assert_eq!(t.final_step, 8);
    }
}

#[test]
fn uniform_field_is_left_unchanged() {
    let res = run(&uniform_truth(4), Variant::Narm, None);
    let first = &res.history[0][0];
    let scale = first.amax();
    for b in &res.betas {
        assert!((b - first).amax() <= 1e-9 * scale.max(1.0));
    }
}

proptest! {
    #[test]
    fn weights_are_a_distribution(members in prop::collection::vec((0.0f64..3.0, 0.0f64..2.0), 1..20),
                                  radius in 0.5f64..4.0, gamma in 0.1f64..20.0) {
        let mut m = members;
        m[0] = (0.0, 0.0);
        let w = compute_weights(&m, radius, gamma);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|x| *x >= 0.0));
        for (wi, (loc, _)) in w.iter().zip(&m) {
            if *loc >= radius {
                prop_assert_eq!(*wi, 0.0);
            }
        }
    }

    #[test]
    fn weights_decrease_with_distance(d1 in 0.0f64..2.0, d2 in 0.0f64..2.0, gamma in 0.1f64..10.0) {
        let w = compute_weights(&[(0.0, 0.0), (1.0, d1), (1.0, d2)], 1.15, gamma);
        if d1 < d2 {
            prop_assert!(w[1] >= w[2]);
        } else if d2 < d1 {
            prop_assert!(w[2] >= w[1]);
        }
    }

    #[test]
    fn rescaled_mnn_lies_within_percentiles(mnns in prop::collection::vec(1e-4f64..3.0, 2..60), alpha in 0.0f64..0.5) {
        let lo = percentile(&mnns, alpha).unwrap();
        let hi = percentile(&mnns, 1.0 - alpha).unwrap();
        let rescaled: Vec<f64> = mnns.iter().map(|&m| m * rescale_factor(m, lo, hi)).collect();
        for (&m, &r) in mnns.iter().zip(&rescaled) {
            prop_assert!(r >= lo * (1.0 - 1e-12) && r <= hi * (1.0 + 1e-12), "{} -> {} outside [{}, {}]", m, r, lo, hi);
            if m >= lo && m <= hi {
                prop_assert_eq!(r, m);
            }
        }
        // Clamping preserves the order of the MNN distances.
        let order: Vec<usize> = {
            let mut i: Vec<usize> = (0..mnns.len()).collect();
            i.sort_by(|&a, &b| mnns[a].total_cmp(&mnns[b]));
            i
        };
        for w in order.windows(2) {
            prop_assert!(rescaled[w[0]] <= rescaled[w[1]] * (1.0 + 1e-12));
        }
    }

    #[test]
    fn rescaling_scales_all_distances_of_a_voxel_alike(d in prop::collection::vec(1e-3f64..2.0, 1..10), lo in 0.01f64..0.2, span in 0.0f64..0.5) {
        let mnn = d.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = lo + span;
        let r = rescale_distances(&d, mnn, lo, hi);
        let f = rescale_factor(mnn, lo, hi);
        for (a, b) in d.iter().zip(&r) {
            prop_assert_eq!(*b, a * f);
        }
    }

    #[test]
    fn stopping_predicate_definition(a in 0.0f64..2.0, b in 0.0f64..2.0, c in 0.0f64..2.0) {
        prop_assert_eq!(stopping_check([a, b, c]), b.min(c) >= a);
    }

    #[test]
    fn strictly_decreasing_mnn_never_stops(start in 0.5f64..2.0, steps in prop::collection::vec(1e-6f64..0.05, 3..12)) {
        let mut seq = vec![start];
        for s in &steps {
            let last = *seq.last().unwrap();
            seq.push(last - s);
        }
        prop_assert!(seq.windows(3).all(|w| !stopping_check([w[0], w[1], w[2]])));
    }

    #[test]
    fn plateau_stops_at_its_third_value(dec in prop::collection::vec(1e-3f64..0.1, 0..6), bump in 0.0f64..0.1) {
        let mut seq = vec![1.0];
        for s in &dec {
            let last = *seq.last().unwrap();
            seq.push(last - s);
        }
        let base = *seq.last().unwrap();
        seq.push(base + bump);
        seq.push(base + 2.0 * bump);
        let first = (3..=seq.len()).find(|&s| stopping_check([seq[s - 3], seq[s - 2], seq[s - 1]]));
        prop_assert_eq!(first, Some(seq.len()));
    }
}
