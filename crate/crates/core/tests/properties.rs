//! Invariants checked over generated inputs. Cases are driven by a seed into
//! the crate's own Gaussian stream so that every case is replayable.

use std::collections::BTreeMap;
use std::fs;

use adapton_core::adapton::{compute_regret, ComparatorKind};
use adapton_core::dfc::{
    counterfactual_gradient, counterfactual_gradient_fd, counterfactual_loss, project_exact, project_policy, DfcPolicy,
    NatureYBuffer,
};
use adapton_core::experiment::{median, random_stable_system, run_experiment, ExperimentConfig, Mode, RunOptions};
use adapton_core::linalg::spectral_norm;
use adapton_core::rng::{GaussianStream, StreamKey};
use adapton_core::simulator::{LossSpec, RunHistory};
use adapton_core::system_model::{markov_parameters, predictor_form, validate_system, MarkovOperator, StateSpaceModel};
use adapton_core::sysid::LeastSquaresAccumulator;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn stream(seed: u64) -> GaussianStream {
    GaussianStream::new(seed, StreamKey::Auxiliary)
}

fn random_policy(rng: &mut GaussianStream, hprime: usize, p: usize, m: usize, kappa: f64, scale: f64) -> DfcPolicy {
    DfcPolicy::from_flat(hprime, p, m, kappa, rng.normal_vec(hprime * p * m, scale)).unwrap()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// A random strictly causal operator, history, filled buffer and diagonal loss.
struct GradientCase {
    g: MarkovOperator,
    hist: RunHistory,
    buf: NatureYBuffer,
    loss: LossSpec,
}

fn gradient_case(rng: &mut GaussianStream, m: usize, p: usize, h: usize, steps: usize) -> GradientCase {
    let blocks: Vec<DMatrix<f64>> = (0..h)
        .map(|i| {
            if i == 0 {
                DMatrix::zeros(m, p)
            } else {
                DMatrix::from_vec(m, p, rng.normal_vec(m * p, 0.25))
            }
        })
        .collect();
    let g = MarkovOperator::from_blocks(blocks);
    let hist = RunHistory::from_io(m, p, rng.normal_vec(steps * m, 1.0), rng.normal_vec(steps * p, 1.0)).unwrap();
    let mut buf = NatureYBuffer::new(g.clone());
    buf.recompute(&hist, g.clone(), steps);
    let qd: Vec<f64> = (0..m).map(|_| 0.2 + rng.uniform()).collect();
    let rd: Vec<f64> = (0..p).map(|_| 0.2 + rng.uniform()).collect();
    let loss =
        LossSpec::new(DMatrix::from_diagonal(&DVector::from_vec(qd)), DMatrix::from_diagonal(&DVector::from_vec(rd))).unwrap();
    GradientCase { g, hist, buf, loss }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn least_squares_satisfies_normal_equations(seed in any::<u64>(), dim in 1usize..6, out in 1usize..3, rows in 1usize..40, lambda in 1e-3f64..10.0) {
        let mut rng = stream(seed);
        let x = DMatrix::from_vec(rows, dim, rng.normal_vec(rows * dim, 1.0));
        let y = DMatrix::from_vec(rows, out, rng.normal_vec(rows * out, 1.0));
        let mut acc = LeastSquaresAccumulator::new(dim, out);
        for r in 0..rows {
            let xr: Vec<f64> = x.row(r).iter().copied().collect();
            let yr: Vec<f64> = y.row(r).iter().copied().collect();
            acc.add_row(&xr, &yr);
        }
        let xtx = x.transpose() * &x;
        let xty = x.transpose() * &y;
        prop_assert!((acc.gram() - &xtx).amax() <= 1e-10 * (1.0 + xtx.amax()));
        prop_assert!((acc.cross() - &xty).amax() <= 1e-10 * (1.0 + xty.amax()));
        let (w, _) = acc.solve(lambda).unwrap();
        let resid = (&xtx + DMatrix::identity(dim, dim) * lambda) * &w - &xty;
        prop_assert!(resid.amax() <= 1e-9 * (1.0 + xty.amax()));
    }

    #[test]
    fn markov_parameters_are_similarity_invariant(seed in 0u64..10_000, n in 1usize..5, m in 1usize..3, p in 1usize..3) {
        let model = random_stable_system(n, m, p, 0.8, seed).unwrap();
        let mut rng = stream(seed);
        let t = DMatrix::identity(n, n) + DMatrix::from_vec(n, n, rng.normal_vec(n * n, 0.09));
        let Some(tinv) = t.clone().try_inverse() else { return Ok(()); };
        prop_assume!(t.norm() * tinv.norm() < 1e3);
        let moved = StateSpaceModel::new(&t * &model.a * &tinv, &t * &model.b, &model.c * &tinv, 1.0, 1.0).unwrap();
        let (a, b) = (markov_parameters(&model, 15).unwrap(), markov_parameters(&moved, 15).unwrap());
        for (x, y) in a.blocks.iter().zip(&b.blocks) {
            prop_assert!((x - y).amax() <= 1e-9 * (1.0 + x.amax()));
        }
    }

    #[test]
    fn analytic_gradient_matches_central_differences(seed in any::<u64>(), m in 1usize..3, p in 1usize..3, h in 2usize..5, hprime in 1usize..5) {
        let mut rng = stream(seed);
        let c = gradient_case(&mut rng, m, p, h, 30);
        let policy = random_policy(&mut rng, hprime, p, m, 1e9, 0.1);
        let a = counterfactual_gradient(&policy, &c.g, &c.buf, 30, &c.loss).unwrap();
        let f = counterfactual_gradient_fd(&policy, &c.g, &c.buf, 30, &c.loss).unwrap();
        let scale: f64 = f.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-8);
        prop_assert!(dist(&a, &f) / scale < 1e-5);
        prop_assert_eq!(c.hist.len(), 30);
    }

    #[test]
    fn projections_are_feasible_and_idempotent(seed in any::<u64>(), hprime in 1usize..6, p in 1usize..3, m in 1usize..3, kappa in 0.05f64..3.0, scale in 0.01f64..4.0) {
        let mut rng = stream(seed);
        let x = random_policy(&mut rng, hprime, p, m, kappa, scale);
        let tol = 1e-9 * (1.0 + kappa);
        for project in [project_policy as fn(&DfcPolicy) -> DfcPolicy, project_exact] {
            let once = project(&x);
            prop_assert!(once.norm_sum() <= kappa + tol);
            let twice = project(&once);
            prop_assert!(dist(once.params(), twice.params()) <= 1e-9 * (1.0 + scale));
            if x.norm_sum() <= kappa {
                prop_assert!(dist(once.params(), x.params()) <= 1e-12 * (1.0 + scale));
            }
        }
    }

    #[test]
    fn exact_projection_is_the_nearest_feasible_point(seed in any::<u64>(), hprime in 1usize..5, p in 1usize..3, m in 1usize..3, kappa in 0.1f64..2.0) {
        let mut rng = stream(seed);
        let x = random_policy(&mut rng, hprime, p, m, kappa, 1.5);
        let px = project_exact(&x);
        let d = dist(x.params(), px.params());
        for _ in 0..4 {
            let z = project_policy(&random_policy(&mut rng, hprime, p, m, kappa, 1.0));
            // obtuse-angle condition of a Euclidean projection onto a convex set
            let inner: f64 = x.params().iter().zip(px.params()).zip(z.params())
                .map(|((xi, pi), zi)| (xi - pi) * (zi - pi)).sum();
            prop_assert!(inner <= 1e-7 * (1.0 + d));
            prop_assert!(d <= dist(x.params(), z.params()) + 1e-9);
        }
        let r = project_policy(&x);
        prop_assert!(d <= dist(x.params(), r.params()) + 1e-9);
    }

    #[test]
    fn regret_is_linear_and_telescopes(a in prop::collection::vec(-5.0f64..5.0, 1..50), shift in -3.0f64..3.0) {
        let c: Vec<f64> = a.iter().map(|v| v * 0.5 + shift).collect();
        let r = compute_regret(&a, &c, ComparatorKind::BestDfcHindsight).unwrap();
        prop_assert_eq!(r.at(0), 0.0);
        for t in 1..=a.len() {
            prop_assert!((r.at(t) - r.at(t - 1) - (a[t - 1] - c[t - 1])).abs() <= 1e-12);
        }
        let a2: Vec<f64> = a.iter().map(|v| 2.0 * v).collect();
        let c2: Vec<f64> = c.iter().map(|v| 2.0 * v).collect();
        let r2 = compute_regret(&a2, &c2, ComparatorKind::BestDfcHindsight).unwrap();
        prop_assert!((r2.final_regret() - 2.0 * r.final_regret()).abs() <= 1e-9 * (1.0 + r.final_regret().abs()));
        let rs = compute_regret(&c, &c, ComparatorKind::LqgOptimal).unwrap();
        prop_assert_eq!(rs.final_regret(), 0.0);
        prop_assert!(compute_regret(&a, &c[..c.len() - 1], ComparatorKind::LqgOptimal).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn counterfactual_loss_is_convex_along_segments(seed in any::<u64>(), m in 1usize..3, p in 1usize..3, hprime in 1usize..5, lam in 0.0f64..1.0) {
        let mut rng = stream(seed);
        let c = gradient_case(&mut rng, m, p, 4, 25);
        let x = random_policy(&mut rng, hprime, p, m, 1e9, 0.5);
        let y = random_policy(&mut rng, hprime, p, m, 1e9, 0.5);
        let mid: Vec<f64> = x.params().iter().zip(y.params()).map(|(a, b)| lam * a + (1.0 - lam) * b).collect();
        let z = DfcPolicy::from_flat(hprime, p, m, 1e9, mid).unwrap();
        let f = |pol: &DfcPolicy| counterfactual_loss(pol, &c.g, &c.buf, 25, &c.loss).unwrap();
        let (fx, fy, fz) = (f(&x), f(&y), f(&z));
        prop_assert!(fz <= lam * fx + (1.0 - lam) * fy + 1e-12);
    }
}

#[test]
fn generator_returns_admissible_systems() {
    let mut admitted = 0;
    for k in 0..100u64 {
        let (n, m, p) = (1 + (k % 5) as usize, 1 + (k % 3) as usize, 1 + (k % 2) as usize);
        let rho = 0.3 + 0.006 * k as f64;
        let model = random_stable_system(n, m, p, rho, 500 + k).unwrap();
        let report = validate_system(&model).unwrap();
        let pf = predictor_form(&model).unwrap();
        let radius = adapton_core::linalg::spectral_radius(&model.a);
        if report.all_passed() && pf.rho_abar < 1.0 && (radius - rho).abs() <= 1e-8 {
            admitted += 1;
        }
    }
    assert_eq!(admitted, 100);
}

fn read_csv(path: &std::path::Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(str::to_string).collect();
    let rows = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    (header, rows)
}

#[test]
fn summary_aggregates_are_recomputable_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_json_str(
        r#"{"T_values":[300,600],"seeds":[3,4,5],"controllers":["adapton","lqg"],"adapton":{"T_w":64}}"#,
    )
    .unwrap();
    let opts = RunOptions { out_dir: Some(dir.path().to_path_buf()), jobs: Some(1), ..Default::default() };
    let out = run_experiment(&cfg, std::path::Path::new("."), Mode::Compare, &opts).unwrap();
    let mut finals: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
    for ctrl in ["adapton", "lqg"] {
        for t in [300usize, 600] {
            for seed in [3, 4, 5] {
                let (header, rows) = read_csv(&dir.path().join(format!("{ctrl}_seed{seed}_T{t}.csv")));
                assert_eq!(rows.len(), t);
                let col = header.iter().position(|h| h == "regret").unwrap();
                let cost = header.iter().position(|h| h == "cost").unwrap();
                let comp = header.iter().position(|h| h == "comparator_cost").unwrap();
                let sum: f64 = rows.iter().map(|r| r[cost] - r[comp]).sum();
                let last = rows.last().unwrap()[col];
                assert!((sum - last).abs() <= 1e-8 * (1.0 + last.abs()));
                finals.entry((ctrl.to_string(), t)).or_default().push(last);
            }
        }
    }
    for ((ctrl, t), v) in finals {
        let list = out.summary["aggregates"][format!("{ctrl}/regret_best_dfc")].as_array().unwrap();
        let entry = list.iter().find(|a| a["T"].as_u64() == Some(t as u64)).unwrap();
        let summarized = entry["median"].as_f64().unwrap();
        let recomputed = median(&v);
        assert!(
            (summarized - recomputed).abs() <= 1e-6 * (1.0 + recomputed.abs()),
            "{ctrl} T={t}: {summarized} vs {recomputed}"
        );
        assert_eq!(entry["count"].as_u64(), Some(3));
    }
}

#[test]
fn nearest_point_sanity_on_single_block() {
    // One block: the ball is a spectral-norm ball, and the nearest point in
    // Frobenius distance clips every singular value at the radius.
    let blocks = vec![DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 1.0])];
    let pol = DfcPolicy::from_blocks(&blocks, 1.0).unwrap();
    let px = project_exact(&pol);
    assert!((spectral_norm(&px.block(0)) - 1.0).abs() <= 1e-9);
    let b = px.block(0);
    assert!((b[(0, 0)] - 1.0).abs() <= 1e-9 && (b[(1, 1)] - 1.0).abs() <= 1e-9);
}
