//! Invariants checked over random inputs.

use proptest::prelude::*;
use splitinfer::compare::{comparison_ci, critical_value, null_draws, t_statistic};
use splitinfer::inference::{estimate, DeltaSpec};
use splitinfer::learners::{builtin, train_all};
use splitinfer::linalg::{is_pd, nearest_pd_correlation, Mat};
use splitinfer::moments::{evaluate_splits, Mse};
use splitinfer::repro::{repro_measure, sigma_d_hat, TestType};
use splitinfer::sim::{run_grid, DgpSpec, ExperimentGrid, LinearDgp, Method};
use splitinfer::splits::{generate_plan, SplitPlan};
use splitinfer::stats::{norm_cdf, norm_quantile};
use splitinfer::zestim::{Variant, DEFAULT_TOL};

fn symmetric_unit_diag(d: usize, vals: &[f64]) -> Mat {
    let mut a = Mat::identity(d, d);
    let mut it = vals.iter();
    for i in 0..d {
        for j in 0..i {
            let v = *it.next().unwrap();
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
    a
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cross_fit_plans_partition_rows(n in 6usize..300, m in 1usize..6, k in 2usize..6, seed: u64) {
        prop_assume!(n >= 2 * k);
        let plan = generate_plan(n, m, k, None, seed).unwrap();
        prop_assert_eq!(plan.repetitions.len(), m);
        for rep in &plan.repetitions {
            prop_assert_eq!(rep.len(), k);
            let mut seen = vec![0u8; n];
            for s in rep {
                for &i in s.as_slice() {
                    seen[i] += 1;
                }
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
            let sizes: Vec<usize> = rep.iter().map(|s| s.len()).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
        prop_assert_eq!(&generate_plan(n, m, k, None, seed).unwrap(), &plan);
    }

    #[test]
    fn subsample_plans_have_size_b(n in 4usize..300, m in 1usize..6, frac in 0.1f64..0.9, seed: u64) {
        let b = ((n as f64 * frac) as usize).clamp(1, n - 1);
        let plan = generate_plan(n, m, 1, Some(b), seed).unwrap();
        for rep in &plan.repetitions {
            prop_assert_eq!(rep.len(), 1);
            prop_assert_eq!(rep[0].len(), b);
            prop_assert!(rep[0].as_slice().windows(2).all(|w| w[0] < w[1]));
            prop_assert!(*rep[0].as_slice().last().unwrap() < n);
        }
    }

    #[test]
    fn nearest_pd_is_a_correlation_and_idempotent(d in 2usize..6, vals in prop::collection::vec(-1.0f64..1.0, 15)) {
        let a = symmetric_unit_diag(d, &vals);
        let c = nearest_pd_correlation(&a, 1e-8).unwrap();
        prop_assert!(is_pd(&c, 1e-8));
        for i in 0..d {
            prop_assert!((c[(i, i)] - 1.0).abs() < 1e-12);
            for j in 0..d {
                prop_assert_eq!(c[(i, j)], c[(j, i)]);
            }
        }
        let again = nearest_pd_correlation(&c, 1e-8).unwrap();
        prop_assert!((&again - &c).amax() == 0.0);
    }

    #[test]
    fn t_statistic_is_scale_free(
        pairs in prop::collection::vec((-3.0f64..3.0, 0.1f64..5.0), 1..12),
        c in 0.01f64..100.0,
        n in 2usize..5000,
    ) {
        let delta: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let sd: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let t = t_statistic(&delta, &sd, n, 0.0);
        let scaled_d: Vec<f64> = delta.iter().map(|v| v * c).collect();
        let scaled_s: Vec<f64> = sd.iter().map(|v| v * c).collect();
        let t2 = t_statistic(&scaled_d, &scaled_s, n, 0.0);
        prop_assert!(t >= 0.0);
        prop_assert!((t - t2).abs() <= 1e-9 * t.max(1.0));
        let positive: Vec<f64> = delta.iter().map(|v| v.abs()).collect();
        prop_assert_eq!(t_statistic(&positive, &sd, n, 0.0), 0.0);
    }

    #[test]
    fn critical_value_is_monotone_in_alpha(d in 1usize..5, rho in -0.3f64..0.9, seed: u64, a1 in 0.01f64..0.5, a2 in 0.01f64..0.5) {
        let mut sigma = Mat::from_element(d, d, rho.max(-1.0 / d as f64 + 0.05));
        for i in 0..d {
            sigma[(i, i)] = 1.0;
        }
        let sd = vec![1.0; d];
        let (sorted, _) = null_draws(&sigma, &sd, 2000, seed).unwrap();
        let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
        prop_assert!(critical_value(&sorted, lo) >= critical_value(&sorted, hi));
    }

    #[test]
    fn extended_interval_contains_normal_and_zero(
        diff in -5.0f64..5.0,
        sd in 0.0f64..10.0,
        n in 1usize..10_000,
        reject: bool,
        alpha in 0.001f64..0.5,
    ) {
        let (normal, ext, fin) = comparison_ci(diff, sd, n, reject, alpha);
        prop_assert!(normal[0] <= normal[1]);
        prop_assert!(ext[0] <= normal[0] && ext[1] >= normal[1]);
        prop_assert!(ext[0] <= 0.0 && ext[1] >= 0.0);
        prop_assert_eq!(fin, if reject { normal } else { ext });
    }

    #[test]
    fn repro_delta_nonincreasing_in_beta_and_m(
        sigma_d in 0.0f64..0.2,
        h in -1.0f64..1.0,
        tau in -1.0f64..1.0,
        sigma in 0.1f64..3.0,
        n in 10usize..5000,
        m in 1usize..200,
        b1 in 0.01f64..0.49,
        b2 in 0.01f64..0.49,
    ) {
        let (lo, hi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
        for tt in [TestType::TwoSided, TestType::Right, TestType::Left] {
            let a = repro_measure(sigma_d, h, tau, sigma, n, m, lo, tt).unwrap();
            let b = repro_measure(sigma_d, h, tau, sigma, n, m, hi, tt).unwrap();
            prop_assert!(a.delta_hat >= b.delta_hat - 1e-15);
            prop_assert!(a.delta_hat >= 0.0);
            let more = repro_measure(sigma_d, h, tau, sigma, n, 2 * m, lo, tt).unwrap();
            prop_assert!(more.delta_hat <= a.delta_hat + 1e-15);
        }
    }

    #[test]
    fn normal_quantile_inverts_cdf(p in 1e-12f64..(1.0 - 1e-12)) {
        let x = norm_quantile(p);
        prop_assert!((norm_cdf(x) - p).abs() <= 1e-13 + 1e-9 * p.min(1.0 - p));
    }
}

fn reordered(plan: &SplitPlan, rep_order: &[usize], fold_shift: usize) -> SplitPlan {
    let mut p = plan.clone();
    p.repetitions = rep_order
        .iter()
        .map(|&r| {
            let mut folds = plan.repetitions[r].clone();
            folds.rotate_left(fold_shift % plan.k);
            folds
        })
        .collect();
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn sigma_d_is_invariant_to_split_order(seed in 0u64..1000, m in 2usize..6, k in 1usize..4, shift in 0usize..3) {
        let n = 90;
        let d = LinearDgp::default().sample(n, seed).unwrap();
        let plan = generate_plan(n, m, k, None, seed).unwrap();
        let mut order: Vec<usize> = (0..m).collect();
        order.reverse();
        let other = reordered(&plan, &order, shift);
        let ols = builtin("ols").unwrap();
        let run = |p: &SplitPlan| {
            let models = train_all(p, &d, ols.as_ref(), 0).unwrap();
            let obs = evaluate_splits(&models, p, &d).unwrap();
            let (z, _) = estimate(Variant::Two, &Mse, p, &obs, &DeltaSpec::Identity, 0.05, DEFAULT_TOL).unwrap();
            sigma_d_hat(&Mse, p, &obs, &z.theta_hat, &DeltaSpec::Identity, z.theta_hat[0] + 0.1).unwrap().sigma_hat_d2
        };
        let (a, b) = (run(&plan), run(&other));
        prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1e-12), "{} vs {}", a, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(3))]

    #[test]
    fn grid_rows_account_for_every_iteration(seed in 0u64..100, iterations in 1usize..4) {
        let grid = ExperimentGrid {
            dgp: DgpSpec::Linear { beta: vec![1.0], noise_sd: 1.0 },
            n: vec![40, 60],
            m: 2,
            k: vec![2, 3],
            methods: vec![Method::Estimate, Method::Compare],
            iterations,
            seed,
            learner: "ols".into(),
            oracle_draws: 2000,
            alpha: 0.05,
            mc_draws: 500,
        };
        let dir = tempfile::tempdir().unwrap();
        let summary = run_grid(&grid, dir.path()).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
        let rows = csv.lines().count() - 1;
        let cells = grid.n.len() * grid.k.len() * grid.methods.len();
        prop_assert_eq!(rows, cells * iterations - summary.failures.len());
        let again = run_grid(&grid, dir.path()).unwrap();
        prop_assert_eq!(again.computed, summary.failures.len());
        prop_assert_eq!(std::fs::read_to_string(dir.path().join("results.csv")).unwrap(), csv);
    }
}
