mod common;

use dpcam_core::recon::*;
use dpcam_core::rng::Stream;
use dpcam_core::sensing::{generate_patterns, Counting, LinearOperator, SensingOperator};
use dpcam_core::model::{Basis, GridSpec};
use proptest::prelude::*;

fn planted(seed: u64, k: usize, len: usize) -> Vec<f64> {
    let mut s = Stream::new(seed);
    let mut x = vec![0.0; len];
    let mut placed = 0;
    while placed < k {
        let i = (s.next_u64() % len as u64) as usize;
        if x[i] == 0.0 {
            x[i] = 0.5 + s.uniform();
            placed += 1;
        }
    }
    x
}

fn random_counts(seed: u64, m: usize, scale: f64) -> Vec<f64> {
    let mut s = Stream::new(seed);
    (0..m).map(|_| (scale * s.uniform()).round()).collect()
}

/// Plain projected gradient with step 1/L, L from power iteration on AᵀA.
fn reference_minimum(a: &[Vec<f64>], y: &[f64], tau: f64, iters: usize) -> f64 {
    let cols = a[0].len();
    let mut v = vec![1.0; cols];
    let mut lip = 0.0;
    for _ in 0..200 {
        let w = common::matvec_t(a, &common::matvec(a, &v));
        lip = w.iter().map(|x| x * x).sum::<f64>().sqrt() / v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v = w;
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= nv);
    }
    let step = 0.99 / lip;
    let mut x = vec![0.0; cols];
    for _ in 0..iters {
        let r: Vec<f64> = common::matvec(a, &x).iter().zip(y).map(|(p, q)| p - q).collect();
        let g = common::matvec_t(a, &r);
        for (xi, gi) in x.iter_mut().zip(&g) {
            *xi = (*xi - step * (gi + tau)).max(0.0);
        }
    }
    let r: f64 = common::matvec(a, &x).iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum();
    0.5 * r + tau * x.iter().sum::<f64>()
}

#[test]
fn planted_sparse_solution_is_recovered() {
    let op = SensingOperator::new(generate_patterns(21, 40, 8).unwrap());
    let x_star = planted(4, 5, 64);
    let y = op.forward_apply(&x_star).unwrap();
    let tau = 1e-4 * auto_tau(&op, &y).unwrap() / AUTO_TAU_FRACTION;
    let cfg = SolverConfig {
        tau: Tau::Value(tau),
        max_iters: 20_000,
        rel_obj_tol: 1e-12,
        ..SolverConfig::default()
    };
    let res = solve_bpdn(&op, &y, &cfg).unwrap();
    let support = |x: &[f64]| -> Vec<usize> { (0..x.len()).filter(|&i| x[i] > 1e-6).collect() };
    assert_eq!(support(&res.x_hat), support(&x_star));
    let err: f64 = res.x_hat.iter().zip(&x_star).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = x_star.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(err / norm < 1e-3, "{}", err / norm);
}

#[test]
fn solver_matches_long_run_reference() {
    for (seed, n, m) in [(1u64, 4usize, 12usize), (2, 9, 12), (3, 16, 10)] {
        let op = SensingOperator::new(generate_patterns(seed, m, n).unwrap());
        let a = common::explicit_matrix(&op);
        let y = random_counts(seed + 100, m, 50.0);
        let tau = 0.1 * auto_tau(&op, &y).unwrap() / AUTO_TAU_FRACTION;
        let cfg = SolverConfig {
            tau: Tau::Value(tau),
            max_iters: 20_000,
            rel_obj_tol: 1e-12,
            debias: false,
            ..SolverConfig::default()
        };
        let res = solve_bpdn(&op, &y, &cfg).unwrap();
        let ours = objective(&op, &y, &res.x_hat, tau).unwrap();
        let reference = reference_minimum(&a, &y, tau, 1_000_000);
        assert!(ours <= reference * 1.001, "n={n}: {ours} vs {reference}");
    }
}

#[test]
fn converged_iterate_satisfies_kkt() {
    let op = SensingOperator::new(generate_patterns(8, 60, 9).unwrap());
    let y = random_counts(9, 60, 200.0);
    let cfg = SolverConfig {
        debias: false,
        rel_obj_tol: 1e-9,
        max_iters: 20_000,
        ..SolverConfig::default()
    };
    let res = solve_bpdn(&op, &y, &cfg).unwrap();
    assert!(res.converged);
    let inf = op.adjoint_apply(&y).unwrap().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let kkt = kkt_residual(&op, &y, &res.x_hat, res.tau_used).unwrap();
    assert!(kkt < 10.0 * cfg.rel_obj_tol * inf, "{kkt} vs {}", 10.0 * cfg.rel_obj_tol * inf);
}

#[test]
fn solver_touches_operator_only_through_applies() {
    let op = SensingOperator::new(generate_patterns(5, 30, 9).unwrap());
    let counting = Counting::new(&op);
    let y = random_counts(6, 30, 100.0);
    let res = solve_bpdn(&counting, &y, &SolverConfig::default()).unwrap();
    assert!(counting.forward_calls() >= res.iterations);
    assert!(counting.adjoint_calls() >= res.iterations);
    assert_eq!(counting.rows(), 30);
}

#[test]
fn objective_matches_dot_product_evaluation() {
    let op = SensingOperator::new(generate_patterns(12, 9, 9).unwrap());
    let a = common::explicit_matrix(&op);
    let mut s = Stream::new(3);
    let x: Vec<f64> = (0..81).map(|_| s.uniform() - 0.3).collect();
    let y: Vec<f64> = (0..9).map(|_| 10.0 * s.uniform()).collect();
    let tau = 0.37;
    let mut fit = 0.0;
    for (row, yi) in a.iter().zip(&y) {
        let mut ax = 0.0;
        for (aij, xj) in row.iter().zip(&x) {
            ax += aij * xj;
        }
        fit += (yi - ax) * (yi - ax);
    }
    let want = 0.5 * fit + tau * x.iter().map(|v| v.abs()).sum::<f64>();
    assert!((objective(&op, &y, &x, tau).unwrap() - want).abs() < 1e-12 * want.max(1.0));
}

#[test]
fn zero_measurements_give_zero_reconstruction() {
    let op = SensingOperator::new(generate_patterns(1, 10, 4).unwrap());
    let res = solve_bpdn(&op, &[0.0; 10], &SolverConfig { tau: Tau::Value(1.0), ..SolverConfig::default() }).unwrap();
    assert!(res.x_hat.iter().all(|&v| v == 0.0));
    assert!(auto_tau(&op, &[0.0; 10]).is_err());
    let mut one = [0.0; 10];
    one[3] = 1.0;
    let t = auto_tau(&op, &one).unwrap();
    assert!(t > 0.0 && t.is_finite());
}

#[test]
fn normalize_examples() {
    let g = GridSpec::new(1, 1.0, Basis::Position).unwrap();
    assert_eq!(normalize_weights(&[2.0, 2.0], NormalizeMode::UnitSum).unwrap(), vec![0.5, 0.5]);
    assert_eq!(normalize_weights(&[3.0, -1.0], NormalizeMode::UnitSum).unwrap(), vec![1.0, 0.0]);
    let per_flux = normalize_weights(&[7.0, 1.0], NormalizeMode::PerFlux(100.0)).unwrap();
    approx::assert_relative_eq!(per_flux.as_slice(), [0.875, 0.125].as_slice(), max_relative = 1e-15);
    assert!(normalize(&[0.0], NormalizeMode::UnitSum, g, g).is_err());
    assert!(normalize(&[-2.0], NormalizeMode::UnitSum, g, g).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn descent_is_monotone_and_feasible(seed in any::<u64>(), m in 5usize..40, scale in 1.0f64..500.0) {
        let op = SensingOperator::new(generate_patterns(seed, m, 9).unwrap());
        let y = random_counts(seed ^ 7, m, scale);
        prop_assume!(y.iter().any(|&v| v > 0.0));
        let res = solve_bpdn(&op, &y, &SolverConfig { debias: false, ..SolverConfig::default() }).unwrap();
        for w in res.objective_history.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-10 * w[0].abs().max(1.0));
        }
        prop_assert!(res.x_hat.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn auto_tau_is_homogeneous(seed in any::<u64>(), c in 0.01f64..100.0) {
        let op = SensingOperator::new(generate_patterns(seed, 12, 9).unwrap());
        let y = random_counts(seed ^ 3, 12, 100.0);
        prop_assume!(y.iter().any(|&v| v > 0.0));
        let scaled: Vec<f64> = y.iter().map(|v| c * v).collect();
        let t = auto_tau(&op, &y).unwrap();
        prop_assert!((auto_tau(&op, &scaled).unwrap() - c * t).abs() <= 1e-12 * c * t);
    }

    #[test]
    fn debias_leaves_zeros_untouched(seed in any::<u64>()) {
        let op = SensingOperator::new(generate_patterns(seed, 30, 9).unwrap());
        let y = random_counts(seed ^ 5, 30, 300.0);
        prop_assume!(y.iter().any(|&v| v > 0.0));
        let plain = solve_bpdn(&op, &y, &SolverConfig { debias: false, ..SolverConfig::default() }).unwrap();
        let mut x = plain.x_hat.clone();
        debias(&op, &y, &mut x).unwrap();
        for (a, b) in plain.x_hat.iter().zip(&x) {
            if *a == 0.0 {
                prop_assert_eq!(*b, 0.0);
            }
        }
    }
}
