//! Quick runtime oracle checks behind the `selftest` subcommand.

use crate::detector::{activity_scores, sign_log_likelihood};
use crate::estimator::{
    forward_map, p2_gradient, p2_objective, recover_amplitudes, reduce_problem, solve_p2, SolverOptions,
};
use crate::model::equivalent_noise_std;
use crate::numerics::{finite_difference_gradient, inverse_mills, log_std_normal_cdf};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

// (u, ln Φ(u), φ(u)/Φ(u)) from 100-digit arithmetic.
const KERNEL_TABLE: &[(f64, f64, f64)] = &[
    (-35.0, -616.9751012619225, 35.028524970596685),
    (-10.0, -53.23128515051247, 10.098093233962512),
    (-2.0, -3.783184333682032, 2.373215532822841),
    (0.5, -0.3689464152886564, 0.5091604338370335),
    (4.0, -3.167174337748927e-05, 0.00013383446446857514),
    (25.0, -3.056696706382561e-138, 7.653929736419392e-137),
];

fn rel_err(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        a.abs()
    } else {
        ((a - b) / b).abs()
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

fn gaussian_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

fn random_signs(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| if rng.random_bool(0.5) { 1.0 } else { -1.0 })
}

fn check_kernels() -> CheckOutcome {
    let worst = KERNEL_TABLE
        .iter()
        .map(|&(u, lp, im)| rel_err(log_std_normal_cdf(u), lp).max(rel_err(inverse_mills(u), im) / 10.0))
        .fold(0.0, f64::max);
    CheckOutcome {
        name: "stable kernels",
        passed: worst <= 1e-10,
        detail: format!("worst scaled relative error {worst:.2e}"),
    }
}

fn check_gradient(rng: &mut ChaCha8Rng) -> CheckOutcome {
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let d = rng.random_range(1..=5);
        let n = rng.random_range(5..=40);
        let a = gaussian_matrix(rng, d, n);
        let y = random_signs(rng, n);
        let prob = reduce_problem(&a, &y, &vec![true; d], 0.1, 0.1).expect("nonempty");
        let v = gaussian_vector(rng, d);
        let fd = finite_difference_gradient(|x| p2_objective(x, &prob), &v, 1e-5);
        let g = p2_gradient(&v, &prob);
        worst = worst.max((&fd - &g).norm() / g.norm().max(1e-8));
    }
    CheckOutcome {
        name: "P2 gradient vs finite differences",
        passed: worst <= 1e-5,
        detail: format!("worst relative error {worst:.2e}"),
    }
}

fn check_scalar_solver(rng: &mut ChaCha8Rng) -> CheckOutcome {
    let mut worst: f64 = 0.0;
    let mut tried = 0;
    while tried < 10 {
        let n = rng.random_range(10..=30);
        let a = gaussian_matrix(rng, 1, n);
        // Labels from a noisy probit so that both classes overlap.
        let y = DVector::from_fn(n, |i, _| {
            let x = 0.7 * a[(0, i)] + rng.sample::<f64, _>(StandardNormal);
            if x >= 0.0 {
                1.0
            } else {
                -1.0
            }
        });
        let prob = reduce_problem(&a, &y, &[true], 0.1, 0.1).expect("nonempty");
        let sol = solve_p2(&prob, &DVector::zeros(1), &SolverOptions::default());
        if !sol.converged {
            continue;
        }
        tried += 1;
        let grid_best = (-50_000..=50_000)
            .map(|k| p2_objective(&DVector::from_element(1, k as f64 * 1e-4), &prob))
            .fold(f64::INFINITY, f64::min);
        worst = worst.max(sol.objective - grid_best);
    }
    CheckOutcome {
        name: "scalar P2 solve vs grid search",
        passed: worst <= 1e-6,
        detail: format!("worst excess objective {worst:.2e}"),
    }
}

fn check_llr(rng: &mut ChaCha8Rng) -> CheckOutcome {
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let m = rng.random_range(1..=10);
        let n = rng.random_range(1..=50);
        let a = gaussian_matrix(rng, m, n);
        let y = random_signs(rng, n);
        let s = gaussian_vector(rng, m);
        let sigma_z = rng.random_range(0.05..2.0);
        let scores = activity_scores(&y, &a, &s, sigma_z);
        for j in 0..m {
            let mut without = s.clone();
            without[j] = 0.0;
            let brute: f64 = (0..n)
                .map(|i| {
                    sign_log_likelihood(y[i], a.column(i), &s, sigma_z)
                        - sign_log_likelihood(y[i], a.column(i), &without, sigma_z)
                })
                .sum();
            worst = worst.max((scores[j] - brute).abs());
        }
    }
    CheckOutcome {
        name: "incremental LLR vs brute force",
        passed: worst <= 1e-10,
        detail: format!("worst absolute difference {worst:.2e}"),
    }
}

fn check_round_trip(rng: &mut ChaCha8Rng) -> CheckOutcome {
    let (se, sn) = (0.1, 0.1);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let d = rng.random_range(1..=20);
        let dir = gaussian_vector(rng, d).normalize();
        let radius = rng.random_range(0.0..0.999) / se;
        let v = dir * radius;
        let back = forward_map(&recover_amplitudes(&v, se, sn), se, sn);
        worst = worst.max((&back - &v).norm() / v.norm().max(f64::MIN_POSITIVE));
    }
    CheckOutcome {
        name: "amplitude reparameterization round trip",
        passed: worst <= 1e-10,
        detail: format!("worst relative error {worst:.2e}"),
    }
}

fn check_noise_variance(rng: &mut ChaCha8Rng) -> CheckOutcome {
    let (m, draws, se, sn) = (20, 100_000, 0.1, 0.1);
    let s = gaussian_vector(rng, m).normalize();
    let mut sum_sq = 0.0;
    for _ in 0..draws {
        let e = gaussian_vector(rng, m) * se;
        let z = e.dot(&s) + sn * rng.sample::<f64, _>(StandardNormal);
        sum_sq += z * z;
    }
    let empirical = (sum_sq / draws as f64).sqrt();
    let expected = equivalent_noise_std(1.0, se * se, sn * sn);
    let err = rel_err(empirical, expected);
    CheckOutcome {
        name: "equivalent noise std",
        passed: err <= 0.02,
        detail: format!("empirical {empirical:.5}, expected {expected:.5}"),
    }
}

pub fn run_selftest(seed: u64) -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        check_kernels(),
        check_gradient(&mut rng),
        check_scalar_solver(&mut rng),
        check_llr(&mut rng),
        check_round_trip(&mut rng),
        check_noise_variance(&mut rng),
    ]
}
