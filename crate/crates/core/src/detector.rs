//! Support detection by per-coordinate binary Bayesian hypothesis tests.
//!
//! For coordinate `j` the test compares the sign likelihood under the
//! current estimate `ŝ` against the same estimate with `ŝⱼ` zeroed:
//!
//! ```text
//! score_j = Σᵢ ln Φ(yᵢ aᵢᵀŝ / σ_z) − ln Φ(yᵢ aᵢᵀŝ₋ⱼ / σ_z)
//! ```
//!
//! and declares `j` active when `score_j ≥ ln((1 − p)/p)`. All `m` scores
//! share one `Aᵀŝ` product; removing `j` only shifts each projection by
//! `A[j,i]·ŝⱼ`, so the whole sweep costs `Θ(mN)` CDF evaluations.

use crate::numerics::log_std_normal_cdf;
use nalgebra::{DMatrix, DVector, DVectorView};
use serde::{Deserialize, Serialize};

/// Decisions and diagnostics of one detection sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportEstimate {
    pub q_hat: Vec<bool>,
    /// Log-likelihood ratios, nats.
    pub scores: DVector<f64>,
    pub threshold: f64,
    pub p_hat: f64,
}

impl SupportEstimate {
    pub fn active_indices(&self) -> Vec<usize> {
        self.q_hat
            .iter()
            .enumerate()
            .filter_map(|(j, &a)| a.then_some(j))
            .collect()
    }

    pub fn n_active(&self) -> usize {
        self.q_hat.iter().filter(|&&a| a).count()
    }
}

/// `ln((1 − p)/p)`, the MAP threshold for a prior activity probability `p`.
pub fn threshold_from_p(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "threshold_from_p: p = {p} outside (0, 1)");
    ((1.0 - p) / p).ln()
}

/// `ln Φ(yᵢ aᵢᵀs / σ_z)`.
pub fn sign_log_likelihood(y_i: f64, a_i: DVectorView<'_, f64>, s: &DVector<f64>, sigma_z: f64) -> f64 {
    assert!(sigma_z > 0.0, "sign_log_likelihood: sigma_z must be positive");
    log_std_normal_cdf(y_i * a_i.dot(s) / sigma_z)
}

/// LLR score of coordinate `j` (zero-based).
pub fn activity_score(
    j: usize,
    y: &DVector<f64>,
    a_mat: &DMatrix<f64>,
    s_hat: &DVector<f64>,
    sigma_z: f64,
) -> f64 {
    assert!(j < a_mat.nrows(), "activity_score: index {j} out of range");
    assert!(sigma_z > 0.0, "activity_score: sigma_z must be positive");
    let sj = s_hat[j];
    if sj == 0.0 {
        return 0.0;
    }
    let proj = a_mat.tr_mul(s_hat);
    (0..y.len())
        .map(|i| {
            let full = proj[i];
            let removed = full - a_mat[(j, i)] * sj;
            log_std_normal_cdf(y[i] * full / sigma_z) - log_std_normal_cdf(y[i] * removed / sigma_z)
        })
        .sum()
}

/// All `m` scores from a single `Aᵀŝ` product.
pub fn activity_scores(
    y: &DVector<f64>,
    a_mat: &DMatrix<f64>,
    s_hat: &DVector<f64>,
    sigma_z: f64,
) -> DVector<f64> {
    assert!(sigma_z > 0.0, "activity_scores: sigma_z must be positive");
    assert_eq!(a_mat.nrows(), s_hat.len(), "activity_scores: A rows vs ŝ length");
    assert_eq!(a_mat.ncols(), y.len(), "activity_scores: A columns vs y length");
    let m = s_hat.len();
    let proj = a_mat.tr_mul(s_hat);
    let nonzero: Vec<usize> = (0..m).filter(|&j| s_hat[j] != 0.0).collect();
    let mut scores = DVector::zeros(m);
    for (i, col) in a_mat.column_iter().enumerate() {
        let yi = y[i];
        let full = log_std_normal_cdf(yi * proj[i] / sigma_z);
        for &j in &nonzero {
            let removed = proj[i] - col[j] * s_hat[j];
            scores[j] += full - log_std_normal_cdf(yi * removed / sigma_z);
        }
    }
    scores
}

/// Runs every coordinate's hypothesis test at prior `p`. A score exactly
/// at the threshold is declared active.
pub fn detect_support(
    y: &DVector<f64>,
    a_mat: &DMatrix<f64>,
    s_hat: &DVector<f64>,
    sigma_z: f64,
    p: f64,
) -> SupportEstimate {
    let threshold = threshold_from_p(p);
    let scores = activity_scores(y, a_mat, s_hat, sigma_z);
    let q_hat = scores.iter().map(|&sc| sc >= threshold).collect();
    SupportEstimate {
        q_hat,
        scores,
        threshold,
        p_hat: p,
    }
}

/// Result of the activity-probability heuristic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActivityEstimate {
    pub p_hat: f64,
    /// Set when `ŝ` had zero spread and the floor was returned.
    pub degenerate: bool,
}

/// Fraction of entries with `|ŝⱼ| > α·std(ŝ)`, clamped to `[1/m, 1 − 1/m]`.
/// The spread is the biased (divide-by-`m`) standard deviation of the entries.
pub fn estimate_activity_probability(s_hat: &DVector<f64>, alpha: f64) -> ActivityEstimate {
    assert!(alpha > 0.0, "estimate_activity_probability: alpha must be positive");
    let m = s_hat.len();
    assert!(m >= 1);
    let mf = m as f64;
    let (floor, ceil) = if m >= 2 {
        (1.0 / mf, 1.0 - 1.0 / mf)
    } else {
        // A single coordinate has no admissible interior clamp; use 1/2.
        (0.5, 0.5)
    };
    let mean = s_hat.sum() / mf;
    let var = s_hat.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / mf;
    if var == 0.0 {
        return ActivityEstimate {
            p_hat: floor,
            degenerate: true,
        };
    }
    let cut = alpha * var.sqrt();
    let count = s_hat.iter().filter(|v| v.abs() > cut).count();
    ActivityEstimate {
        p_hat: (count as f64 / mf).clamp(floor, ceil),
        degenerate: false,
    }
}

/// Geometric schedule for the threshold multiplier `α`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaSchedule {
    pub initial: f64,
    pub growth: f64,
    pub max: f64,
}

impl Default for AlphaSchedule {
    fn default() -> Self {
        Self {
            initial: 0.5,
            growth: 1.2,
            max: 3.0,
        }
    }
}

impl AlphaSchedule {
    /// `min(initial · growth^k, max)`.
    pub fn at(&self, k: usize) -> f64 {
        alpha_schedule(k, self.initial, self.growth, self.max)
    }
}

pub fn alpha_schedule(k: usize, alpha_0: f64, growth: f64, alpha_max: f64) -> f64 {
    assert!(alpha_0 > 0.0 && growth > 1.0);
    (alpha_0 * growth.powi(k as i32)).min(alpha_max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    // ln Φ(1) from high-precision evaluation.
    const LN_PHI_1: f64 = -0.172_753_779_023_449_88;

    #[test]
    fn thresholds() {
        assert!((threshold_from_p(0.1) - 9f64.ln()).abs() < 1e-15);
        assert!((threshold_from_p(0.1) - 2.197_224_6).abs() < 1e-7);
        assert_eq!(threshold_from_p(0.5), 0.0);
        assert!((threshold_from_p(0.2) - 1.386_294_4).abs() < 1e-7);
    }

    #[test]
    #[should_panic]
    fn threshold_rejects_unit_p() {
        threshold_from_p(1.0);
    }

    #[test]
    fn single_measurement_likelihoods() {
        let a = DVector::from_vec(vec![1.0, 0.0]);
        let s = DVector::from_vec(vec![0.0, 3.0]);
        assert!((sign_log_likelihood(1.0, a.as_view(), &s, 0.5) - 0.5f64.ln()).abs() < 1e-15);
        let s = DVector::from_vec(vec![0.5, 0.0]);
        let plus = sign_log_likelihood(1.0, a.as_view(), &s, 0.5);
        assert!((plus - LN_PHI_1).abs() < 1e-12);
        let minus = sign_log_likelihood(-1.0, a.as_view(), &s, 0.5);
        assert!((plus.exp() + minus.exp() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scalar_score() {
        let y = DVector::from_vec(vec![1.0]);
        let a = DMatrix::from_element(1, 1, 1.0);
        let s = DVector::from_vec(vec![1.0]);
        let score = activity_score(0, &y, &a, &s, 1.0);
        assert!((score - 0.520_393_401_536_495_4).abs() < 1e-12);
    }

    fn random_instance(seed: u64, m: usize, n: usize) -> (DVector<f64>, DMatrix<f64>, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(m, n, |_, _| rng.sample(StandardNormal));
        let s = DVector::from_fn(m, |_, _| {
            if rng.random_bool(0.4) {
                0.0
            } else {
                rng.sample(StandardNormal)
            }
        });
        let y = DVector::from_fn(n, |_, _| if rng.random_bool(0.5) { 1.0 } else { -1.0 });
        (y, a, s)
    }

    #[test]
    fn zero_coordinate_scores_exactly_zero() {
        let (y, a, s) = random_instance(9, 8, 30);
        let scores = activity_scores(&y, &a, &s, 0.3);
        for j in 0..8 {
            if s[j] == 0.0 {
                assert_eq!(scores[j], 0.0);
                assert_eq!(activity_score(j, &y, &a, &s, 0.3), 0.0);
            }
        }
    }

    #[test]
    fn zero_estimate_detects_nothing() {
        let (y, a, _) = random_instance(10, 6, 20);
        let est = detect_support(&y, &a, &DVector::zeros(6), 0.2, 0.1);
        assert!(est.q_hat.iter().all(|&q| !q));
        assert_eq!(est.n_active(), 0);
    }

    #[test]
    fn high_snr_recovers_true_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (m, n) = (20, 500);
        let a = DMatrix::from_fn(m, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut s = DVector::zeros(m);
        for &j in &[2usize, 7, 11, 16] {
            s[j] = rng.sample::<f64, _>(StandardNormal);
        }
        s /= s.norm();
        let y = a.tr_mul(&s).map(crate::model::sign_quantize);
        let est = detect_support(&y, &a, &s, 1e-3, 0.2);
        let truth: Vec<bool> = s.iter().map(|&v| v != 0.0).collect();
        assert_eq!(est.q_hat, truth);
    }

    #[test]
    fn tie_at_threshold_is_active() {
        // With p = 0.5 the threshold is 0 and a zero coordinate ties it.
        let y = DVector::from_vec(vec![1.0, -1.0]);
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.5, -0.5]);
        let s = DVector::from_vec(vec![0.0, 1.0]);
        let det = detect_support(&y, &a, &s, 1.0, 0.5);
        assert_eq!(det.scores[0], 0.0);
        assert!(det.q_hat[0]);
    }

    #[test]
    fn activity_probability_examples() {
        let mut s = DVector::zeros(10);
        s[0] = 1.0;
        // mean 0.1, biased variance 0.09, std 0.3; only |1.0| > 0.15.
        let est = estimate_activity_probability(&s, 0.5);
        assert_eq!(est.p_hat, 0.1);
        assert!(!est.degenerate);
        assert_eq!(estimate_activity_probability(&s, 1e9).p_hat, 0.1);
        let z = estimate_activity_probability(&DVector::zeros(10), 0.5);
        assert!(z.degenerate);
        assert_eq!(z.p_hat, 0.1);
        let dense = DVector::from_fn(20, |j, _| if j % 2 == 0 { 1.0 } else { -1.0 });
        // Every entry exceeds a small cut: clamped to 1 − 1/m.
        assert_eq!(estimate_activity_probability(&dense, 0.5).p_hat, 0.95);
    }

    #[test]
    fn negative_amplitudes_count() {
        let s = DVector::from_vec(vec![-1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(estimate_activity_probability(&s, 0.5).p_hat, 0.1);
    }

    #[test]
    fn schedule_values() {
        let sched = AlphaSchedule::default();
        assert_eq!(sched.at(0), 0.5);
        assert!((sched.at(1) - 0.6).abs() < 1e-15);
        assert!((0.5 * 1.2f64.powi(10) - 3.0958682112).abs() < 1e-9);
        assert_eq!(sched.at(10), 3.0);
        assert_eq!(sched.at(50), 3.0);
    }

    // Scores recomputed from scratch: two independent log-likelihood sums.
    fn brute_force_score(j: usize, y: &DVector<f64>, a: &DMatrix<f64>, s: &DVector<f64>, sz: f64) -> f64 {
        let mut without = s.clone();
        without[j] = 0.0;
        let ll = |v: &DVector<f64>| -> f64 {
            (0..y.len())
                .map(|i| log_std_normal_cdf(y[i] * a.column(i).dot(v) / sz))
                .sum()
        };
        ll(s) - ll(&without)
    }

    proptest! {
        #[test]
        fn incremental_matches_brute_force(seed in 0u64..10_000, m in 1usize..=10, n in 1usize..=50) {
            let (y, a, s) = random_instance(seed, m, n);
            let scores = activity_scores(&y, &a, &s, 0.4);
            for j in 0..m {
                let bf = brute_force_score(j, &y, &a, &s, 0.4);
                prop_assert!((scores[j] - bf).abs() <= 1e-10);
                prop_assert!((activity_score(j, &y, &a, &s, 0.4) - bf).abs() <= 1e-10);
            }
        }

        #[test]
        fn larger_prior_admits_superset(seed in 0u64..1000, p1 in 0.01f64..0.99, p2 in 0.01f64..0.99) {
            let (lo, hi) = if p1 < p2 { (p1, p2) } else { (p2, p1) };
            prop_assume!(lo < hi);
            prop_assert!(threshold_from_p(lo) > threshold_from_p(hi));
            let (y, a, s) = random_instance(seed, 8, 40);
            let d_lo = detect_support(&y, &a, &s, 0.5, lo);
            let d_hi = detect_support(&y, &a, &s, 0.5, hi);
            for j in 0..8 {
                prop_assert!(!d_lo.q_hat[j] || d_hi.q_hat[j]);
            }
        }

        #[test]
        fn shift_invariance(seed in 0u64..1000, c in -5.0f64..5.0) {
            let (y, a, s) = random_instance(seed, 6, 25);
            let d = detect_support(&y, &a, &s, 0.5, 0.3);
            for j in 0..6 {
                let shifted = d.scores[j] + c >= d.threshold + c;
                // Shifting both sides can only disturb exact floating ties.
                if (d.scores[j] - d.threshold).abs() > 1e-9 {
                    prop_assert_eq!(shifted, d.q_hat[j]);
                }
            }
        }

        #[test]
        fn p_hat_non_increasing_in_alpha(seed in 0u64..1000, a1 in 0.1f64..5.0, a2 in 0.1f64..5.0) {
            let (_, _, s) = random_instance(seed, 10, 1);
            prop_assume!(s.iter().any(|&v| v != 0.0));
            let (lo, hi) = if a1 < a2 { (a1, a2) } else { (a2, a1) };
            prop_assert!(estimate_activity_probability(&s, lo).p_hat >= estimate_activity_probability(&s, hi).p_hat);
        }
    }
}
