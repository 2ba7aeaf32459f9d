//! Scalar kernels for the probit likelihood, the least-squares initializer,
//! and a central-difference gradient used as a test oracle.
//!
//! `log_std_normal_cdf` and `inverse_mills` switch to a continued-fraction
//! evaluation of the Mills ratio below [`TAIL_SWITCH`], where `Φ(u)` itself
//! starts losing relative precision and eventually underflows.

use nalgebra::{DMatrix, DVector};
use std::f64::consts::FRAC_1_SQRT_2;

/// Below this argument the tail branch is used.
pub const TAIL_SWITCH: f64 = -8.0;

/// Depth of the backward-evaluated Mills-ratio continued fraction. At
/// `x = 8` this converges to full double precision.
const CF_TERMS: usize = 64;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal density.
#[inline]
pub fn std_normal_pdf(u: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * u * u).exp()
}

/// Standard normal CDF via `erfc`; accurate in relative terms for both tails
/// until it underflows near `u = -38`.
#[inline]
pub fn std_normal_cdf(u: f64) -> f64 {
    0.5 * libm::erfc(-u * FRAC_1_SQRT_2)
}

/// Mills ratio `R(x) = Φ(-x)/φ(x)` for `x ≥ 8` by Laplace's continued
/// fraction `1/(x + 1/(x + 2/(x + 3/(x + …))))`.
#[inline]
fn mills_ratio_tail(x: f64) -> f64 {
    let mut t = x;
    for k in (1..=CF_TERMS).rev() {
        t = x + k as f64 / t;
    }
    1.0 / t
}

/// `ln Φ(u)`, finite for every finite `u`.
///
/// Panics on non-finite input.
pub fn log_std_normal_cdf(u: f64) -> f64 {
    assert!(u.is_finite(), "log_std_normal_cdf: non-finite argument {u}");
    if u < TAIL_SWITCH {
        let x = -u;
        -0.5 * x * x - LN_SQRT_2PI + mills_ratio_tail(x).ln()
    } else if u > 0.0 {
        // Φ(u) = 1 - Φ(-u); keep the small complement exact.
        (-0.5 * libm::erfc(u * FRAC_1_SQRT_2)).ln_1p()
    } else {
        std_normal_cdf(u).ln()
    }
}

/// Inverse Mills ratio `φ(u)/Φ(u)`: the derivative of `-ln Φ` is its negative.
/// Behaves like `-u + 1/(-u)` as `u → -∞` and vanishes as `u → +∞`.
pub fn inverse_mills(u: f64) -> f64 {
    assert!(u.is_finite(), "inverse_mills: non-finite argument {u}");
    if u < TAIL_SWITCH {
        1.0 / mills_ratio_tail(-u)
    } else {
        std_normal_pdf(u) / std_normal_cdf(u)
    }
}

/// Curvature of `-ln Φ(u)`: `λ(u)·(u + λ(u))` with `λ` the inverse Mills
/// ratio. Lies in `(0, 1)`.
pub fn neg_log_cdf_curvature(u: f64) -> f64 {
    let im = inverse_mills(u);
    if u < TAIL_SWITCH {
        // u + λ(u) = 1/R(x) - x with x = -u; the continued fraction gives
        // 1/R(x) - x = 1/(x + 2/(x + 3/(…))) without cancellation.
        let x = -u;
        let mut t = x;
        for k in (2..=CF_TERMS).rev() {
            t = x + k as f64 / t;
        }
        im * (1.0 / t)
    } else {
        im * (u + im)
    }
}

/// Minimum-norm least-squares solution of `Aᵀ s ≈ y` for `A` of shape
/// `m × N` (columns are the measurement vectors).
///
/// Tall systems go through a Householder QR of `Aᵀ` when every diagonal entry
/// of `R` is well away from zero; wide or nearly rank-deficient ones through an
/// SVD with singular values below `max(m, N)·ε·σ_max` treated as zero.
pub fn least_squares_init(a_mat: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    assert_eq!(
        a_mat.ncols(),
        y.len(),
        "least_squares_init: A has {} columns but y has {} entries",
        a_mat.ncols(),
        y.len()
    );
    let (m, n) = a_mat.shape();
    let system = a_mat.transpose();
    if n >= m {
        let qr = system.clone().qr();
        let r = qr.r();
        let diag = r.diagonal().abs();
        // Without pivoting the diagonal is only a rank hint, so the cut is
        // deliberately loose; anything near it takes the SVD path.
        if diag.min() > QR_DIAG_TOL * diag.max() {
            let mut qty = y.clone();
            qr.q_tr_mul(&mut qty);
            return r
                .solve_upper_triangular(&qty.rows(0, m).into_owned())
                .expect("diagonal checked non-zero");
        }
    }
    min_norm_svd(system, y, m.max(n) as f64 * f64::EPSILON)
}

const QR_DIAG_TOL: f64 = 1e-10;

fn min_norm_svd(system: DMatrix<f64>, y: &DVector<f64>, rank_tol: f64) -> DVector<f64> {
    let svd = system.svd(true, true);
    let cutoff = rank_tol * svd.singular_values.max();
    // solve() only fails when U or Vᵀ were not computed.
    svd.solve(y, cutoff)
        .expect("SVD computed with both factors")
        .column(0)
        .into_owned()
}

/// Central differences `(f(x + h eⱼ) - f(x - h eⱼ)) / 2h` in every coordinate.
pub fn finite_difference_gradient<F>(f: F, x: &DVector<f64>, h: f64) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> f64,
{
    assert!(h > 0.0, "finite_difference_gradient: step must be positive");
    let mut probe = x.clone();
    DVector::from_fn(x.len(), |j, _| {
        let xj = x[j];
        probe[j] = xj + h;
        let up = f(&probe);
        probe[j] = xj - h;
        let down = f(&probe);
        probe[j] = xj;
        (up - down) / (2.0 * h)
    })
}
