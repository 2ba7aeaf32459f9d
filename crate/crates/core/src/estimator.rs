//! Amplitude recovery on a detected support.
//!
//! The perturbed-model likelihood `Σ ln Φ(yᵢ hᵢᵀw / sqrt(‖w‖²σ_e² + σ_n²))`
//! is not convex in `w`, but with `v = w / sqrt(‖w‖²σ_e² + σ_n²)` it becomes
//! the ordinary probit likelihood `Σ ln Φ(yᵢ hᵢᵀv)`. We minimize the convex
//! negative probit log-likelihood by damped Newton, check that the minimizer
//! lies inside the image of the map (`‖v*‖² < 1/σ_e²`), and invert the map.

use crate::error::{Error, Result};
use crate::numerics::{inverse_mills, log_std_normal_cdf, neg_log_cdf_curvature};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Sign data restricted to the active coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedProblem {
    /// `n_active × N`; column `i` is `hᵢ = aᵢ(I_a)`.
    pub h_mat: DMatrix<f64>,
    pub y: DVector<f64>,
    /// Active coordinates in increasing order.
    pub active_index: Vec<usize>,
    pub sigma_e: f64,
    pub sigma_n: f64,
}

impl ReducedProblem {
    pub fn n_active(&self) -> usize {
        self.active_index.len()
    }

    pub fn n_meas(&self) -> usize {
        self.y.len()
    }

    /// Signed margins `uᵢ = yᵢ hᵢᵀv`.
    pub fn margins(&self, v: &DVector<f64>) -> DVector<f64> {
        self.h_mat.tr_mul(v).component_mul(&self.y)
    }
}

/// Keeps the rows of `a_mat` flagged active in `q_hat`.
pub fn reduce_problem(
    a_mat: &DMatrix<f64>,
    y: &DVector<f64>,
    q_hat: &[bool],
    sigma_e: f64,
    sigma_n: f64,
) -> Result<ReducedProblem> {
    if q_hat.len() != a_mat.nrows() || y.len() != a_mat.ncols() {
        return Err(Error::Dimension(format!(
            "A is {}x{}, q_hat has {} entries, y has {}",
            a_mat.nrows(),
            a_mat.ncols(),
            q_hat.len(),
            y.len()
        )));
    }
    let active_index: Vec<usize> = q_hat
        .iter()
        .enumerate()
        .filter_map(|(j, &a)| a.then_some(j))
        .collect();
    if active_index.is_empty() {
        return Err(Error::EmptySupport);
    }
    Ok(ReducedProblem {
        h_mat: a_mat.select_rows(active_index.iter()),
        y: y.clone(),
        active_index,
        sigma_e,
        sigma_n,
    })
}

/// `-Σᵢ ln Φ(yᵢ hᵢᵀv)`.
pub fn p2_objective(v: &DVector<f64>, prob: &ReducedProblem) -> f64 {
    -prob.margins(v).iter().map(|&u| log_std_normal_cdf(u)).sum::<f64>()
}

/// `-Σᵢ yᵢ hᵢ λ(yᵢ hᵢᵀv)` with `λ` the inverse Mills ratio.
pub fn p2_gradient(v: &DVector<f64>, prob: &ReducedProblem) -> DVector<f64> {
    let u = prob.margins(v);
    gradient_from_margins(&u, prob)
}

fn gradient_from_margins(u: &DVector<f64>, prob: &ReducedProblem) -> DVector<f64> {
    let coef = DVector::from_fn(u.len(), |i, _| -prob.y[i] * inverse_mills(u[i]));
    &prob.h_mat * coef
}

/// `Σᵢ hᵢhᵢᵀ·λ(uᵢ)(uᵢ + λ(uᵢ))`.
pub fn p2_hessian(v: &DVector<f64>, prob: &ReducedProblem) -> DMatrix<f64> {
    let u = prob.margins(v);
    hessian_from_margins(&u, prob)
}

fn hessian_from_margins(u: &DVector<f64>, prob: &ReducedProblem) -> DMatrix<f64> {
    let mut scaled = prob.h_mat.clone();
    for (i, mut col) in scaled.column_iter_mut().enumerate() {
        col *= neg_log_cdf_curvature(u[i]).sqrt();
    }
    &scaled * scaled.transpose()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Stop once `‖∇f‖₂` falls to this.
    pub tol: f64,
    pub max_iter: usize,
    /// Step shrink factor in backtracking.
    pub backtrack: f64,
    /// Armijo constant.
    pub sufficient_decrease: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 200,
            backtrack: 0.5,
            sufficient_decrease: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    GradientTolerance,
    MaxIterations,
    /// The norm guard tripped, or the run ended with every margin
    /// non-negative and some positive (the data are separable along the
    /// iterate): P2 has no finite minimizer.
    SeparableUnbounded,
    LineSearchStalled,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            StopReason::GradientTolerance => "gradient tolerance",
            StopReason::MaxIterations => "max iterations",
            StopReason::SeparableUnbounded => "separable/unbounded",
            StopReason::LineSearchStalled => "line search stalled",
        };
        f.write_str(s)
    }
}

/// Outcome of one P2 solve.
#[derive(Debug, Clone, PartialEq)]
pub struct MlSolution {
    pub v_star: DVector<f64>,
    /// Filled by [`MlSolution::recover`] when `feasible`.
    pub w_star: Option<DVector<f64>>,
    pub feasible: bool,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub grad_norm: f64,
    pub stop: StopReason,
}

impl MlSolution {
    /// Maps `v*` back to amplitudes when the perturbed-model optimum exists.
    pub fn recover(&mut self, sigma_e: f64, sigma_n: f64) {
        self.w_star = self
            .feasible
            .then(|| recover_amplitudes(&self.v_star, sigma_e, sigma_n));
    }
}

fn norm_guard_tripped(v: &DVector<f64>, sigma_e: f64) -> bool {
    if sigma_e > 0.0 {
        v.norm_squared() >= 4.0 / (sigma_e * sigma_e)
    } else {
        v.norm() >= 1e6
    }
}

/// Every margin non-negative and at least one positive: moving further
/// along `v` strictly lowers every term, so no minimizer exists.
fn separates(u: &DVector<f64>) -> bool {
    u.iter().all(|&ui| ui >= 0.0) && u.iter().any(|&ui| ui > 0.0)
}

fn newton_direction(hess: DMatrix<f64>, grad: &DVector<f64>) -> DVector<f64> {
    let n = grad.len();
    let mut damping = 1e-10 * hess.trace() / n as f64;
    for _ in 0..12 {
        let mut damped = hess.clone();
        for k in 0..n {
            damped[(k, k)] += damping;
        }
        if let Some(chol) = damped.cholesky() {
            return chol.solve(&(-grad));
        }
        damping = (damping * 100.0).max(1e-12);
    }
    -grad
}

/// Minimizes P2 from `v0` by Newton steps with Armijo backtracking.
pub fn solve_p2(prob: &ReducedProblem, v0: &DVector<f64>, opts: &SolverOptions) -> MlSolution {
    assert!(opts.tol > 0.0 && opts.max_iter >= 1, "solve_p2: invalid options");
    assert_eq!(v0.len(), prob.n_active(), "solve_p2: v0 dimension");
    let mut v = v0.clone();
    let mut u = prob.margins(&v);
    let mut f = -u.iter().map(|&ui| log_std_normal_cdf(ui)).sum::<f64>();
    let mut iterations = 0;
    let mut grad = gradient_from_margins(&u, prob);
    // The separation test never ends the run early; it only reclassifies a
    // stop that would otherwise look like convergence or exhaustion.
    let classify = |u: &DVector<f64>, reason: StopReason| {
        if separates(u) {
            StopReason::SeparableUnbounded
        } else {
            reason
        }
    };
    let stop = loop {
        if norm_guard_tripped(&v, prob.sigma_e) {
            break StopReason::SeparableUnbounded;
        }
        if grad.norm() <= opts.tol {
            break classify(&u, StopReason::GradientTolerance);
        }
        if iterations >= opts.max_iter {
            break classify(&u, StopReason::MaxIterations);
        }
        let mut dir = newton_direction(hessian_from_margins(&u, prob), &grad);
        let mut slope = grad.dot(&dir);
        if slope.is_nan() || slope >= 0.0 {
            dir = -&grad;
            slope = -grad.norm_squared();
        }
        // Armijo with a few ulps of slack for the final quadratic steps,
        // where the decrease falls below the objective's rounding error.
        let slack = 8.0 * f64::EPSILON * f.abs();
        let mut step = 1.0;
        let accepted = loop {
            let trial = &v + step * &dir;
            let u_trial = prob.margins(&trial);
            let f_trial = -u_trial.iter().map(|&ui| log_std_normal_cdf(ui)).sum::<f64>();
            if f_trial <= f + opts.sufficient_decrease * step * slope + slack {
                break Some((trial, u_trial, f_trial));
            }
            step *= opts.backtrack;
            if step < 1e-14 {
                break None;
            }
        };
        iterations += 1;
        match accepted {
            Some((trial, u_trial, f_trial)) => {
                v = trial;
                u = u_trial;
                f = f_trial;
                grad = gradient_from_margins(&u, prob);
            }
            None => break classify(&u, StopReason::LineSearchStalled),
        }
    };
    let grad_norm = grad.norm();
    let feasible = match stop {
        StopReason::SeparableUnbounded => prob.sigma_e == 0.0,
        _ => check_feasibility(&v, prob.sigma_e),
    };
    MlSolution {
        converged: grad_norm <= opts.tol && stop != StopReason::SeparableUnbounded,
        v_star: v,
        w_star: None,
        feasible,
        objective: f,
        iterations,
        grad_norm,
        stop,
    }
}

/// `‖v*‖² < 1/σ_e²`; always true without perturbation.
pub fn check_feasibility(v_star: &DVector<f64>, sigma_e: f64) -> bool {
    sigma_e == 0.0 || v_star.norm_squared() * sigma_e * sigma_e < 1.0
}

/// Inverse of [`forward_map`]: `w = σ_n v / sqrt(1 − σ_e²‖v‖²)`.
///
/// Panics if `v_star` is infeasible.
pub fn recover_amplitudes(v_star: &DVector<f64>, sigma_e: f64, sigma_n: f64) -> DVector<f64> {
    let shrink = 1.0 - sigma_e * sigma_e * v_star.norm_squared();
    assert!(
        shrink > 0.0,
        "recover_amplitudes: infeasible v* (σ_e²‖v‖² = {})",
        1.0 - shrink
    );
    v_star * (sigma_n / shrink.sqrt())
}

/// `v = w / sqrt(‖w‖²σ_e² + σ_n²)`.
pub fn forward_map(w: &DVector<f64>, sigma_e: f64, sigma_n: f64) -> DVector<f64> {
    w / (w.norm_squared() * sigma_e * sigma_e + sigma_n * sigma_n).sqrt()
}

/// Rescales `v` onto the sphere of radius `(1 − ε)/σ_e` inside the feasible ball.
pub fn project_to_feasible(v: &DVector<f64>, sigma_e: f64, eps: f64) -> DVector<f64> {
    assert!(sigma_e > 0.0);
    let norm = v.norm();
    if norm == 0.0 {
        return v.clone();
    }
    v * ((1.0 - eps) / (sigma_e * norm))
}

/// Scatters `w_star` into a zero vector of length `m` at `active_index`.
pub fn embed_solution(w_star: &DVector<f64>, active_index: &[usize], m: usize) -> DVector<f64> {
    assert_eq!(w_star.len(), active_index.len(), "embed_solution: length mismatch");
    let mut out = DVector::zeros(m);
    for (&j, &w) in active_index.iter().zip(w_star.iter()) {
        assert!(j < m, "embed_solution: index {j} out of range for m = {m}");
        out[j] = w;
    }
    out
}
