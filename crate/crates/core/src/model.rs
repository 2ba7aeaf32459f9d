//! Bernoulli-Gaussian signal synthesis and perturbed one-bit measurement.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

/// Dimensions and noise levels of the generative model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Signal length.
    pub m: usize,
    /// Number of sign measurements.
    pub n_meas: usize,
    /// Probability that a coordinate is active.
    pub p: f64,
    /// Std of the sensing-matrix perturbation entries.
    pub sigma_e: f64,
    /// Std of the additive noise.
    pub sigma_n: f64,
    /// Std of active amplitudes before normalization.
    pub sigma_r: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            m: 200,
            n_meas: 400,
            p: 0.1,
            sigma_e: 0.1,
            sigma_n: 0.1,
            sigma_r: 1.0,
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidParams(msg));
        if self.m == 0 || self.n_meas == 0 {
            return fail(format!("m = {} and N = {} must be positive", self.m, self.n_meas));
        }
        // p = 1 is allowed for the all-active degenerate case.
        if !(self.p > 0.0 && self.p <= 1.0) {
            return fail(format!("activity probability {} outside (0, 1]", self.p));
        }
        if !(self.sigma_e >= 0.0 && self.sigma_e.is_finite()) {
            return fail(format!("sigma_e = {} must be finite and >= 0", self.sigma_e));
        }
        if !(self.sigma_n > 0.0 && self.sigma_n.is_finite()) {
            return fail(format!("sigma_n = {} must be finite and > 0", self.sigma_n));
        }
        if !(self.sigma_r > 0.0 && self.sigma_r.is_finite()) {
            return fail(format!("sigma_r = {} must be finite and > 0", self.sigma_r));
        }
        Ok(())
    }
}

/// A unit-norm sparse vector `s = q ⊙ r`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSignal {
    /// Activity pattern.
    pub q: Vec<bool>,
    /// Amplitudes, scaled by the same factor as `s` so that `s = q ⊙ r` holds.
    pub r: DVector<f64>,
    pub s: DVector<f64>,
    /// How many all-inactive draws were rejected before this one.
    pub redraws: usize,
}

impl SparseSignal {
    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    pub fn support(&self) -> Vec<usize> {
        self.q
            .iter()
            .enumerate()
            .filter_map(|(j, &active)| active.then_some(j))
            .collect()
    }

    pub fn n_active(&self) -> usize {
        self.q.iter().filter(|&&a| a).count()
    }
}

/// One realization of the perturbed sign-measurement model.
///
/// `e_mat` and `noise` are ground truth; recovery only ever sees `a_mat` and
/// `y` (plus the known noise levels).
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSet {
    /// Known sensing matrix, `m × N`; column `i` is the measurement vector `aᵢ`.
    pub a_mat: DMatrix<f64>,
    pub e_mat: DMatrix<f64>,
    pub noise: DVector<f64>,
    /// Pre-quantization values `(A + E)ᵀ s + n`.
    pub x: DVector<f64>,
    /// Signs of `x`, entries in `{-1.0, +1.0}`.
    pub y: DVector<f64>,
}

impl MeasurementSet {
    /// Fraction of measurements whose sign differs from the noiseless `sign(aᵢᵀ s)`.
    pub fn flip_fraction(&self, s: &DVector<f64>) -> f64 {
        let clean = self.a_mat.tr_mul(s);
        let flips = clean
            .iter()
            .zip(self.y.iter())
            .filter(|(c, y)| sign_quantize(**c) != **y)
            .count();
        flips as f64 / self.y.len() as f64
    }
}

/// Draws a Bernoulli-Gaussian vector and scales it to unit norm. A draw
/// with no active coordinate is rejected and redrawn.
pub fn sample_sparse_signal<R: Rng + ?Sized>(
    params: &ModelParams,
    rng: &mut R,
) -> Result<SparseSignal> {
    params.validate()?;
    let amp = Normal::new(0.0, params.sigma_r).expect("sigma_r validated");
    let mut redraws = 0;
    loop {
        let q: Vec<bool> = (0..params.m).map(|_| rng.random_bool(params.p)).collect();
        let r = DVector::from_fn(params.m, |_, _| amp.sample(rng));
        if !q.iter().any(|&a| a) {
            redraws += 1;
            log::debug!("rejected all-inactive draw #{redraws} (m = {})", params.m);
            continue;
        }
        let s = DVector::from_fn(params.m, |j, _| if q[j] { r[j] } else { 0.0 });
        let norm = s.norm();
        if norm == 0.0 {
            // Active amplitudes of exactly zero; probability zero, same treatment.
            redraws += 1;
            continue;
        }
        return Ok(SparseSignal {
            q,
            r: r / norm,
            s: s / norm,
            redraws,
        });
    }
}

/// Draws `A`, `E`, `n` and forms `x = (A + E)ᵀ s + n`, `y = sign(x)`.
pub fn generate_measurements<R: Rng + ?Sized>(
    signal: &SparseSignal,
    params: &ModelParams,
    rng: &mut R,
) -> Result<MeasurementSet> {
    params.validate()?;
    if signal.len() != params.m {
        return Err(Error::Dimension(format!(
            "signal has length {} but m = {}",
            signal.len(),
            params.m
        )));
    }
    let (m, n) = (params.m, params.n_meas);
    let a_mat = DMatrix::from_fn(m, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let e_mat = DMatrix::from_fn(m, n, |_, _| {
        params.sigma_e * rng.sample::<f64, _>(StandardNormal)
    });
    let noise = DVector::from_fn(n, |_, _| params.sigma_n * rng.sample::<f64, _>(StandardNormal));
    let x = (&a_mat + &e_mat).tr_mul(&signal.s) + &noise;
    let y = x.map(sign_quantize);
    Ok(MeasurementSet {
        a_mat,
        e_mat,
        noise,
        x,
        y,
    })
}

/// `σ_z = sqrt(‖s‖²σ_e² + σ_n²)`, the std of `z = Eᵀ s + n`.
pub fn equivalent_noise_std(s_norm_sq: f64, sigma_e_sq: f64, sigma_n_sq: f64) -> f64 {
    debug_assert!(s_norm_sq >= 0.0 && sigma_e_sq >= 0.0 && sigma_n_sq > 0.0);
    (s_norm_sq * sigma_e_sq + sigma_n_sq).sqrt()
}

/// `+1` for `x ≥ 0`, `-1` otherwise.
#[inline]
pub fn sign_quantize(x: f64) -> f64 {
    debug_assert!(x.is_finite(), "sign_quantize: non-finite input");
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}
