//! Sequence-matching objectives. Lower is better everywhere.

use serde::{Deserialize, Serialize};

use super::{GaError, Individual};
use crate::chaos::logistic_iterates_into;

/// Blend of correlation distance and mean squared error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitnessWeights {
    pub w_corr: f64,
    pub w_mse: f64,
}

impl Default for FitnessWeights {
    fn default() -> Self {
        Self { w_corr: 0.03, w_mse: 0.97 }
    }
}

impl FitnessWeights {
    pub fn validate(&self) -> Result<(), GaError> {
        let ok = self.w_corr >= 0.0 && self.w_mse >= 0.0 && (self.w_corr + self.w_mse - 1.0).abs() < 1e-12;
        if ok {
            Ok(())
        } else {
            Err(GaError::Config(format!(
                "fitness weights must be non-negative and sum to 1, got ({}, {})",
                self.w_corr, self.w_mse
            )))
        }
    }
}

/// Fitness assigned when a candidate's sequence is degenerate.
pub const WORST_FITNESS: f64 = f64::INFINITY;

pub fn mse(target: &[f64], generated: &[f64]) -> Result<f64, GaError> {
    if target.len() != generated.len() {
        return Err(GaError::LengthMismatch(target.len(), generated.len()));
    }
    if target.is_empty() {
        return Err(GaError::Empty);
    }
    let sum: f64 = target.iter().zip(generated).map(|(t, g)| (t - g) * (t - g)).sum();
    Ok(sum / target.len() as f64)
}

/// One minus the Pearson correlation; in `[0, 2]`.
pub fn correlation_distance(target: &[f64], generated: &[f64]) -> Result<f64, GaError> {
    if target.len() != generated.len() {
        return Err(GaError::LengthMismatch(target.len(), generated.len()));
    }
    if target.len() < 2 {
        return Err(GaError::TooShort(target.len()));
    }
    let n = target.len() as f64;
    let t_mean = target.iter().sum::<f64>() / n;
    let g_mean = generated.iter().sum::<f64>() / n;
    let (mut cov, mut t_var, mut g_var) = (0.0, 0.0, 0.0);
    for (t, g) in target.iter().zip(generated) {
        let dt = t - t_mean;
        let dg = g - g_mean;
        cov += dt * dg;
        t_var += dt * dt;
        g_var += dg * dg;
    }
    if t_var == 0.0 || g_var == 0.0 {
        return Err(GaError::ZeroVariance);
    }
    let rho = cov / (t_var.sqrt() * g_var.sqrt());
    Ok((1.0 - rho).clamp(0.0, 2.0))
}

/// `w_corr * corr(T, G) + w_mse * mse(T, G)` with `G = epsilon * c(r, x0)`.
///
/// Degenerate candidates score [`WORST_FITNESS`] instead of failing.
pub fn fitness(candidate: &Individual, target: &[f64], weights: &FitnessWeights) -> f64 {
    let mut buf = Vec::with_capacity(target.len());
    fitness_with_buffer(candidate, target, weights, &mut buf)
}

pub(crate) fn fitness_with_buffer(
    candidate: &Individual,
    target: &[f64],
    weights: &FitnessWeights,
    buf: &mut Vec<f64>,
) -> f64 {
    logistic_iterates_into(candidate.r, candidate.x0, target.len(), buf);
    for v in buf.iter_mut() {
        *v *= candidate.epsilon;
    }
    // Skip a term with zero weight so that degenerate correlation does not
    // poison a pure-MSE objective.
    let corr = if weights.w_corr == 0.0 {
        Ok(0.0)
    } else {
        correlation_distance(target, buf)
    };
    let m = mse(target, buf);
    match (corr, m) {
        (Ok(c), Ok(m)) => {
            let f = weights.w_corr * c + weights.w_mse * m;
            if f.is_finite() {
                f
            } else {
                WORST_FITNESS
            }
        }
        _ => WORST_FITNESS,
    }
}

/// Generated sequence for a candidate, as compared against the target.
pub fn candidate_sequence(candidate: &Individual, len: usize) -> Vec<f64> {
    let mut buf = Vec::with_capacity(len);
    logistic_iterates_into(candidate.r, candidate.x0, len, &mut buf);
    buf.iter_mut().for_each(|v| *v *= candidate.epsilon);
    buf
}
