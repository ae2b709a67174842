//! Small numerical helpers shared by the samplers.

use rand::Rng;

use crate::error::{Error, Result};

/// `log(sum(exp(v)))`, stable under max-subtraction. All `-inf` inputs give `-inf`.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Invalid("log_sum_exp of an empty list".into()));
    }
    Ok(log_sum_exp_unchecked(values))
}

pub(crate) fn log_sum_exp_unchecked(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// `log(mean(exp(v)))`.
pub fn log_mean_exp(values: &[f64]) -> Result<f64> {
    Ok(log_sum_exp(values)? - (values.len() as f64).ln())
}

/// Mean and delta-method standard error of the log of a mean of weights
/// given on the log scale: `se = sd(w) / (mean(w) * sqrt(n))`.
///
/// Returns `(log_mean, se_log, log_se)` where `log_se` is the log of the
/// standard error of the mean on the linear scale.
pub fn log_mean_and_se(log_w: &[f64]) -> Result<(f64, f64, f64)> {
    let n = log_w.len();
    if n == 0 {
        return Err(Error::Invalid("no weights".into()));
    }
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Ok((f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY));
    }
    let shifted: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let mean = shifted.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        shifted.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    let se_mean = (var / n as f64).sqrt();
    let log_mean = max + mean.ln();
    let se_log = se_mean / mean;
    let log_se = if se_mean > 0.0 {
        max + se_mean.ln()
    } else {
        f64::NEG_INFINITY
    };
    Ok((log_mean, se_log, log_se))
}

/// Normalizes a non-negative row in place; returns the pre-normalization sum.
#[inline]
pub(crate) fn normalize(row: &mut [f64]) -> f64 {
    let sum: f64 = row.iter().sum();
    if sum > 0.0 {
        let inv = 1.0 / sum;
        row.iter_mut().for_each(|v| *v *= inv);
    }
    sum
}

/// Draws an index from an unnormalized non-negative row with the given total.
#[inline]
pub(crate) fn sample_index<R: Rng + ?Sized>(row: &[f64], total: f64, rng: &mut R) -> usize {
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in row.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_positive = i;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

/// Effective sample size `1 / sum(w^2)` of normalized weights.
pub fn ess(weights: &[f64]) -> Result<f64> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || (sum - 1.0).abs() > 1e-9 || weights.iter().any(|w| *w < 0.0) {
        return Err(Error::Invalid(format!(
            "ess requires normalized non-negative weights (sum = {sum})"
        )));
    }
    Ok(1.0 / weights.iter().map(|w| w * w).sum::<f64>())
}
