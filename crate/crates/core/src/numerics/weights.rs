//! Log-domain weight handling and resampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Natural-log weights; entries are finite or `-inf`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogWeights(pub Vec<f64>);

impl LogWeights {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_degenerate(&self) -> bool {
        !self.0.iter().any(|v| v.is_finite())
    }
}

/// `log Σ exp(v)` with a max shift. Returns `-inf` when every entry is `-inf`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `log((1/n) Σ exp(v))`.
pub fn log_mean_exp(values: &[f64]) -> f64 {
    log_sum_exp(values) - (values.len() as f64).ln()
}

/// Turn log-weights into normalized linear weights plus `log Σ exp(lw)`.
pub fn normalize_log_weights(lw: &LogWeights) -> Result<(Vec<f64>, f64)> {
    // NaN counts as degenerate too.
    let max =
        lw.0.iter()
            .copied()
            .filter(|v| !v.is_nan())
            .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        if max == f64::INFINITY {
            return Err(Error::structural("log-weight of +inf"));
        }
        return Err(Error::DegenerateWeights { count: lw.len() });
    }
    let shifted: Vec<f64> =
        lw.0.iter()
            .map(|v| if v.is_nan() { 0.0 } else { (v - max).exp() })
            .collect();
    let total: f64 = shifted.iter().sum();
    let weights = shifted.iter().map(|w| w / total).collect();
    Ok((weights, max + total.ln()))
}

/// `1 / Σ w²`.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Resampler {
    #[default]
    Multinomial,
    Systematic,
}

fn cumulative(weights: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    weights
        .iter()
        .map(|w| {
            acc += w;
            acc
        })
        .collect()
}

/// First index whose cumulative weight exceeds `u`, skipping zero-weight slots.
fn locate(cdf: &[f64], weights: &[f64], u: f64) -> usize {
    let mut k = cdf.partition_point(|&c| c <= u);
    if k >= cdf.len() {
        // u landed in the rounding gap above the last cumulative value.
        k = weights
            .iter()
            .rposition(|&w| w > 0.0)
            .unwrap_or(cdf.len() - 1);
    }
    k
}

/// Draw `m` ancestor indices with marginal probabilities `weights`.
pub fn resample_indices<R: Rng + ?Sized>(
    rng: &mut R,
    weights: &[f64],
    m: usize,
    scheme: Resampler,
) -> Result<Vec<usize>> {
    if weights.is_empty() {
        return Err(Error::structural("resampling from an empty weight vector"));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 || weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::structural(format!(
            "resampling needs normalized weights (sum = {total})"
        )));
    }
    let cdf = cumulative(weights);
    let out = match scheme {
        Resampler::Multinomial => (0..m)
            .map(|_| locate(&cdf, weights, rng.random::<f64>() * total))
            .collect(),
        Resampler::Systematic => {
            let u0: f64 = rng.random::<f64>();
            let step = total / m as f64;
            (0..m)
                .map(|k| locate(&cdf, weights, (u0 + k as f64) * step))
                .collect()
        }
    };
    Ok(out)
}
