//! Normalized squared errors and their aggregation over replications.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer1::StepEstimates;
use crate::sim::TruthRecord;

/// `‖truth − estimate‖² / ‖truth‖²`.
pub fn nmse(truth: &DVector<f64>, estimate: &DVector<f64>) -> Result<f64> {
    if truth.len() != estimate.len() {
        return Err(Error::structural("nmse arguments differ in length"));
    }
    let denom = truth.norm_squared();
    if denom == 0.0 {
        return Err(Error::UndefinedMetric("nmse with a zero-norm truth"));
    }
    Ok((truth - estimate).norm_squared() / denom)
}

/// Per-step NMSE of one run; `None` marks an undefined value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricSeries {
    pub theta: Vec<Option<f64>>,
    pub x: Vec<Option<f64>>,
    pub z: Vec<Option<f64>>,
}

impl MetricSeries {
    /// Scores `estimates[k]` against the truth at macro time `k + 1`.
    pub fn from_estimates(truth: &TruthRecord, estimates: &[StepEstimates]) -> Result<Self> {
        if estimates.len() > truth.steps() {
            return Err(Error::structural("more estimates than truth steps"));
        }
        let xs: Vec<&DVector<f64>> = (1..=estimates.len()).map(|t| &truth.x_path[t]).collect();
        let zs: Vec<&DVector<f64>> = (1..=estimates.len()).map(|t| truth.z_at(t)).collect();
        Self::score(&truth.theta, &xs, &zs, estimates)
    }

    /// Scores `estimates[k]` against `(theta, xs[k], zs[k])`.
    pub fn score(
        theta: &DVector<f64>,
        xs: &[&DVector<f64>],
        zs: &[&DVector<f64>],
        estimates: &[StepEstimates],
    ) -> Result<Self> {
        if xs.len() < estimates.len() || zs.len() < estimates.len() {
            return Err(Error::structural("truth shorter than the estimate series"));
        }
        let defined = |r: Result<f64>| match r {
            Ok(v) => Ok(Some(v)),
            Err(Error::UndefinedMetric(_)) => Ok(None),
            Err(e) => Err(e),
        };
        let mut out = MetricSeries::default();
        for (k, e) in estimates.iter().enumerate() {
            out.theta.push(defined(nmse(theta, &e.theta))?);
            out.x.push(defined(nmse(xs[k], &e.x))?);
            out.z.push(defined(nmse(zs[k], &e.z))?);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        [&self.theta, &self.x, &self.z]
            .iter()
            .all(|s| s.iter().all(|v| v.is_some_and(f64::is_finite)))
    }
}

/// Linear-interpolation quantile (the R type 7 rule) of unsorted data.
/// Returns `None` for empty input.
pub fn quantile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Some(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

pub fn median(values: &[f64]) -> Option<f64> {
    quantile(values, 0.5)
}

/// Median and quartiles per time step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub median: Vec<Option<f64>>,
    pub q25: Vec<Option<f64>>,
    pub q75: Vec<Option<f64>>,
}

impl Band {
    /// `series[r][t]` over replications `r`; undefined entries are skipped.
    pub fn across(series: &[&[Option<f64>]]) -> Self {
        let len = series.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut band = Band::default();
        for t in 0..len {
            let vals: Vec<f64> = series
                .iter()
                .filter_map(|s| s.get(t).copied().flatten())
                .collect();
            band.median.push(quantile(&vals, 0.5));
            band.q25.push(quantile(&vals, 0.25));
            band.q75.push(quantile(&vals, 0.75));
        }
        band
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PerT {
    pub nmse_theta: Band,
    pub nmse_x: Band,
    pub nmse_z: Band,
}

impl PerT {
    pub fn across(runs: &[&MetricSeries]) -> Self {
        let pick = |f: fn(&MetricSeries) -> &[Option<f64>]| -> Vec<&[Option<f64>]> {
            runs.iter().map(|m| f(m)).collect()
        };
        PerT {
            nmse_theta: Band::across(&pick(|m| &m.theta)),
            nmse_x: Band::across(&pick(|m| &m.x)),
            nmse_z: Band::across(&pick(|m| &m.z)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nmse_examples() {
        let t = DVector::from_vec(vec![2.0, 0.0]);
        assert_eq!(nmse(&t, &t).unwrap(), 0.0);
        assert_eq!(nmse(&t, &DVector::from_vec(vec![1.0, 0.0])).unwrap(), 0.25);
        assert_eq!(nmse(&t, &DVector::zeros(2)).unwrap(), 1.0);
        assert!(matches!(
            nmse(&DVector::zeros(2), &t),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn quantiles_interpolate() {
        let v = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(median(&v), Some(2.5));
        assert_eq!(quantile(&v, 0.25), Some(1.75));
        assert_eq!(quantile(&v, 1.0), Some(4.0));
        assert_eq!(quantile(&[], 0.5), None);
    }

    #[test]
    fn band_skips_missing() {
        let a = [Some(1.0), None];
        let b = [Some(3.0), Some(5.0)];
        let band = Band::across(&[&a, &b]);
        assert_eq!(band.median, vec![Some(2.0), Some(5.0)]);
    }
}
