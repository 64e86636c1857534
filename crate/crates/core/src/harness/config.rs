//! Experiment configuration: a TOML file with `[model]`, `[method]` and
//! `[experiment]` sections. Every field has a default; unknown keys are
//! rejected.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::layer1::{BoundaryPolicy, ParameterPrior, StatePriors};
use crate::model::{lorenz_model, LorenzConfig, LorenzParams, MultiScaleModel, StatePair};
use crate::nested::{Method, MethodSpec, SmootherPriors};
use crate::numerics::{Resampler, SeedKey};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_x: usize,
    pub r_ratio: usize,
    pub dt_x: f64,
    pub dt_z: f64,
    pub sigma_x: f64,
    pub sigma_z: f64,
    pub sigma_yx: f64,
    pub sigma_yz: f64,
    /// True `(F, H, C, B)`.
    pub theta: [f64; 4],
}

impl Default for ModelSection {
    fn default() -> Self {
        let l = LorenzConfig::default();
        let p = LorenzParams::default();
        ModelSection {
            d_x: l.d_x,
            r_ratio: l.r_ratio,
            dt_x: l.dt_x,
            dt_z: l.dt_z,
            sigma_x: l.sigma_x,
            sigma_z: l.sigma_z,
            sigma_yx: l.sigma_yx,
            sigma_yz: l.sigma_yz,
            theta: [p.f, p.h, p.c, p.b],
        }
    }
}

impl ModelSection {
    pub fn lorenz(&self) -> LorenzConfig {
        LorenzConfig {
            d_x: self.d_x,
            r_ratio: self.r_ratio,
            dt_x: self.dt_x,
            dt_z: self.dt_z,
            sigma_x: self.sigma_x,
            sigma_z: self.sigma_z,
            sigma_yx: self.sigma_yx,
            sigma_yz: self.sigma_yz,
        }
    }

    pub fn theta(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.theta)
    }
}

/// The `MethodSpec` fields other than the seed, which comes from the
/// experiment section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodSection {
    pub method: Method,
    pub n: usize,
    pub j: usize,
    pub resampler: Resampler,
    pub jitter_scale: f64,
    pub boundary: BoundaryPolicy,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ess_threshold: Option<f64>,
}

impl Default for MethodSection {
    fn default() -> Self {
        let s = MethodSpec::new(Method::EkfChain, 20, 20, 0);
        MethodSection {
            method: s.method,
            n: s.n,
            j: s.j,
            resampler: s.resampler,
            jitter_scale: s.jitter_scale,
            boundary: s.boundary,
            ess_threshold: s.ess_threshold,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    /// Continuous-time horizon; ignored when `steps` is set.
    pub horizon: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    pub replications: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Deterministic spin-up length in time units.
    pub spinup: f64,
    pub prior_low: f64,
    pub prior_high: f64,
    /// Variance of `p(x_0)` around the spin-up state.
    pub x0_var: f64,
    /// Variance of `p(z_0)` around the spin-up state.
    pub z0_var: f64,
    /// Also write every micro step of the true fast path.
    pub store_micro: bool,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            horizon: 20.0,
            steps: None,
            replications: 50,
            seed: 0,
            out_dir: PathBuf::from("runs"),
            spinup: 20.0,
            prior_low: 2.0,
            prior_high: 20.0,
            x0_var: 0.1,
            z0_var: 10.0,
            store_micro: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub method: MethodSection,
    pub experiment: ExperimentSection,
}

fn field_error(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{field}: {msg}"))
}

impl ExperimentConfig {
    /// Parse and validate. Syntax errors and unknown keys report the line
    /// and column; semantic errors name the offending field.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), strip_prefix(&e))))
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.d_x < 4 {
            return Err(field_error("model.d_x", "must be at least 4"));
        }
        if m.r_ratio == 0 {
            return Err(field_error("model.r_ratio", "must be positive"));
        }
        for (name, v) in [("model.dt_x", m.dt_x), ("model.dt_z", m.dt_z)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(field_error(name, "must be positive"));
            }
        }
        let ratio = m.dt_x / m.dt_z;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio || ratio.round() < 1.0 {
            return Err(field_error(
                "model.dt_z",
                "dt_x / dt_z must be a positive integer",
            ));
        }
        for (name, v) in [
            ("model.sigma_x", m.sigma_x),
            ("model.sigma_z", m.sigma_z),
            ("model.sigma_yx", m.sigma_yx),
            ("model.sigma_yz", m.sigma_yz),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(field_error(name, "must be non-negative"));
            }
        }
        if !(m.sigma_yx > 0.0 && m.sigma_yz > 0.0) {
            return Err(field_error(
                "model.sigma_yx",
                "observation noise must be positive",
            ));
        }
        if m.theta.iter().any(|v| !v.is_finite()) || m.theta[3] == 0.0 {
            return Err(field_error("model.theta", "must be finite with B != 0"));
        }

        let s = &self.method;
        if s.n == 0 || s.j == 0 {
            return Err(field_error("method.n", "N and J must be at least 1"));
        }
        if s.method == Method::EkfChain && s.j < 2 {
            return Err(field_error("method.j", "ekf-chain needs J >= 2"));
        }
        if !(s.jitter_scale >= 0.0) {
            return Err(field_error("method.jitter_scale", "must be non-negative"));
        }
        if let Some(e) = s.ess_threshold {
            if !(0.0..=1.0).contains(&e) {
                return Err(field_error("method.ess_threshold", "must lie in [0, 1]"));
            }
        }

        let e = &self.experiment;
        match e.steps {
            Some(0) => return Err(field_error("experiment.steps", "must be positive")),
            Some(_) => {}
            None => {
                let steps = e.horizon / m.dt_x;
                if !(e.horizon > 0.0) || (steps - steps.round()).abs() > 1e-6 * steps.max(1.0) {
                    return Err(field_error(
                        "experiment.horizon",
                        format!(
                            "{} is not a positive multiple of dt_x = {}",
                            e.horizon, m.dt_x
                        ),
                    ));
                }
            }
        }
        if e.replications == 0 {
            return Err(field_error("experiment.replications", "must be positive"));
        }
        if !(e.spinup >= 0.0) {
            return Err(field_error("experiment.spinup", "must be non-negative"));
        }
        if !(e.prior_low < e.prior_high) {
            return Err(field_error(
                "experiment.prior_low",
                "must be below prior_high",
            ));
        }
        if !(e.x0_var > 0.0 && e.z0_var > 0.0) {
            return Err(field_error(
                "experiment.x0_var",
                "prior variances must be positive",
            ));
        }
        Ok(())
    }

    /// Number of macro steps `T`.
    pub fn steps(&self) -> usize {
        self.experiment
            .steps
            .unwrap_or_else(|| (self.experiment.horizon / self.model.dt_x).round() as usize)
    }

    pub fn build_model(&self) -> Result<MultiScaleModel> {
        lorenz_model(&self.model.lorenz())
    }

    pub fn method_spec(&self, seed: u64) -> MethodSpec {
        let s = &self.method;
        MethodSpec {
            method: s.method,
            n: s.n,
            j: s.j,
            resampler: s.resampler,
            jitter_scale: s.jitter_scale,
            boundary: s.boundary,
            ess_threshold: s.ess_threshold,
            seed,
        }
    }

    pub fn parameter_prior(&self) -> Result<ParameterPrior> {
        ParameterPrior::cube(4, self.experiment.prior_low, self.experiment.prior_high)
    }

    /// Filter priors centred on the spin-up state.
    pub fn smoother_priors(&self, init: &StatePair) -> Result<SmootherPriors> {
        Ok(SmootherPriors {
            theta: self.parameter_prior()?,
            states: StatePriors::isotropic(
                init.x.clone(),
                self.experiment.x0_var,
                init.z.clone(),
                self.experiment.z0_var,
            ),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

/// Seed of replication `r`, a pure function of the master seed and `r`.
pub fn replication_seed(master: u64, r: usize) -> u64 {
    let key = SeedKey::from_seed(master).derive("replication", r as u64);
    u64::from_le_bytes(key.0[..8].try_into().unwrap())
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(s) => s.clone(),
        other => other.to_string(),
    }
}
