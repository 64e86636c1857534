//! Outer particle filter over the static parameters: jittering, weighting
//! by the layer-2 evidence, hierarchical resampling and point estimates.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer2::{
    enkf_slow_step, smc_slow_step, Layer2Options, Layer2Output, Layer2State, SlowEnsemble,
    SlowParticleCloud, SmcMember,
};
use crate::layer3::{make_sigma_points, GaussianBelief};
use crate::model::MultiScaleModel;
use crate::nested::Method;
use crate::numerics::{
    draw_gaussian, effective_sample_size, log_mean_exp, normalize_log_weights, psd_factor,
    resample_indices, JitterPolicy, LogWeights, Purpose, Resampler, RngStream, StreamPath,
};

/// Uniform prior on a box.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterPrior {
    low: Vec<f64>,
    high: Vec<f64>,
}

impl ParameterPrior {
    pub fn new(low: Vec<f64>, high: Vec<f64>) -> Result<Self> {
        if low.len() != high.len() || low.is_empty() {
            return Err(Error::structural(
                "prior bounds must have equal, non-zero length",
            ));
        }
        if low
            .iter()
            .zip(&high)
            .any(|(l, h)| !(l < h) || !l.is_finite() || !h.is_finite())
        {
            return Err(Error::structural("prior bounds need low < high"));
        }
        Ok(ParameterPrior { low, high })
    }

    pub fn cube(d: usize, low: f64, high: f64) -> Result<Self> {
        ParameterPrior::new(vec![low; d], vec![high; d])
    }

    pub fn dim(&self) -> usize {
        self.low.len()
    }

    pub fn low(&self) -> &[f64] {
        &self.low
    }

    pub fn high(&self) -> &[f64] {
        &self.high
    }

    pub fn mean(&self) -> DVector<f64> {
        DVector::from_fn(self.dim(), |k, _| 0.5 * (self.low[k] + self.high[k]))
    }

    pub fn contains(&self, theta: &DVector<f64>) -> bool {
        theta.len() == self.dim()
            && theta
                .iter()
                .enumerate()
                .all(|(k, v)| *v >= self.low[k] && *v <= self.high[k])
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_fn(self.dim(), |k, _| {
            self.low[k] + (self.high[k] - self.low[k]) * rng.random::<f64>()
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryPolicy {
    /// Redraw an out-of-box coordinate up to 100 times, then clamp it.
    #[default]
    RedrawThenClamp,
    /// Keep the proposal; particles outside the box get zero weight.
    Reject,
}

pub const MAX_REDRAWS: usize = 100;

/// Gaussian random-walk kernel on `θ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JitterKernel {
    pub variance: f64,
    pub boundary: BoundaryPolicy,
}

impl JitterKernel {
    /// `σ̃² = scale / √(N³)`; the default scale is 0.05.
    pub fn scaled(scale: f64, n: usize, boundary: BoundaryPolicy) -> Self {
        JitterKernel {
            variance: scale / (n as f64).powf(1.5),
            boundary,
        }
    }

    pub fn default_for(n: usize) -> Self {
        JitterKernel::scaled(0.05, n, BoundaryPolicy::RedrawThenClamp)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct JitterReport {
    pub redraws: usize,
    pub clamps: usize,
    pub rejected: usize,
}

impl JitterReport {
    fn absorb(&mut self, other: JitterReport) {
        self.redraws += other.redraws;
        self.clamps += other.clamps;
        self.rejected += other.rejected;
    }
}

/// Jitter a single particle. The result is `None` when the reject policy
/// leaves it outside the box.
pub fn jitter_one<R: Rng + ?Sized>(
    rng: &mut R,
    theta: &DVector<f64>,
    kernel: &JitterKernel,
    prior: &ParameterPrior,
) -> (Option<DVector<f64>>, JitterReport) {
    let mut report = JitterReport::default();
    if kernel.variance == 0.0 {
        return (Some(theta.clone()), report);
    }
    let sd = kernel.variance.sqrt();
    let mut out = theta.clone();
    let mut outside = false;
    for k in 0..theta.len() {
        let (lo, hi) = (prior.low[k], prior.high[k]);
        let mut v = theta[k] + sd * rng.sample::<f64, _>(StandardNormal);
        match kernel.boundary {
            BoundaryPolicy::RedrawThenClamp => {
                let mut tries = 0;
                while (v < lo || v > hi) && tries < MAX_REDRAWS {
                    v = theta[k] + sd * rng.sample::<f64, _>(StandardNormal);
                    tries += 1;
                }
                report.redraws += tries;
                if v < lo || v > hi {
                    v = v.clamp(lo, hi);
                    report.clamps += 1;
                }
            }
            BoundaryPolicy::Reject => outside |= v < lo || v > hi,
        }
        out[k] = v;
    }
    if outside {
        report.rejected = 1;
        (None, report)
    } else {
        (Some(out), report)
    }
}

/// Jitter every particle from its own `(t, Jitter, i)` stream.
pub fn jitter(
    stream: &RngStream,
    particles: &[DVector<f64>],
    kernel: &JitterKernel,
    prior: &ParameterPrior,
) -> (Vec<Option<DVector<f64>>>, JitterReport) {
    let base = stream.path();
    let mut report = JitterReport::default();
    let out = particles
        .iter()
        .enumerate()
        .map(|(i, th)| {
            let path = StreamPath::new(base.run, base.t, Purpose::Jitter, i as u64, 0);
            let (p, r) = jitter_one(&mut stream.with_path(path).rng(), th, kernel, prior);
            report.absorb(r);
            p
        })
        .collect();
    (out, report)
}

/// Gaussian priors `p(x_0)` and `p(z_0)` used by the filters.
#[derive(Clone, Debug, PartialEq)]
pub struct StatePriors {
    pub x0: GaussianBelief,
    pub z0: GaussianBelief,
}

impl StatePriors {
    pub fn isotropic(x0: DVector<f64>, x_var: f64, z0: DVector<f64>, z_var: f64) -> Self {
        StatePriors {
            x0: GaussianBelief::isotropic(x0, x_var),
            z0: GaussianBelief::isotropic(z0, z_var),
        }
    }
}

/// Parameter particles with normalized weights and their attached state.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleHierarchy {
    pub thetas: Vec<DVector<f64>>,
    pub weights: Vec<f64>,
    pub states: Vec<Layer2State>,
}

impl ParticleHierarchy {
    pub fn len(&self) -> usize {
        self.thetas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thetas.is_empty()
    }
}

pub fn init_hierarchy(
    m: &MultiScaleModel,
    prior: &ParameterPrior,
    n: usize,
    j: usize,
    method: Method,
    priors: &StatePriors,
    stream: &RngStream,
) -> Result<ParticleHierarchy> {
    if prior.dim() != m.dims().d_theta {
        return Err(Error::structural("prior dimension differs from d_theta"));
    }
    let base = stream.path();
    let thetas = (0..n)
        .map(|i| {
            let path = StreamPath::new(base.run, 0, Purpose::Init, i as u64, 0);
            prior.sample(&mut stream.with_path(path).rng())
        })
        .collect();
    init_hierarchy_with_thetas(m, thetas, j, method, priors, stream)
}

/// Initialization with given parameter particles (for known-`θ` runs).
pub fn init_hierarchy_with_thetas(
    m: &MultiScaleModel,
    thetas: Vec<DVector<f64>>,
    j: usize,
    method: Method,
    priors: &StatePriors,
    stream: &RngStream,
) -> Result<ParticleHierarchy> {
    let n = thetas.len();
    let dims = m.dims();
    if n == 0 || j == 0 {
        return Err(Error::structural("N and J must be at least 1"));
    }
    if thetas.iter().any(|t| t.len() != dims.d_theta) {
        return Err(Error::structural(
            "parameter particle of the wrong dimension",
        ));
    }
    if priors.x0.dim() != dims.d_x || priors.z0.dim() != dims.d_z {
        return Err(Error::structural(
            "state priors do not match the model dimensions",
        ));
    }
    let x_factor = psd_factor(&priors.x0.cov, &JitterPolicy::default())?.lower;
    let base = stream.path();
    let draw_x = |i: usize, jj: usize| {
        let path = StreamPath::new(base.run, 0, Purpose::Init, i as u64, jj as u64 + 1);
        draw_gaussian(
            &mut stream.with_path(path).rng(),
            &priors.x0.mean,
            &x_factor,
        )
    };
    let states = match method {
        Method::UkfChain => {
            let sigma = make_sigma_points(&priors.z0)?;
            (0..n)
                .map(|i| {
                    let members = (0..j)
                        .map(|jj| SmcMember {
                            x: draw_x(i, jj),
                            sigma: sigma.clone(),
                        })
                        .collect();
                    Layer2State::Cloud(SlowParticleCloud::uniform(members))
                })
                .collect()
        }
        Method::EkfChain => (0..n)
            .map(|i| {
                let cols: Vec<DVector<f64>> = (0..j).map(|jj| draw_x(i, jj)).collect();
                SlowEnsemble::new(DMatrix::from_columns(&cols), vec![priors.z0.clone(); j])
                    .map(Layer2State::Ensemble)
            })
            .collect::<Result<Vec<_>>>()?,
    };
    Ok(ParticleHierarchy {
        thetas,
        weights: vec![1.0 / n as f64; n],
        states,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepEstimates {
    pub theta: DVector<f64>,
    pub x: DVector<f64>,
    pub z: DVector<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct StepDiagnostics {
    pub ess: f64,
    pub log_evidence_incr: f64,
    /// `|Σ v − 1|` of the normalized layer-1 weights.
    pub weight_sum_error: f64,
    /// Parameter particles whose layer-2 evidence was zero.
    pub degenerate: usize,
    pub jitter: JitterReport,
    /// Normalized layer-1 weights before resampling.
    #[serde(skip)]
    pub weights: Vec<f64>,
}

/// Settings shared by every layer-1 step of a run.
#[derive(Clone, Debug)]
pub struct Layer1Config {
    pub prior: ParameterPrior,
    /// `None` disables jittering.
    pub kernel: Option<JitterKernel>,
    pub resampler: Resampler,
    pub layer2: Layer2Options,
}

/// Point estimates of a hierarchy from its attached state.
pub fn compute_estimates(h: &ParticleHierarchy) -> Result<StepEstimates> {
    let mut theta = DVector::zeros(h.thetas[0].len());
    let mut x: Option<DVector<f64>> = None;
    let mut z: Option<DVector<f64>> = None;
    let acc = |dst: &mut Option<DVector<f64>>, v: DVector<f64>| match dst {
        Some(d) => *d += v,
        None => *dst = Some(v),
    };
    for i in 0..h.len() {
        let v = h.weights[i];
        if v == 0.0 {
            continue;
        }
        theta += &h.thetas[i] * v;
        match &h.states[i] {
            Layer2State::Cloud(c) => {
                for (mem, &u) in c.members.iter().zip(&c.weights) {
                    if u == 0.0 {
                        continue;
                    }
                    acc(&mut x, &mem.x * (v * u));
                    acc(&mut z, mem.sigma.mean() * (v * u));
                }
            }
            Layer2State::Ensemble(e) => {
                let w = v / e.len() as f64;
                for (k, b) in e.beliefs.iter().enumerate() {
                    acc(&mut x, e.x.column(k) * w);
                    acc(&mut z, &b.mean * w);
                }
            }
        }
    }
    match (x, z) {
        (Some(x), Some(z)) => Ok(StepEstimates { theta, x, z }),
        _ => Err(Error::structural("hierarchy carries no weighted state")),
    }
}

/// One full step of the nested filter at macro time `t`. `stream` carries
/// `(run, t)`; per-particle streams fork from it.
pub fn layer1_step(
    m: &MultiScaleModel,
    h: &ParticleHierarchy,
    y: &DVector<f64>,
    stream: &RngStream,
    cfg: &Layer1Config,
) -> Result<(ParticleHierarchy, StepEstimates, StepDiagnostics)> {
    let n = h.len();
    let dims = m.dims();
    let base = stream.path();
    let t = base.t;
    let results: Vec<(
        Option<DVector<f64>>,
        JitterReport,
        Result<Option<Layer2Output>>,
    )> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (theta, report) = match &cfg.kernel {
                Some(k) => {
                    let path = StreamPath::new(base.run, t, Purpose::Jitter, i as u64, 0);
                    jitter_one(
                        &mut stream.with_path(path).rng(),
                        &h.thetas[i],
                        k,
                        &cfg.prior,
                    )
                }
                None => (Some(h.thetas[i].clone()), JitterReport::default()),
            };
            let Some(theta) = theta else {
                return (None, report, Ok(None));
            };
            let sub = stream.with_path(StreamPath::new(
                base.run,
                t,
                Purpose::FastFilter,
                i as u64,
                0,
            ));
            let out = match &h.states[i] {
                Layer2State::Cloud(c) => smc_slow_step(m, &theta, c, y, &sub, &cfg.layer2),
                Layer2State::Ensemble(e) => enkf_slow_step(m, &theta, e, y, &sub, &cfg.layer2),
            };
            (Some(theta), report, out.map(Some))
        })
        .collect();

    let mut diag = StepDiagnostics::default();
    let mut thetas = Vec::with_capacity(n);
    let mut outputs = Vec::with_capacity(n);
    for (i, (theta, report, out)) in results.into_iter().enumerate() {
        diag.jitter.absorb(report);
        let out = out?;
        thetas.push(theta.unwrap_or_else(|| h.thetas[i].clone()));
        outputs.push(out);
    }
    let log_v: Vec<f64> = outputs
        .iter()
        .map(|o| o.as_ref().map_or(f64::NEG_INFINITY, |o| o.log_v))
        .collect();
    diag.degenerate = log_v.iter().filter(|v| **v == f64::NEG_INFINITY).count();
    let lw = LogWeights(log_v.clone());
    let weights = match normalize_log_weights(&lw) {
        Ok((w, _)) => w,
        Err(Error::DegenerateWeights { .. }) => {
            return Err(Error::FilterCollapse {
                t: t as usize,
                partial: Box::default(),
            })
        }
        Err(e) => return Err(e),
    };
    diag.ess = effective_sample_size(&weights);
    diag.log_evidence_incr = log_mean_exp(&log_v);
    diag.weight_sum_error = (weights.iter().sum::<f64>() - 1.0).abs();
    diag.weights = weights.clone();

    let mut est = StepEstimates {
        theta: DVector::zeros(dims.d_theta),
        x: DVector::zeros(dims.d_x),
        z: DVector::zeros(dims.d_z),
    };
    for i in 0..n {
        if weights[i] == 0.0 {
            continue;
        }
        let o = outputs[i]
            .as_ref()
            .expect("positive weight implies an output");
        est.theta += &thetas[i] * weights[i];
        est.x += &o.x_hat * weights[i];
        est.z += &o.z_hat * weights[i];
    }

    let idx = resample_indices(
        &mut stream
            .with_path(StreamPath::new(base.run, t, Purpose::ParamResample, 0, 0))
            .rng(),
        &weights,
        n,
        cfg.resampler,
    )?;
    let next = ParticleHierarchy {
        thetas: idx.iter().map(|&k| thetas[k].clone()).collect(),
        weights: vec![1.0 / n as f64; n],
        states: idx
            .iter()
            .map(|&k| {
                outputs[k]
                    .as_ref()
                    .expect("resampled particles have positive weight")
                    .state
                    .clone()
            })
            .collect(),
    };
    Ok((next, est, diag))
}
