//! Assembly of the three layers into the two nested smoothers and the
//! sequential run loop over an observation series.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer1::{
    init_hierarchy, init_hierarchy_with_thetas, layer1_step, BoundaryPolicy, JitterKernel,
    Layer1Config, ParameterPrior, ParticleHierarchy, StatePriors, StepDiagnostics, StepEstimates,
};
use crate::layer2::Layer2Options;
use crate::model::MultiScaleModel;
use crate::numerics::{Purpose, Resampler, RngStream, SeedKey, StreamPath};
use crate::sim::ObservationSeries;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Parameter SMC, slow-state SMC, unscented fast filters.
    UkfChain,
    /// Parameter SMC, slow-state EnKF, extended fast filters.
    EkfChain,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::UkfChain => "ukf-chain",
            Method::EkfChain => "ekf-chain",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ukf-chain" => Ok(Method::UkfChain),
            "ekf-chain" => Ok(Method::EkfChain),
            other => Err(Error::Config(format!(
                "unknown method '{other}' (expected ukf-chain or ekf-chain)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub method: Method,
    pub n: usize,
    pub j: usize,
    #[serde(default)]
    pub resampler: Resampler,
    /// Jitter variance is `jitter_scale / √(N³)`; zero disables jittering.
    #[serde(default = "default_jitter_scale")]
    pub jitter_scale: f64,
    #[serde(default)]
    pub boundary: BoundaryPolicy,
    /// Layer-2 resampling threshold as a fraction of `J`; absent means every step.
    #[serde(default)]
    pub ess_threshold: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn default_jitter_scale() -> f64 {
    0.05
}

impl MethodSpec {
    pub fn new(method: Method, n: usize, j: usize, seed: u64) -> Self {
        MethodSpec {
            method,
            n,
            j,
            resampler: Resampler::Multinomial,
            jitter_scale: default_jitter_scale(),
            boundary: BoundaryPolicy::RedrawThenClamp,
            ess_threshold: None,
            seed,
        }
    }

    pub fn kernel(&self) -> Option<JitterKernel> {
        (self.jitter_scale > 0.0)
            .then(|| JitterKernel::scaled(self.jitter_scale, self.n, self.boundary))
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.j == 0 {
            return Err(Error::Config("N and J must be at least 1".into()));
        }
        if self.method == Method::EkfChain && self.j < 2 {
            return Err(Error::Config(
                "ekf-chain needs J >= 2 ensemble members".into(),
            ));
        }
        if !(self.jitter_scale >= 0.0) {
            return Err(Error::Config("jitter_scale must be non-negative".into()));
        }
        Ok(())
    }
}

/// Parameter prior plus state priors.
#[derive(Clone, Debug, PartialEq)]
pub struct SmootherPriors {
    pub theta: ParameterPrior,
    pub states: StatePriors,
}

/// Per-step output of a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FilterTrace {
    pub estimates: Vec<StepEstimates>,
    pub diagnostics: Vec<StepDiagnostics>,
    pub wall_ms: Vec<f64>,
}

impl FilterTrace {
    pub fn len(&self) -> usize {
        self.estimates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.estimates.is_empty()
    }
}

/// Step-by-step driver of one nested smoother.
#[derive(Clone, Debug)]
pub struct Smoother<'a> {
    model: &'a MultiScaleModel,
    cfg: Layer1Config,
    key: SeedKey,
    run: u64,
    hierarchy: ParticleHierarchy,
    trace: FilterTrace,
}

impl<'a> Smoother<'a> {
    pub fn new(
        model: &'a MultiScaleModel,
        spec: &MethodSpec,
        priors: &SmootherPriors,
    ) -> Result<Self> {
        spec.validate()?;
        let key = SeedKey::from_seed(spec.seed);
        let stream = key.stream(StreamPath::new(0, 0, Purpose::Init, 0, 0));
        let hierarchy = init_hierarchy(
            model,
            &priors.theta,
            spec.n,
            spec.j,
            spec.method,
            &priors.states,
            &stream,
        )?;
        Ok(Self::from_parts(model, spec, priors, key, hierarchy))
    }

    /// Known-parameter variant: particles start at `thetas` and jittering is off.
    pub fn with_thetas(
        model: &'a MultiScaleModel,
        spec: &MethodSpec,
        priors: &SmootherPriors,
        thetas: Vec<DVector<f64>>,
    ) -> Result<Self> {
        spec.validate()?;
        let key = SeedKey::from_seed(spec.seed);
        let stream = key.stream(StreamPath::new(0, 0, Purpose::Init, 0, 0));
        let hierarchy = init_hierarchy_with_thetas(
            model,
            thetas,
            spec.j,
            spec.method,
            &priors.states,
            &stream,
        )?;
        let mut s = Self::from_parts(model, spec, priors, key, hierarchy);
        s.cfg.kernel = None;
        Ok(s)
    }

    fn from_parts(
        model: &'a MultiScaleModel,
        spec: &MethodSpec,
        priors: &SmootherPriors,
        key: SeedKey,
        hierarchy: ParticleHierarchy,
    ) -> Self {
        let cfg = Layer1Config {
            prior: priors.theta.clone(),
            kernel: spec.kernel(),
            resampler: spec.resampler,
            layer2: Layer2Options {
                resampler: spec.resampler,
                ess_threshold: spec.ess_threshold,
                perturb_observations: true,
            },
        };
        Smoother {
            model,
            cfg,
            key,
            run: 0,
            hierarchy,
            trace: FilterTrace::default(),
        }
    }

    pub fn config_mut(&mut self) -> &mut Layer1Config {
        &mut self.cfg
    }

    pub fn hierarchy(&self) -> &ParticleHierarchy {
        &self.hierarchy
    }

    pub fn trace(&self) -> &FilterTrace {
        &self.trace
    }

    pub fn into_trace(self) -> FilterTrace {
        self.trace
    }

    fn stream(&self, t: u64) -> RngStream {
        self.key
            .stream(StreamPath::new(self.run, t, Purpose::Test, 0, 0))
    }

    /// Consume the next observation.
    pub fn step(&mut self, y: &DVector<f64>) -> Result<&StepEstimates> {
        if y.len() != self.model.dims().d_y {
            return Err(Error::structural(format!(
                "observation has length {}, model expects {}",
                y.len(),
                self.model.dims().d_y
            )));
        }
        let t = self.trace.len() as u64 + 1;
        let start = Instant::now();
        let result = layer1_step(self.model, &self.hierarchy, y, &self.stream(t), &self.cfg);
        let (next, est, diag) = match result {
            Ok(r) => r,
            Err(Error::FilterCollapse { t, .. }) => {
                return Err(Error::FilterCollapse {
                    t,
                    partial: Box::new(self.trace.clone()),
                })
            }
            Err(e) => return Err(e),
        };
        self.hierarchy = next;
        self.trace.estimates.push(est);
        self.trace.diagnostics.push(diag);
        self.trace.wall_ms.push(start.elapsed().as_secs_f64() * 1e3);
        Ok(self.trace.estimates.last().unwrap())
    }
}

/// Run a smoother over every observation in order.
pub fn run_smoother(
    model: &MultiScaleModel,
    spec: &MethodSpec,
    priors: &SmootherPriors,
    obs: &ObservationSeries,
) -> Result<FilterTrace> {
    let mut s = Smoother::new(model, spec, priors)?;
    for y in &obs.y {
        s.step(y)?;
    }
    Ok(s.into_trace())
}

/// Run each spec on the same observations.
pub fn compare_methods(
    model: &MultiScaleModel,
    specs: &[MethodSpec],
    priors: &SmootherPriors,
    obs: &ObservationSeries,
) -> Vec<Result<FilterTrace>> {
    specs
        .iter()
        .map(|spec| run_smoother(model, spec, priors, obs))
        .collect()
}
