//! Twin-experiment data: deterministic spin-up, stochastic ground truth,
//! noisy observations.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{fast_average, MultiScaleModel, StatePair};
use crate::numerics::{Purpose, RngStream, StreamPath};

/// Offset added to coordinate 0 of the spin-up starting point.
pub const SPINUP_PERTURBATION: f64 = 0.01;
pub const SPINUP_LEVEL: f64 = 8.0;

#[derive(Clone, Debug, PartialEq)]
pub struct TruthRecord {
    /// `x_0 … x_T`.
    pub x_path: Vec<DVector<f64>>,
    /// `z_0 … z_{hT}`.
    pub z_path: Vec<DVector<f64>>,
    /// `z̄_1 … z̄_T`.
    pub z_bar_path: Vec<DVector<f64>>,
    pub theta: DVector<f64>,
    pub h: usize,
    pub stream: RngStream,
}

impl TruthRecord {
    pub fn steps(&self) -> usize {
        self.z_bar_path.len()
    }

    /// Fast state at macro time `t`, i.e. `z_{ht}`.
    pub fn z_at(&self, t: usize) -> &DVector<f64> {
        &self.z_path[self.h * t]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSeries {
    /// `y[k]` is the observation at macro time `k + 1`.
    pub y: Vec<DVector<f64>>,
}

impl ObservationSeries {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Slow coordinates at 8, fast coordinates at the model's start level,
/// coordinate 0 of each raised by 0.01.
pub fn spinup_start(m: &MultiScaleModel, theta: &DVector<f64>) -> StatePair {
    let d = m.dims();
    let mut x = DVector::from_element(d.d_x, SPINUP_LEVEL);
    let mut z = DVector::from_element(d.d_z, m.dynamics().fast_start_level(theta));
    x[0] += SPINUP_PERTURBATION;
    z[0] += SPINUP_PERTURBATION;
    StatePair { x, z }
}

fn locate_blowup(e: Error, t: usize, dt_x: f64) -> Error {
    match e {
        Error::Divergence {
            location,
            coordinate,
        } => Error::Divergence {
            location: format!("{location} at macro step {t} (time {:.4})", t as f64 * dt_x),
            coordinate,
        },
        other => other,
    }
}

/// Zero-noise micro-macro run of `duration` time units from the fixed
/// starting point.
pub fn spinup_init(m: &MultiScaleModel, theta: &DVector<f64>, duration: f64) -> Result<StatePair> {
    if !(duration >= 0.0) {
        return Err(Error::structural("spin-up duration must be non-negative"));
    }
    let steps = (duration / m.dt_x()).round() as usize;
    let mut state = spinup_start(m, theta);
    let mut block = Vec::with_capacity(m.h());
    for t in 1..=steps {
        let forcing = m.dynamics().fast_forcing(&state.x, theta);
        block.clear();
        for _ in 0..m.h() {
            let z = m
                .micro_step_forced(theta, &forcing, &state.z)
                .map_err(|e| locate_blowup(e, t, m.dt_x()))?;
            block.push(z.clone());
            state.z = z;
        }
        let z_bar = fast_average(&block, m.h())?;
        state.x = m
            .macro_step(theta, &state.x, &z_bar, None)
            .map_err(|e| locate_blowup(e, t, m.dt_x()))?;
    }
    Ok(state)
}

/// Simulate `steps` macro steps with fresh process noise; the draws for
/// step `t` come from `stream` re-pathed to `(t, Truth)`.
pub fn generate_truth(
    m: &MultiScaleModel,
    theta: &DVector<f64>,
    init: &StatePair,
    steps: usize,
    stream: &RngStream,
) -> Result<TruthRecord> {
    let d = m.dims();
    let h = m.h();
    let base = stream.path();
    let mut x_path = Vec::with_capacity(steps + 1);
    let mut z_path = Vec::with_capacity(h * steps + 1);
    let mut z_bar_path = Vec::with_capacity(steps);
    x_path.push(init.x.clone());
    z_path.push(init.z.clone());
    for t in 1..=steps {
        let mut rng = stream
            .with_path(StreamPath::new(
                base.run,
                t as u64,
                Purpose::Truth,
                base.i,
                base.j,
            ))
            .rng();
        let x_prev = x_path[t - 1].clone();
        let mut z = z_path.last().unwrap().clone();
        let mut sum = DVector::zeros(d.d_z);
        for _ in 0..h {
            let w = DVector::from_fn(d.d_z, |_, _| rng.sample::<f64, _>(StandardNormal));
            z = m
                .micro_step(theta, &x_prev, &z, Some(&w))
                .map_err(|e| locate_blowup(e, t, m.dt_x()))?;
            sum += &z;
            z_path.push(z.clone());
        }
        let z_bar = sum / h as f64;
        let v = DVector::from_fn(d.d_x, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = m
            .macro_step(theta, &x_prev, &z_bar, Some(&v))
            .map_err(|e| locate_blowup(e, t, m.dt_x()))?;
        x_path.push(x);
        z_bar_path.push(z_bar);
    }
    Ok(TruthRecord {
        x_path,
        z_path,
        z_bar_path,
        theta: theta.clone(),
        h,
        stream: *stream,
    })
}

/// `y_t = l(z_{ht}, x_t, θ) + r_t` with `r_t ~ N(0, R)`.
pub fn generate_observations(
    truth: &TruthRecord,
    m: &MultiScaleModel,
    stream: &RngStream,
) -> Result<ObservationSeries> {
    if truth.h != m.h() {
        return Err(Error::structural(
            "truth record was generated with a different h",
        ));
    }
    let d_y = m.dims().d_y;
    let lower = m.obs_density().lower();
    let base = stream.path();
    let y = (1..=truth.steps())
        .map(|t| {
            let mut rng = stream
                .with_path(StreamPath::new(
                    base.run,
                    t as u64,
                    Purpose::Observation,
                    base.i,
                    base.j,
                ))
                .rng();
            let u = DVector::from_fn(d_y, |_, _| rng.sample::<f64, _>(StandardNormal));
            m.observe(truth.z_at(t), &truth.x_path[t], &truth.theta) + lower * u
        })
        .collect();
    Ok(ObservationSeries { y })
}
