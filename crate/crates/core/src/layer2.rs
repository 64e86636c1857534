//! Slow-state layer conditional on one parameter particle: a particle
//! filter over unscented fast filters, or an ensemble Kalman filter over
//! extended fast filters.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::layer3::{
    ekf_predict_fast, ekf_propose_slow, ekf_update, ukf_predict_fast, ukf_propose_slow, ukf_update,
    GaussianBelief, Layer3Output, SigmaPointSet,
};
use crate::model::MultiScaleModel;
use crate::numerics::{
    effective_sample_size, log_mean_exp, log_sum_exp, normalize_log_weights, resample_indices,
    standard_normal_matrix, GaussianFactor, JitterPolicy, LogWeights, Purpose, Resampler,
    RngStream,
};

/// Slow particle with its fast sigma points.
#[derive(Clone, Debug, PartialEq)]
pub struct SmcMember {
    pub x: DVector<f64>,
    pub sigma: SigmaPointSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlowParticleCloud {
    pub members: Vec<SmcMember>,
    /// Normalized weights `u`; uniform right after resampling.
    pub weights: Vec<f64>,
}

impl SlowParticleCloud {
    pub fn uniform(members: Vec<SmcMember>) -> Self {
        let j = members.len();
        SlowParticleCloud {
            members,
            weights: vec![1.0 / j as f64; j],
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Ensemble of slow states (columns of `x`) with per-member fast beliefs.
#[derive(Clone, Debug, PartialEq)]
pub struct SlowEnsemble {
    pub x: DMatrix<f64>,
    pub beliefs: Vec<GaussianBelief>,
    /// Forecast members `x̄` that the fast beliefs were last conditioned on.
    pub forecast: Option<DMatrix<f64>>,
}

impl SlowEnsemble {
    pub fn new(x: DMatrix<f64>, beliefs: Vec<GaussianBelief>) -> Result<Self> {
        if x.ncols() < 2 {
            return Err(Error::structural("an ensemble needs at least two members"));
        }
        if x.ncols() != beliefs.len() {
            return Err(Error::structural(
                "ensemble columns and fast beliefs differ in number",
            ));
        }
        Ok(SlowEnsemble {
            x,
            beliefs,
            forecast: None,
        })
    }

    pub fn len(&self) -> usize {
        self.x.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.x.ncols() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer2State {
    Cloud(SlowParticleCloud),
    Ensemble(SlowEnsemble),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Layer2Options {
    pub resampler: Resampler,
    /// Resample only when `ESS / J` drops below this fraction; `None` resamples every step.
    pub ess_threshold: Option<f64>,
    /// Draw EnKF observation perturbations; off only as a test hook.
    pub perturb_observations: bool,
}

impl Default for Layer2Options {
    fn default() -> Self {
        Layer2Options {
            resampler: Resampler::Multinomial,
            ess_threshold: None,
            perturb_observations: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Layer2Output {
    /// Updated (and, for the particle filter, resampled) state at time `t`.
    pub state: Layer2State,
    pub log_v: f64,
    pub log_u: Vec<f64>,
    /// Conditional slow estimate given this parameter particle.
    pub x_hat: DVector<f64>,
    /// Conditional fast estimate given this parameter particle.
    pub z_hat: DVector<f64>,
}

impl Layer2Output {
    fn degenerate(state: Layer2State, log_u: Vec<f64>, d_x: usize, d_z: usize) -> Self {
        Layer2Output {
            state,
            log_v: f64::NEG_INFINITY,
            log_u,
            x_hat: DVector::zeros(d_x),
            z_hat: DVector::zeros(d_z),
        }
    }

    pub fn is_degenerate(&self) -> bool {
        self.log_v == f64::NEG_INFINITY
    }
}

fn sanitize(log_u: f64) -> f64 {
    if log_u.is_nan() {
        f64::NEG_INFINITY
    } else {
        log_u
    }
}

fn ukf_member(
    m: &MultiScaleModel,
    theta: &DVector<f64>,
    member: &SmcMember,
    y: &DVector<f64>,
    stream: RngStream,
) -> Result<Layer3Output> {
    let pred = ukf_predict_fast(m, theta, &member.x, &member.sigma)?;
    let proposal = ukf_propose_slow(m, theta, &member.x, &pred, &mut stream.rng())?;
    ukf_update(m, theta, &proposal, &pred, y)
}

/// One step of the slow particle filter. `stream` carries `(run, t, i)`.
pub fn smc_slow_step(
    m: &MultiScaleModel,
    theta: &DVector<f64>,
    cloud: &SlowParticleCloud,
    y: &DVector<f64>,
    stream: &RngStream,
    opts: &Layer2Options,
) -> Result<Layer2Output> {
    let dims = m.dims();
    let jn = cloud.len();
    if jn == 0 || cloud.weights.len() != jn {
        return Err(Error::structural("particle cloud is empty or misaligned"));
    }
    let outputs: Vec<Option<Layer3Output>> = (0..jn)
        .into_par_iter()
        .map(|j| {
            ukf_member(
                m,
                theta,
                &cloud.members[j],
                y,
                stream.fork(Purpose::FastFilter, j as u64),
            )
            .ok()
        })
        .collect();
    let log_u: Vec<f64> = outputs
        .iter()
        .map(|o| o.as_ref().map_or(f64::NEG_INFINITY, |o| sanitize(o.log_u)))
        .collect();
    let joint: Vec<f64> = log_u
        .iter()
        .zip(&cloud.weights)
        .map(|(lu, w)| lu + w.ln())
        .collect();
    let log_v = log_sum_exp(&joint);
    if !log_v.is_finite() {
        return Ok(Layer2Output::degenerate(
            Layer2State::Cloud(cloud.clone()),
            log_u,
            dims.d_x,
            dims.d_z,
        ));
    }
    let (u, _) = normalize_log_weights(&LogWeights(joint))?;

    let mut x_hat = DVector::zeros(dims.d_x);
    let mut z_hat = DVector::zeros(dims.d_z);
    let mut updated = Vec::with_capacity(jn);
    for (j, out) in outputs.into_iter().enumerate() {
        match out {
            Some(o) if u[j] > 0.0 => {
                let sigma = o.sigma.expect("unscented update returns sigma points");
                x_hat += &o.x_bar * u[j];
                z_hat += sigma.mean() * u[j];
                updated.push(Some(SmcMember { x: o.x_bar, sigma }));
            }
            _ => updated.push(None),
        }
    }

    let resample = match opts.ess_threshold {
        None => true,
        Some(frac) => effective_sample_size(&u) < frac * jn as f64,
    };
    let next = if resample {
        let idx = resample_indices(
            &mut stream.fork(Purpose::SlowResample, 0).rng(),
            &u,
            jn,
            opts.resampler,
        )?;
        let members = idx
            .iter()
            .map(|&k| {
                updated[k]
                    .clone()
                    .expect("resampled members have positive weight")
            })
            .collect();
        SlowParticleCloud::uniform(members)
    } else {
        // Zero-weight members keep their old state; they can never be selected.
        let members = updated
            .into_iter()
            .zip(&cloud.members)
            .map(|(new, old)| new.unwrap_or_else(|| old.clone()))
            .collect();
        SlowParticleCloud {
            members,
            weights: u,
        }
    };
    Ok(Layer2Output {
        state: Layer2State::Cloud(next),
        log_v,
        log_u,
        x_hat,
        z_hat,
    })
}

/// Kalman gain `C(x,y) C(y)⁻¹` with `C(x,y) = X̃ Ỹᵀ / J` and
/// `C(y) = Ỹ Ỹᵀ / J + R`, solved through the `J × J` Woodbury system.
pub fn enkf_gain(
    x_anom: &DMatrix<f64>,
    y_anom: &DMatrix<f64>,
    r: &GaussianFactor,
) -> Result<DMatrix<f64>> {
    let jn = x_anom.ncols();
    if y_anom.ncols() != jn || r.dim() != y_anom.nrows() || jn == 0 {
        return Err(Error::structural("enkf_gain: inconsistent shapes"));
    }
    let inv_j = 1.0 / jn as f64;
    let w = r.solve(y_anom);
    let g = y_anom.tr_mul(&w);
    let mut inner = &g * inv_j;
    for k in 0..jn {
        inner[(k, k)] += 1.0;
    }
    let inner = GaussianFactor::new(&inner, &JitterPolicy::default())?;
    let wt = w.transpose();
    let correction = &g * inner.solve(&wt) * inv_j;
    Ok(x_anom * (wt - correction) * inv_j)
}

fn ekf_member(
    m: &MultiScaleModel,
    theta: &DVector<f64>,
    x: &DVector<f64>,
    belief: &GaussianBelief,
    y: &DVector<f64>,
    stream: RngStream,
) -> Result<Layer3Output> {
    let pred = ekf_predict_fast(m, theta, x, belief)?;
    let (x_bar, x_check) = ekf_propose_slow(m, theta, x, &pred.z_bar, &mut stream.rng())?;
    ekf_update(m, theta, &x_bar, &x_check, &pred, y)
}

fn column_mean(a: &DMatrix<f64>) -> DVector<f64> {
    a.column_mean()
}

fn center(a: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut out = a.clone();
    for mut col in out.column_iter_mut() {
        col -= mean;
    }
    out
}

/// One step of the slow ensemble Kalman filter. `stream` carries `(run, t, i)`.
pub fn enkf_slow_step(
    m: &MultiScaleModel,
    theta: &DVector<f64>,
    ens: &SlowEnsemble,
    y: &DVector<f64>,
    stream: &RngStream,
    opts: &Layer2Options,
) -> Result<Layer2Output> {
    let dims = m.dims();
    let jn = ens.len();
    if jn < 2 {
        return Err(Error::structural("an ensemble needs at least two members"));
    }
    let outputs: Vec<Option<Layer3Output>> = (0..jn)
        .into_par_iter()
        .map(|j| {
            let x = ens.x.column(j).into_owned();
            ekf_member(
                m,
                theta,
                &x,
                &ens.beliefs[j],
                y,
                stream.fork(Purpose::FastFilter, j as u64),
            )
            .ok()
        })
        .collect();
    let log_u: Vec<f64> = outputs
        .iter()
        .map(|o| o.as_ref().map_or(f64::NEG_INFINITY, |o| sanitize(o.log_u)))
        .collect();
    // One failed member invalidates the ensemble statistics for this particle.
    if outputs.iter().any(|o| o.is_none()) || log_u.iter().all(|v| *v == f64::NEG_INFINITY) {
        return Ok(Layer2Output::degenerate(
            Layer2State::Ensemble(ens.clone()),
            log_u,
            dims.d_x,
            dims.d_z,
        ));
    }
    let log_v = log_mean_exp(&log_u);
    let outputs: Vec<Layer3Output> = outputs.into_iter().map(Option::unwrap).collect();

    let x_bar = DMatrix::from_columns(&outputs.iter().map(|o| o.x_bar.clone()).collect::<Vec<_>>());
    let y_ens =
        DMatrix::from_columns(&outputs.iter().map(|o| o.y_pred.clone()).collect::<Vec<_>>());
    let x_anom = center(&x_bar, &column_mean(&x_bar));
    let y_anom = center(&y_ens, &column_mean(&y_ens));
    let gain = enkf_gain(&x_anom, &y_anom, m.obs_density())?;

    let mut innov = -y_ens;
    for mut col in innov.column_iter_mut() {
        col += y;
    }
    if opts.perturb_observations {
        let u = standard_normal_matrix(
            &mut stream.fork(Purpose::EnsemblePerturbation, 0).rng(),
            dims.d_y,
            jn,
        );
        innov += m.obs_density().lower() * u;
    }
    let x_hat_ens = &x_bar + gain * innov;
    if x_hat_ens.iter().any(|v| !v.is_finite()) {
        return Ok(Layer2Output::degenerate(
            Layer2State::Ensemble(ens.clone()),
            log_u,
            dims.d_x,
            dims.d_z,
        ));
    }

    let x_hat = column_mean(&x_hat_ens);
    let beliefs: Vec<GaussianBelief> = outputs.into_iter().map(|o| o.belief).collect();
    let mut z_hat = DVector::zeros(dims.d_z);
    for b in &beliefs {
        z_hat += &b.mean;
    }
    z_hat /= jn as f64;
    Ok(Layer2Output {
        state: Layer2State::Ensemble(SlowEnsemble {
            x: x_hat_ens,
            beliefs,
            forecast: Some(x_bar),
        }),
        log_v,
        log_u,
        x_hat,
        z_hat,
    })
}
