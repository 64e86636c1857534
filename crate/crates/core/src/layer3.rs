//! Gaussian filters over the fast states, conditional on `θ` and the slow
//! path: an unscented bank (sigma points regenerated at every micro step)
//! and an extended filter with analytic Jacobians. Both also propose the
//! next slow state and return the layer-2 log-weight.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{check_finite, MultiScaleModel};
use crate::numerics::{
    draw_gaussian, log_sum_exp, psd_factor, sparse_congruence, standard_normal_matrix, symmetrize,
    weighted_covariance, weighted_cross_covariance, weighted_mean, GaussianFactor, JitterPolicy,
    SparseRows,
};

/// Mean and covariance of a fast-state Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::structural("belief covariance does not match mean"));
        }
        let scale = cov.amax().max(f64::MIN_POSITIVE);
        if (&cov - cov.transpose()).amax() > 1e-12 * scale {
            return Err(Error::structural("belief covariance is not symmetric"));
        }
        Ok(GaussianBelief { mean, cov })
    }

    pub fn isotropic(mean: DVector<f64>, variance: f64) -> Self {
        let d = mean.len();
        GaussianBelief {
            mean,
            cov: DMatrix::identity(d, d) * variance,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Unscented point set with `L = 2d + 1` columns ordered centre, `+S`, `−S`.
#[derive(Clone, Debug, PartialEq)]
pub struct SigmaPointSet {
    points: DMatrix<f64>,
    weights: Vec<f64>,
}

/// `λ_0 = 1/(1+d)`, `λ_l = (1−λ_0)/(2d)`.
pub fn sigma_weights(d: usize) -> Vec<f64> {
    let l0 = 1.0 / (1.0 + d as f64);
    let rest = (1.0 - l0) / (2.0 * d as f64);
    let mut w = vec![rest; 2 * d + 1];
    w[0] = l0;
    w
}

impl SigmaPointSet {
    pub fn points(&self) -> &DMatrix<f64> {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.nrows()
    }

    pub fn mean(&self) -> DVector<f64> {
        weighted_mean(&self.points, &self.weights)
    }

    /// Weighted moments of the points.
    pub fn moments(&self) -> GaussianBelief {
        let mean = self.mean();
        let cov = weighted_covariance(&self.points, &self.weights, &mean, None);
        GaussianBelief { mean, cov }
    }
}

pub fn make_sigma_points(belief: &GaussianBelief) -> Result<SigmaPointSet> {
    let d = belief.dim();
    if d == 0 {
        return Err(Error::structural("sigma points need dimension >= 1"));
    }
    let weights = sigma_weights(d);
    // d / (1 − λ_0) = d + 1.
    let scaled = &belief.cov * (d as f64 + 1.0);
    let s = psd_factor(&scaled, &JitterPolicy::default())?.lower;
    let mut points = DMatrix::zeros(d, 2 * d + 1);
    points.column_mut(0).copy_from(&belief.mean);
    for k in 0..d {
        let col = s.column(k);
        points.column_mut(1 + k).copy_from(&(&belief.mean + col));
        points
            .column_mut(1 + d + k)
            .copy_from(&(&belief.mean - col));
    }
    Ok(SigmaPointSet { points, weights })
}

/// What a layer-3 filter hands back to layer 2 for one `(i, j)` pair.
#[derive(Clone, Debug)]
pub struct Layer3Output {
    pub x_bar: DVector<f64>,
    pub log_u: f64,
    pub belief: GaussianBelief,
    /// Refreshed points from the updated belief (unscented filter only).
    pub sigma: Option<SigmaPointSet>,
    /// `ŷ` for the unscented filter, `ỹ = l(ž, x̄)` for the extended one.
    pub y_pred: DVector<f64>,
}

/// Predictive quantities over one macro block.
#[derive(Clone, Debug)]
pub struct UkfPrediction {
    /// `(ž_q, Č_q)` for `q = 1 … h`.
    pub beliefs: Vec<GaussianBelief>,
    /// Points regenerated from the last predictive belief.
    pub sigma: SigmaPointSet,
    /// Column `l` is the block average of the `l`-th regenerated point.
    pub z_bar: DMatrix<f64>,
}

impl UkfPrediction {
    pub fn last(&self) -> &GaussianBelief {
        self.beliefs.last().expect("h >= 1")
    }
}

fn propagate_points(
    m: &MultiScaleModel,
    theta: &DVector<f64>,
    forcing: &DVector<f64>,
    points: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(points.nrows(), points.ncols());
    for l in 0..points.ncols() {
        let z = m.micro_step_forced(theta, forcing, &points.column(l).into_owned())?;
        out.column_mut(l).copy_from(&z);
    }
    Ok(out)
}

pub fn ukf_predict_fast(
    m: &MultiScaleModel,
    theta: &DVector<f64>,
    x_prev: &DVector<f64>,
    sp: &SigmaPointSet,
) -> Result<UkfPrediction> {
    let h = m.h();
    let forcing = m.dynamics().fast_forcing(x_prev, theta);
    let mut current = sp.clone();
    let mut beliefs = Vec::with_capacity(h);
    let mut acc = DMatrix::zeros(sp.dim(), sp.len());
    for _ in 0..h {
        let moved = propagate_points(m, theta, &forcing, &current.points)?;
        let mean = weighted_mean(&moved, &current.weights);
        let cov = weighted_covariance(&moved, &current.weights, &mean, Some(m.fast_noise_cov()));
        let belief = GaussianBelief { mean, cov };
        current = make_sigma_points(&belief)?;
        acc += &current.points;
        beliefs.push(belief);
    }
    Ok(UkfPrediction {
        beliefs,
        sigma: current,
        z_bar: acc / h as f64,
    })
}

/// Slow-state sigma points, their moments and the sampled proposal.
#[derive(Clone, Debug)]
pub struct SlowProposal {
    pub sample: DVector<f64>,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Column `l` is `macro_step(x_prev, z̄^l)`.
    pub points: DMatrix<f64>,
}

pub fn ukf_propose_slow<R: Rng + ?Sized>(
    m: &MultiScaleModel,
    theta: &DVector<f64>,
    x_prev: &DVector<f64>,
    pred: &UkfPrediction,
    rng: &mut R,
) -> Result<SlowProposal> {
    let d_x = m.dims().d_x;
    let weights = pred.sigma.weights();
    let mut points = DMatrix::zeros(d_x, weights.len());
    for l in 0..weights.len() {
        let x = m.macro_step(theta, x_prev, &pred.z_bar.column(l).into_owned(), None)?;
        points.column_mut(l).copy_from(&x);
    }
    let mean = weighted_mean(&points, weights);
    let cov = weighted_covariance(&points, weights, &mean, Some(m.slow_noise_cov()));
    let factor = psd_factor(&cov, &JitterPolicy::default())?;
    let sample = draw_gaussian(rng, &mean, &factor.lower);
    check_finite(&sample, "slow proposal")?;
    Ok(SlowProposal {
        sample,
        mean,
        cov,
        points,
    })
}

fn slow_density(m: &MultiScaleModel) -> Result<&GaussianFactor> {
    m.slow_noise_density().ok_or(Error::NumericalDegeneracy {
        context: "slow transition density",
        detail: "Δ_x Q_x Q_xᵀ is singular, so p(x̄ | x_{t−1}) has no density".into(),
    })
}

/// Gaussian conditioning with a factored innovation covariance. Returns the
/// updated belief given `Č`, `C(z,y)` and `C(y)`.
fn condition(
    prior: &GaussianBelief,
    cross: &DMatrix<f64>,
    innovation_cov: &DMatrix<f64>,
    residual: &DVector<f64>,
) -> Result<GaussianBelief> {
    let s = GaussianFactor::new(innovation_cov, &JitterPolicy::default())?;
    // X = C(y)⁻¹ C(z,y)ᵀ, so K = Xᵀ.
    let x = s.solve(&cross.transpose());
    let mean = &prior.mean + x.tr_mul(residual);
    let mut cov = &prior.cov - cross * &x;
    symmetrize(&mut cov);
    check_finite(&mean, "fast update")?;
    Ok(GaussianBelief { mean, cov })
}

pub fn ukf_update(
    m: &MultiScaleModel,
    theta: &DVector<f64>,
    proposal: &SlowProposal,
    pred: &UkfPrediction,
    y: &DVector<f64>,
) -> Result<Layer3Output> {
    let sp = &pred.sigma;
    let weights = sp.weights();
    let x_bar = &proposal.sample;
    let d_y = m.dims().d_y;
    let mut y_points = DMatrix::zeros(d_y, weights.len());
    for l in 0..weights.len() {
        let yl = m.observe(&sp.points.column(l).into_owned(), x_bar, theta);
        y_points.column_mut(l).copy_from(&yl);
    }
    let y_hat = weighted_mean(&y_points, weights);
    let c_y = weighted_covariance(&y_points, weights, &y_hat, Some(m.r()));
    let z_check = sp.mean();
    let c_zy = weighted_cross_covariance(&sp.points, &z_check, &y_points, &y_hat, weights);

    let slow = slow_density(m)?;
    let terms: Vec<f64> = (0..weights.len())
        .map(|l| {
            weights[l].ln()
                + m.obs_density()
                    .log_density(y, &y_points.column(l).into_owned())
                + slow.log_density(x_bar, &proposal.points.column(l).into_owned())
        })
        .collect();
    let log_u = log_sum_exp(&terms);

    let prior = GaussianBelief {
        mean: z_check,
        cov: pred.last().cov.clone(),
    };
    let belief = condition(&prior, &c_zy, &c_y, &(y - &y_hat))?;
    let sigma = make_sigma_points(&belief)?;
    Ok(Layer3Output {
        x_bar: x_bar.clone(),
        log_u,
        belief,
        sigma: Some(sigma),
        y_pred: y_hat,
    })
}

/// Linearized prediction over one macro block.
#[derive(Clone, Debug)]
pub struct EkfPrediction {
    /// `(ž_h, Č_h)` at the end of the block.
    pub belief: GaussianBelief,
    /// `(1/h) Σ_q ž_q`.
    pub z_bar: DVector<f64>,
}

impl EkfPrediction {
    pub fn last(&self) -> &GaussianBelief {
        &self.belief
    }
}

pub fn ekf_predict_fast(
    m: &MultiScaleModel,
    theta: &DVector<f64>,
    x_prev: &DVector<f64>,
    belief: &GaussianBelief,
) -> Result<EkfPrediction> {
    let h = m.h();
    let forcing = m.dynamics().fast_forcing(x_prev, theta);
    let mut mean = belief.mean.clone();
    let mut cov = belief.cov.clone();
    let mut sum = DVector::zeros(mean.len());
    for _ in 0..h {
        let j = m.fast_jacobian_sparse(&mean, theta);
        mean = m.micro_step_forced(theta, &forcing, &mean)?;
        cov = sparse_congruence(&j, &cov);
        cov += m.fast_noise_cov().matrix();
        sum += &mean;
    }
    Ok(EkfPrediction {
        belief: GaussianBelief { mean, cov },
        z_bar: sum / h as f64,
    })
}

/// `x̌ = macro_step(x_prev, z̄)` and a draw from `N(x̌, Δ_x Q_x Q_xᵀ)`.
pub fn ekf_propose_slow<R: Rng + ?Sized>(
    m: &MultiScaleModel,
    theta: &DVector<f64>,
    x_prev: &DVector<f64>,
    z_bar: &DVector<f64>,
    rng: &mut R,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let mean = m.macro_step(theta, x_prev, z_bar, None)?;
    let u = standard_normal_matrix(rng, mean.len(), 1)
        .column(0)
        .into_owned();
    let sample = &mean + m.slow_noise_scale() * u;
    check_finite(&sample, "slow proposal")?;
    Ok((sample, mean))
}

pub fn ekf_update(
    m: &MultiScaleModel,
    theta: &DVector<f64>,
    x_bar: &DVector<f64>,
    x_check: &DVector<f64>,
    pred: &EkfPrediction,
    y: &DVector<f64>,
) -> Result<Layer3Output> {
    let prior = pred.last();
    let y_pred = m.observe(&prior.mean, x_bar, theta);
    let h = m.observation_jacobian_sparse(&prior.mean, x_bar, theta);
    let log_u =
        m.obs_density().log_density(y, &y_pred) + slow_density(m)?.log_density(x_bar, x_check);
    let resid = y - &y_pred;
    let belief = match m.r_diagonal() {
        Some(r) => condition_sequential(prior, &h, r, &resid)?,
        None => {
            // H Č and S = H Č Hᵀ + R; Č symmetric so (H Č)ᵀ = Č Hᵀ.
            let c_ht = h.mul_transposed_by(&prior.cov);
            let mut s = h.mul(&c_ht);
            symmetrize(&mut s);
            s += m.r().matrix();
            condition(prior, &c_ht, &s, &resid)?
        }
    };
    Ok(Layer3Output {
        x_bar: x_bar.clone(),
        log_u,
        belief,
        sigma: None,
        y_pred,
    })
}

/// Linear-Gaussian conditioning with diagonal `R`, one observation row at
/// a time. Rows of `H` without entries carry no information about `z`.
fn condition_sequential(
    prior: &GaussianBelief,
    h: &SparseRows,
    r: &[f64],
    residual: &DVector<f64>,
) -> Result<GaussianBelief> {
    let d = prior.dim();
    let mut mean = prior.mean.clone();
    let mut cov = prior.cov.clone();
    let mut c_h = DVector::zeros(d);
    for k in 0..h.nrows() {
        if h.row(k).next().is_none() {
            continue;
        }
        c_h.fill(0.0);
        for (c, v) in h.row(k) {
            c_h.axpy(v, &cov.column(c), 1.0);
        }
        let s = h.row(k).map(|(c, v)| v * c_h[c]).sum::<f64>() + r[k];
        // The residual is taken at the prior mean, so shift it by the
        // rows already absorbed.
        let shift: f64 = h.row(k).map(|(c, v)| v * (mean[c] - prior.mean[c])).sum();
        let innov = residual[k] - shift;
        mean.axpy(innov / s, &c_h, 1.0);
        cov.ger(-1.0 / s, &c_h, &c_h, 1.0);
    }
    symmetrize(&mut cov);
    check_finite(&mean, "fast update")?;
    Ok(GaussianBelief { mean, cov })
}
