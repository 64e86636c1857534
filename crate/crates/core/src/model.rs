//! Multi-scale state-space models: the micro-macro Euler-Maruyama scheme,
//! the observation map, and two concrete instances (stochastic two-scale
//! Lorenz 96 and a linear-Gaussian test model).

use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::numerics::{GaussianFactor, JitterPolicy, PsdMatrix, SparseRows};

/// Drift functions, observation map and their Jacobians for one model family.
pub trait Dynamics: Send + Sync + Debug {
    /// `f_x(x, θ)`.
    fn slow_drift(&self, x: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64>;
    /// `g_x(z̄, θ)`.
    fn slow_coupling(&self, z_bar: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64>;
    /// `f_z(x, θ)`.
    fn fast_forcing(&self, x: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64>;
    /// `g_z(z, θ)`.
    fn fast_drift(&self, z: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64>;
    /// `∂g_z/∂z`.
    fn fast_drift_jacobian(&self, z: &DVector<f64>, theta: &DVector<f64>) -> DMatrix<f64>;
    /// `∂g_z/∂z` in compressed-row form.
    fn fast_drift_jacobian_sparse(&self, z: &DVector<f64>, theta: &DVector<f64>) -> SparseRows {
        SparseRows::from_dense(&self.fast_drift_jacobian(z, theta))
    }
    /// `l(z, x, θ)`.
    fn observe(&self, z: &DVector<f64>, x: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64>;
    /// `∂l/∂z`.
    fn observation_jacobian(
        &self,
        z: &DVector<f64>,
        x: &DVector<f64>,
        theta: &DVector<f64>,
    ) -> DMatrix<f64>;
    /// `∂l/∂z` in compressed-row form.
    fn observation_jacobian_sparse(
        &self,
        z: &DVector<f64>,
        x: &DVector<f64>,
        theta: &DVector<f64>,
    ) -> SparseRows {
        SparseRows::from_dense(&self.observation_jacobian(z, x, theta))
    }

    /// Level of the fast coordinates at the spin-up starting point.
    fn fast_start_level(&self, _theta: &DVector<f64>) -> f64 {
        8.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub d_x: usize,
    pub d_z: usize,
    pub d_theta: usize,
    pub d_y: usize,
}

/// Slow and fast state at matching times.
#[derive(Clone, Debug, PartialEq)]
pub struct StatePair {
    pub x: DVector<f64>,
    pub z: DVector<f64>,
}

impl StatePair {
    pub fn new(x: DVector<f64>, z: DVector<f64>) -> Result<Self> {
        check_finite(&x, "state pair (x)")?;
        check_finite(&z, "state pair (z)")?;
        Ok(StatePair { x, z })
    }
}

pub(crate) fn check_finite(v: &DVector<f64>, location: &str) -> Result<()> {
    match v.iter().position(|a| !a.is_finite()) {
        None => Ok(()),
        Some(coordinate) => Err(Error::Divergence {
            location: location.to_string(),
            coordinate,
        }),
    }
}

/// Problem definition shared read-only by every layer.
#[derive(Clone, Debug)]
pub struct MultiScaleModel {
    dims: Dims,
    dt_x: f64,
    dt_z: f64,
    h: usize,
    q_x: PsdMatrix,
    q_z: PsdMatrix,
    r: PsdMatrix,
    dynamics: Arc<dyn Dynamics>,
    slow_noise_scale: DMatrix<f64>,
    fast_noise_scale: DMatrix<f64>,
    slow_noise_cov: PsdMatrix,
    fast_noise_cov: PsdMatrix,
    slow_noise_density: Option<GaussianFactor>,
    obs_density: GaussianFactor,
    /// Diagonal of `R` when `R` has no off-diagonal entries.
    r_diagonal: Option<Vec<f64>>,
}

/// Noise and step configuration common to every model family.
#[derive(Clone, Debug)]
pub struct ModelNoise {
    pub dt_x: f64,
    pub dt_z: f64,
    pub q_x: PsdMatrix,
    pub q_z: PsdMatrix,
    pub r: PsdMatrix,
}

impl MultiScaleModel {
    pub fn new(dims: Dims, noise: ModelNoise, dynamics: Arc<dyn Dynamics>) -> Result<Self> {
        let ModelNoise {
            dt_x,
            dt_z,
            q_x,
            q_z,
            r,
        } = noise;
        if dims.d_x == 0 || dims.d_z == 0 || dims.d_y == 0 {
            return Err(Error::structural("model dimensions must be positive"));
        }
        if !(dt_x > 0.0 && dt_z > 0.0) || !dt_x.is_finite() {
            return Err(Error::structural("integration steps must be positive"));
        }
        let ratio = dt_x / dt_z;
        let h = ratio.round();
        if h < 1.0 || (h - ratio).abs() > 1e-9 * ratio {
            return Err(Error::structural(format!(
                "dt_x / dt_z = {ratio} is not a positive integer"
            )));
        }
        if q_x.dim() != dims.d_x || q_z.dim() != dims.d_z || r.dim() != dims.d_y {
            return Err(Error::structural(
                "noise matrix sizes do not match dimensions",
            ));
        }
        let obs_density = GaussianFactor::new(r.matrix(), &JitterPolicy::none())
            .map_err(|_| Error::structural("observation covariance R must be positive definite"))?;
        let slow_noise_scale = q_x.matrix() * dt_x.sqrt();
        let fast_noise_scale = q_z.matrix() * dt_z.sqrt();
        let slow_noise_cov = PsdMatrix::new(&slow_noise_scale * slow_noise_scale.transpose())?;
        let fast_noise_cov = PsdMatrix::new(&fast_noise_scale * fast_noise_scale.transpose())?;
        let slow_noise_density =
            GaussianFactor::new(slow_noise_cov.matrix(), &JitterPolicy::none()).ok();
        let rm = r.matrix();
        let off_diagonal =
            (0..rm.ncols()).any(|c| (0..rm.nrows()).any(|k| k != c && rm[(k, c)] != 0.0));
        let r_diagonal = (!off_diagonal).then(|| rm.diagonal().iter().copied().collect());
        Ok(MultiScaleModel {
            dims,
            dt_x,
            dt_z,
            h: h as usize,
            q_x,
            q_z,
            r,
            dynamics,
            slow_noise_scale,
            fast_noise_scale,
            slow_noise_cov,
            fast_noise_cov,
            slow_noise_density,
            obs_density,
            r_diagonal,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn dt_x(&self) -> f64 {
        self.dt_x
    }

    pub fn dt_z(&self) -> f64 {
        self.dt_z
    }

    /// Micro steps per macro step.
    pub fn h(&self) -> usize {
        self.h
    }

    pub fn q_x(&self) -> &PsdMatrix {
        &self.q_x
    }

    pub fn q_z(&self) -> &PsdMatrix {
        &self.q_z
    }

    pub fn r(&self) -> &PsdMatrix {
        &self.r
    }

    pub fn dynamics(&self) -> &dyn Dynamics {
        self.dynamics.as_ref()
    }

    /// `√Δ_x Q_x`, the map from standard normal noise to the slow increment.
    pub fn slow_noise_scale(&self) -> &DMatrix<f64> {
        &self.slow_noise_scale
    }

    pub fn fast_noise_scale(&self) -> &DMatrix<f64> {
        &self.fast_noise_scale
    }

    /// Covariance of the slow increment noise, `Δ_x Q_x Q_xᵀ`.
    pub fn slow_noise_cov(&self) -> &PsdMatrix {
        &self.slow_noise_cov
    }

    pub fn fast_noise_cov(&self) -> &PsdMatrix {
        &self.fast_noise_cov
    }

    /// Factored slow noise covariance; `None` when it is singular.
    pub fn slow_noise_density(&self) -> Option<&GaussianFactor> {
        self.slow_noise_density.as_ref()
    }

    pub fn obs_density(&self) -> &GaussianFactor {
        &self.obs_density
    }

    /// Variances of the observation noise when `R` is diagonal.
    pub fn r_diagonal(&self) -> Option<&[f64]> {
        self.r_diagonal.as_deref()
    }

    /// Same model with a different observation covariance.
    pub fn with_observation_noise(&self, r: PsdMatrix) -> Result<Self> {
        MultiScaleModel::new(
            self.dims,
            ModelNoise {
                dt_x: self.dt_x,
                dt_z: self.dt_z,
                q_x: self.q_x.clone(),
                q_z: self.q_z.clone(),
                r,
            },
            self.dynamics.clone(),
        )
    }

    fn check_theta(&self, theta: &DVector<f64>) -> Result<()> {
        if theta.len() != self.dims.d_theta {
            return Err(Error::structural(format!(
                "theta has {} entries, model expects {}",
                theta.len(),
                self.dims.d_theta
            )));
        }
        Ok(())
    }

    fn check_len(&self, v: &DVector<f64>, n: usize, what: &str) -> Result<()> {
        if v.len() != n {
            return Err(Error::structural(format!(
                "{what} has length {}, expected {n}",
                v.len()
            )));
        }
        Ok(())
    }

    /// `z + Δ_z (f_z(x_anchor) + g_z(z)) + √Δ_z Q_z w`.
    pub fn micro_step(
        &self,
        theta: &DVector<f64>,
        x_anchor: &DVector<f64>,
        z_prev: &DVector<f64>,
        noise: Option<&DVector<f64>>,
    ) -> Result<DVector<f64>> {
        self.check_theta(theta)?;
        self.check_len(x_anchor, self.dims.d_x, "x_anchor")?;
        let forcing = self.dynamics.fast_forcing(x_anchor, theta);
        let mut z = self.micro_step_forced(theta, &forcing, z_prev)?;
        if let Some(w) = noise {
            self.check_len(w, self.dims.d_z, "fast noise")?;
            z += &self.fast_noise_scale * w;
            check_finite(&z, "micro step")?;
        }
        Ok(z)
    }

    /// Deterministic micro step with a precomputed `f_z(x_anchor, θ)`.
    pub fn micro_step_forced(
        &self,
        theta: &DVector<f64>,
        forcing: &DVector<f64>,
        z_prev: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        self.check_len(z_prev, self.dims.d_z, "z_prev")?;
        let mut z = self.dynamics.fast_drift(z_prev, theta);
        z += forcing;
        z *= self.dt_z;
        z += z_prev;
        check_finite(&z, "micro step")?;
        Ok(z)
    }

    /// `x + Δ_x (f_x(x) + g_x(z̄)) + √Δ_x Q_x v`.
    pub fn macro_step(
        &self,
        theta: &DVector<f64>,
        x_prev: &DVector<f64>,
        z_bar: &DVector<f64>,
        noise: Option<&DVector<f64>>,
    ) -> Result<DVector<f64>> {
        self.check_theta(theta)?;
        self.check_len(x_prev, self.dims.d_x, "x_prev")?;
        self.check_len(z_bar, self.dims.d_z, "z_bar")?;
        let mut x = self.dynamics.slow_drift(x_prev, theta);
        x += self.dynamics.slow_coupling(z_bar, theta);
        x *= self.dt_x;
        x += x_prev;
        if let Some(v) = noise {
            self.check_len(v, self.dims.d_x, "slow noise")?;
            x += &self.slow_noise_scale * v;
        }
        check_finite(&x, "macro step")?;
        Ok(x)
    }

    /// `J_z = I + Δ_z ∂g_z/∂z`, the Jacobian of the deterministic micro step.
    pub fn fast_jacobian(&self, z: &DVector<f64>, theta: &DVector<f64>) -> DMatrix<f64> {
        let mut j = self.dynamics.fast_drift_jacobian(z, theta) * self.dt_z;
        for k in 0..self.dims.d_z {
            j[(k, k)] += 1.0;
        }
        j
    }

    /// `J_z` in compressed-row form.
    pub fn fast_jacobian_sparse(&self, z: &DVector<f64>, theta: &DVector<f64>) -> SparseRows {
        self.dynamics
            .fast_drift_jacobian_sparse(z, theta)
            .identity_plus(self.dt_z)
    }

    pub fn observe(
        &self,
        z: &DVector<f64>,
        x: &DVector<f64>,
        theta: &DVector<f64>,
    ) -> DVector<f64> {
        self.dynamics.observe(z, x, theta)
    }

    pub fn observation_jacobian(
        &self,
        z: &DVector<f64>,
        x: &DVector<f64>,
        theta: &DVector<f64>,
    ) -> DMatrix<f64> {
        self.dynamics.observation_jacobian(z, x, theta)
    }

    pub fn observation_jacobian_sparse(
        &self,
        z: &DVector<f64>,
        x: &DVector<f64>,
        theta: &DVector<f64>,
    ) -> SparseRows {
        self.dynamics.observation_jacobian_sparse(z, x, theta)
    }
}

/// Coordinate-wise mean of one macro block of fast states.
pub fn fast_average(z_path: &[DVector<f64>], h: usize) -> Result<DVector<f64>> {
    if z_path.len() != h || h == 0 {
        return Err(Error::structural(format!(
            "fast average needs {h} states, got {}",
            z_path.len()
        )));
    }
    let mut acc = DVector::zeros(z_path[0].len());
    for z in z_path {
        if z.len() != acc.len() {
            return Err(Error::structural("fast states of different dimension"));
        }
        acc += z;
    }
    Ok(acc / h as f64)
}

/// Two-scale Lorenz 96 with `θ = (F, H, C, B)` and cyclic indices.
#[derive(Clone, Debug)]
pub struct LorenzDynamics {
    d_x: usize,
    r_ratio: usize,
}

impl LorenzDynamics {
    pub fn new(d_x: usize, r_ratio: usize) -> Result<Self> {
        if d_x < 1 || r_ratio < 1 {
            return Err(Error::structural("Lorenz dimensions must be positive"));
        }
        Ok(LorenzDynamics { d_x, r_ratio })
    }

    pub fn d_z(&self) -> usize {
        self.d_x * self.r_ratio
    }
}

#[inline]
fn wrap(i: isize, n: usize) -> usize {
    i.rem_euclid(n as isize) as usize
}

fn unpack(theta: &DVector<f64>) -> (f64, f64, f64, f64) {
    (theta[0], theta[1], theta[2], theta[3])
}

impl Dynamics for LorenzDynamics {
    fn slow_drift(&self, x: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
        let (f, ..) = unpack(theta);
        let n = x.len();
        DVector::from_fn(n, |j, _| {
            let j = j as isize;
            -x[wrap(j - 1, n)] * (x[wrap(j - 2, n)] - x[wrap(j + 1, n)]) - x[j as usize] + f
        })
    }

    fn slow_coupling(&self, z_bar: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
        let (_, h, c, b) = unpack(theta);
        let k = h * c / b;
        let r = self.r_ratio;
        DVector::from_fn(self.d_x, |j, _| -k * z_bar.rows(j * r, r).sum())
    }

    fn fast_forcing(&self, x: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
        let (_, h, c, b) = unpack(theta);
        let k = h * c / b;
        DVector::from_fn(self.d_z(), |l, _| k * x[l / self.r_ratio])
    }

    fn fast_drift(&self, z: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
        let (f, _, c, b) = unpack(theta);
        let n = z.len();
        let cb = c * b;
        let cf_b = c * f / b;
        let zs = z.as_slice();
        let mut out = DVector::zeros(n);
        for l in 0..n {
            let l1 = if l + 1 == n { 0 } else { l + 1 };
            let l2 = if l1 + 1 == n { 0 } else { l1 + 1 };
            let lm = if l == 0 { n - 1 } else { l - 1 };
            out[l] = -cb * zs[l1] * (zs[l2] - zs[lm]) - c * zs[l] + cf_b;
        }
        out
    }

    fn fast_drift_jacobian(&self, z: &DVector<f64>, theta: &DVector<f64>) -> DMatrix<f64> {
        self.fast_drift_jacobian_sparse(z, theta).to_dense()
    }

    fn fast_drift_jacobian_sparse(&self, z: &DVector<f64>, theta: &DVector<f64>) -> SparseRows {
        let (_, _, c, b) = unpack(theta);
        let n = z.len();
        let cb = c * b;
        let mut j = SparseRows::with_capacity(n, n, 4 * n);
        for l in 0..n {
            let li = l as isize;
            let l1 = wrap(li + 1, n);
            let l2 = wrap(li + 2, n);
            let lm = wrap(li - 1, n);
            // Coinciding indices in small cyclic systems are summed.
            j.push_row(&[
                (lm, cb * z[l1]),
                (l, -c),
                (l1, -cb * (z[l2] - z[lm])),
                (l2, -cb * z[l1]),
            ]);
        }
        j
    }

    /// `8 / B`: the slow start level on the fast scale. Starting the fast
    /// coordinates at 8 overflows the quadratic drift within a few steps.
    fn fast_start_level(&self, theta: &DVector<f64>) -> f64 {
        8.0 / theta[3]
    }

    fn observe(&self, z: &DVector<f64>, x: &DVector<f64>, _theta: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(x.len() + z.len());
        y.rows_mut(0, x.len()).copy_from(x);
        y.rows_mut(x.len(), z.len()).copy_from(z);
        y
    }

    fn observation_jacobian(
        &self,
        z: &DVector<f64>,
        x: &DVector<f64>,
        theta: &DVector<f64>,
    ) -> DMatrix<f64> {
        self.observation_jacobian_sparse(z, x, theta).to_dense()
    }

    fn observation_jacobian_sparse(
        &self,
        z: &DVector<f64>,
        x: &DVector<f64>,
        _theta: &DVector<f64>,
    ) -> SparseRows {
        let mut hz = SparseRows::new(z.len());
        for _ in 0..x.len() {
            hz.push_row(&[]);
        }
        for l in 0..z.len() {
            hz.push_row(&[(l, 1.0)]);
        }
        hz
    }
}

/// Geometry and noise settings of the Lorenz twin experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct LorenzConfig {
    pub d_x: usize,
    pub r_ratio: usize,
    pub dt_x: f64,
    pub dt_z: f64,
    pub sigma_x: f64,
    pub sigma_z: f64,
    pub sigma_yx: f64,
    pub sigma_yz: f64,
}

impl Default for LorenzConfig {
    fn default() -> Self {
        LorenzConfig {
            d_x: 10,
            r_ratio: 5,
            dt_x: 1e-3,
            dt_z: 1e-4,
            sigma_x: 0.5,
            sigma_z: 1.0 / 16.0,
            sigma_yx: 0.1,
            sigma_yz: 1e-3,
        }
    }
}

/// Parameter vector `(F, H, C, B)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LorenzParams {
    pub f: f64,
    pub h: f64,
    pub c: f64,
    pub b: f64,
}

impl Default for LorenzParams {
    fn default() -> Self {
        LorenzParams {
            f: 8.0,
            h: 0.75,
            c: 10.0,
            b: 15.0,
        }
    }
}

impl LorenzParams {
    pub fn to_vector(self) -> DVector<f64> {
        DVector::from_vec(vec![self.f, self.h, self.c, self.b])
    }
}

pub fn lorenz_model(cfg: &LorenzConfig) -> Result<MultiScaleModel> {
    let dynamics = LorenzDynamics::new(cfg.d_x, cfg.r_ratio)?;
    let d_z = dynamics.d_z();
    let d_y = cfg.d_x + d_z;
    let mut r = DMatrix::zeros(d_y, d_y);
    for k in 0..d_y {
        let s = if k < cfg.d_x {
            cfg.sigma_yx
        } else {
            cfg.sigma_yz
        };
        r[(k, k)] = s * s;
    }
    MultiScaleModel::new(
        Dims {
            d_x: cfg.d_x,
            d_z,
            d_theta: 4,
            d_y,
        },
        ModelNoise {
            dt_x: cfg.dt_x,
            dt_z: cfg.dt_z,
            q_x: PsdMatrix::scaled_identity(cfg.d_x, cfg.sigma_x)?,
            q_z: PsdMatrix::scaled_identity(d_z, cfg.sigma_z)?,
            r: PsdMatrix::new(r)?,
        },
        Arc::new(dynamics),
    )
}

/// Full micro-step Jacobian of the Lorenz fast dynamics.
pub fn lorenz_jacobian_fast(z: &DVector<f64>, theta: &DVector<f64>, dt_z: f64) -> DMatrix<f64> {
    // r_ratio does not enter g_z.
    let dynamics = LorenzDynamics {
        d_x: 1,
        r_ratio: z.len(),
    };
    let mut j = dynamics.fast_drift_jacobian(z, theta) * dt_z;
    for k in 0..z.len() {
        j[(k, k)] += 1.0;
    }
    j
}

/// Coefficients of the linear-Gaussian two-scale model
/// `f_x = A_xx x`, `g_x = A_xz z̄`, `f_z = A_zx x`, `g_z = A_zz z`,
/// `l(z, x) = O_x x + O_z z`.
#[derive(Clone, Debug)]
pub struct LinearCoefficients {
    pub a_xx: DMatrix<f64>,
    pub a_xz: DMatrix<f64>,
    pub a_zx: DMatrix<f64>,
    pub a_zz: DMatrix<f64>,
    pub o_x: DMatrix<f64>,
    pub o_z: DMatrix<f64>,
}

#[derive(Clone, Debug)]
pub struct LinearDynamics(LinearCoefficients);

impl LinearDynamics {
    pub fn coefficients(&self) -> &LinearCoefficients {
        &self.0
    }
}

impl Dynamics for LinearDynamics {
    fn slow_drift(&self, x: &DVector<f64>, _: &DVector<f64>) -> DVector<f64> {
        &self.0.a_xx * x
    }

    fn slow_coupling(&self, z_bar: &DVector<f64>, _: &DVector<f64>) -> DVector<f64> {
        &self.0.a_xz * z_bar
    }

    fn fast_forcing(&self, x: &DVector<f64>, _: &DVector<f64>) -> DVector<f64> {
        &self.0.a_zx * x
    }

    fn fast_drift(&self, z: &DVector<f64>, _: &DVector<f64>) -> DVector<f64> {
        &self.0.a_zz * z
    }

    fn fast_drift_jacobian(&self, _: &DVector<f64>, _: &DVector<f64>) -> DMatrix<f64> {
        self.0.a_zz.clone()
    }

    fn observe(&self, z: &DVector<f64>, x: &DVector<f64>, _: &DVector<f64>) -> DVector<f64> {
        &self.0.o_x * x + &self.0.o_z * z
    }

    fn observation_jacobian(
        &self,
        _: &DVector<f64>,
        _: &DVector<f64>,
        _: &DVector<f64>,
    ) -> DMatrix<f64> {
        self.0.o_z.clone()
    }
}

/// Linear-Gaussian model with a one-entry (unused) parameter vector.
pub fn linear_two_scale_model(
    coef: LinearCoefficients,
    noise: ModelNoise,
) -> Result<MultiScaleModel> {
    let d_x = coef.a_xx.nrows();
    let d_z = coef.a_zz.nrows();
    let d_y = coef.o_x.nrows();
    let shapes = [
        (&coef.a_xx, d_x, d_x, "a_xx"),
        (&coef.a_xz, d_x, d_z, "a_xz"),
        (&coef.a_zx, d_z, d_x, "a_zx"),
        (&coef.a_zz, d_z, d_z, "a_zz"),
        (&coef.o_x, d_y, d_x, "o_x"),
        (&coef.o_z, d_y, d_z, "o_z"),
    ];
    for (m, r, c, name) in shapes {
        if m.nrows() != r || m.ncols() != c {
            return Err(Error::structural(format!(
                "{name} is {}x{}, expected {r}x{c}",
                m.nrows(),
                m.ncols()
            )));
        }
    }
    MultiScaleModel::new(
        Dims {
            d_x,
            d_z,
            d_theta: 1,
            d_y,
        },
        noise,
        Arc::new(LinearDynamics(coef)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn theta() -> DVector<f64> {
        LorenzParams::default().to_vector()
    }

    fn small_lorenz(d_x: usize, r: usize) -> MultiScaleModel {
        lorenz_model(&LorenzConfig {
            d_x,
            r_ratio: r,
            ..LorenzConfig::default()
        })
        .unwrap()
    }

    fn pseudo(n: usize, seed: f64) -> DVector<f64> {
        DVector::from_fn(n, |i, _| ((i as f64 + 1.0) * seed).sin() * 2.0)
    }

    #[test]
    fn micro_step_at_origin() {
        let m = small_lorenz(10, 5);
        let z = m
            .micro_step(&theta(), &DVector::zeros(10), &DVector::zeros(50), None)
            .unwrap();
        let expected = 1e-4 * (10.0 * 8.0 / 15.0);
        assert!(z.iter().all(|v| (v - expected).abs() < 1e-15));
    }

    #[test]
    fn micro_noise_is_additive() {
        let m = small_lorenz(4, 3);
        let x = pseudo(4, 0.3);
        let z = pseudo(12, 0.7);
        let w = pseudo(12, 1.9);
        let det = m.micro_step(&theta(), &x, &z, None).unwrap();
        let noisy = m.micro_step(&theta(), &x, &z, Some(&w)).unwrap();
        let expected = &w * (1e-4f64.sqrt() / 16.0);
        assert!(((noisy - det) - expected).amax() < 1e-15);
    }

    #[test]
    fn macro_step_examples() {
        let m = small_lorenz(10, 5);
        let x = m
            .macro_step(&theta(), &DVector::zeros(10), &DVector::zeros(50), None)
            .unwrap();
        assert!(x.iter().all(|v| (v - 8e-3).abs() < 1e-15));

        let m = small_lorenz(4, 2);
        let x = m
            .macro_step(
                &theta(),
                &DVector::from_element(4, 1.0),
                &DVector::zeros(8),
                None,
            )
            .unwrap();
        assert!(x.iter().all(|v| (v - 1.007).abs() < 1e-14));
    }

    #[test]
    fn coupling_examples() {
        let d = LorenzDynamics::new(10, 5).unwrap();
        let gx = d.slow_coupling(&DVector::from_element(50, 1.0), &theta());
        assert!(gx.iter().all(|v| (v + 2.5).abs() < 1e-14));
        let fz = d.fast_forcing(&DVector::from_element(10, 1.0), &theta());
        assert!(fz.iter().all(|v| (v - 0.5).abs() < 1e-15));
        let y = d.observe(&DVector::zeros(50), &DVector::zeros(10), &theta());
        assert_eq!(y, DVector::zeros(60));
    }

    #[test]
    fn fast_average_examples() {
        let one = vec![DVector::from_vec(vec![3.0, -1.0])];
        assert_eq!(fast_average(&one, 1).unwrap(), one[0]);
        let two = vec![DVector::from_element(2, 1.0), DVector::from_element(2, 3.0)];
        assert_eq!(
            fast_average(&two, 2).unwrap(),
            DVector::from_element(2, 2.0)
        );
        let c = DVector::from_vec(vec![0.1, 0.2, 0.3]);
        let avg = fast_average(&vec![c.clone(); 10], 10).unwrap();
        assert!((avg - &c).amax() <= 4.0 * f64::EPSILON * c.amax());
        assert!(matches!(fast_average(&two, 3), Err(Error::Structural(_))));
    }

    #[test]
    fn jacobian_at_zero_and_without_dynamics() {
        let j = lorenz_jacobian_fast(&DVector::zeros(6), &theta(), 1e-4);
        assert!((j - DMatrix::identity(6, 6) * (1.0 - 1e-3)).amax() < 1e-15);
        let t0 = DVector::from_vec(vec![8.0, 0.75, 0.0, 3.0]);
        let j = lorenz_jacobian_fast(&pseudo(6, 0.4), &t0, 1e-4);
        assert_eq!(j, DMatrix::identity(6, 6));
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let m = small_lorenz(3, 4);
        let th = theta();
        let x = pseudo(3, 0.9);
        let forcing = m.dynamics().fast_forcing(&x, &th);
        for trial in 0..20 {
            let z = pseudo(12, 0.37 + trial as f64 * 0.11);
            let j = m.fast_jacobian(&z, &th);
            for k in 0..12 {
                let eps = 1e-6 * (1.0 + z[k].abs());
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[k] += eps;
                zm[k] -= eps;
                let fp = m.micro_step_forced(&th, &forcing, &zp).unwrap();
                let fm = m.micro_step_forced(&th, &forcing, &zm).unwrap();
                let col = (fp - fm) / (2.0 * eps);
                for r in 0..12 {
                    let a = j[(r, k)];
                    assert!((a - col[r]).abs() <= 1e-5 * (1.0 + a.abs()), "({r},{k})");
                }
            }
        }
    }

    #[test]
    fn lorenz_drift_is_rotation_equivariant() {
        let d = LorenzDynamics::new(5, 3).unwrap();
        let th = theta();
        let x = pseudo(5, 0.61);
        let z = pseudo(15, 0.23);
        let rot = |v: &DVector<f64>, s: usize| {
            let n = v.len();
            DVector::from_fn(n, |i, _| v[(i + n - s) % n])
        };
        let (xr, zr) = (rot(&x, 1), rot(&z, 3));
        assert!((d.slow_drift(&xr, &th) - rot(&d.slow_drift(&x, &th), 1)).amax() < 1e-12);
        assert!((d.slow_coupling(&zr, &th) - rot(&d.slow_coupling(&z, &th), 1)).amax() < 1e-12);
        assert!((d.fast_forcing(&xr, &th) - rot(&d.fast_forcing(&x, &th), 3)).amax() < 1e-12);
        assert!((d.fast_drift(&zr, &th) - rot(&d.fast_drift(&z, &th), 3)).amax() < 1e-12);
    }

    #[test]
    fn non_integer_step_ratio_rejected() {
        let cfg = LorenzConfig {
            dt_z: 3e-4,
            ..LorenzConfig::default()
        };
        assert!(lorenz_model(&cfg).is_err());
    }

    #[test]
    fn linear_scalar_jacobian() {
        let s = |v: f64| DMatrix::from_element(1, 1, v);
        let m = linear_two_scale_model(
            LinearCoefficients {
                a_xx: s(-1.0),
                a_xz: s(0.0),
                a_zx: s(0.7),
                a_zz: s(-3.0),
                o_x: s(1.0),
                o_z: s(1.0),
            },
            ModelNoise {
                dt_x: 0.01,
                dt_z: 0.005,
                q_x: PsdMatrix::scaled_identity(1, 0.1).unwrap(),
                q_z: PsdMatrix::scaled_identity(1, 0.1).unwrap(),
                r: PsdMatrix::scaled_identity(1, 1.0).unwrap(),
            },
        )
        .unwrap();
        assert_eq!(m.h(), 2);
        let j = m.fast_jacobian(&DVector::zeros(1), &DVector::zeros(1));
        assert_eq!(j[(0, 0)], 1.0 + 0.005 * -3.0);
    }

    #[test]
    fn divergence_is_reported() {
        let m = small_lorenz(2, 2);
        let mut z = DVector::zeros(4);
        z[2] = f64::NAN;
        match m.micro_step(&theta(), &DVector::zeros(2), &z, None) {
            Err(Error::Divergence { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
