//! Quick oracle and invariant checks run by the `selftest` subcommand.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::layer2::enkf_gain;
use crate::layer3::{ekf_predict_fast, ekf_update, make_sigma_points, GaussianBelief};
use crate::model::{
    linear_two_scale_model, lorenz_jacobian_fast, Dynamics, LinearCoefficients, LorenzDynamics,
    ModelNoise, MultiScaleModel,
};
use crate::numerics::{
    log_sum_exp, normalize_log_weights, resample_indices, GaussianFactor, JitterPolicy, LogWeights,
    PsdMatrix, Resampler,
};

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * (2.0 * r.random::<f64>() - 1.0))
}

fn spd(r: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let a = random_matrix(r, d, d, 1.0);
    &a * a.transpose() + DMatrix::identity(d, d) * 0.1
}

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1e-300)
}

fn linear_model(r: &mut ChaCha8Rng) -> Result<MultiScaleModel> {
    linear_two_scale_model(
        LinearCoefficients {
            a_xx: -DMatrix::identity(2, 2) * 0.5,
            a_xz: random_matrix(r, 2, 4, 0.5),
            a_zx: random_matrix(r, 4, 2, 0.5),
            a_zz: -DMatrix::identity(4, 4) + random_matrix(r, 4, 4, 0.3),
            o_x: DMatrix::identity(5, 2),
            o_z: random_matrix(r, 5, 4, 1.0),
        },
        ModelNoise {
            dt_x: 0.05,
            dt_z: 0.01,
            q_x: PsdMatrix::scaled_identity(2, 0.3)?,
            q_z: PsdMatrix::scaled_identity(4, 0.5)?,
            r: PsdMatrix::new(spd(r, 5) * 0.2)?,
        },
    )
}

/// Extended filter on a linear model against a textbook Kalman recursion.
fn kalman() -> Result<(bool, String)> {
    let mut r = rng(1);
    let m = linear_model(&mut r)?;
    let th = DVector::zeros(1);
    let coef_a = m.fast_jacobian(&DVector::zeros(4), &th);
    let o_z = m.observation_jacobian(&DVector::zeros(4), &DVector::zeros(2), &th);
    let q = m.fast_noise_cov().matrix().clone();
    let mut belief = GaussianBelief::new(DVector::from_element(4, 0.5), spd(&mut r, 4))?;
    let (mut mean, mut cov) = (belief.mean.clone(), belief.cov.clone());
    let mut worst = 0.0f64;
    let mut x = DVector::from_vec(vec![1.0, -1.0]);
    for _ in 0..30 {
        let forcing = m.dynamics().fast_forcing(&x, &th);
        let pred = ekf_predict_fast(&m, &th, &x, &belief)?;
        for _ in 0..m.h() {
            mean = &coef_a * &mean + &forcing * m.dt_z();
            cov = &coef_a * &cov * coef_a.transpose() + &q;
        }
        let x_next = m.macro_step(&th, &x, &pred.z_bar, None)?;
        let y = DVector::from_fn(5, |_, _| r.random::<f64>());
        let out = ekf_update(&m, &th, &x_next, &x_next, &pred, &y)?;
        let y_hat = m.observe(&mean, &x_next, &th);
        let s = &o_z * &cov * o_z.transpose() + m.r().matrix();
        let k = &cov * o_z.transpose() * s.clone().try_inverse().expect("S invertible");
        mean = &mean + &k * (&y - y_hat);
        cov = &cov - &k * &s * k.transpose();
        worst = worst
            .max((&out.belief.mean - &mean).amax() / mean.amax())
            .max(rel(&out.belief.cov, &cov));
        belief = out.belief;
        x = x_next;
    }
    Ok((worst < 1e-10, format!("max relative deviation {worst:.2e}")))
}

fn woodbury() -> Result<(bool, String)> {
    let mut r = rng(2);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let jn = 2 + (r.random::<f64>() * 30.0) as usize;
        let dy = 1 + (r.random::<f64>() * 30.0) as usize;
        let x = random_matrix(&mut r, 6, jn, 1.0);
        let y = random_matrix(&mut r, dy, jn, 1.0);
        let rc = spd(&mut r, dy);
        let k = enkf_gain(&x, &y, &GaussianFactor::new(&rc, &JitterPolicy::none())?)?;
        let s = &y * y.transpose() / jn as f64 + &rc;
        let direct = &x * y.transpose() / jn as f64 * s.try_inverse().expect("S invertible");
        worst = worst.max(rel(&k, &direct));
    }
    Ok((worst < 1e-8, format!("max relative deviation {worst:.2e}")))
}

fn sigma_points() -> Result<(bool, String)> {
    let mut r = rng(3);
    let mut worst = 0.0f64;
    for d in [1, 3, 10, 25] {
        let b = GaussianBelief::new(
            DVector::from_fn(d, |_, _| r.random::<f64>()),
            spd(&mut r, d),
        )?;
        let sp = make_sigma_points(&b)?;
        let back = sp.moments();
        worst = worst.max(rel(&back.cov, &b.cov));
        worst = worst.max((back.mean - &b.mean).amax());
    }
    Ok((worst < 1e-8, format!("max deviation {worst:.2e}")))
}

fn resampling() -> Result<(bool, String)> {
    let mut r = rng(4);
    let w = [0.1, 0.2, 0.3, 0.4];
    let draws = 100_000;
    let idx = resample_indices(&mut r, &w, draws, Resampler::Multinomial)?;
    let mut worst = 0.0f64;
    for (k, p) in w.iter().enumerate() {
        let c = idx.iter().filter(|&&i| i == k).count() as f64;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        worst = worst.max((c - draws as f64 * p).abs() / sd);
    }
    let mut sys = resample_indices(&mut r, &[0.2; 5], 5, Resampler::Systematic)?;
    sys.sort_unstable();
    let perm = sys == [0, 1, 2, 3, 4];
    Ok((
        worst < 4.0 && perm,
        format!("largest multinomial z-score {worst:.2}, systematic permutation {perm}"),
    ))
}

fn jacobians() -> Result<(bool, String)> {
    let mut r = rng(5);
    let lorenz = LorenzDynamics::new(4, 5)?;
    let th = DVector::from_vec(vec![8.0, 0.75, 10.0, 15.0]);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let z = DVector::from_fn(20, |_, _| r.random::<f64>() - 0.5);
        let j = lorenz_jacobian_fast(&z, &th, 1e-4);
        let eps = 1e-6;
        for c in 0..20 {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[c] += eps;
            zm[c] -= eps;
            let step = |v: &DVector<f64>| v + lorenz.fast_drift(v, &th) * 1e-4;
            let fd = (step(&zp) - step(&zm)) / (2.0 * eps);
            worst = worst.max((j.column(c) - fd).amax() / j.column(c).amax());
        }
    }
    Ok((worst < 1e-5, format!("max relative deviation {worst:.2e}")))
}

fn weights() -> Result<(bool, String)> {
    let mut r = rng(6);
    let lw: Vec<f64> = (0..50).map(|_| -500.0 * r.random::<f64>()).collect();
    let (w, _) = normalize_log_weights(&LogWeights(lw.clone()))?;
    let sum_err = (w.iter().sum::<f64>() - 1.0).abs();
    let shifted: Vec<f64> = lw.iter().map(|v| v + 123.0).collect();
    let shift_err = (log_sum_exp(&shifted) - log_sum_exp(&lw) - 123.0).abs();
    Ok((
        sum_err < 1e-12 && shift_err < 1e-12,
        format!("sum error {sum_err:.1e}, shift error {shift_err:.1e}"),
    ))
}

/// Run every check; a check that errors counts as failed.
pub fn selftest() -> Vec<Check> {
    let suite: [(&'static str, fn() -> Result<(bool, String)>); 6] = [
        ("kalman-oracle", kalman),
        ("woodbury-gain", woodbury),
        ("sigma-points", sigma_points),
        ("resampling", resampling),
        ("jacobians", jacobians),
        ("weights", weights),
    ];
    suite
        .iter()
        .map(|(name, f)| match f() {
            Ok((passed, detail)) => Check {
                name,
                passed,
                detail,
            },
            Err(e) => Check {
                name,
                passed: false,
                detail: e.to_string(),
            },
        })
        .collect()
}
