//! Dense kernels on small symmetric matrices: factorization with a jitter
//! ladder, weighted moments, Gaussian log-densities and sampling.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Diagonal shifts tried, in order, when a covariance fails to factorize.
///
/// Each entry is multiplied by `trace(C) / d` before use.
#[derive(Clone, Debug, PartialEq)]
pub struct JitterPolicy {
    pub ladder: Vec<f64>,
}

impl Default for JitterPolicy {
    fn default() -> Self {
        JitterPolicy {
            ladder: vec![0.0, 1e-12, 1e-10, 1e-8, 1e-6],
        }
    }
}

impl JitterPolicy {
    /// Plain factorization only.
    pub fn none() -> Self {
        JitterPolicy { ladder: vec![0.0] }
    }
}

/// Lower-triangular `S` with `S Sᵀ = C + jitter·I`.
#[derive(Clone, Debug)]
pub struct PsdFactor {
    pub lower: DMatrix<f64>,
    pub jitter: f64,
    /// At least one pivot was (numerically) zero.
    pub rank_deficient: bool,
}

/// Cholesky factorization that tolerates zero pivots of positive
/// semi-definite input. Returns `None` on a negative pivot or when a zero
/// pivot is accompanied by a non-vanishing column.
fn semidefinite_cholesky(c: &DMatrix<f64>, shift: f64) -> Option<(DMatrix<f64>, bool)> {
    let n = c.nrows();
    let scale = (0..n)
        .map(|i| (c[(i, i)] + shift).abs())
        .fold(0.0, f64::max);
    let tol = (n.max(1) as f64) * f64::EPSILON * scale;
    let off_tol = (tol * scale).sqrt() * 4.0;

    // Column k of `u` holds row k of L, so the dot products below are contiguous.
    let mut u = DMatrix::<f64>::zeros(n, n);
    let mut deficient = false;
    for k in 0..n {
        let uk = u.column(k);
        let d = c[(k, k)] + shift - uk.rows(0, k).norm_squared();
        if !d.is_finite() {
            return None;
        }
        if d > tol {
            let pivot = d.sqrt();
            u[(k, k)] = pivot;
            for i in (k + 1)..n {
                let s = c[(i, k)] - u.column(i).rows(0, k).dot(&u.column(k).rows(0, k));
                u[(k, i)] = s / pivot;
            }
        } else if d >= -tol {
            for i in (k + 1)..n {
                let s = c[(i, k)] - u.column(i).rows(0, k).dot(&u.column(k).rows(0, k));
                if s.abs() > off_tol {
                    return None;
                }
            }
            deficient = true;
        } else {
            return None;
        }
    }
    Some((u.transpose(), deficient))
}

fn check_square(c: &DMatrix<f64>, context: &'static str) -> Result<()> {
    if c.nrows() != c.ncols() {
        return Err(Error::structural(format!(
            "{context}: matrix is {}x{}, expected square",
            c.nrows(),
            c.ncols()
        )));
    }
    Ok(())
}

/// Factorize a nominally PSD matrix, walking the jitter ladder on failure.
pub fn psd_factor(c: &DMatrix<f64>, policy: &JitterPolicy) -> Result<PsdFactor> {
    check_square(c, "psd_factor")?;
    let n = c.nrows();
    let base = if n == 0 { 0.0 } else { c.trace() / n as f64 };
    for &level in &policy.ladder {
        let shift = level * base;
        if level > 0.0 && !(shift > 0.0) {
            continue;
        }
        if let Some((lower, rank_deficient)) = semidefinite_cholesky(c, shift) {
            return Ok(PsdFactor {
                lower,
                jitter: shift,
                rank_deficient,
            });
        }
    }
    let min_diag = (0..n).map(|i| c[(i, i)]).fold(f64::INFINITY, f64::min);
    let asym = (c - c.transpose()).amax();
    Err(Error::NumericalDegeneracy {
        context: "psd_factor",
        detail: format!(
            "dim {n}, trace {:.6e}, min diagonal {:.6e}, max asymmetry {:.3e}, non-finite entries: {}",
            c.trace(),
            min_diag,
            asym,
            c.iter().any(|v| !v.is_finite())
        ),
    })
}

/// Symmetric positive semi-definite matrix, validated at construction.
#[derive(Clone, Debug, PartialEq)]
pub struct PsdMatrix(DMatrix<f64>);

impl PsdMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        check_square(&m, "PsdMatrix")?;
        let scale = m.amax().max(f64::MIN_POSITIVE);
        if (&m - m.transpose()).amax() > 1e-12 * scale {
            return Err(Error::structural("PsdMatrix: matrix is not symmetric"));
        }
        semidefinite_cholesky(&m, 0.0)
            .ok_or_else(|| Error::structural("PsdMatrix: matrix is not positive semi-definite"))?;
        Ok(PsdMatrix(m))
    }

    pub fn zeros(d: usize) -> Self {
        PsdMatrix(DMatrix::zeros(d, d))
    }

    pub fn scaled_identity(d: usize, s: f64) -> Result<Self> {
        if s < 0.0 || !s.is_finite() {
            return Err(Error::structural(format!(
                "scaled identity with factor {s}"
            )));
        }
        Ok(PsdMatrix(DMatrix::identity(d, d) * s))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn scale(&self, s: f64) -> Result<Self> {
        if s < 0.0 {
            return Err(Error::structural("negative scale of PSD matrix"));
        }
        Ok(PsdMatrix(&self.0 * s))
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }
}

/// Points stored as matrix columns plus non-negative weights summing to one.
#[derive(Clone, Debug)]
pub struct WeightedPoints {
    points: DMatrix<f64>,
    weights: Vec<f64>,
}

impl WeightedPoints {
    pub fn new(points: DMatrix<f64>, weights: Vec<f64>) -> Result<Self> {
        if points.nrows() == 0 {
            return Err(Error::structural("weighted points need dimension >= 1"));
        }
        if points.ncols() != weights.len() {
            return Err(Error::structural(format!(
                "{} points but {} weights",
                points.ncols(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::structural("weights must be finite and non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::structural(format!("weights sum to {total}, not 1")));
        }
        Ok(WeightedPoints { points, weights })
    }

    pub fn from_vectors(points: &[DVector<f64>], weights: Vec<f64>) -> Result<Self> {
        let d = points
            .first()
            .map(|p| p.len())
            .ok_or_else(|| Error::structural("no points"))?;
        if let Some(bad) = points.iter().position(|p| p.len() != d) {
            return Err(Error::structural(format!(
                "point {bad} has dimension {} but point 0 has {d}",
                points[bad].len()
            )));
        }
        WeightedPoints::new(DMatrix::from_columns(points), weights)
    }

    pub fn points(&self) -> &DMatrix<f64> {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn dim(&self) -> usize {
        self.points.nrows()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn mean(&self) -> DVector<f64> {
        weighted_mean(&self.points, &self.weights)
    }

    pub fn covariance(
        &self,
        mean: &DVector<f64>,
        additive: Option<&PsdMatrix>,
    ) -> Result<DMatrix<f64>> {
        if mean.len() != self.dim() {
            return Err(Error::structural(
                "mean dimension differs from point dimension",
            ));
        }
        if let Some(a) = additive {
            if a.dim() != self.dim() {
                return Err(Error::structural("additive term has the wrong size"));
            }
        }
        Ok(weighted_covariance(
            &self.points,
            &self.weights,
            mean,
            additive,
        ))
    }
}

/// `Σ_l w_l p_l` over the columns of `points`.
pub fn weighted_mean(points: &DMatrix<f64>, weights: &[f64]) -> DVector<f64> {
    debug_assert_eq!(points.ncols(), weights.len());
    points * DVector::from_column_slice(weights)
}

/// Columns `√w_l (p_l − mean)`; the weighted scatter is `A Aᵀ`.
fn scaled_anomalies(points: &DMatrix<f64>, weights: &[f64], mean: &DVector<f64>) -> DMatrix<f64> {
    let mut a = points.clone();
    for (l, mut col) in a.column_iter_mut().enumerate() {
        col -= mean;
        col *= weights[l].sqrt();
    }
    a
}

/// `Σ_l w_l (p_l − m)(p_l − m)ᵀ + additive`, symmetrized.
pub fn weighted_covariance(
    points: &DMatrix<f64>,
    weights: &[f64],
    mean: &DVector<f64>,
    additive: Option<&PsdMatrix>,
) -> DMatrix<f64> {
    let a = scaled_anomalies(points, weights, mean);
    let mut c = &a * a.transpose();
    symmetrize(&mut c);
    if let Some(add) = additive {
        c += add.matrix();
    }
    c
}

/// `Σ_l w_l (p_l − mp)(q_l − mq)ᵀ`.
pub fn weighted_cross_covariance(
    p: &DMatrix<f64>,
    mp: &DVector<f64>,
    q: &DMatrix<f64>,
    mq: &DVector<f64>,
    weights: &[f64],
) -> DMatrix<f64> {
    let a = scaled_anomalies(p, weights, mp);
    let b = scaled_anomalies(q, weights, mq);
    a * b.transpose()
}

/// In-place `(C + Cᵀ)/2`.
pub fn symmetrize(c: &mut DMatrix<f64>) {
    let n = c.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let v = 0.5 * (c[(i, j)] + c[(j, i)]);
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
}

/// Compressed-row view of a matrix with few non-zeros per row.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseRows {
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseRows {
    /// Empty matrix with `ncols` columns; rows are added with `push_row`.
    pub fn new(ncols: usize) -> Self {
        SparseRows::with_capacity(ncols, 0, 0)
    }

    pub fn with_capacity(ncols: usize, nrows: usize, nnz: usize) -> Self {
        let mut indptr = Vec::with_capacity(nrows + 1);
        indptr.push(0);
        SparseRows {
            ncols,
            indptr,
            indices: Vec::with_capacity(nnz),
            values: Vec::with_capacity(nnz),
        }
    }

    /// Appends a row; repeated column indices are summed.
    pub fn push_row(&mut self, entries: &[(usize, f64)]) {
        let start = *self.indptr.last().unwrap();
        for &(c, v) in entries {
            assert!(c < self.ncols, "sparse column out of range");
            match self.indices[start..].iter().position(|&k| k == c) {
                Some(p) => self.values[start + p] += v,
                None => {
                    self.indices.push(c);
                    self.values.push(v);
                }
            }
        }
        self.indptr.push(self.indices.len());
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut out = SparseRows::new(m.ncols());
        let mut row = Vec::new();
        for r in 0..m.nrows() {
            row.clear();
            row.extend(
                (0..m.ncols())
                    .map(|c| (c, m[(r, c)]))
                    .filter(|e| e.1 != 0.0),
            );
            out.push_row(&row);
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows(), self.ncols);
        for r in 0..self.nrows() {
            for (c, v) in self.row(r) {
                m[(r, c)] += v;
            }
        }
        m
    }

    pub fn nrows(&self) -> usize {
        self.indptr.len() - 1
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn density(&self) -> f64 {
        let total = self.nrows() * self.ncols;
        if total == 0 {
            0.0
        } else {
            self.values.len() as f64 / total as f64
        }
    }

    /// `I + s · self` for a square matrix.
    pub fn identity_plus(&self, s: f64) -> SparseRows {
        assert_eq!(
            self.nrows(),
            self.ncols,
            "identity_plus needs a square matrix"
        );
        let mut out =
            SparseRows::with_capacity(self.ncols, self.nrows(), self.values.len() + self.ncols);
        let mut row = Vec::with_capacity(8);
        for r in 0..self.nrows() {
            row.clear();
            row.push((r, 1.0));
            row.extend(self.row(r).map(|(c, v)| (c, s * v)));
            out.push_row(&row);
        }
        out
    }

    /// `self · m`.
    pub fn mul(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(self.ncols, m.nrows(), "sparse product shape mismatch");
        let mut out = DMatrix::zeros(self.nrows(), m.ncols());
        for s in 0..m.ncols() {
            let col = m.column(s);
            for r in 0..self.nrows() {
                out[(r, s)] = self.row(r).map(|(c, v)| v * col[c]).sum();
            }
        }
        out
    }

    /// `m · selfᵀ`, built one output column at a time from columns of `m`.
    pub fn mul_transposed_by(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(self.ncols, m.ncols(), "sparse product shape mismatch");
        let rows = m.nrows();
        let src = m.as_slice();
        let mut out = DMatrix::zeros(rows, self.nrows());
        for (r, dst) in out.as_mut_slice().chunks_exact_mut(rows.max(1)).enumerate() {
            for (c, v) in self.row(r) {
                for (d, s) in dst.iter_mut().zip(&src[c * rows..(c + 1) * rows]) {
                    *d += v * s;
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        assert_eq!(self.ncols, v.len(), "sparse product shape mismatch");
        DVector::from_fn(self.nrows(), |r, _| {
            self.row(r).map(|(c, w)| w * v[c]).sum()
        })
    }
}

/// `J C Jᵀ` for symmetric `C`.
pub fn sparse_congruence(j: &SparseRows, c: &DMatrix<f64>) -> DMatrix<f64> {
    // C Jᵀ = (J C)ᵀ, and (J C) Jᵀ finishes the product.
    let jc = j.mul_transposed_by(c).transpose();
    let mut out = j.mul_transposed_by(&jc);
    symmetrize(&mut out);
    out
}

/// `J C Jᵀ` for symmetric `C`, using the sparsity of `J` when it pays off.
pub fn congruence(j: &DMatrix<f64>, c: &DMatrix<f64>) -> DMatrix<f64> {
    let sparse = SparseRows::from_dense(j);
    if sparse.density() > 0.25 {
        let mut out = j * c * j.transpose();
        symmetrize(&mut out);
        out
    } else {
        sparse_congruence(&sparse, c)
    }
}

/// Factored Gaussian covariance, reusable across density evaluations.
#[derive(Clone, Debug)]
pub struct GaussianFactor {
    lower: DMatrix<f64>,
    log_det: f64,
}

impl GaussianFactor {
    pub fn new(cov: &DMatrix<f64>, policy: &JitterPolicy) -> Result<Self> {
        let f = psd_factor(cov, policy)?;
        if f.rank_deficient {
            return Err(Error::NumericalDegeneracy {
                context: "gaussian density",
                detail: format!("covariance of dimension {} is singular", cov.nrows()),
            });
        }
        let log_det = 2.0 * f.lower.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(GaussianFactor {
            lower: f.lower,
            log_det,
        })
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// `log N(x | mean, L Lᵀ)`.
    pub fn log_density(&self, x: &DVector<f64>, mean: &DVector<f64>) -> f64 {
        let r = x - mean;
        let v = self
            .lower
            .solve_lower_triangular(&r)
            .expect("factor has a non-zero diagonal");
        -0.5 * (v.norm_squared() + self.log_det + self.dim() as f64 * LN_2PI)
    }

    /// Solves `(L Lᵀ) X = B`.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let y = self
            .lower
            .solve_lower_triangular(b)
            .expect("factor has a non-zero diagonal");
        self.lower
            .tr_solve_lower_triangular(&y)
            .expect("factor has a non-zero diagonal")
    }
}

/// `log N(x | mean, cov)` through the factored form.
pub fn log_gauss_density(
    x: &DVector<f64>,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    policy: &JitterPolicy,
) -> Result<f64> {
    if x.len() != mean.len() || cov.nrows() != x.len() {
        return Err(Error::structural("log_gauss_density: dimension mismatch"));
    }
    Ok(GaussianFactor::new(cov, policy)?.log_density(x, mean))
}

/// `mean + S u` with `u` standard normal.
pub fn draw_gaussian<R: Rng + ?Sized>(
    rng: &mut R,
    mean: &DVector<f64>,
    cov_factor: &DMatrix<f64>,
) -> DVector<f64> {
    let u = DVector::from_fn(mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    mean + cov_factor * u
}

/// Matrix of `d × k` independent standard normal draws.
pub fn standard_normal_matrix<R: Rng + ?Sized>(rng: &mut R, d: usize, k: usize) -> DMatrix<f64> {
    DMatrix::from_fn(d, k, |_, _| rng.sample::<f64, _>(StandardNormal))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_cov(points: &[DVector<f64>], w: &[f64], m: &DVector<f64>) -> DMatrix<f64> {
        let d = m.len();
        let mut c = DMatrix::zeros(d, d);
        for (p, &wl) in points.iter().zip(w) {
            for a in 0..d {
                for b in 0..d {
                    c[(a, b)] += wl * (p[a] - m[a]) * (p[b] - m[b]);
                }
            }
        }
        c
    }

    #[test]
    fn mean_examples() {
        let wp = WeightedPoints::from_vectors(
            &[
                DVector::from_vec(vec![1.0, 0.0]),
                DVector::from_vec(vec![-1.0, 0.0]),
            ],
            vec![0.5, 0.5],
        )
        .unwrap();
        assert_eq!(wp.mean(), DVector::from_vec(vec![0.0, 0.0]));

        let s = 2f64.sqrt();
        let wp = WeightedPoints::from_vectors(
            &[
                DVector::from_vec(vec![0.0]),
                DVector::from_vec(vec![s]),
                DVector::from_vec(vec![-s]),
            ],
            vec![0.5, 0.25, 0.25],
        )
        .unwrap();
        assert!(wp.mean()[0].abs() < 1e-15);
        let c = wp.covariance(&DVector::zeros(1), None).unwrap();
        assert!((c[(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mismatched_points_rejected() {
        let err =
            WeightedPoints::from_vectors(&[DVector::zeros(2), DVector::zeros(3)], vec![0.5, 0.5]);
        assert!(matches!(err, Err(Error::Structural(_))));
    }

    #[test]
    fn singleton_covariance_is_additive_term() {
        let wp =
            WeightedPoints::from_vectors(&[DVector::from_vec(vec![3.0, 4.0])], vec![1.0]).unwrap();
        let m = wp.mean();
        let add = PsdMatrix::scaled_identity(2, 1.0).unwrap();
        let c = wp.covariance(&m, Some(&add)).unwrap();
        assert_eq!(c, DMatrix::identity(2, 2));
    }

    #[test]
    fn non_psd_additive_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(PsdMatrix::new(m).is_err());
    }

    #[test]
    fn covariance_matches_double_loop() {
        let pts: Vec<DVector<f64>> = (0..7)
            .map(|l| DVector::from_fn(3, |i, _| ((l * 3 + i) as f64 * 0.37).sin()))
            .collect();
        let raw: Vec<f64> = (0..7).map(|l| 1.0 + l as f64).collect();
        let tot: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|v| v / tot).collect();
        let wp = WeightedPoints::from_vectors(&pts, w.clone()).unwrap();
        let m = wp.mean();
        let c = wp.covariance(&m, None).unwrap();
        let oracle = naive_cov(&pts, &w, &m);
        assert!((c - oracle).amax() < 1e-12);
    }

    #[test]
    fn factor_examples() {
        let f = psd_factor(&DMatrix::identity(3, 3), &JitterPolicy::default()).unwrap();
        assert_eq!(f.lower, DMatrix::identity(3, 3));
        assert_eq!(f.jitter, 0.0);

        let c = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 9.0]);
        let f = psd_factor(&c, &JitterPolicy::default()).unwrap();
        assert_eq!(
            f.lower,
            DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 3.0])
        );
    }

    #[test]
    fn zero_matrix_factors_to_zero() {
        let f = psd_factor(&DMatrix::zeros(3, 3), &JitterPolicy::none()).unwrap();
        assert!(f.rank_deficient);
        assert_eq!(f.lower, DMatrix::zeros(3, 3));
    }

    #[test]
    fn rank_deficient_psd_reconstructs() {
        let v = DVector::from_vec(vec![1.0, 2.0, -1.0]);
        let c = &v * v.transpose();
        let f = psd_factor(&c, &JitterPolicy::none()).unwrap();
        assert!(f.rank_deficient);
        assert!((&f.lower * f.lower.transpose() - c).amax() < 1e-12);
    }

    #[test]
    fn indefinite_uses_jitter_or_fails() {
        // Slightly indefinite: eigenvalues 2 and -1e-9.
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 1.0 + 5e-10, 1.0 + 5e-10, 1.0]);
        let f = psd_factor(&c, &JitterPolicy::default()).unwrap();
        assert!(f.jitter > 0.0);
        let recon = &f.lower * f.lower.transpose();
        let target = &c + DMatrix::identity(2, 2) * f.jitter;
        assert!((recon - target).amax() < 1e-10);

        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 3.0, 1.0]);
        match psd_factor(&bad, &JitterPolicy::default()) {
            Err(Error::NumericalDegeneracy { detail, .. }) => assert!(detail.contains("dim 2")),
            other => panic!("expected degeneracy, got {other:?}"),
        }
    }

    #[test]
    fn density_examples() {
        let one = DMatrix::identity(1, 1);
        let zero = DVector::zeros(1);
        let p = log_gauss_density(&zero, &zero, &one, &JitterPolicy::none()).unwrap();
        assert!((p + 0.918_938_533_204_672_7).abs() < 1e-12);
        let x = DVector::from_vec(vec![1.0]);
        let p1 = log_gauss_density(&x, &zero, &one, &JitterPolicy::none()).unwrap();
        assert!((p1 - (p - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn zero_factor_draw_returns_mean() {
        let mut rng = crate::numerics::SeedKey::from_seed(7)
            .stream(crate::numerics::StreamPath::new(
                0,
                0,
                crate::numerics::Purpose::Test,
                0,
                0,
            ))
            .rng();
        let m = DVector::from_vec(vec![1.5, -2.0]);
        assert_eq!(draw_gaussian(&mut rng, &m, &DMatrix::zeros(2, 2)), m);
    }

    #[test]
    fn sparse_congruence_matches_dense() {
        let n = 12;
        let mut j = DMatrix::zeros(n, n);
        for r in 0..n {
            j[(r, r)] = 0.9;
            j[(r, (r + 1) % n)] = 0.1 * r as f64;
            j[(r, (r + n - 1) % n)] = -0.2;
        }
        let b = DMatrix::from_fn(n, n, |a, c| ((a * 7 + c * 3) as f64).cos());
        let c = &b * b.transpose();
        let dense = &j * &c * j.transpose();
        assert!((congruence(&j, &c) - dense).amax() < 1e-12);
    }

    #[test]
    fn sparse_rows_merge_and_products() {
        let mut s = SparseRows::new(3);
        s.push_row(&[(0, 1.0), (2, 2.0), (0, 0.5)]);
        s.push_row(&[]);
        let d = s.to_dense();
        assert_eq!(
            d,
            DMatrix::from_row_slice(2, 3, &[1.5, 0.0, 2.0, 0.0, 0.0, 0.0])
        );
        let m = DMatrix::from_fn(4, 3, |a, c| (a + 2 * c) as f64);
        assert_eq!(s.mul_transposed_by(&m), &m * d.transpose());
        let sq = SparseRows::from_dense(&DMatrix::from_row_slice(2, 2, &[0.0, 3.0, 1.0, 0.0]));
        let ip = sq.identity_plus(0.5).to_dense();
        assert_eq!(ip, DMatrix::from_row_slice(2, 2, &[1.0, 1.5, 0.5, 1.0]));
    }
}
