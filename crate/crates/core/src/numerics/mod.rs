//! Shared numeric kernels: moments, factorizations, Gaussian densities,
//! log-domain weights, resampling and keyed random streams.

pub mod linalg;
pub mod rng;
pub mod weights;

pub use linalg::{
    congruence, draw_gaussian, log_gauss_density, psd_factor, sparse_congruence,
    standard_normal_matrix, symmetrize, weighted_covariance, weighted_cross_covariance,
    weighted_mean, GaussianFactor, JitterPolicy, PsdFactor, PsdMatrix, SparseRows, WeightedPoints,
};
pub use rng::{Purpose, RngStream, SeedKey, StreamPath};
pub use weights::{
    effective_sample_size, log_mean_exp, log_sum_exp, normalize_log_weights, resample_indices,
    LogWeights, Resampler,
};
