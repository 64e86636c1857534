//! Nested smoothing for multi-scale state-space models.
//!
//! Three layers of inference run in lockstep: a particle filter over the
//! static parameters, a particle filter or ensemble Kalman filter over the
//! slow states, and unscented or extended Kalman filters over the fast
//! states. The crate also ships the stochastic two-scale Lorenz 96 model,
//! twin-experiment data generation and an experiment harness.

// `!(a < b)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod harness;
pub mod layer1;
pub mod layer2;
pub mod layer3;
pub mod model;
pub mod nested;
pub mod numerics;
pub mod sim;

pub use error::{Error, Result};
pub use layer1::{
    compute_estimates, init_hierarchy, init_hierarchy_with_thetas, jitter, layer1_step,
    BoundaryPolicy, JitterKernel, Layer1Config, ParameterPrior, ParticleHierarchy, StatePriors,
    StepDiagnostics, StepEstimates,
};
pub use layer2::{
    enkf_gain, enkf_slow_step, smc_slow_step, Layer2Options, Layer2Output, Layer2State,
    SlowEnsemble, SlowParticleCloud, SmcMember,
};
pub use layer3::{make_sigma_points, GaussianBelief, Layer3Output, SigmaPointSet};
pub use model::{
    fast_average, linear_two_scale_model, lorenz_jacobian_fast, lorenz_model, Dims, Dynamics,
    LinearCoefficients, LorenzConfig, LorenzDynamics, LorenzParams, ModelNoise, MultiScaleModel,
    StatePair,
};
pub use nested::{
    compare_methods, run_smoother, FilterTrace, Method, MethodSpec, Smoother, SmootherPriors,
};
pub use numerics::{PsdMatrix, Purpose, Resampler, RngStream, SeedKey, StreamPath};
pub use sim::{generate_observations, generate_truth, spinup_init, ObservationSeries, TruthRecord};
