//! Experiment orchestration: configuration, the twin-experiment pipeline,
//! NMSE metrics and the self-test suite behind the command-line tool.

pub mod config;
pub mod experiment;
pub mod metrics;
pub mod selftest;

pub use config::{
    replication_seed, ExperimentConfig, ExperimentSection, MethodSection, ModelSection,
};
pub use experiment::{
    evaluate, recompute_metrics, replication_data, run_experiment, run_replication, simulate,
    Evaluation, ExperimentReport, Manifest, ManifestEntry, ReplicationResult, Summary,
    SCHEMA_VERSION,
};
pub use metrics::{median, nmse, quantile, Band, MetricSeries, PerT};
pub use selftest::{selftest, Check};
