//! Twin-experiment pipeline and its on-disk artifacts.
//!
//! Layout of an output directory:
//!
//! ```text
//! manifest.json          config, seeds, per-replication status
//! summary.json           per-t median and quartiles over replications
//! run_000/truth.csv      t, x_0.., z_0..        (t = 0 … T)
//! run_000/obs.csv        t, y_0..               (t = 1 … T)
//! run_000/estimates.csv  t, theta_hat_.., x_hat_.., z_hat_..
//! run_000/metrics.csv    t, theta_hat_0..3, nmse_theta, nmse_x, nmse_z, ess, log_evidence_incr
//! run_000/timing.json    per-step wall-clock milliseconds
//! run_000/truth_micro.csv  every micro step of z (optional)
//! ```
//!
//! Floats are written in Rust's shortest round-trip form, so reading a CSV
//! back gives the exact values that were written.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{replication_seed, ExperimentConfig};
use super::metrics::{MetricSeries, PerT};
use crate::error::{Error, Result};
use crate::layer1::StepEstimates;
use crate::model::{MultiScaleModel, StatePair};
use crate::nested::{FilterTrace, Method, Smoother};
use crate::numerics::{Purpose, SeedKey, StreamPath};
use crate::sim::{
    generate_observations, generate_truth, spinup_init, ObservationSeries, TruthRecord,
};

pub const SCHEMA_VERSION: u32 = 1;

/// Truth and observations of one replication.
pub fn replication_data(
    m: &MultiScaleModel,
    theta: &DVector<f64>,
    init: &StatePair,
    steps: usize,
    seed: u64,
) -> Result<(TruthRecord, ObservationSeries)> {
    let key = SeedKey::from_seed(seed);
    let truth = generate_truth(
        m,
        theta,
        init,
        steps,
        &key.stream(StreamPath::new(0, 0, Purpose::Truth, 0, 0)),
    )?;
    let obs = generate_observations(
        &truth,
        m,
        &key.stream(StreamPath::new(0, 0, Purpose::Observation, 0, 0)),
    )?;
    Ok((truth, obs))
}

#[derive(Clone, Debug)]
pub struct ReplicationResult {
    pub index: usize,
    pub seed: u64,
    pub truth: TruthRecord,
    pub obs: ObservationSeries,
    pub trace: FilterTrace,
    pub metrics: MetricSeries,
    /// Set when the run stopped early; `trace` then holds the steps done.
    pub error: Option<String>,
}

impl ReplicationResult {
    pub fn completed(&self) -> bool {
        self.error.is_none()
    }
}

/// Simulate and filter replication `index`. Collapse and divergence of the
/// filter are reported in the result; failures to produce the data are errors.
pub fn run_replication(
    cfg: &ExperimentConfig,
    m: &MultiScaleModel,
    init: &StatePair,
    index: usize,
) -> Result<ReplicationResult> {
    let seed = replication_seed(cfg.experiment.seed, index);
    let theta = cfg.model.theta();
    let (truth, obs) = replication_data(m, &theta, init, cfg.steps(), seed)?;
    let priors = cfg.smoother_priors(init)?;
    let mut smoother = Smoother::new(m, &cfg.method_spec(seed), &priors)?;
    let mut error = None;
    let mut partial = None;
    for y in &obs.y {
        match smoother.step(y) {
            Ok(_) => {}
            Err(Error::FilterCollapse { t, partial: p }) => {
                error = Some(format!("filter collapse at t = {t}"));
                partial = Some(*p);
                break;
            }
            Err(e @ (Error::Divergence { .. } | Error::NumericalDegeneracy { .. })) => {
                error = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        }
    }
    let trace = partial.unwrap_or_else(|| smoother.into_trace());
    let metrics = MetricSeries::from_estimates(&truth, &trace.estimates)?;
    Ok(ReplicationResult {
        index,
        seed,
        truth,
        obs,
        trace,
        metrics,
        error,
    })
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

fn header(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (0..n).map(move |k| format!("{prefix}_{k}"))
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    Ok(csv::Writer::from_path(path)?)
}

pub fn write_truth_csv(path: &Path, truth: &TruthRecord) -> Result<()> {
    let mut w = writer(path)?;
    let (dx, dz) = (truth.x_path[0].len(), truth.z_path[0].len());
    let mut head = vec!["t".to_string()];
    head.extend(header("x", dx));
    head.extend(header("z", dz));
    w.write_record(&head)?;
    for t in 0..=truth.steps() {
        let mut row = vec![t.to_string()];
        row.extend(truth.x_path[t].iter().map(|v| fmt(*v)));
        row.extend(truth.z_at(t).iter().map(|v| fmt(*v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_truth_micro_csv(path: &Path, truth: &TruthRecord) -> Result<()> {
    let mut w = writer(path)?;
    let mut head = vec!["n".to_string()];
    head.extend(header("z", truth.z_path[0].len()));
    w.write_record(&head)?;
    for (n, z) in truth.z_path.iter().enumerate() {
        let mut row = vec![n.to_string()];
        row.extend(z.iter().map(|v| fmt(*v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_obs_csv(path: &Path, obs: &ObservationSeries) -> Result<()> {
    let mut w = writer(path)?;
    let dy = obs.y.first().map_or(0, |y| y.len());
    let mut head = vec!["t".to_string()];
    head.extend(header("y", dy));
    w.write_record(&head)?;
    for (k, y) in obs.y.iter().enumerate() {
        let mut row = vec![(k + 1).to_string()];
        row.extend(y.iter().map(|v| fmt(*v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_estimates_csv(
    path: &Path,
    estimates: &[StepEstimates],
    dims: (usize, usize, usize),
) -> Result<()> {
    let mut w = writer(path)?;
    let mut head = vec!["t".to_string()];
    head.extend(header("theta_hat", dims.0));
    head.extend(header("x_hat", dims.1));
    head.extend(header("z_hat", dims.2));
    w.write_record(&head)?;
    for (k, e) in estimates.iter().enumerate() {
        let mut row = vec![(k + 1).to_string()];
        row.extend(
            e.theta
                .iter()
                .chain(e.x.iter())
                .chain(e.z.iter())
                .map(|v| fmt(*v)),
        );
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_metrics_csv(path: &Path, trace: &FilterTrace, metrics: &MetricSeries) -> Result<()> {
    let mut w = writer(path)?;
    let d_theta = trace.estimates.first().map_or(4, |e| e.theta.len());
    let mut head = vec!["t".to_string()];
    head.extend(header("theta_hat", d_theta));
    head.extend(
        ["nmse_theta", "nmse_x", "nmse_z", "ess", "log_evidence_incr"]
            .iter()
            .map(|s| s.to_string()),
    );
    w.write_record(&head)?;
    for k in 0..trace.len() {
        let mut row = vec![(k + 1).to_string()];
        row.extend(trace.estimates[k].theta.iter().map(|v| fmt(*v)));
        row.push(fmt_opt(metrics.theta[k]));
        row.push(fmt_opt(metrics.x[k]));
        row.push(fmt_opt(metrics.z[k]));
        row.push(fmt(trace.diagnostics[k].ess));
        row.push(fmt(trace.diagnostics[k].log_evidence_incr));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Rows of a headered numeric CSV; empty fields read as `None`.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<Option<f64>>>)> {
    let mut r = csv::Reader::from_path(path)?;
    let head = r.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|f| {
                if f.is_empty() {
                    Ok(None)
                } else {
                    f.parse::<f64>().map(Some).map_err(|_| {
                        Error::structural(format!("{}: bad number '{f}'", path.display()))
                    })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok((head, rows))
}

fn columns(head: &[String], prefix: &str) -> Vec<usize> {
    let p = format!("{prefix}_");
    head.iter()
        .enumerate()
        .filter(|(_, h)| {
            h.strip_prefix(&p)
                .is_some_and(|s| s.parse::<usize>().is_ok())
        })
        .map(|(k, _)| k)
        .collect()
}

fn column(head: &[String], name: &str) -> Result<usize> {
    head.iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::structural(format!("missing column {name}")))
}

fn vector(row: &[Option<f64>], cols: &[usize]) -> Result<DVector<f64>> {
    let v: Option<Vec<f64>> = cols.iter().map(|&c| row[c]).collect();
    v.map(DVector::from_vec)
        .ok_or_else(|| Error::structural("empty field in a state column"))
}

/// Recompute the metrics of a run directory from `truth.csv` and
/// `estimates.csv`.
pub fn recompute_metrics(run_dir: &Path, theta: &DVector<f64>) -> Result<MetricSeries> {
    let (th, truth) = read_csv(&run_dir.join("truth.csv"))?;
    let (eh, est) = read_csv(&run_dir.join("estimates.csv"))?;
    let (tx, tz) = (columns(&th, "x"), columns(&th, "z"));
    let (et, ex, ez) = (
        columns(&eh, "theta_hat"),
        columns(&eh, "x_hat"),
        columns(&eh, "z_hat"),
    );
    let xs: Vec<DVector<f64>> = truth
        .iter()
        .skip(1)
        .map(|r| vector(r, &tx))
        .collect::<Result<_>>()?;
    let zs: Vec<DVector<f64>> = truth
        .iter()
        .skip(1)
        .map(|r| vector(r, &tz))
        .collect::<Result<_>>()?;
    let estimates: Vec<StepEstimates> = est
        .iter()
        .map(|r| {
            Ok(StepEstimates {
                theta: vector(r, &et)?,
                x: vector(r, &ex)?,
                z: vector(r, &ez)?,
            })
        })
        .collect::<Result<_>>()?;
    MetricSeries::score(
        theta,
        &xs.iter().collect::<Vec<_>>(),
        &zs.iter().collect::<Vec<_>>(),
        &estimates,
    )
}

/// The NMSE columns of a `metrics.csv`.
pub fn read_metrics_csv(path: &Path) -> Result<MetricSeries> {
    let (head, rows) = read_csv(path)?;
    let (a, b, c) = (
        column(&head, "nmse_theta")?,
        column(&head, "nmse_x")?,
        column(&head, "nmse_z")?,
    );
    Ok(MetricSeries {
        theta: rows.iter().map(|r| r[a]).collect(),
        x: rows.iter().map(|r| r[b]).collect(),
        z: rows.iter().map(|r| r[c]).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub seed: u64,
    pub dir: String,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub steps_completed: usize,
    pub max_weight_sum_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub command: String,
    pub config_hash: String,
    /// Canonical TOML of the effective configuration.
    pub config: String,
    pub master_seed: u64,
    pub steps: usize,
    pub threads: usize,
    pub version: String,
    pub replications: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("manifest.json"))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn config(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::from_toml_str(&self.config)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub config_hash: String,
    pub method: Method,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "J")]
    pub j: usize,
    pub replications: usize,
    pub replications_ok: usize,
    pub per_t: PerT,
    pub runtime_s: f64,
}

/// Outcome of `run_experiment`.
#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub out_dir: PathBuf,
    pub manifest: Manifest,
    pub summary: Summary,
    pub results: Vec<ReplicationResult>,
}

impl ExperimentReport {
    pub fn all_failed(&self) -> bool {
        self.results.iter().all(|r| !r.completed())
    }
}

fn run_dir_name(index: usize) -> String {
    format!("run_{index:03}")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn manifest_base(cfg: &ExperimentConfig, command: &str) -> Manifest {
    Manifest {
        schema_version: SCHEMA_VERSION,
        command: command.into(),
        config_hash: cfg.hash(),
        config: cfg.to_toml(),
        master_seed: cfg.experiment.seed,
        steps: cfg.steps(),
        threads: rayon::current_num_threads(),
        version: env!("CARGO_PKG_VERSION").into(),
        replications: Vec::new(),
    }
}

fn spinup(cfg: &ExperimentConfig, m: &MultiScaleModel) -> Result<StatePair> {
    spinup_init(m, &cfg.model.theta(), cfg.experiment.spinup)
}

/// Full pipeline: spin-up, then per replication truth, observations and
/// the smoother, with artifacts written under `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentReport> {
    cfg.validate()?;
    let start = Instant::now();
    let m = cfg.build_model()?;
    let init = spinup(cfg, &m)?;
    fs::create_dir_all(out_dir)?;
    let dims = m.dims();
    let results: Vec<ReplicationResult> = (0..cfg.experiment.replications)
        .into_par_iter()
        .map(|r| {
            let res = run_replication(cfg, &m, &init, r)?;
            let dir = out_dir.join(run_dir_name(r));
            fs::create_dir_all(&dir)?;
            write_truth_csv(&dir.join("truth.csv"), &res.truth)?;
            if cfg.experiment.store_micro {
                write_truth_micro_csv(&dir.join("truth_micro.csv"), &res.truth)?;
            }
            write_obs_csv(&dir.join("obs.csv"), &res.obs)?;
            write_estimates_csv(
                &dir.join("estimates.csv"),
                &res.trace.estimates,
                (dims.d_theta, dims.d_x, dims.d_z),
            )?;
            write_metrics_csv(&dir.join("metrics.csv"), &res.trace, &res.metrics)?;
            write_json(
                &dir.join("timing.json"),
                &serde_json::json!({ "wall_ms": res.trace.wall_ms }),
            )?;
            Ok(res)
        })
        .collect::<Result<_>>()?;

    let mut manifest = manifest_base(cfg, "run");
    manifest.replications = results
        .iter()
        .map(|r| ManifestEntry {
            index: r.index,
            seed: r.seed,
            dir: run_dir_name(r.index),
            status: if r.completed() { "ok" } else { "failed" }.into(),
            error: r.error.clone(),
            steps_completed: r.trace.len(),
            max_weight_sum_error: r
                .trace
                .diagnostics
                .iter()
                .map(|d| d.weight_sum_error)
                .fold(0.0, f64::max),
        })
        .collect();
    let completed: Vec<&MetricSeries> = results
        .iter()
        .filter(|r| r.completed())
        .map(|r| &r.metrics)
        .collect();
    let summary = Summary {
        schema_version: SCHEMA_VERSION,
        config_hash: manifest.config_hash.clone(),
        method: cfg.method.method,
        n: cfg.method.n,
        j: cfg.method.j,
        replications: results.len(),
        replications_ok: completed.len(),
        per_t: PerT::across(&completed),
        runtime_s: start.elapsed().as_secs_f64(),
    };
    write_json(&out_dir.join("manifest.json"), &manifest)?;
    write_json(&out_dir.join("summary.json"), &summary)?;
    Ok(ExperimentReport {
        out_dir: out_dir.to_path_buf(),
        manifest,
        summary,
        results,
    })
}

/// Truth and observations only.
pub fn simulate(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let m = cfg.build_model()?;
    let init = spinup(cfg, &m)?;
    fs::create_dir_all(out_dir)?;
    let theta = cfg.model.theta();
    let entries = (0..cfg.experiment.replications)
        .into_par_iter()
        .map(|r| {
            let seed = replication_seed(cfg.experiment.seed, r);
            let (truth, obs) = replication_data(&m, &theta, &init, cfg.steps(), seed)?;
            let dir = out_dir.join(run_dir_name(r));
            fs::create_dir_all(&dir)?;
            write_truth_csv(&dir.join("truth.csv"), &truth)?;
            if cfg.experiment.store_micro {
                write_truth_micro_csv(&dir.join("truth_micro.csv"), &truth)?;
            }
            write_obs_csv(&dir.join("obs.csv"), &obs)?;
            Ok(ManifestEntry {
                index: r,
                seed,
                dir: run_dir_name(r),
                status: "ok".into(),
                error: None,
                steps_completed: truth.steps(),
                max_weight_sum_error: 0.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut manifest = manifest_base(cfg, "simulate");
    manifest.replications = entries;
    write_json(&out_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Evaluation {
    /// Largest `|recomputed − stored|` over every NMSE entry of every run.
    pub max_metric_diff: f64,
    /// Largest difference between recomputed and stored summary bands.
    pub max_summary_diff: f64,
    /// Entries defined in one version and missing in the other.
    pub mismatched_missing: usize,
    pub runs: usize,
}

impl Evaluation {
    pub fn matches(&self, tol: f64) -> bool {
        self.mismatched_missing == 0 && self.max_metric_diff <= tol && self.max_summary_diff <= tol
    }
}

fn compare(a: &[Option<f64>], b: &[Option<f64>], ev: &mut f64, missing: &mut usize) {
    if a.len() != b.len() {
        *missing += a.len().abs_diff(b.len());
    }
    for (x, y) in a.iter().zip(b) {
        match (x, y) {
            (Some(x), Some(y)) if x.is_nan() && y.is_nan() => {}
            (Some(x), Some(y)) => *ev = ev.max((x - y).abs()),
            (None, None) => {}
            _ => *missing += 1,
        }
    }
}

/// Recompute every run's metrics and the summary bands from the stored
/// CSVs of a `run` output directory, and compare with what was written.
pub fn evaluate(out_dir: &Path) -> Result<Evaluation> {
    let manifest = Manifest::load(out_dir)?;
    let cfg = manifest.config()?;
    let theta = cfg.model.theta();
    let mut ev = Evaluation::default();
    let mut completed = Vec::new();
    for entry in &manifest.replications {
        let dir = out_dir.join(&entry.dir);
        let fresh = recompute_metrics(&dir, &theta)?;
        let stored = read_metrics_csv(&dir.join("metrics.csv"))?;
        for (a, b) in [
            (&fresh.theta, &stored.theta),
            (&fresh.x, &stored.x),
            (&fresh.z, &stored.z),
        ] {
            compare(a, b, &mut ev.max_metric_diff, &mut ev.mismatched_missing);
        }
        ev.runs += 1;
        if entry.status == "ok" {
            completed.push(fresh);
        }
    }
    let summary: Summary =
        serde_json::from_str(&fs::read_to_string(out_dir.join("summary.json"))?)?;
    let per_t = PerT::across(&completed.iter().collect::<Vec<_>>());
    for (a, b) in [
        (&per_t.nmse_theta, &summary.per_t.nmse_theta),
        (&per_t.nmse_x, &summary.per_t.nmse_x),
        (&per_t.nmse_z, &summary.per_t.nmse_z),
    ] {
        for (u, v) in [(&a.median, &b.median), (&a.q25, &b.q25), (&a.q75, &b.q75)] {
            compare(u, v, &mut ev.max_summary_diff, &mut ev.mismatched_missing);
        }
    }
    Ok(ev)
}
