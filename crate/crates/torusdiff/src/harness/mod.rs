//! Experiment harness: configuration, single-instance runs, convergence-rate
//! sweeps, and rate fitting.
//!
//! A sweep simulates one master trajectory, sub-samples it into `(tau, T)`
//! instances per the chosen scheme, trains the estimator pair per instance
//! and seed, and evaluates population losses on a shared set of test points.
//! Instances run in parallel; every random stream is derived from seeds fixed
//! in the configuration, so results are independent of scheduling and reruns
//! are byte-identical.
//!
//! Measured wall time is reported in `summary.json`. The `wall_time_s` CSV
//! column is 0 unless `record_wall_time` is set: the canonical `sweep.csv`
//! is a deterministic artifact, and real timings would break the
//! byte-identical rerun guarantee.

pub mod emit;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::estimator::{
    evaluate_population_loss, run_algorithm1, uniform_test_points, ArchChoice, EstimatorPair,
    FieldKind, FnPredictor, pack_symmetric, predict_chunked, Predictor, TrainConfig,
    trajectory_test_points,
};
use crate::model::{make_constant_model, make_example_model, ExampleModel, SdeModel};
use crate::seed;
use crate::sim::{simulate, subsample, Trajectory};

fn default_test_points() -> usize {
    50_000
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Master-trajectory parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MasterConfig {
    pub tau0: f64,
    pub t0: f64,
    pub seed: u64,
    /// Start point; defaults to the origin.
    pub x0: Option<Vec<f64>>,
}

impl Default for MasterConfig {
    fn default() -> Self {
        MasterConfig {
            tau0: 1e-4,
            t0: 200.0,
            seed: 1,
            x0: None,
        }
    }
}

/// Single-instance `(tau, T)` selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceParams {
    pub tau: f64,
    pub t_horizon: f64,
}

/// Parameters of a constant-coefficient model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantSpec {
    pub b0: Vec<f64>,
    pub sigma0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    A,
    B,
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Scheme::A => write!(f, "A"),
            Scheme::B => write!(f, "B"),
        }
    }
}

/// Sweep description: scheme A fixes `tau` and grows `T = N tau`; scheme B
/// fixes `T` and shrinks `tau = T / N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub scheme: Scheme,
    #[serde(default)]
    pub tau_fixed: Option<f64>,
    #[serde(default)]
    pub t_fixed: Option<f64>,
    pub n_grid: Vec<usize>,
    pub seeds: Vec<u64>,
}

/// Root configuration; one JSON file drives every subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// "example" or "constant".
    pub model: String,
    #[serde(default)]
    pub constant: Option<ConstantSpec>,
    #[serde(default)]
    pub master: MasterConfig,
    #[serde(default)]
    pub instance: Option<InstanceParams>,
    #[serde(default)]
    pub sizing: ArchChoice,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_test_points")]
    pub test_points: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub record_wall_time: bool,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
}

fn config_err(key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        message: message.into(),
    }
}

fn is_integer_multiple(tau: f64, tau0: f64) -> bool {
    if tau <= 0.0 {
        return false;
    }
    let ratio = tau / tau0;
    let stride = ratio.round();
    stride >= 1.0 && (ratio - stride).abs() <= 1e-9 * ratio.max(1.0)
}

impl RunConfig {
    /// Full validation; every violation names the offending key.
    pub fn validate(&self) -> Result<()> {
        let d = match self.model.as_str() {
            "example" => {
                if self.constant.is_some() {
                    return Err(config_err(
                        "constant",
                        "only valid when model = \"constant\"",
                    ));
                }
                2
            }
            "constant" => {
                let spec = self
                    .constant
                    .as_ref()
                    .ok_or_else(|| config_err("constant", "required when model = \"constant\""))?;
                if spec.b0.is_empty() {
                    return Err(config_err("constant.b0", "must be nonempty"));
                }
                if !(spec.sigma0 > 0.0) {
                    return Err(config_err("constant.sigma0", "must be positive"));
                }
                spec.b0.len()
            }
            other => {
                return Err(config_err(
                    "model",
                    format!("unknown model `{other}`; expected \"example\" or \"constant\""),
                ))
            }
        };
        if !(self.master.tau0 > 0.0 && self.master.tau0 <= 1.0) {
            return Err(config_err("master.tau0", "must be in (0, 1]"));
        }
        if self.master.t0 < self.master.tau0 {
            return Err(config_err("master.t0", "must be at least tau0"));
        }
        if let Some(x0) = &self.master.x0 {
            if x0.len() != d {
                return Err(config_err(
                    "master.x0",
                    format!("needs {d} components for this model"),
                ));
            }
        }
        if self.test_points == 0 {
            return Err(config_err("test_points", "must be positive"));
        }
        match (&self.instance, &self.sweep) {
            (None, None) => {
                return Err(config_err(
                    "instance",
                    "provide an instance block or a sweep block",
                ))
            }
            (Some(_), Some(_)) => {
                return Err(config_err(
                    "sweep",
                    "provide either instance or sweep, not both",
                ))
            }
            (Some(inst), None) => {
                if !is_integer_multiple(inst.tau, self.master.tau0) {
                    return Err(config_err(
                        "tau",
                        format!(
                            "{} is not an integer multiple of master.tau0 = {}",
                            inst.tau, self.master.tau0
                        ),
                    ));
                }
                if inst.t_horizon > self.master.t0 {
                    return Err(config_err(
                        "t_horizon",
                        format!("{} exceeds master.t0 = {}", inst.t_horizon, self.master.t0),
                    ));
                }
                if inst.tau > inst.t_horizon {
                    return Err(config_err("tau", "must not exceed t_horizon"));
                }
            }
            (None, Some(sweep)) => {
                if sweep.n_grid.is_empty() {
                    return Err(config_err("n_grid", "must be nonempty"));
                }
                if !sweep.n_grid.windows(2).all(|w| w[0] < w[1]) {
                    return Err(config_err("n_grid", "must be strictly ascending"));
                }
                if sweep.seeds.is_empty() {
                    return Err(config_err("seeds", "must be nonempty"));
                }
                for &n in &sweep.n_grid {
                    let (tau, t) = scheme_point(sweep, n)?;
                    if !is_integer_multiple(tau, self.master.tau0) {
                        return Err(config_err(
                            "n_grid",
                            format!(
                                "N = {n} gives tau = {tau}, not a multiple of master.tau0 = {}",
                                self.master.tau0
                            ),
                        ));
                    }
                    if t > self.master.t0 {
                        return Err(config_err(
                            "n_grid",
                            format!("N = {n} gives T = {t}, exceeding master.t0 = {}", self.master.t0),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn build_model(&self) -> Result<Box<dyn SdeModel>> {
        match self.model.as_str() {
            "example" => Ok(Box::new(make_example_model())),
            "constant" => {
                let spec = self
                    .constant
                    .as_ref()
                    .ok_or_else(|| config_err("constant", "required when model = \"constant\""))?;
                Ok(Box::new(make_constant_model(spec.b0.clone(), spec.sigma0)?))
            }
            other => Err(config_err("model", format!("unknown model `{other}`"))),
        }
    }

    pub fn x0(&self, dim: usize) -> Vec<f64> {
        self.master
            .x0
            .clone()
            .unwrap_or_else(|| vec![0.0; dim])
    }

    /// Stable hash of the canonical JSON form; recorded in manifests.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", seed::fnv1a64(text.as_bytes()))
    }

    /// Test points from the stationary law: uniform for the benchmark model,
    /// otherwise sub-sampled from an independent long trajectory.
    pub fn make_test_points(&self, model: &dyn SdeModel) -> Result<Array2<f64>> {
        let pts_seed = seed::derive(self.master.seed, "test-points");
        if self.model == "example" {
            Ok(uniform_test_points(self.test_points, model.dim(), pts_seed))
        } else {
            let indep = simulate(
                model,
                &self.x0(model.dim()),
                self.master.tau0.max(1e-3),
                self.master.t0,
                seed::derive(self.master.seed, "test-trajectory"),
            )?;
            trajectory_test_points(&indep.burn_in(0.05), self.test_points, pts_seed)
        }
    }
}

/// Loads and validates a config file.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    let cfg: RunConfig = serde_json::from_str(&text)?;
    cfg.validate()?;
    Ok(cfg)
}

fn scheme_point(sweep: &SweepSpec, n: usize) -> Result<(f64, f64)> {
    match sweep.scheme {
        Scheme::A => {
            let tau = sweep
                .tau_fixed
                .ok_or_else(|| config_err("tau_fixed", "required for scheme A"))?;
            Ok((tau, n as f64 * tau))
        }
        Scheme::B => {
            let t = sweep
                .t_fixed
                .ok_or_else(|| config_err("t_fixed", "required for scheme B"))?;
            Ok((t / n as f64, t))
        }
    }
}

/// One result row; the CSV schema is
/// `scheme,N,tau,T,seed,drift_loss,diffusion_loss,f_recovery_error,wall_time_s,status`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub scheme: String,
    pub n: usize,
    pub tau: f64,
    pub t_horizon: f64,
    pub seed: u64,
    pub drift_loss: f64,
    pub diffusion_loss: f64,
    pub f_recovery_error: f64,
    /// Deterministic column written to the CSV; 0 unless `record_wall_time`.
    pub wall_time_s: f64,
    pub status: String,
    /// Measured seconds; reported via `summary.json` only.
    pub measured_wall_s: f64,
}

impl SweepRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

/// How estimators for an instance are produced.
pub enum EstimatorMode<'a> {
    /// Two-stage training on the instance's observation set.
    Train,
    /// Truth-injected predictors from a model; no training.
    Oracle(&'a dyn SdeModel),
}

/// Mean square of `sqrt(2 D_11_hat) - f` over test points; the benchmark
/// model satisfies `D = (f^2 / 2) I`, so any diagonal entry recovers `f`.
fn f_recovery_error(
    diffusion: &dyn Predictor,
    example: &ExampleModel,
    test_points: &Array2<f64>,
) -> f64 {
    let out = predict_chunked(diffusion, test_points.view());
    let mut acc = 0.0;
    for (row, pt) in out.outer_iter().zip(test_points.outer_iter()) {
        let d11 = row[0].max(0.0);
        let f_hat = (2.0 * d11).sqrt();
        let f_true = example.f(pt.as_slice().expect("contiguous"));
        acc += (f_hat - f_true) * (f_hat - f_true);
    }
    acc / test_points.nrows() as f64
}

/// Runs one `(tau, T, seed)` instance against a shared master trajectory and
/// test points. Stage failures are recorded in the row status rather than
/// returned, so a sweep continues past a bad instance. The trained pair is
/// returned for successful training runs.
#[allow(clippy::too_many_arguments)]
pub fn run_instance_on(
    model: &dyn SdeModel,
    master: &Trajectory,
    test_points: &Array2<f64>,
    scheme: &str,
    tau: f64,
    t_horizon: f64,
    row_seed: u64,
    cfg: &RunConfig,
    mode: EstimatorMode<'_>,
) -> (SweepRow, Option<EstimatorPair>) {
    let start = Instant::now();
    let mut row = SweepRow {
        scheme: scheme.to_string(),
        n: 0,
        tau,
        t_horizon,
        seed: row_seed,
        drift_loss: f64::NAN,
        diffusion_loss: f64::NAN,
        f_recovery_error: f64::NAN,
        wall_time_s: 0.0,
        status: "ok".to_string(),
        measured_wall_s: 0.0,
    };
    let finish = |mut row: SweepRow, pair: Option<EstimatorPair>| {
        row.measured_wall_s = start.elapsed().as_secs_f64();
        if cfg.record_wall_time {
            row.wall_time_s = row.measured_wall_s;
        }
        (row, pair)
    };

    let obs = match subsample(master, tau, t_horizon) {
        Ok(obs) => obs,
        Err(_) => {
            row.status = "failed:subsample".into();
            return finish(row, None);
        }
    };
    row.n = obs.num_increments();

    let example = ExampleModel::new();
    let pair = match mode {
        EstimatorMode::Train => {
            let train_cfg = TrainConfig {
                seed: row_seed,
                ..cfg.train.clone()
            };
            match run_algorithm1(&obs, cfg.sizing, &train_cfg) {
                Ok(pair) => pair,
                Err(e) => {
                    row.status = match e {
                        Error::Stage { stage, .. } => format!("failed:{stage}"),
                        _ => "failed:train".into(),
                    };
                    return finish(row, None);
                }
            }
        }
        EstimatorMode::Oracle(truth) => {
            let d = truth.dim();
            let drift = FnPredictor::new(d, |x: &[f64]| truth.drift(x).to_vec());
            let diff = FnPredictor::new(crate::estimator::packed_dim(d), |x: &[f64]| {
                pack_symmetric(truth.diffusion(x).view())
                    .expect("model diffusion is symmetric")
                    .to_vec()
            });
            row.drift_loss =
                evaluate_population_loss(&drift, model, test_points.view(), FieldKind::Drift);
            row.diffusion_loss =
                evaluate_population_loss(&diff, model, test_points.view(), FieldKind::Diffusion);
            if cfg.model == "example" {
                row.f_recovery_error = f_recovery_error(&diff, &example, test_points);
            }
            if !row.drift_loss.is_finite() || !row.diffusion_loss.is_finite() {
                row.status = "failed:evaluate".into();
            }
            return finish(row, None);
        }
    };

    row.drift_loss =
        evaluate_population_loss(&pair.drift_net, model, test_points.view(), FieldKind::Drift);
    row.diffusion_loss = evaluate_population_loss(
        &pair.diffusion_net,
        model,
        test_points.view(),
        FieldKind::Diffusion,
    );
    if cfg.model == "example" {
        row.f_recovery_error = f_recovery_error(&pair.diffusion_net, &example, test_points);
    }
    if !row.drift_loss.is_finite() || !row.diffusion_loss.is_finite() {
        row.status = "failed:evaluate".into();
    }
    finish(row, Some(pair))
}

/// Simulates the master trajectory of a config.
pub fn simulate_master(cfg: &RunConfig, model: &dyn SdeModel) -> Result<Trajectory> {
    simulate(
        model,
        &cfg.x0(model.dim()),
        cfg.master.tau0,
        cfg.master.t0,
        cfg.master.seed,
    )
    .map_err(|e| e.in_stage("simulate"))
}

/// Runs the single instance described by `cfg.instance`, training estimators
/// and returning the result row together with the trained pair.
pub fn run_single(cfg: &RunConfig) -> Result<(SweepRow, Option<EstimatorPair>)> {
    cfg.validate()?;
    let inst = cfg
        .instance
        .ok_or_else(|| config_err("instance", "missing instance block"))?;
    let model = cfg.build_model()?;
    let master = simulate_master(cfg, model.as_ref())?;
    let test_points = cfg.make_test_points(model.as_ref())?;
    Ok(run_instance_on(
        model.as_ref(),
        &master,
        &test_points,
        "single",
        inst.tau,
        inst.t_horizon,
        cfg.train.seed,
        cfg,
        EstimatorMode::Train,
    ))
}

/// Aggregated metrics for one `(scheme, N)` grid point: per-metric mean and
/// 95% confidence half-width over seeds.
#[derive(Debug, Clone, Serialize)]
pub struct AggregateRow {
    pub scheme: String,
    pub n: usize,
    pub num_ok: usize,
    pub mean_drift_loss: f64,
    pub ci_drift_loss: f64,
    pub mean_diffusion_loss: f64,
    pub ci_diffusion_loss: f64,
    pub mean_f_recovery_error: f64,
    pub ci_f_recovery_error: f64,
}

/// Two-sided 95% Student-t quantiles for df = 1..=30; normal beyond.
const T_95: [f64; 30] = [
    12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228, 2.201, 2.179, 2.160,
    2.145, 2.131, 2.120, 2.110, 2.101, 2.093, 2.086, 2.080, 2.074, 2.069, 2.064, 2.060, 2.056,
    2.052, 2.048, 2.045, 2.042,
];

fn mean_ci(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1.0);
    let t = if values.len() - 1 <= 30 {
        T_95[values.len() - 2]
    } else {
        1.96
    };
    (mean, t * (var / k).sqrt())
}

/// Sweep output: per-instance rows, per-grid-point aggregates, and the rate
/// fit over the decreasing segment of the mean diffusion loss.
#[derive(Debug, Clone)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub aggregates: Vec<AggregateRow>,
    /// Number of leading grid points over which the mean diffusion loss is
    /// strictly decreasing.
    pub fit_segment_len: usize,
    pub rate_fit: Option<RateFit>,
}

fn aggregate(rows: &[SweepRow]) -> Vec<AggregateRow> {
    let mut keys: Vec<(String, usize)> = rows
        .iter()
        .map(|r| (r.scheme.clone(), r.n))
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    keys.sort();
    keys.into_iter()
        .map(|(scheme, n)| {
            let ok: Vec<&SweepRow> = rows
                .iter()
                .filter(|r| r.scheme == scheme && r.n == n && r.is_ok())
                .collect();
            let collect = |f: fn(&SweepRow) -> f64| -> Vec<f64> {
                ok.iter().map(|r| f(r)).filter(|v| v.is_finite()).collect()
            };
            let (mean_drift, ci_drift) = mean_ci(&collect(|r| r.drift_loss));
            let (mean_diff, ci_diff) = mean_ci(&collect(|r| r.diffusion_loss));
            let (mean_f, ci_f) = mean_ci(&collect(|r| r.f_recovery_error));
            AggregateRow {
                scheme,
                n,
                num_ok: ok.len(),
                mean_drift_loss: mean_drift,
                ci_drift_loss: ci_drift,
                mean_diffusion_loss: mean_diff,
                ci_diffusion_loss: ci_diff,
                mean_f_recovery_error: mean_f,
                ci_f_recovery_error: ci_f,
            }
        })
        .collect()
}

/// Runs the sweep described by `cfg.sweep`; instances execute in parallel
/// and rows are sorted by `(scheme, N, seed)`.
pub fn run_sweep(cfg: &RunConfig) -> Result<SweepResult> {
    cfg.validate()?;
    let spec = cfg
        .sweep
        .clone()
        .ok_or_else(|| config_err("sweep", "missing sweep block"))?;
    let model = cfg.build_model()?;
    let master = Arc::new(simulate_master(cfg, model.as_ref())?);
    let test_points = Arc::new(cfg.make_test_points(model.as_ref())?);

    let mut jobs: Vec<(usize, f64, f64, u64)> = Vec::new();
    for &n in &spec.n_grid {
        let (tau, t) = scheme_point(&spec, n)?;
        for &s in &spec.seeds {
            jobs.push((n, tau, t, s));
        }
    }
    let scheme = spec.scheme.to_string();
    let mut rows: Vec<SweepRow> = jobs
        .par_iter()
        .map(|&(_, tau, t, s)| {
            run_instance_on(
                model.as_ref(),
                &master,
                &test_points,
                &scheme,
                tau,
                t,
                s,
                cfg,
                EstimatorMode::Train,
            )
            .0
        })
        .collect();
    rows.sort_by(|a, b| {
        (a.scheme.as_str(), a.n, a.seed).cmp(&(b.scheme.as_str(), b.n, b.seed))
    });

    let aggregates = aggregate(&rows);
    let mut segment = 1usize;
    while segment < aggregates.len()
        && aggregates[segment].mean_diffusion_loss < aggregates[segment - 1].mean_diffusion_loss
    {
        segment += 1;
    }
    let rate_fit = if segment >= 2 {
        let pts: Vec<(f64, f64)> = aggregates
            .iter()
            .map(|a| (a.n as f64, a.mean_diffusion_loss))
            .collect();
        fit_rate(&pts, 0..segment).ok()
    } else {
        None
    };
    Ok(SweepResult {
        rows,
        aggregates,
        fit_segment_len: segment,
        rate_fit,
    })
}

/// Least-squares line in `(log N, log error)` coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
}

/// Ordinary least squares on the log-log pairs of `points[segment]`.
pub fn fit_rate(points: &[(f64, f64)], segment: std::ops::Range<usize>) -> Result<RateFit> {
    let chosen = points
        .get(segment.clone())
        .ok_or_else(|| Error::InvalidInput("fit_rate: segment out of range".into()))?;
    if chosen.len() < 2 {
        return Err(Error::InvalidInput(
            "fit_rate: need at least two points".into(),
        ));
    }
    for &(n, e) in chosen {
        if !(n > 0.0) || !(e > 0.0) {
            return Err(Error::InvalidInput(format!(
                "fit_rate: nonpositive point ({n}, {e})"
            )));
        }
    }
    let logs: Vec<(f64, f64)> = chosen.iter().map(|&(n, e)| (n.ln(), e.ln())).collect();
    let k = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / k;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let slope = sxy / sxx;
    Ok(RateFit {
        slope,
        intercept: my - slope * mx,
    })
}
