//! Euler-Maruyama integration and sub-sampling into observation sets.
//!
//! Trajectories are integrated in unwrapped coordinates in `R^d`; this is
//! valid because coefficients are 1-periodic, and it keeps raw increments
//! `x_{(k+1)tau} - x_{k tau}` meaningful across cell boundaries. Wrapping is
//! applied only when a position is used as a regressor input, never to an
//! increment.
//!
//! Noise is drawn from a ChaCha8 stream seeded per trajectory; step `k`
//! consumes the `r` standard-normal components for that step in order, so a
//! `(model, x0, tau0, T0, seed)` tuple reproduces the same trajectory bit for
//! bit on a given build.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::SdeModel;

/// Number of steps of size `step` that fit in `horizon`, tolerating 1e-9
/// relative rounding in the quotient.
fn tolerant_floor(horizon: f64, step: f64) -> usize {
    let q = horizon / step;
    let f = q.floor();
    if q - f > 1.0 - 1e-9 * q.max(1.0) {
        (f as usize) + 1
    } else {
        f as usize
    }
}

/// One explicit Euler-Maruyama step `x + b(x) tau + Sigma(x) (sqrt(tau) xi)`.
///
/// `noise` holds the `r` standard-normal draws for the step.
pub fn em_step(
    model: &dyn SdeModel,
    x: &[f64],
    tau: f64,
    noise: &[f64],
) -> Result<Array1<f64>> {
    assert!(tau > 0.0, "em_step: tau must be positive");
    assert_eq!(noise.len(), model.noise_dim(), "em_step: noise length");
    let b = model.drift(x);
    let s = model.sigma(x);
    let xi = ArrayView1::from(noise);
    let mut next = Array1::from(x.to_vec());
    next += &(b * tau);
    next += &s.dot(&(xi.to_owned() * tau.sqrt()));
    if next.iter().all(|v| v.is_finite()) {
        Ok(next)
    } else {
        Err(Error::NonFiniteStep)
    }
}

/// A fine-step trajectory in unwrapped coordinates.
#[derive(Debug, Clone)]
pub struct Trajectory {
    tau0: f64,
    /// `(num_steps + 1) x d` snapshot matrix; row `k` is `x_{k tau0}`.
    points: Array2<f64>,
    seed: u64,
    model_name: String,
}

/// Sidecar metadata written next to a trajectory CSV.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrajectoryMeta {
    pub model: String,
    pub tau0: f64,
    pub seed: u64,
    pub t0: f64,
}

impl Trajectory {
    pub fn tau0(&self) -> f64 {
        self.tau0
    }

    pub fn points(&self) -> &Array2<f64> {
        &self.points
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn model_name(&self) -> &str {
        &self.model_name
    }

    /// Simulated horizon `T0 = num_steps * tau0`.
    pub fn t0(&self) -> f64 {
        (self.len() - 1) as f64 * self.tau0
    }

    /// Drops the leading `fraction` of the horizon; used before stationarity
    /// diagnostics so the initial transient does not bias occupancy.
    pub fn burn_in(&self, fraction: f64) -> Trajectory {
        assert!((0.0..1.0).contains(&fraction));
        let skip = ((self.len() - 1) as f64 * fraction).floor() as usize;
        Trajectory {
            tau0: self.tau0,
            points: self.points.slice(ndarray::s![skip.., ..]).to_owned(),
            seed: self.seed,
            model_name: self.model_name.clone(),
        }
    }

    /// Writes `t,x1,...,xd` CSV plus a `<stem>.meta.json` sidecar.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_snapshot_csv(path, self.tau0, &self.points)?;
        let meta = TrajectoryMeta {
            model: self.model_name.clone(),
            tau0: self.tau0,
            seed: self.seed,
            t0: self.t0(),
        };
        write_json(&meta_path(path), &meta)
    }

    pub fn read_csv(path: &Path) -> Result<Trajectory> {
        let meta: TrajectoryMeta = read_json(&meta_path(path))?;
        let points = read_snapshot_csv(path)?;
        Ok(Trajectory {
            tau0: meta.tau0,
            points,
            seed: meta.seed,
            model_name: meta.model,
        })
    }
}

/// Integrates `floor(T0/tau0)` Euler-Maruyama steps from `x0`.
pub fn simulate(
    model: &dyn SdeModel,
    x0: &[f64],
    tau0: f64,
    t0: f64,
    seed: u64,
) -> Result<Trajectory> {
    if !(tau0 > 0.0 && tau0 <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "simulate: tau0 must be in (0, 1], got {tau0}"
        )));
    }
    if t0 < tau0 {
        return Err(Error::InvalidInput(format!(
            "simulate: T0 = {t0} is smaller than tau0 = {tau0}"
        )));
    }
    let d = model.dim();
    let r = model.noise_dim();
    assert_eq!(x0.len(), d, "simulate: x0 dimension");
    let num_steps = tolerant_floor(t0, tau0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Array2::zeros((num_steps + 1, d));
    points.row_mut(0).assign(&ArrayView1::from(x0));
    let sqrt_tau = tau0.sqrt();
    let mut x = x0.to_vec();
    let mut noise = vec![0.0; r];
    for k in 0..num_steps {
        for n in noise.iter_mut() {
            *n = rng.sample::<f64, _>(StandardNormal);
        }
        let b = model.drift(&x);
        let s = model.sigma(&x);
        for i in 0..d {
            let mut acc = x[i] + b[i] * tau0;
            for j in 0..r {
                acc += s[[i, j]] * sqrt_tau * noise[j];
            }
            x[i] = acc;
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::IntegrationDiverged { step: k });
        }
        points.row_mut(k + 1).assign(&ArrayView1::from(x.as_slice()));
    }
    Ok(Trajectory {
        tau0,
        points,
        seed,
        model_name: model.name().to_string(),
    })
}

/// The sequence `(x_{k tau})_{k=0..N}` in raw coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    tau: f64,
    /// `(N + 1) x d`.
    positions: Array2<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ObservationMeta {
    pub model: String,
    pub tau: f64,
    pub seed: u64,
    pub t_horizon: f64,
}

impl ObservationSet {
    /// Builds an observation set directly from raw positions; used by
    /// diagnostics on synthetic sequences.
    pub fn from_positions(tau: f64, positions: Array2<f64>) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::InvalidInput(format!(
                "observation set: tau must be positive, got {tau}"
            )));
        }
        if positions.nrows() < 2 {
            return Err(Error::InvalidInput(
                "observation set needs at least two snapshots".into(),
            ));
        }
        Ok(ObservationSet { tau, positions })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn positions(&self) -> &Array2<f64> {
        &self.positions
    }

    pub fn dim(&self) -> usize {
        self.positions.ncols()
    }

    /// Number of increments `N`; there are `N + 1` snapshots.
    pub fn num_increments(&self) -> usize {
        self.positions.nrows() - 1
    }

    pub fn t_horizon(&self) -> f64 {
        self.num_increments() as f64 * self.tau
    }

    /// Raw increment `x_{(k+1)tau} - x_{k tau}`.
    pub fn increment(&self, k: usize) -> Array1<f64> {
        (&self.positions.row(k + 1) - &self.positions.row(k)).to_owned()
    }

    pub fn write_csv(&self, path: &Path, model: &str, seed: u64) -> Result<()> {
        write_snapshot_csv(path, self.tau, &self.positions)?;
        let meta = ObservationMeta {
            model: model.to_string(),
            tau: self.tau,
            seed,
            t_horizon: self.t_horizon(),
        };
        write_json(&meta_path(path), &meta)
    }

    pub fn read_csv(path: &Path) -> Result<(ObservationSet, ObservationMeta)> {
        let meta: ObservationMeta = read_json(&meta_path(path))?;
        let positions = read_snapshot_csv(path)?;
        Ok((ObservationSet::from_positions(meta.tau, positions)?, meta))
    }
}

/// Sub-samples a trajectory at lag `tau` up to horizon `T`.
///
/// `tau` must be an integer multiple of the trajectory's base step (within
/// 1e-9 relative) and `T` must fit inside the simulated horizon. Positions
/// are copied verbatim, so raw increments of the result telescope exactly
/// over the underlying fine steps.
pub fn subsample(traj: &Trajectory, tau: f64, t_horizon: f64) -> Result<ObservationSet> {
    let tau0 = traj.tau0();
    let ratio = tau / tau0;
    let stride = ratio.round();
    if !(tau > 0.0) || stride < 1.0 || (ratio - stride).abs() > 1e-9 * ratio.max(1.0) {
        return Err(Error::InvalidStride { tau, tau0 });
    }
    let stride = stride as usize;
    if t_horizon > traj.t0() * (1.0 + 1e-12) {
        return Err(Error::InsufficientData {
            requested: t_horizon,
            available: traj.t0(),
        });
    }
    if t_horizon < tau {
        return Err(Error::InvalidInput(format!(
            "subsample: horizon {t_horizon} is smaller than tau = {tau}"
        )));
    }
    let n = tolerant_floor(t_horizon, tau);
    if n * stride > traj.len() - 1 {
        return Err(Error::InsufficientData {
            requested: t_horizon,
            available: traj.t0(),
        });
    }
    let d = traj.dim();
    let mut positions = Array2::zeros((n + 1, d));
    for k in 0..=n {
        positions.row_mut(k).assign(&traj.points().row(k * stride));
    }
    ObservationSet::from_positions(tau, positions)
}

fn meta_path(csv_path: &Path) -> PathBuf {
    let mut name = csv_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data".to_string());
    name.push_str(".meta.json");
    csv_path.with_file_name(name)
}

/// 17 significant digits; round-trips every finite f64.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_snapshot_csv(path: &Path, step: f64, points: &Array2<f64>) -> Result<()> {
    let d = points.ncols();
    let mut out = String::new();
    out.push('t');
    for i in 1..=d {
        let _ = write!(out, ",x{i}");
    }
    out.push('\n');
    for (k, row) in points.outer_iter().enumerate() {
        let _ = write!(out, "{}", fmt_f64(k as f64 * step));
        for v in row.iter() {
            let _ = write!(out, ",{}", fmt_f64(*v));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(Error::io(path))
}

fn read_snapshot_csv(path: &Path) -> Result<Array2<f64>> {
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::CsvParse {
        path: path.to_path_buf(),
        line: 1,
        message: "empty file".into(),
    })?;
    let d = header.split(',').count() - 1;
    let mut rows: Vec<f64> = Vec::new();
    let mut count = 0usize;
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 1 {
            return Err(Error::CsvParse {
                path: path.to_path_buf(),
                line: idx + 1,
                message: format!("expected {} fields, got {}", d + 1, fields.len()),
            });
        }
        for f in &fields[1..] {
            rows.push(f.parse::<f64>().map_err(|e| Error::CsvParse {
                path: path.to_path_buf(),
                line: idx + 1,
                message: e.to_string(),
            })?);
        }
        count += 1;
    }
    Array2::from_shape_vec((count, d), rows).map_err(|e| Error::CsvParse {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(Error::io(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    Ok(serde_json::from_str(&text)?)
}
