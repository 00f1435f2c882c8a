//! Two-stage drift/diffusion estimation from one observed trajectory.
//!
//! Stage 1 regresses the finite-difference rate `(x_{(k+1)tau} - x_{k tau}) / tau`
//! on the wrapped position; stage 2 regresses the residual outer product
//! `(dx - b_hat tau)(dx - b_hat tau)^T / (2 tau)` on the wrapped position,
//! using the stage-1 estimator for `b_hat`. Inputs are always wrapped to the
//! fundamental domain; targets always use raw increments, so nothing is ever
//! differenced across a wrap.
//!
//! Symmetric matrices are carried in packed upper-triangular form. The
//! per-component weights returned by [`frobenius_weights`] (1 on diagonal
//! entries, 2 off the diagonal) make the packed squared error equal the
//! squared Frobenius norm of the un-packed difference, so the trained
//! objective is exactly the matrix loss.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::SdeModel;
use crate::nn::{
    adam_step, loss_and_grad, suggest_network_size, AdamParams, AdamState, BoundaryBatch, Network,
    NetworkArch,
};
use crate::seed;
use crate::sim::ObservationSet;
use crate::torus::{self, wrap_coord};

/// Length of the packed upper triangle of a `d x d` symmetric matrix.
pub fn packed_dim(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Packs a symmetric matrix into its upper triangle, row major:
/// `[[a,b],[b,c]] -> (a, b, c)`.
pub fn pack_symmetric(m: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    let d = m.nrows();
    if m.ncols() != d {
        return Err(Error::InvalidInput("pack_symmetric: matrix not square".into()));
    }
    let scale = m.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let tol = 1e-12 * (1.0 + scale);
    let mut out = Array1::zeros(packed_dim(d));
    let mut idx = 0;
    for i in 0..d {
        for j in i..d {
            if (m[[i, j]] - m[[j, i]]).abs() > tol {
                return Err(Error::InvalidInput(format!(
                    "pack_symmetric: entry ({i},{j}) differs from its mirror by {}",
                    (m[[i, j]] - m[[j, i]]).abs()
                )));
            }
            out[idx] = m[[i, j]];
            idx += 1;
        }
    }
    Ok(out)
}

/// Mirrors a packed upper triangle back to a full symmetric matrix.
pub fn unpack_symmetric(v: ArrayView1<'_, f64>) -> Result<Array2<f64>> {
    let len = v.len();
    let d = ((-1.0 + (1.0 + 8.0 * len as f64).sqrt()) / 2.0).round() as usize;
    if packed_dim(d) != len {
        return Err(Error::InvalidInput(format!(
            "unpack_symmetric: length {len} is not d(d+1)/2 for any d"
        )));
    }
    let mut m = Array2::zeros((d, d));
    let mut idx = 0;
    for i in 0..d {
        for j in i..d {
            m[[i, j]] = v[idx];
            m[[j, i]] = v[idx];
            idx += 1;
        }
    }
    Ok(m)
}

/// Component weights that turn a packed squared error into a squared
/// Frobenius norm: diagonal entries weigh 1, off-diagonal entries 2.
pub fn frobenius_weights(d: usize) -> Array1<f64> {
    let mut w = Array1::zeros(packed_dim(d));
    let mut idx = 0;
    for i in 0..d {
        for j in i..d {
            w[idx] = if i == j { 1.0 } else { 2.0 };
            idx += 1;
        }
    }
    w
}

/// A supervised dataset of wrapped inputs and regression targets.
#[derive(Debug, Clone)]
pub struct RegressionDataset {
    /// Wrapped positions, `N x d`.
    pub inputs: Array2<f64>,
    /// Targets, `N x q`.
    pub targets: Array2<f64>,
    /// Per-output weights; `None` means unweighted (drift), `Some` carries
    /// the Frobenius doubling (diffusion).
    pub output_weights: Option<Array1<f64>>,
}

impl RegressionDataset {
    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Anything that maps a batch of wrapped positions to outputs: a trained
/// network, or an oracle closure in tests and truth-injection runs.
pub trait Predictor: Sync {
    fn output_dim(&self) -> usize;
    fn predict_batch(&self, x: ArrayView2<'_, f64>) -> Array2<f64>;
}

impl Predictor for Network {
    fn output_dim(&self) -> usize {
        self.arch().output_dim
    }

    fn predict_batch(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        self.forward_batch(x)
    }
}

/// Adapts a per-point closure into a [`Predictor`].
pub struct FnPredictor<F: Fn(&[f64]) -> Vec<f64> + Sync> {
    f: F,
    output_dim: usize,
}

impl<F: Fn(&[f64]) -> Vec<f64> + Sync> FnPredictor<F> {
    pub fn new(output_dim: usize, f: F) -> Self {
        FnPredictor { f, output_dim }
    }
}

impl<F: Fn(&[f64]) -> Vec<f64> + Sync> Predictor for FnPredictor<F> {
    fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn predict_batch(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = Array2::zeros((x.nrows(), self.output_dim));
        for (k, row) in x.outer_iter().enumerate() {
            let v = (self.f)(row.as_slice().expect("contiguous row"));
            out.row_mut(k).assign(&ArrayView1::from(v.as_slice()));
        }
        out
    }
}

/// Evaluates a predictor over many rows in bounded-memory chunks.
pub fn predict_chunked(pred: &dyn Predictor, x: ArrayView2<'_, f64>) -> Array2<f64> {
    const CHUNK: usize = 4096;
    let mut out = Array2::zeros((x.nrows(), pred.output_dim()));
    let mut start = 0;
    while start < x.nrows() {
        let end = (start + CHUNK).min(x.nrows());
        let block = pred.predict_batch(x.slice(ndarray::s![start..end, ..]));
        out.slice_mut(ndarray::s![start..end, ..]).assign(&block);
        start = end;
    }
    out
}

fn wrapped_inputs(obs: &ObservationSet) -> Array2<f64> {
    let n = obs.num_increments();
    let d = obs.dim();
    let mut inputs = Array2::zeros((n, d));
    for k in 0..n {
        for i in 0..d {
            inputs[[k, i]] = wrap_coord(obs.positions()[[k, i]]);
        }
    }
    inputs
}

/// Dataset for drift regression: pair `k` is
/// `(wrap(x_{k tau}), (x_{(k+1)tau} - x_{k tau}) / tau)`.
pub fn build_drift_dataset(obs: &ObservationSet) -> Result<RegressionDataset> {
    let n = obs.num_increments();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let d = obs.dim();
    let inputs = wrapped_inputs(obs);
    let mut targets = Array2::zeros((n, d));
    let tau = obs.tau();
    for k in 0..n {
        for i in 0..d {
            targets[[k, i]] =
                (obs.positions()[[k + 1, i]] - obs.positions()[[k, i]]) / tau;
        }
    }
    Ok(RegressionDataset {
        inputs,
        targets,
        output_weights: None,
    })
}

/// Dataset for diffusion regression: pair `k` is
/// `(wrap(x_{k tau}), pack((dx - b_hat tau)(dx - b_hat tau)^T / (2 tau)))`
/// where `b_hat` is evaluated at the wrapped position.
pub fn build_diffusion_dataset(
    obs: &ObservationSet,
    drift_estimate: &dyn Predictor,
) -> Result<RegressionDataset> {
    let n = obs.num_increments();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let d = obs.dim();
    assert_eq!(drift_estimate.output_dim(), d, "drift estimator dimension");
    let inputs = wrapped_inputs(obs);
    let b_hat = predict_chunked(drift_estimate, inputs.view());
    let tau = obs.tau();
    let q = packed_dim(d);
    let mut targets = Array2::zeros((n, q));
    let mut residual = vec![0.0; d];
    for k in 0..n {
        for i in 0..d {
            residual[i] = obs.positions()[[k + 1, i]] - obs.positions()[[k, i]]
                - b_hat[[k, i]] * tau;
        }
        let mut idx = 0;
        for i in 0..d {
            for j in i..d {
                targets[[k, idx]] = residual[i] * residual[j] / (2.0 * tau);
                idx += 1;
            }
        }
    }
    Ok(RegressionDataset {
        inputs,
        targets,
        output_weights: Some(frobenius_weights(d)),
    })
}

/// The estimated empirical loss of a predictor on a dataset: the mean over
/// samples of the (weighted) squared output error. For drift datasets this
/// is exactly the mean squared Euclidean error of the rate targets; for
/// diffusion datasets, the mean squared Frobenius error of the matrix
/// targets.
pub fn empirical_loss(pred: &dyn Predictor, dataset: &RegressionDataset) -> f64 {
    let out = predict_chunked(pred, dataset.inputs.view());
    let mut loss = 0.0;
    match &dataset.output_weights {
        None => {
            for (o, t) in out.iter().zip(dataset.targets.iter()) {
                let r = o - t;
                loss += r * r;
            }
        }
        Some(w) => {
            for (orow, trow) in out.outer_iter().zip(dataset.targets.outer_iter()) {
                for j in 0..w.len() {
                    let r = orow[j] - trow[j];
                    loss += w[j] * r * r;
                }
            }
        }
    }
    loss / dataset.len() as f64
}

/// Training hyperparameters.
///
/// `batch_size` is clamped to the dataset size at training time. The
/// periodicity penalty uses `boundary_pairs` pairs drawn once per training
/// run; each optimizer step evaluates the penalty on a subset of at most
/// `batch_size` of them, re-drawn per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon_adam: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda_periodic: f64,
    pub boundary_pairs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon_adam: 1e-8,
            epochs: 200,
            batch_size: 512,
            lambda_periodic: 1.0,
            boundary_pairs: 1000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config {
                    key: key.into(),
                    message: msg.into(),
                })
            }
        };
        check(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            "learning_rate",
            "must be positive and finite",
        )?;
        check(self.beta1 > 0.0 && self.beta1 < 1.0, "beta1", "must be in (0,1)")?;
        check(self.beta2 > 0.0 && self.beta2 < 1.0, "beta2", "must be in (0,1)")?;
        check(self.epsilon_adam > 0.0, "epsilon_adam", "must be positive")?;
        check(self.epochs >= 1, "epochs", "must be at least 1")?;
        check(self.batch_size >= 1, "batch_size", "must be at least 1")?;
        check(
            self.lambda_periodic >= 0.0,
            "lambda_periodic",
            "must be nonnegative",
        )?;
        Ok(())
    }

    fn adam(&self) -> AdamParams {
        AdamParams {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon_adam,
        }
    }
}

/// Trains a network on a dataset by minibatch Adam on the empirical loss
/// plus `lambda_periodic` times the boundary-pair penalty.
///
/// Deterministic per `config.seed`: weight init, batch order and the penalty
/// subsets all come from seeds derived from it.
pub fn train_estimator(
    dataset: &RegressionDataset,
    arch: NetworkArch,
    config: &TrainConfig,
) -> Result<Network> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    config.validate()?;
    assert_eq!(arch.input_dim, dataset.inputs.ncols(), "arch input dim");
    assert_eq!(arch.output_dim, dataset.targets.ncols(), "arch output dim");

    let n = dataset.len();
    let batch = config.batch_size.min(n);
    let mut net = Network::init(arch, seed::derive(config.seed, "init"));

    let use_penalty = config.lambda_periodic > 0.0 && config.boundary_pairs > 0;
    let (pairs_x, pairs_y) = if use_penalty {
        let mut rng = seed::stream(config.seed, "boundary");
        let pairs = torus::sample_boundary_pairs(arch.input_dim, config.boundary_pairs, &mut rng);
        let mut px = Array2::zeros((pairs.len(), arch.input_dim));
        let mut py = Array2::zeros((pairs.len(), arch.input_dim));
        for (k, p) in pairs.iter().enumerate() {
            px.row_mut(k).assign(&ArrayView1::from(p.x.as_slice()));
            py.row_mut(k).assign(&ArrayView1::from(p.y.as_slice()));
        }
        (px, py)
    } else {
        (Array2::zeros((0, arch.input_dim)), Array2::zeros((0, arch.input_dim)))
    };
    let pair_batch = pairs_x.nrows().min(batch);

    let mut batch_rng = seed::stream(config.seed, "batches");
    let mut pair_rng = seed::stream(config.seed, "pair-batch");
    let mut order: Vec<usize> = (0..n).collect();
    let mut grad = vec![0.0; arch.num_params()];
    let mut adam = AdamState::new(arch.num_params());
    let adam_cfg = config.adam();
    let mut step = 0usize;

    for _epoch in 0..config.epochs {
        // Fisher-Yates shuffle from the dedicated stream
        for i in (1..n).rev() {
            let j = batch_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(batch) {
            let x = dataset.inputs.select(Axis(0), chunk);
            let t = dataset.targets.select(Axis(0), chunk);
            let (px, py);
            let boundary = if use_penalty {
                if pair_batch < pairs_x.nrows() {
                    let idx = rand::seq::index::sample(&mut pair_rng, pairs_x.nrows(), pair_batch)
                        .into_vec();
                    px = pairs_x.select(Axis(0), &idx);
                    py = pairs_y.select(Axis(0), &idx);
                } else {
                    px = pairs_x.clone();
                    py = pairs_y.clone();
                }
                Some(BoundaryBatch {
                    x: px.view(),
                    y: py.view(),
                    lambda: config.lambda_periodic,
                })
            } else {
                None
            };
            step += 1;
            let loss = loss_and_grad(
                &net,
                x.view(),
                t.view(),
                dataset.output_weights.as_ref().map(|w| w.view()),
                boundary,
                &mut grad,
            );
            match loss {
                Ok(_) => {}
                Err(Error::NonFiniteLoss { detail, .. }) => {
                    return Err(Error::NonFiniteLoss { step, detail });
                }
                Err(e) => return Err(e),
            }
            adam_step(net.params_mut(), &grad, &mut adam, &adam_cfg);
        }
    }
    if !net.params().iter().all(|p| p.is_finite()) {
        return Err(Error::NonFiniteLoss {
            step,
            detail: "parameters became non-finite after the last update".into(),
        });
    }
    Ok(net)
}

/// Which architecture to use for the two stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArchChoice {
    /// Width and depth from [`suggest_network_size`], with noise exponent 1
    /// for the drift stage and 0 for the diffusion stage.
    Theory { smoothness: f64 },
    /// Fixed width and depth for both stages.
    Explicit {
        hidden_dim: usize,
        num_residual_blocks: usize,
    },
}

impl Default for ArchChoice {
    fn default() -> Self {
        ArchChoice::Theory { smoothness: 2.0 }
    }
}

impl ArchChoice {
    fn resolve(&self, n: usize, tau: f64, gamma: u32, input_dim: usize, output_dim: usize) -> NetworkArch {
        let (hidden_dim, num_residual_blocks) = match *self {
            ArchChoice::Theory { smoothness } => {
                let s = suggest_network_size(n, tau.min(1.0), gamma, smoothness, input_dim);
                (s.hidden_dim, s.num_residual_blocks)
            }
            ArchChoice::Explicit {
                hidden_dim,
                num_residual_blocks,
            } => (hidden_dim, num_residual_blocks),
        };
        NetworkArch {
            input_dim,
            output_dim,
            hidden_dim,
            num_residual_blocks,
        }
    }
}

/// The trained pair of estimators.
#[derive(Debug, Clone)]
pub struct EstimatorPair {
    pub drift_net: Network,
    pub diffusion_net: Network,
}

/// Data provenance stored next to saved estimator pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairManifest {
    pub model: String,
    pub seed: u64,
    pub n: usize,
    pub tau: f64,
    pub t_horizon: f64,
    pub config_hash: String,
}

impl EstimatorPair {
    pub fn save(&self, dir: &Path, manifest: &PairManifest) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        self.drift_net.save(&dir.join("drift_net.json"))?;
        self.diffusion_net.save(&dir.join("diffusion_net.json"))?;
        let text = serde_json::to_string_pretty(manifest)?;
        std::fs::write(dir.join("manifest.json"), text).map_err(Error::io(dir.join("manifest.json")))
    }

    pub fn load(dir: &Path) -> Result<(EstimatorPair, PairManifest)> {
        let drift_net = Network::load(&dir.join("drift_net.json"))?;
        let diffusion_net = Network::load(&dir.join("diffusion_net.json"))?;
        let text = std::fs::read_to_string(dir.join("manifest.json"))
            .map_err(Error::io(dir.join("manifest.json")))?;
        Ok((
            EstimatorPair {
                drift_net,
                diffusion_net,
            },
            serde_json::from_str(&text)?,
        ))
    }
}

/// Runs the two-stage procedure: fit the drift on the rate targets, then fit
/// the diffusion on residual outer products built with the stage-1 drift.
///
/// The stages use the same observation set and seeds derived independently
/// from `config.seed`.
pub fn run_algorithm1(
    obs: &ObservationSet,
    arch_choice: ArchChoice,
    config: &TrainConfig,
) -> Result<EstimatorPair> {
    let d = obs.dim();
    let n = obs.num_increments();
    let tau = obs.tau();

    let drift_dataset = build_drift_dataset(obs).map_err(|e| e.in_stage("train-drift"))?;
    let drift_arch = arch_choice.resolve(n, tau, 1, d, d);
    let drift_cfg = TrainConfig {
        seed: seed::derive(config.seed, "stage-drift"),
        ..config.clone()
    };
    let drift_net = train_estimator(&drift_dataset, drift_arch, &drift_cfg)
        .map_err(|e| e.in_stage("train-drift"))?;

    let diffusion_dataset = build_diffusion_dataset(obs, &drift_net)
        .map_err(|e| e.in_stage("train-diffusion"))?;
    let diffusion_arch = arch_choice.resolve(n, tau, 0, d, packed_dim(d));
    let diffusion_cfg = TrainConfig {
        seed: seed::derive(config.seed, "stage-diffusion"),
        ..config.clone()
    };
    let diffusion_net = train_estimator(&diffusion_dataset, diffusion_arch, &diffusion_cfg)
        .map_err(|e| e.in_stage("train-diffusion"))?;

    Ok(EstimatorPair {
        drift_net,
        diffusion_net,
    })
}

/// Which field a predictor is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    Drift,
    Diffusion,
}

/// True drift values at wrapped test points, `N x d`.
pub fn drift_truth(model: &dyn SdeModel, points: ArrayView2<'_, f64>) -> Array2<f64> {
    let d = model.dim();
    let mut out = Array2::zeros((points.nrows(), d));
    for (k, row) in points.outer_iter().enumerate() {
        let b = model.drift(row.as_slice().expect("contiguous row"));
        out.row_mut(k).assign(&b);
    }
    out
}

/// True diffusion tensors at wrapped test points, packed, `N x d(d+1)/2`.
pub fn diffusion_truth_packed(model: &dyn SdeModel, points: ArrayView2<'_, f64>) -> Array2<f64> {
    let d = model.dim();
    let mut out = Array2::zeros((points.nrows(), packed_dim(d)));
    for (k, row) in points.outer_iter().enumerate() {
        let dm = model.diffusion(row.as_slice().expect("contiguous row"));
        let packed = pack_symmetric(dm.view()).expect("diffusion tensor is symmetric");
        out.row_mut(k).assign(&packed);
    }
    out
}

/// Population loss of a predictor against a known model over test points
/// drawn from the stationary law: the mean squared Euclidean error for the
/// drift, the mean squared Frobenius error for the diffusion.
pub fn evaluate_population_loss(
    pred: &dyn Predictor,
    model: &dyn SdeModel,
    test_points: ArrayView2<'_, f64>,
    kind: FieldKind,
) -> f64 {
    assert!(test_points.nrows() > 0, "population loss needs test points");
    let out = predict_chunked(pred, test_points);
    match kind {
        FieldKind::Drift => {
            let truth = drift_truth(model, test_points);
            let mut loss = 0.0;
            for (o, t) in out.iter().zip(truth.iter()) {
                let r = o - t;
                loss += r * r;
            }
            loss / test_points.nrows() as f64
        }
        FieldKind::Diffusion => {
            let truth = diffusion_truth_packed(model, test_points);
            let w = frobenius_weights(model.dim());
            let mut loss = 0.0;
            for (orow, trow) in out.outer_iter().zip(truth.outer_iter()) {
                for j in 0..w.len() {
                    let r = orow[j] - trow[j];
                    loss += w[j] * r * r;
                }
            }
            loss / test_points.nrows() as f64
        }
    }
}

/// `count` i.i.d. uniform points on the torus; the stationary law of the
/// benchmark model.
pub fn uniform_test_points(count: usize, dim: usize, point_seed: u64) -> Array2<f64> {
    let mut rng = seed::stream(point_seed, "test-points");
    Array2::from_shape_fn((count, dim), |_| rng.gen::<f64>())
}

/// `count` wrapped snapshots sampled without replacement from an independent
/// trajectory; the test-point source for models whose stationary law is not
/// known in closed form.
pub fn trajectory_test_points(
    traj: &crate::sim::Trajectory,
    count: usize,
    point_seed: u64,
) -> Result<Array2<f64>> {
    let n = traj.len();
    if count > n {
        return Err(Error::InvalidInput(format!(
            "requested {count} test points from a trajectory of {n} snapshots"
        )));
    }
    let mut rng = seed::stream(point_seed, "test-points");
    let idx = rand::seq::index::sample(&mut rng, n, count).into_vec();
    let d = traj.dim();
    let mut out = Array2::zeros((count, d));
    for (k, &i) in idx.iter().enumerate() {
        for j in 0..d {
            out[[k, j]] = wrap_coord(traj.points()[[i, j]]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_constant_model, make_example_model};
    use crate::sim::{simulate, subsample};
    use approx::assert_relative_eq;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn pack_examples() {
        let m = array![[1.0, 2.0], [2.0, 5.0]];
        let p = pack_symmetric(m.view()).unwrap();
        assert_eq!(p.to_vec(), vec![1.0, 2.0, 5.0]);
        let back = unpack_symmetric(p.view()).unwrap();
        assert_eq!(back, m);
        assert_eq!(packed_dim(3), 6);
    }

    #[test]
    fn pack_rejects_asymmetry() {
        let m = array![[1.0, 2.0], [2.1, 5.0]];
        assert!(pack_symmetric(m.view()).is_err());
        assert!(unpack_symmetric(array![1.0, 2.0, 3.0, 4.0].view()).is_err());
    }

    proptest! {
        #[test]
        fn prop_pack_unpack_round_trip(vals in prop::collection::vec(-1e6f64..1e6, 6)) {
            let v = Array1::from(vals);
            let m = unpack_symmetric(v.view()).unwrap();
            let p = pack_symmetric(m.view()).unwrap();
            prop_assert_eq!(p, v);
        }
    }

    #[test]
    fn frobenius_weights_reproduce_matrix_norm() {
        let a = array![[1.0, 2.0], [2.0, -3.0]];
        let w = frobenius_weights(2);
        let p = pack_symmetric(a.view()).unwrap();
        let weighted: f64 = (0..3).map(|j| w[j] * p[j] * p[j]).sum();
        let frob: f64 = a.iter().map(|v| v * v).sum();
        assert_relative_eq!(weighted, frob, max_relative = 1e-15);
    }

    #[test]
    fn drift_dataset_arithmetic() {
        let positions = array![[0.0, 0.0], [0.001, 0.002]];
        let obs = ObservationSet::from_positions(0.001, positions).unwrap();
        let ds = build_drift_dataset(&obs).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.inputs.row(0).to_vec(), vec![0.0, 0.0]);
        assert_relative_eq!(ds.targets[[0, 0]], 1.0, max_relative = 1e-12);
        assert_relative_eq!(ds.targets[[0, 1]], 2.0, max_relative = 1e-12);
    }

    #[test]
    fn drift_dataset_uses_raw_increments_across_the_wrap() {
        let positions = array![[0.95, 0.0], [1.05, 0.0]];
        let obs = ObservationSet::from_positions(0.1, positions).unwrap();
        let ds = build_drift_dataset(&obs).unwrap();
        // input is the wrapped position, target the raw rate: (1.0, 0), not (-9.5, 0)
        assert_eq!(ds.inputs.row(0).to_vec(), vec![0.95, 0.0]);
        assert_relative_eq!(ds.targets[[0, 0]], 1.0, max_relative = 1e-12);
        assert_eq!(ds.targets[[0, 1]], 0.0);
    }

    #[test]
    fn drift_targets_of_a_noiseless_constant_model() {
        // zero-noise increments are exactly b0 tau
        let b0 = [0.7, -0.3];
        let tau = 0.05;
        let mut positions = Array2::zeros((21, 2));
        for k in 1..21 {
            for i in 0..2 {
                positions[[k, i]] = positions[[k - 1, i]] + b0[i] * tau;
            }
        }
        let obs = ObservationSet::from_positions(tau, positions).unwrap();
        let ds = build_drift_dataset(&obs).unwrap();
        for k in 0..ds.len() {
            for i in 0..2 {
                assert_relative_eq!(ds.targets[[k, i]], b0[i], max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn diffusion_dataset_outer_product_arithmetic() {
        let positions = array![[0.0, 0.0], [0.002, 0.0]];
        let obs = ObservationSet::from_positions(0.001, positions).unwrap();
        let b_hat = FnPredictor::new(2, |_: &[f64]| vec![1.0, 0.0]);
        let ds = build_diffusion_dataset(&obs, &b_hat).unwrap();
        // residual = (0.002 - 0.001, 0) = (0.001, 0); outer/(2 tau) = 5e-4 at (0,0)
        assert_relative_eq!(ds.targets[[0, 0]], 5e-4, max_relative = 1e-12);
        assert_eq!(ds.targets[[0, 1]], 0.0);
        assert_eq!(ds.targets[[0, 2]], 0.0);
    }

    #[test]
    fn zero_drift_estimate_reduces_to_quadratic_variation_targets() {
        let m = make_example_model();
        let traj = simulate(&m, &[0.2, 0.8], 1e-3, 1.0, 12).unwrap();
        let obs = subsample(&traj, 1e-2, 1.0).unwrap();
        let zero = FnPredictor::new(2, |_: &[f64]| vec![0.0, 0.0]);
        let ds = build_diffusion_dataset(&obs, &zero).unwrap();
        let tau = obs.tau();
        for k in 0..ds.len() {
            let inc = obs.increment(k);
            assert_relative_eq!(
                ds.targets[[k, 0]],
                inc[0] * inc[0] / (2.0 * tau),
                max_relative = 1e-12
            );
            assert_relative_eq!(
                ds.targets[[k, 1]],
                inc[0] * inc[1] / (2.0 * tau),
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn oracle_drift_matches_true_drift_targets_exactly() {
        let m = make_example_model();
        let traj = simulate(&m, &[0.0, 0.0], 1e-3, 0.5, 4).unwrap();
        let obs = subsample(&traj, 1e-2, 0.5).unwrap();
        let oracle_a = FnPredictor::new(2, |x: &[f64]| m.drift(x).to_vec());
        let oracle_b = FnPredictor::new(2, |x: &[f64]| m.drift(x).to_vec());
        let a = build_diffusion_dataset(&obs, &oracle_a).unwrap();
        let b = build_diffusion_dataset(&obs, &oracle_b).unwrap();
        assert_eq!(a.targets, b.targets);
    }

    #[test]
    fn diffusion_target_mean_matches_the_gaussian_moment_oracle() {
        // With the true drift supplied, E[target] = sigma0^2/2 I.
        let b0 = vec![1.0, -0.5];
        let sigma0 = 0.8;
        let m = make_constant_model(b0.clone(), sigma0).unwrap();
        let tau = 1e-3;
        let traj = simulate(&m, &[0.0, 0.0], tau, 100.0, 9).unwrap();
        let obs = subsample(&traj, tau, 100.0).unwrap();
        assert_eq!(obs.num_increments(), 100_000);
        let oracle = FnPredictor::new(2, move |_: &[f64]| b0.clone());
        let ds = build_diffusion_dataset(&obs, &oracle).unwrap();
        let mean = ds.targets.mean_axis(Axis(0)).unwrap();
        let half_s2 = sigma0 * sigma0 / 2.0;
        assert!((mean[0] - half_s2).abs() <= 0.03 * half_s2, "d11 {}", mean[0]);
        assert!((mean[2] - half_s2).abs() <= 0.03 * half_s2, "d22 {}", mean[2]);
        assert!(mean[1].abs() <= 0.03 * half_s2, "d12 {}", mean[1]);
    }

    #[test]
    fn empirical_loss_equals_the_straight_line_reimplementation() {
        // ten samples, compare against explicit double loops for both stages
        let m = make_example_model();
        let traj = simulate(&m, &[0.3, 0.4], 1e-3, 0.01, 3).unwrap();
        let obs = subsample(&traj, 1e-3, 0.01).unwrap();
        assert_eq!(obs.num_increments(), 10);

        let drift_ds = build_drift_dataset(&obs).unwrap();
        let net = Network::init(
            NetworkArch {
                input_dim: 2,
                output_dim: 2,
                hidden_dim: 8,
                num_residual_blocks: 1,
            },
            77,
        );
        let pipeline = empirical_loss(&net, &drift_ds);
        let mut naive = 0.0;
        for k in 0..drift_ds.len() {
            let out = net.forward(drift_ds.inputs.row(k).as_slice().unwrap());
            for i in 0..2 {
                let r = drift_ds.targets[[k, i]] - out[i];
                naive += r * r;
            }
        }
        naive /= drift_ds.len() as f64;
        assert_relative_eq!(pipeline, naive, max_relative = 1e-12);

        let dnet = Network::init(
            NetworkArch {
                input_dim: 2,
                output_dim: 3,
                hidden_dim: 8,
                num_residual_blocks: 1,
            },
            78,
        );
        let diff_ds = build_diffusion_dataset(&obs, &net).unwrap();
        let pipeline = empirical_loss(&dnet, &diff_ds);
        let mut naive = 0.0;
        for k in 0..diff_ds.len() {
            let out = dnet.forward(diff_ds.inputs.row(k).as_slice().unwrap());
            let target = unpack_symmetric(diff_ds.targets.row(k)).unwrap();
            let estimate = unpack_symmetric(ArrayView1::from(out.as_slice())).unwrap();
            for i in 0..2 {
                for j in 0..2 {
                    let r = estimate[[i, j]] - target[[i, j]];
                    naive += r * r;
                }
            }
        }
        naive /= diff_ds.len() as f64;
        assert_relative_eq!(pipeline, naive, max_relative = 1e-12);
    }

    #[test]
    fn training_fits_a_single_sample_exactly() {
        let ds = RegressionDataset {
            inputs: array![[0.4]],
            targets: array![[2.5]],
            output_weights: None,
        };
        let arch = NetworkArch {
            input_dim: 1,
            output_dim: 1,
            hidden_dim: 2,
            num_residual_blocks: 0,
        };
        let cfg = TrainConfig {
            epochs: 4000,
            batch_size: 1,
            lambda_periodic: 0.0,
            learning_rate: 1e-2,
            seed: 5,
            ..TrainConfig::default()
        };
        let net = train_estimator(&ds, arch, &cfg).unwrap();
        let out = net.forward(&[0.4]);
        assert!((out[0] - 2.5).abs() < 1e-3, "converged to {}", out[0]);
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let m = make_example_model();
        let traj = simulate(&m, &[0.0, 0.0], 1e-3, 0.2, 6).unwrap();
        let obs = subsample(&traj, 1e-3, 0.2).unwrap();
        let ds = build_drift_dataset(&obs).unwrap();
        let arch = NetworkArch {
            input_dim: 2,
            output_dim: 2,
            hidden_dim: 8,
            num_residual_blocks: 1,
        };
        let cfg = TrainConfig {
            epochs: 3,
            seed: 11,
            ..TrainConfig::default()
        };
        let a = train_estimator(&ds, arch, &cfg).unwrap();
        let b = train_estimator(&ds, arch, &cfg).unwrap();
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn huge_learning_rate_aborts_with_a_non_finite_loss() {
        let ds = RegressionDataset {
            inputs: array![[0.1], [0.9]],
            targets: array![[1.0], [-1.0]],
            output_weights: None,
        };
        let arch = NetworkArch {
            input_dim: 1,
            output_dim: 1,
            hidden_dim: 4,
            num_residual_blocks: 1,
        };
        let cfg = TrainConfig {
            learning_rate: 1e160,
            epochs: 5,
            batch_size: 2,
            lambda_periodic: 0.0,
            seed: 1,
            ..TrainConfig::default()
        };
        let err = train_estimator(&ds, arch, &cfg);
        assert!(matches!(err, Err(Error::NonFiniteLoss { .. })), "{err:?}");
    }

    #[test]
    fn strong_penalty_forces_periodicity_on_a_toy_target() {
        // 1-d target with a deliberate jump across the seam; lambda = 1e3
        // must push the boundary mismatch below 1e-4 of the mean square.
        let n = 256;
        let inputs = Array2::from_shape_fn((n, 1), |(k, _)| k as f64 / n as f64);
        let targets = Array2::from_shape_fn((n, 1), |(k, _)| {
            let x = k as f64 / n as f64;
            1.0 + x // non-periodic ramp
        });
        let ds = RegressionDataset {
            inputs,
            targets,
            output_weights: None,
        };
        let arch = NetworkArch {
            input_dim: 1,
            output_dim: 1,
            hidden_dim: 16,
            num_residual_blocks: 1,
        };
        let cfg = TrainConfig {
            epochs: 400,
            batch_size: 256,
            lambda_periodic: 1e3,
            boundary_pairs: 64,
            learning_rate: 3e-3,
            seed: 13,
            ..TrainConfig::default()
        };
        let net = train_estimator(&ds, arch, &cfg).unwrap();
        let mismatch = {
            let a = net.forward(&[0.0])[0];
            let b = net.forward(&[1.0])[0];
            (a - b) * (a - b)
        };
        let mut mean_sq = 0.0;
        for k in 0..1000 {
            let v = net.forward(&[k as f64 / 1000.0])[0];
            mean_sq += v * v;
        }
        mean_sq /= 1000.0;
        assert!(
            mismatch <= 1e-4 * mean_sq,
            "mismatch {mismatch} vs mean square {mean_sq}"
        );
    }

    #[test]
    fn population_loss_of_the_truth_is_zero() {
        let m = make_example_model();
        let pts = uniform_test_points(500, 2, 3);
        let drift_oracle = FnPredictor::new(2, |x: &[f64]| m.drift(x).to_vec());
        assert_eq!(
            evaluate_population_loss(&drift_oracle, &m, pts.view(), FieldKind::Drift),
            0.0
        );
        let diff_oracle = FnPredictor::new(3, |x: &[f64]| {
            pack_symmetric(m.diffusion(x).view()).unwrap().to_vec()
        });
        assert_eq!(
            evaluate_population_loss(&diff_oracle, &m, pts.view(), FieldKind::Diffusion),
            0.0
        );
    }

    #[test]
    fn constant_offset_diffusion_loss_is_the_frobenius_norm() {
        let m = make_example_model();
        let pts = uniform_test_points(200, 2, 4);
        let offset = FnPredictor::new(3, |x: &[f64]| {
            let d = m.diffusion(x);
            vec![d[[0, 0]] + 0.1, d[[0, 1]], d[[1, 1]] + 0.1]
        });
        let loss = evaluate_population_loss(&offset, &m, pts.view(), FieldKind::Diffusion);
        assert_relative_eq!(loss, 0.02, max_relative = 1e-12);
    }

    #[test]
    fn zero_drift_predictor_loss_matches_the_quadrature_oracle() {
        // E || f grad f ||^2 over the uniform law; the closed-form integrand
        // 2 pi^2 f(u)^2 sin^2(2 pi u) integrates to 17 pi^2 / 16 ~ 10.48645.
        let m = make_example_model();
        let pts = uniform_test_points(50_000, 2, 5);
        let zero = FnPredictor::new(2, |_: &[f64]| vec![0.0, 0.0]);
        let loss = evaluate_population_loss(&zero, &m, pts.view(), FieldKind::Drift);
        let oracle = 17.0 * std::f64::consts::PI * std::f64::consts::PI / 16.0;
        assert!(
            (loss - oracle).abs() <= 0.02 * oracle,
            "MC loss {loss} vs quadrature {oracle}"
        );
    }

    #[test]
    fn pair_checkpoint_round_trips() {
        let m = make_example_model();
        let traj = simulate(&m, &[0.0, 0.0], 1e-3, 0.05, 6).unwrap();
        let obs = subsample(&traj, 1e-3, 0.05).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            boundary_pairs: 8,
            seed: 3,
            ..TrainConfig::default()
        };
        let pair = run_algorithm1(
            &obs,
            ArchChoice::Explicit {
                hidden_dim: 8,
                num_residual_blocks: 1,
            },
            &cfg,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = PairManifest {
            model: "example".into(),
            seed: 3,
            n: obs.num_increments(),
            tau: obs.tau(),
            t_horizon: obs.t_horizon(),
            config_hash: "deadbeef".into(),
        };
        pair.save(dir.path(), &manifest).unwrap();
        let (loaded, m2) = EstimatorPair::load(dir.path()).unwrap();
        assert_eq!(pair.drift_net.params(), loaded.drift_net.params());
        assert_eq!(pair.diffusion_net.params(), loaded.diffusion_net.params());
        assert_eq!(manifest, m2);
    }
}
