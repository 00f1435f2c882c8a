//! Exact reverse-mode gradients of the training loss.
//!
//! The loss over a batch of `B` pairs is
//!
//! ```text
//!   (1/B) sum_b sum_j w_j (net(x_b)_j - t_bj)^2
//!     + lambda (1/P) sum_p sum_j (net(u_p)_j - net(v_p)_j)^2
//! ```
//!
//! where `w` are optional per-output weights (used to make the packed
//! symmetric-matrix loss equal a Frobenius norm) and `(u_p, v_p)` are raw
//! boundary pairs for the periodicity penalty. Gradients are exact for this
//! finite expression; the ReLU subgradient at 0 is taken to be 0.

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

use super::{accumulate_affine_grad, relu_mask_multiply, Network, ParamSlot};

/// Boundary-pair batch for the periodicity penalty; rows of `x` and `y` are
/// identified points on opposite faces, evaluated in raw coordinates.
pub struct BoundaryBatch<'a> {
    pub x: ArrayView2<'a, f64>,
    pub y: ArrayView2<'a, f64>,
    pub lambda: f64,
}

/// Loss split reported by [`loss_and_grad`].
#[derive(Debug, Clone, Copy)]
pub struct BatchLoss {
    pub total: f64,
    pub data: f64,
    pub penalty: f64,
}

fn weighted_residual_loss(
    residual: &mut Array2<f64>,
    weights: Option<ArrayView1<'_, f64>>,
) -> f64 {
    // residual is overwritten with d(loss)/d(out) scaled by batch size later
    let mut loss = 0.0;
    match weights {
        None => {
            for r in residual.iter() {
                loss += r * r;
            }
        }
        Some(w) => {
            for mut row in residual.outer_iter_mut() {
                for (j, r) in row.iter_mut().enumerate() {
                    loss += w[j] * *r * *r;
                }
            }
        }
    }
    loss
}

/// Backward pass from `dout = dLoss/d(output)` through the cached forward.
fn backprop(net: &Network, x: ArrayView2<'_, f64>, cache: &super::ForwardCache, dout: Array2<f64>, grad: &mut [f64]) {
    let blocks = net.arch().num_residual_blocks;
    accumulate_affine_grad(
        &dout,
        &cache.hidden[blocks],
        net.slot_range(ParamSlot::ReadoutWeight),
        net.slot_range(ParamSlot::ReadoutBias),
        grad,
    );
    let mut dh = dout.dot(&net.readout_weight());
    for i in (0..blocks).rev() {
        let dz = relu_mask_multiply(&dh, &cache.pre[i]);
        accumulate_affine_grad(
            &dz,
            &cache.hidden[i],
            net.slot_range(ParamSlot::BlockWeight(i)),
            net.slot_range(ParamSlot::BlockBias(i)),
            grad,
        );
        // skip connection: dh passes through, plus the affine path
        dh += &dz.dot(&net.block_weight(i));
    }
    let x_owned = x.to_owned();
    accumulate_affine_grad(
        &dh,
        &x_owned,
        net.slot_range(ParamSlot::InputWeight),
        net.slot_range(ParamSlot::InputBias),
        grad,
    );
}

/// Computes the loss and its exact gradient with respect to every parameter.
///
/// `grad` must have `net.arch().num_params()` entries; it is overwritten.
/// Fails with a non-finite-loss error if the loss is not finite.
pub fn loss_and_grad(
    net: &Network,
    inputs: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
    output_weights: Option<ArrayView1<'_, f64>>,
    boundary: Option<BoundaryBatch<'_>>,
    grad: &mut [f64],
) -> Result<BatchLoss> {
    assert_eq!(grad.len(), net.arch().num_params(), "gradient buffer length");
    assert!(inputs.nrows() > 0, "loss_and_grad: empty batch");
    assert_eq!(inputs.nrows(), targets.nrows(), "batch/target row mismatch");
    grad.fill(0.0);

    let b = inputs.nrows() as f64;
    let cache = net.forward_cached(inputs);
    let mut residual = &cache.output - &targets;
    let data = weighted_residual_loss(&mut residual, output_weights) / b;

    // dLoss/dout = 2 w r / B
    match output_weights {
        None => residual.mapv_inplace(|r| 2.0 * r / b),
        Some(w) => {
            for mut row in residual.outer_iter_mut() {
                for (j, r) in row.iter_mut().enumerate() {
                    *r *= 2.0 * w[j] / b;
                }
            }
        }
    }
    backprop(net, inputs, &cache, residual, grad);

    let mut penalty = 0.0;
    if let Some(bnd) = boundary {
        assert_eq!(bnd.x.nrows(), bnd.y.nrows(), "boundary pair rows");
        if bnd.lambda != 0.0 && bnd.x.nrows() > 0 {
            let p = bnd.x.nrows() as f64;
            let cache_x = net.forward_cached(bnd.x);
            let cache_y = net.forward_cached(bnd.y);
            let mut diff = &cache_x.output - &cache_y.output;
            penalty = bnd.lambda * diff.iter().map(|d| d * d).sum::<f64>() / p;
            diff.mapv_inplace(|d| 2.0 * bnd.lambda * d / p);
            backprop(net, bnd.x, &cache_x, diff.clone(), grad);
            diff.mapv_inplace(|d| -d);
            backprop(net, bnd.y, &cache_y, diff, grad);
        }
    }

    let total = data + penalty;
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: 0,
            detail: format!("data term {data}, penalty term {penalty}"),
        });
    }
    Ok(BatchLoss {
        total,
        data,
        penalty,
    })
}

/// The same loss without gradients; the finite-difference oracle in tests
/// differentiates this.
pub fn loss_only(
    net: &Network,
    inputs: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
    output_weights: Option<ArrayView1<'_, f64>>,
    boundary: Option<BoundaryBatch<'_>>,
) -> f64 {
    let b = inputs.nrows() as f64;
    let out = net.forward_batch(inputs);
    let mut residual = out - &targets;
    let mut loss = weighted_residual_loss(&mut residual, output_weights) / b;
    if let Some(bnd) = boundary {
        if bnd.lambda != 0.0 && bnd.x.nrows() > 0 {
            let p = bnd.x.nrows() as f64;
            let diff = net.forward_batch(bnd.x) - net.forward_batch(bnd.y);
            loss += bnd.lambda * diff.iter().map(|d| d * d).sum::<f64>() / p;
        }
    }
    loss
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NetworkArch;
    use crate::seed;
    use ndarray::Array2;
    use rand::Rng;

    fn arch(d: usize, q: usize, h: usize, blocks: usize) -> NetworkArch {
        NetworkArch {
            input_dim: d,
            output_dim: q,
            hidden_dim: h,
            num_residual_blocks: blocks,
        }
    }

    fn random_batch(rng: &mut impl Rng, n: usize, d: usize, q: usize) -> (Array2<f64>, Array2<f64>) {
        let x = Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));
        let t = Array2::from_shape_fn((n, q), |_| rng.gen_range(-1.0..1.0));
        (x, t)
    }

    #[test]
    fn zero_residual_means_zero_gradient() {
        let net = Network::init(arch(2, 2, 6, 1), 3);
        let mut rng = seed::stream(40, "grad-zero");
        let x = Array2::from_shape_fn((8, 2), |_| rng.gen_range(-1.0..1.0));
        let t = net.forward_batch(x.view());
        let mut grad = vec![0.0; net.arch().num_params()];
        let loss = loss_and_grad(&net, x.view(), t.view(), None, None, &mut grad).unwrap();
        assert_eq!(loss.total, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn doubling_targets_doubles_the_gradient_of_a_zero_linear_net() {
        let net = Network::zeros(arch(2, 2, 4, 0));
        let mut rng = seed::stream(41, "grad-linear");
        let (x, t) = random_batch(&mut rng, 16, 2, 2);
        let t2 = &t * 2.0;
        let mut g1 = vec![0.0; net.arch().num_params()];
        let mut g2 = vec![0.0; net.arch().num_params()];
        loss_and_grad(&net, x.view(), t.view(), None, None, &mut g1).unwrap();
        loss_and_grad(&net, x.view(), t2.view(), None, None, &mut g2).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((2.0 * a - b).abs() <= 1e-15 * b.abs().max(1e-30));
        }
    }

    /// Central finite differences over random parameters, for both the pure
    /// data loss and the data + boundary-penalty loss.
    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = seed::stream(42, "grad-fd");
        for trial in 0..10 {
            let d = rng.gen_range(1..4);
            let q = rng.gen_range(1..4);
            let h = rng.gen_range(2..7);
            let blocks = rng.gen_range(0..3);
            let a = arch(d, q, h, blocks);
            let mut net = Network::init(a, 1000 + trial);
            let (x, t) = random_batch(&mut rng, 12, d, q);
            let weights = if trial % 2 == 0 {
                None
            } else {
                Some(ndarray::Array1::from_shape_fn(q, |j| 1.0 + j as f64))
            };
            let px = Array2::from_shape_fn((5, d), |_| rng.gen_range(0.0..1.0));
            let py = Array2::from_shape_fn((5, d), |_| rng.gen_range(0.0..1.0));
            let lambda = if trial < 5 { 0.0 } else { 0.7 };

            let mut grad = vec![0.0; a.num_params()];
            loss_and_grad(
                &net,
                x.view(),
                t.view(),
                weights.as_ref().map(|w| w.view()),
                Some(BoundaryBatch {
                    x: px.view(),
                    y: py.view(),
                    lambda,
                }),
                &mut grad,
            )
            .unwrap();

            let eps = 1e-6;
            for _ in 0..20 {
                let idx = rng.gen_range(0..a.num_params());
                let orig = net.params()[idx];
                net.params_mut()[idx] = orig + eps;
                let plus = loss_only(
                    &net,
                    x.view(),
                    t.view(),
                    weights.as_ref().map(|w| w.view()),
                    Some(BoundaryBatch {
                        x: px.view(),
                        y: py.view(),
                        lambda,
                    }),
                );
                net.params_mut()[idx] = orig - eps;
                let minus = loss_only(
                    &net,
                    x.view(),
                    t.view(),
                    weights.as_ref().map(|w| w.view()),
                    Some(BoundaryBatch {
                        x: px.view(),
                        y: py.view(),
                        lambda,
                    }),
                );
                net.params_mut()[idx] = orig;
                let fd = (plus - minus) / (2.0 * eps);
                let scale = fd.abs().max(grad[idx].abs()).max(1e-8);
                assert!(
                    (grad[idx] - fd).abs() / scale <= 1e-4,
                    "trial {trial} param {idx}: analytic {} vs fd {}",
                    grad[idx],
                    fd
                );
            }
        }
    }

    #[test]
    fn full_batch_gradient_is_permutation_invariant() {
        let net = Network::init(arch(2, 2, 8, 2), 9);
        let mut rng = seed::stream(43, "grad-perm");
        let (x, t) = random_batch(&mut rng, 32, 2, 2);
        let mut order: Vec<usize> = (0..32).collect();
        // Fisher-Yates with the same stream
        for i in (1..32).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let xs = x.select(ndarray::Axis(0), &order);
        let ts = t.select(ndarray::Axis(0), &order);
        let mut g1 = vec![0.0; net.arch().num_params()];
        let mut g2 = vec![0.0; net.arch().num_params()];
        let l1 = loss_and_grad(&net, x.view(), t.view(), None, None, &mut g1).unwrap();
        let l2 = loss_and_grad(&net, xs.view(), ts.view(), None, None, &mut g2).unwrap();
        assert!((l1.total - l2.total).abs() <= 1e-12 * l1.total.abs());
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-12));
        }
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut net = Network::zeros(arch(1, 1, 2, 0));
        let r = net.slot_range(ParamSlot::ReadoutBias);
        net.params_mut()[r.start] = f64::MAX;
        let x = Array2::from_shape_vec((1, 1), vec![0.5]).unwrap();
        let t = Array2::from_shape_vec((1, 1), vec![-f64::MAX]).unwrap();
        let mut grad = vec![0.0; net.arch().num_params()];
        let err = loss_and_grad(&net, x.view(), t.view(), None, None, &mut grad);
        assert!(matches!(err, Err(Error::NonFiniteLoss { .. })));
    }
}
