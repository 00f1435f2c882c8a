//! Dense residual ReLU networks over a flat parameter vector.
//!
//! The architecture is fixed in shape: an input affine map to the hidden
//! width, `num_residual_blocks` blocks computing `h <- h + relu(W h + w)`,
//! and an affine readout. All parameters live in one flat `Vec<f64>` indexed
//! through [`ParamSlot`], which keeps the optimizer and checkpoint formats
//! trivial and makes finite-difference probing of single parameters cheap.

mod adam;
mod grad;
mod sizing;

pub use adam::{adam_step, AdamParams, AdamState};
pub use grad::{loss_and_grad, loss_only, BatchLoss, BoundaryBatch};
pub use sizing::{suggest_network_size, NetworkSize};

use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};
use crate::seed;

/// Shape of a residual regression network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkArch {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden_dim: usize,
    pub num_residual_blocks: usize,
}

impl NetworkArch {
    /// Closed-form parameter count:
    /// `h d + h` for the input affine, `h^2 + h` per block, `q h + q` for
    /// the readout.
    pub fn num_params(&self) -> usize {
        let (d, q, h) = (self.input_dim, self.output_dim, self.hidden_dim);
        h * d + h + self.num_residual_blocks * (h * h + h) + q * h + q
    }
}

/// Addresses one weight matrix or bias vector inside the flat parameter
/// vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSlot {
    InputWeight,
    InputBias,
    BlockWeight(usize),
    BlockBias(usize),
    ReadoutWeight,
    ReadoutBias,
}

/// A network: architecture plus flat parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    arch: NetworkArch,
    params: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    arch: NetworkArch,
    params: Vec<f64>,
}

impl Network {
    /// All-zero parameters.
    pub fn zeros(arch: NetworkArch) -> Network {
        Network {
            params: vec![0.0; arch.num_params()],
            arch,
        }
    }

    /// Deterministic initialization: each weight matrix is i.i.d. uniform on
    /// `[-sqrt(6/fan_in), +sqrt(6/fan_in)]`, all biases zero.
    pub fn init(arch: NetworkArch, init_seed: u64) -> Network {
        let mut net = Network::zeros(arch);
        let mut rng = seed::stream(init_seed, "network-init");
        let mut fill = |range: Range<usize>, fan_in: usize, params: &mut [f64]| {
            let a = (6.0 / fan_in as f64).sqrt();
            for p in &mut params[range] {
                *p = a * (2.0 * rng.gen::<f64>() - 1.0);
            }
        };
        let slots: Vec<(ParamSlot, usize)> = std::iter::once((ParamSlot::InputWeight, arch.input_dim))
            .chain((0..arch.num_residual_blocks).map(|i| (ParamSlot::BlockWeight(i), arch.hidden_dim)))
            .chain(std::iter::once((ParamSlot::ReadoutWeight, arch.hidden_dim)))
            .collect();
        for (slot, fan_in) in slots {
            let range = net.slot_range(slot);
            fill(range, fan_in, &mut net.params);
        }
        net
    }

    pub fn from_params(arch: NetworkArch, params: Vec<f64>) -> Result<Network> {
        if params.len() != arch.num_params() {
            return Err(Error::InvalidInput(format!(
                "parameter vector has length {}, arch needs {}",
                params.len(),
                arch.num_params()
            )));
        }
        Ok(Network { arch, params })
    }

    pub fn arch(&self) -> &NetworkArch {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Index range of a slot in the flat parameter vector.
    pub fn slot_range(&self, slot: ParamSlot) -> Range<usize> {
        let (d, q, h) = (
            self.arch.input_dim,
            self.arch.output_dim,
            self.arch.hidden_dim,
        );
        let block_size = h * h + h;
        let blocks_base = h * d + h;
        let readout_base = blocks_base + self.arch.num_residual_blocks * block_size;
        match slot {
            ParamSlot::InputWeight => 0..h * d,
            ParamSlot::InputBias => h * d..h * d + h,
            ParamSlot::BlockWeight(i) => {
                let o = blocks_base + i * block_size;
                o..o + h * h
            }
            ParamSlot::BlockBias(i) => {
                let o = blocks_base + i * block_size + h * h;
                o..o + h
            }
            ParamSlot::ReadoutWeight => readout_base..readout_base + q * h,
            ParamSlot::ReadoutBias => readout_base + q * h..readout_base + q * h + q,
        }
    }

    fn weight_view(&self, slot: ParamSlot, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
        let r = self.slot_range(slot);
        ArrayView2::from_shape((rows, cols), &self.params[r]).expect("slot shape")
    }

    fn bias_view(&self, slot: ParamSlot, len: usize) -> ArrayView1<'_, f64> {
        let r = self.slot_range(slot);
        ArrayView1::from_shape(len, &self.params[r]).expect("slot shape")
    }

    pub(crate) fn input_weight(&self) -> ArrayView2<'_, f64> {
        self.weight_view(ParamSlot::InputWeight, self.arch.hidden_dim, self.arch.input_dim)
    }

    pub(crate) fn input_bias(&self) -> ArrayView1<'_, f64> {
        self.bias_view(ParamSlot::InputBias, self.arch.hidden_dim)
    }

    pub(crate) fn block_weight(&self, i: usize) -> ArrayView2<'_, f64> {
        self.weight_view(ParamSlot::BlockWeight(i), self.arch.hidden_dim, self.arch.hidden_dim)
    }

    pub(crate) fn block_bias(&self, i: usize) -> ArrayView1<'_, f64> {
        self.bias_view(ParamSlot::BlockBias(i), self.arch.hidden_dim)
    }

    pub(crate) fn readout_weight(&self) -> ArrayView2<'_, f64> {
        self.weight_view(ParamSlot::ReadoutWeight, self.arch.output_dim, self.arch.hidden_dim)
    }

    pub(crate) fn readout_bias(&self) -> ArrayView1<'_, f64> {
        self.bias_view(ParamSlot::ReadoutBias, self.arch.output_dim)
    }

    /// Batched forward pass; rows of `x` are inputs.
    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        self.forward_cached(x).output
    }

    /// Forward pass on a single input.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.arch.input_dim, "forward: input dimension");
        let view = ArrayView2::from_shape((1, x.len()), x).expect("input shape");
        self.forward_batch(view).row(0).to_vec()
    }

    /// Forward pass keeping per-layer activations for reverse mode.
    pub(crate) fn forward_cached(&self, x: ArrayView2<'_, f64>) -> ForwardCache {
        assert_eq!(x.ncols(), self.arch.input_dim, "forward: input dimension");
        let mut h = x.dot(&self.input_weight().t());
        h += &self.input_bias();
        let mut hidden = Vec::with_capacity(self.arch.num_residual_blocks + 1);
        let mut pre = Vec::with_capacity(self.arch.num_residual_blocks);
        hidden.push(h);
        for i in 0..self.arch.num_residual_blocks {
            let prev = hidden.last().expect("nonempty");
            let mut z = prev.dot(&self.block_weight(i).t());
            z += &self.block_bias(i);
            let next = prev + &z.mapv(|v| v.max(0.0));
            pre.push(z);
            hidden.push(next);
        }
        let mut output = hidden.last().expect("nonempty").dot(&self.readout_weight().t());
        output += &self.readout_bias();
        ForwardCache {
            hidden,
            pre,
            output,
        }
    }

    /// Writes arch plus parameters as a single JSON file. Loading reproduces
    /// forward outputs bit for bit (serde_json round-trips every finite f64).
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&Checkpoint {
            arch: self.arch,
            params: self.params.clone(),
        })?;
        std::fs::write(path, text).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Network> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        Network::from_params(ck.arch, ck.params)
    }
}

/// Activations retained by [`Network::forward_cached`].
pub(crate) struct ForwardCache {
    /// `hidden[0]` is the input affine output; `hidden[i]` the output of
    /// block `i`.
    pub hidden: Vec<Array2<f64>>,
    /// Pre-activation of each block.
    pub pre: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

/// Accumulates `dW += dout^T . input` and `db += column sums of dout` into
/// the gradient slices of one affine map.
pub(crate) fn accumulate_affine_grad(
    dout: &Array2<f64>,
    input: &Array2<f64>,
    w_range: Range<usize>,
    b_range: Range<usize>,
    grad: &mut [f64],
) {
    let (rows, cols) = (dout.ncols(), input.ncols());
    let mut w_grad =
        ArrayViewMut2::from_shape((rows, cols), &mut grad[w_range]).expect("grad shape");
    ndarray::linalg::general_mat_mul(1.0, &dout.t(), input, 1.0, &mut w_grad);
    for (j, bj) in grad[b_range].iter_mut().enumerate() {
        *bj += dout.column(j).sum();
    }
}

/// Gates an upstream gradient by the ReLU mask of the pre-activation.
pub(crate) fn relu_mask_multiply(dh: &Array2<f64>, pre: &Array2<f64>) -> Array2<f64> {
    let mut dz = dh.clone();
    dz.zip_mut_with(pre, |g, &z| {
        if z <= 0.0 {
            *g = 0.0;
        }
    });
    dz
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn arch(d: usize, q: usize, h: usize, blocks: usize) -> NetworkArch {
        NetworkArch {
            input_dim: d,
            output_dim: q,
            hidden_dim: h,
            num_residual_blocks: blocks,
        }
    }

    #[test]
    fn param_count_matches_hand_count() {
        // 2 -> 4 hidden, one block, readout to 1:
        // 2*4+4 + 4*4+4 + 4*1+1 = 37
        assert_eq!(arch(2, 1, 4, 1).num_params(), 37);
    }

    #[test]
    fn init_is_deterministic_and_biases_are_zero() {
        let a = arch(2, 1, 8, 2);
        let n1 = Network::init(a, 5);
        let n2 = Network::init(a, 5);
        assert_eq!(n1.params(), n2.params());
        let n3 = Network::init(a, 6);
        assert_ne!(n1.params(), n3.params());
        for slot in [
            ParamSlot::InputBias,
            ParamSlot::BlockBias(0),
            ParamSlot::BlockBias(1),
            ParamSlot::ReadoutBias,
        ] {
            let r = n1.slot_range(slot);
            assert!(n1.params()[r].iter().all(|&p| p == 0.0));
        }
        // weights bounded by sqrt(6/fan_in)
        let r = n1.slot_range(ParamSlot::InputWeight);
        let bound = (6.0f64 / 2.0).sqrt();
        assert!(n1.params()[r].iter().all(|&p| p.abs() <= bound));
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Network::zeros(arch(3, 2, 16, 2));
        let out = net.forward(&[0.1, -0.4, 2.5]);
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_affine_pass_through() {
        // hidden = input dim, no blocks, W_in = W_out = I
        let a = arch(2, 2, 2, 0);
        let mut net = Network::zeros(a);
        for r in [
            net.slot_range(ParamSlot::InputWeight),
            net.slot_range(ParamSlot::ReadoutWeight),
        ] {
            net.params_mut()[r.start] = 1.0;
            net.params_mut()[r.end - 1] = 1.0;
        }
        let out = net.forward(&[0.3, 0.7]);
        assert_eq!(out, vec![0.3, 0.7]);
    }

    #[test]
    fn residual_block_expresses_a_shifted_rectifier() {
        // h0 = x - 1/2, block weight -1 gives h1 = h0 + relu(-h0) = max(h0, 0)
        let a = arch(1, 1, 1, 1);
        let mut net = Network::zeros(a);
        let set = |net: &mut Network, slot, v: f64| {
            let r = net.slot_range(slot);
            net.params_mut()[r.start] = v;
        };
        set(&mut net, ParamSlot::InputWeight, 1.0);
        set(&mut net, ParamSlot::InputBias, -0.5);
        set(&mut net, ParamSlot::BlockWeight(0), -1.0);
        set(&mut net, ParamSlot::ReadoutWeight, 1.0);
        assert_eq!(net.forward(&[0.2]), vec![0.0]);
        assert_relative_eq!(net.forward(&[0.9])[0], 0.4, max_relative = 1e-15);
    }

    #[test]
    fn forward_is_deterministic() {
        let net = Network::init(arch(2, 3, 8, 2), 42);
        let a = net.forward(&[0.25, 0.75]);
        let b = net.forward(&[0.25, 0.75]);
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_round_trip_reproduces_forward_bitwise() {
        let net = Network::init(arch(2, 3, 12, 2), 7);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        net.save(&path).unwrap();
        let loaded = Network::load(&path).unwrap();
        assert_eq!(net.params(), loaded.params());
        let x = [0.123456789, 0.987654321];
        assert_eq!(net.forward(&x), loaded.forward(&x));
    }

    #[test]
    fn from_params_rejects_wrong_length() {
        assert!(Network::from_params(arch(2, 1, 4, 1), vec![0.0; 36]).is_err());
    }
}
