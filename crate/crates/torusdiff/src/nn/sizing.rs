//! Theory-guided network sizing.
//!
//! The hidden width scales like `(N (tau^gamma /\ 1))^(d / (2s + d))` with
//! proportionality constant 1, where `s` is the assumed Holder smoothness of
//! the target field. Drift targets carry noise of conditional variance
//! `O(1/tau)` (`gamma = 1`); diffusion targets have `O(1)` noise
//! (`gamma = 0`). Depth grows like `log2` of the width, capped at 4 residual
//! blocks.

/// Suggested width and depth for one estimator network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetworkSize {
    pub hidden_dim: usize,
    pub num_residual_blocks: usize,
}

/// `gamma` must be 0 (diffusion-style noise) or 1 (drift-style noise).
pub fn suggest_network_size(
    n: usize,
    tau: f64,
    gamma: u32,
    smoothness: f64,
    dim: usize,
) -> NetworkSize {
    assert!(n >= 1, "sizing needs N >= 1");
    assert!(tau > 0.0 && tau <= 1.0, "sizing needs 0 < tau <= 1");
    assert!(gamma <= 1, "gamma is 0 or 1");
    assert!(smoothness >= 2.0, "smoothness is at least 2");
    assert!(dim >= 1);
    let effective = n as f64 * tau.powi(gamma as i32).min(1.0);
    let exponent = dim as f64 / (2.0 * smoothness + dim as f64);
    let k = effective.powf(exponent).round().max(8.0);
    let hidden_dim = k as usize;
    let blocks = (hidden_dim as f64).log2().round().max(1.0) as usize;
    NetworkSize {
        hidden_dim,
        num_residual_blocks: blocks.min(4),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formula_reference_values() {
        // (10^6 * 10^-3)^(1/3) = 10 -> width max(8, 10) = 10
        let s = suggest_network_size(1_000_000, 1e-3, 1, 2.0, 2);
        assert_eq!(s.hidden_dim, 10);
        // (10^6)^(1/3) = 100
        let s = suggest_network_size(1_000_000, 1e-3, 0, 2.0, 2);
        assert_eq!(s.hidden_dim, 100);
        assert_eq!(s.num_residual_blocks, 4); // log2(100) ~ 6.6, capped
    }

    #[test]
    fn width_floor_is_eight() {
        let s = suggest_network_size(10, 1e-3, 1, 2.0, 2);
        assert_eq!(s.hidden_dim, 8);
        assert_eq!(s.num_residual_blocks, 3);
    }

    #[test]
    fn tau_one_makes_gamma_irrelevant() {
        let a = suggest_network_size(50_000, 1.0, 0, 2.0, 3);
        let b = suggest_network_size(50_000, 1.0, 1, 2.0, 3);
        assert_eq!(a, b);
    }

    #[test]
    fn monotone_in_n_and_in_tau_for_gamma_one() {
        let mut prev = 0;
        for n in [1_000usize, 10_000, 100_000, 1_000_000, 10_000_000] {
            let s = suggest_network_size(n, 1e-2, 1, 2.0, 2);
            assert!(s.hidden_dim >= prev, "width not monotone in N");
            prev = s.hidden_dim;
        }
        let mut prev = 0;
        for tau in [1e-4, 1e-3, 1e-2, 1e-1, 1.0] {
            let s = suggest_network_size(1_000_000, tau, 1, 2.0, 2);
            assert!(s.hidden_dim >= prev, "width not monotone in tau");
            prev = s.hidden_dim;
        }
    }
}
