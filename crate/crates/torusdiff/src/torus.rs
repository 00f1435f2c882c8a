//! The flat torus `R^d / Z^d` with unit periods.
//!
//! Positions are simulated in unwrapped coordinates; the canonical map
//! [`wrap`] reduces them to the fundamental domain `[0,1)^d` whenever a point
//! is used as a regressor input. [`sample_boundary_pairs`] draws pairs of raw
//! points that are distinct in `R^d` but identified on the torus, which is
//! what the periodicity regularizer penalizes estimators on.

use rand::Rng;

use crate::error::{Error, Result};

/// A point of the fundamental domain `[0,1)^d`.
///
/// Every component is guaranteed to lie in `[0,1)`; construct one through
/// [`wrap`].
#[derive(Debug, Clone, PartialEq)]
pub struct TorusPoint {
    coords: Vec<f64>,
}

impl TorusPoint {
    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }
}

/// Wraps one coordinate to `[0,1)` via `c - floor(c)`.
///
/// Exact integers map to 0. A tiny negative `c` can round `c - floor(c)` up
/// to exactly 1.0, which is the same torus point as 0; that case is folded
/// back so the `[0,1)` invariant holds unconditionally.
#[inline]
pub fn wrap_coord(c: f64) -> f64 {
    let w = c - c.floor();
    if w >= 1.0 {
        0.0
    } else {
        w
    }
}

/// Canonical map `R^d -> [0,1)^d`, componentwise `x - floor(x)`.
///
/// Idempotent: `wrap(wrap(x)) == wrap(x)` exactly.
pub fn wrap(x: &[f64]) -> Result<TorusPoint> {
    if let Some(c) = x.iter().find(|c| !c.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "wrap: non-finite component {c}"
        )));
    }
    Ok(TorusPoint {
        coords: x.iter().copied().map(wrap_coord).collect(),
    })
}

/// Evaluates a function defined on the fundamental domain at an arbitrary
/// point of `R^d` by periodic extension: `g(wrap(x))`.
pub fn periodic_eval<T>(g: impl Fn(&TorusPoint) -> T, x: &[f64]) -> Result<T> {
    Ok(g(&wrap(x)?))
}

/// A pair of raw points on opposite faces of the unit cell that wrap to the
/// same torus point.
///
/// `x` has the selected components at 0, `y` has them at 1; the remaining
/// components are shared. `x != y` in `R^d` while `wrap(x) == wrap(y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryPair {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// Draws `count` boundary pairs.
///
/// Each pair picks a nonempty subset of axes uniformly among the `2^d - 1`
/// possibilities, fixes those coordinates to the opposing faces (0 in `x`, 1
/// in `y`), and fills the remaining coordinates with a shared uniform draw
/// from `[0,1)`. Including multi-axis subsets covers the edges and corners of
/// the torus identification, not only its facets.
pub fn sample_boundary_pairs(dim: usize, count: usize, rng: &mut impl Rng) -> Vec<BoundaryPair> {
    assert!(dim >= 1, "boundary pairs need dim >= 1");
    assert!(dim < 64, "axis-subset mask is a u64");
    let mut pairs = Vec::with_capacity(count);
    for _ in 0..count {
        let mask = rng.gen_range(1..(1u64 << dim));
        let mut x = vec![0.0; dim];
        let mut y = vec![0.0; dim];
        for axis in 0..dim {
            if mask & (1 << axis) != 0 {
                x[axis] = 0.0;
                y[axis] = 1.0;
            } else {
                let u = rng.gen::<f64>();
                x[axis] = u;
                y[axis] = u;
            }
        }
        pairs.push(BoundaryPair { x, y });
    }
    pairs
}
