//! Analytic SDE coefficient fields.
//!
//! A model supplies evaluators for the drift `b(x)` and the noise matrix
//! `Sigma(x)` of `dx = b(x) dt + Sigma(x) dw`; the diffusion tensor is always
//! the derived quantity `D(x) = Sigma(x) Sigma(x)^T / 2`. Coefficients must
//! be 1-periodic in every variable so the process projects onto the torus.

use ndarray::{Array1, Array2};
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Evaluator interface for SDE coefficients.
///
/// Implementations must be pure and 1-periodic; they are called concurrently
/// from simulation and evaluation code.
pub trait SdeModel: Send + Sync {
    /// State dimension `d`.
    fn dim(&self) -> usize;

    /// Noise dimension `r >= d`.
    fn noise_dim(&self) -> usize;

    fn name(&self) -> &str;

    /// Drift vector `b(x)`, length `d`. `x` is a raw (unwrapped) point.
    fn drift(&self, x: &[f64]) -> Array1<f64>;

    /// Noise matrix `Sigma(x)`, shape `d x r`.
    fn sigma(&self, x: &[f64]) -> Array2<f64>;

    /// Diffusion tensor `D(x) = Sigma Sigma^T / 2`, symmetrized to kill
    /// rounding skew in the product.
    fn diffusion(&self, x: &[f64]) -> Array2<f64> {
        let s = self.sigma(x);
        let a = s.dot(&s.t()) * 0.5;
        symmetrize(a)
    }
}

/// `(A + A^T) / 2`.
pub fn symmetrize(a: Array2<f64>) -> Array2<f64> {
    let at = a.t().to_owned();
    (a + at) * 0.5
}

/// The two-dimensional benchmark model
/// `dx = f(x) grad f(x) dt + f(x) dw` with
/// `f(x) = 1 + cos(2 pi (x1 + x2)) / 2`.
///
/// Here `b = f grad f = grad(f^2/2)`, `Sigma = f I`, and
/// `D = (f^2 / 2) I >= 0.125 I` since `f` ranges over `[1/2, 3/2]`. The
/// stationary law of the wrapped process is the Lebesgue measure on the
/// torus, which makes population-loss evaluation exact.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExampleModel;

impl ExampleModel {
    pub fn new() -> Self {
        ExampleModel
    }

    /// The scalar field `f`.
    pub fn f(&self, x: &[f64]) -> f64 {
        1.0 + 0.5 * (2.0 * PI * (x[0] + x[1])).cos()
    }
}

impl SdeModel for ExampleModel {
    fn dim(&self) -> usize {
        2
    }

    fn noise_dim(&self) -> usize {
        2
    }

    fn name(&self) -> &str {
        "example"
    }

    fn drift(&self, x: &[f64]) -> Array1<f64> {
        let phase = 2.0 * PI * (x[0] + x[1]);
        let f = 1.0 + 0.5 * phase.cos();
        // each partial of f is -pi sin(2 pi (x1+x2))
        let g = -PI * phase.sin() * f;
        Array1::from(vec![g, g])
    }

    fn sigma(&self, x: &[f64]) -> Array2<f64> {
        let f = self.f(x);
        Array2::from_diag(&Array1::from(vec![f, f]))
    }
}

/// Constant-coefficient model `b(x) = b0`, `Sigma(x) = sigma0 I`.
///
/// Its increments over a step `tau` are exactly Gaussian with mean `b0 tau`
/// and covariance `sigma0^2 tau I`, which makes it the validation oracle for
/// the simulator and for diffusion-target moments.
#[derive(Debug, Clone)]
pub struct ConstantModel {
    b0: Array1<f64>,
    sigma0: f64,
}

impl ConstantModel {
    pub fn new(b0: Vec<f64>, sigma0: f64) -> Result<Self> {
        if b0.is_empty() {
            return Err(Error::InvalidInput("constant model: empty drift".into()));
        }
        if !(sigma0 > 0.0) || !sigma0.is_finite() {
            return Err(Error::InvalidInput(format!(
                "constant model: sigma0 must be positive and finite, got {sigma0}"
            )));
        }
        Ok(ConstantModel {
            b0: Array1::from(b0),
            sigma0,
        })
    }

    pub fn sigma0(&self) -> f64 {
        self.sigma0
    }

    pub fn b0(&self) -> &Array1<f64> {
        &self.b0
    }
}

impl SdeModel for ConstantModel {
    fn dim(&self) -> usize {
        self.b0.len()
    }

    fn noise_dim(&self) -> usize {
        self.b0.len()
    }

    fn name(&self) -> &str {
        "constant"
    }

    fn drift(&self, _x: &[f64]) -> Array1<f64> {
        self.b0.clone()
    }

    fn sigma(&self, _x: &[f64]) -> Array2<f64> {
        Array2::from_diag(&Array1::from_elem(self.b0.len(), self.sigma0))
    }
}

/// The benchmark model.
pub fn make_example_model() -> ExampleModel {
    ExampleModel::new()
}

/// A constant-coefficient model; fails if `sigma0 <= 0`.
pub fn make_constant_model(b0: Vec<f64>, sigma0: f64) -> Result<ConstantModel> {
    ConstantModel::new(b0, sigma0)
}

/// `D(x)` for any model; provided as a free function mirror of
/// [`SdeModel::diffusion`].
pub fn eval_diffusion(model: &dyn SdeModel, x: &[f64]) -> Array2<f64> {
    model.diffusion(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn min_eig_sym2(m: &Array2<f64>) -> f64 {
        let (a, b, c) = (m[[0, 0]], m[[0, 1]], m[[1, 1]]);
        let half_tr = 0.5 * (a + c);
        half_tr - (0.25 * (a - c) * (a - c) + b * b).sqrt()
    }

    #[test]
    fn example_model_at_reference_points() {
        let m = make_example_model();
        // origin: f = 3/2, grad f = 0
        let b = m.drift(&[0.0, 0.0]);
        assert_eq!(b[0], 0.0);
        assert_eq!(b[1], 0.0);
        let d = m.diffusion(&[0.0, 0.0]);
        assert_relative_eq!(d[[0, 0]], 1.125, max_relative = 1e-14);
        assert_relative_eq!(d[[1, 1]], 1.125, max_relative = 1e-14);
        assert_eq!(d[[0, 1]], 0.0);

        // x1 + x2 = 1/4: f = 1, grad f = -pi (1,1)
        let b = m.drift(&[0.25, 0.0]);
        assert_relative_eq!(b[0], -PI, max_relative = 1e-12);
        assert_relative_eq!(b[1], -PI, max_relative = 1e-12);
        let d = m.diffusion(&[0.25, 0.0]);
        assert_relative_eq!(d[[0, 0]], 0.5, max_relative = 1e-12);

        // x1 + x2 = 1/2: f = 1/2, sin(pi) = 0
        let b = m.drift(&[0.5, 0.0]);
        assert!(b[0].abs() < 1e-15 && b[1].abs() < 1e-15);
        let d = m.diffusion(&[0.5, 0.0]);
        assert_relative_eq!(d[[0, 0]], 0.125, max_relative = 1e-12);
    }

    #[test]
    fn constant_model_diffusion() {
        let m = make_constant_model(vec![0.0, 0.0], 1.0).unwrap();
        let d = m.diffusion(&[0.3, 0.7]);
        assert_eq!(d[[0, 0]], 0.5);
        assert_eq!(d[[1, 1]], 0.5);

        let m = make_constant_model(vec![1.0, -0.5], 0.8).unwrap();
        let d = m.diffusion(&[0.0, 0.0]);
        assert_relative_eq!(d[[0, 0]], 0.32, max_relative = 1e-14);
        assert_relative_eq!(d[[1, 1]], 0.32, max_relative = 1e-14);

        // constant field: same D everywhere
        let d2 = m.diffusion(&[100.25, -3.5]);
        assert_eq!(d, d2);
    }

    #[test]
    fn constant_model_rejects_bad_sigma() {
        assert!(make_constant_model(vec![0.0], 0.0).is_err());
        assert!(make_constant_model(vec![0.0], -1.0).is_err());
        assert!(make_constant_model(vec![0.0], f64::NAN).is_err());
    }

    #[test]
    fn diffusion_is_exactly_symmetric() {
        let m = make_example_model();
        let mut rng = seed::stream(21, "model-sym");
        for _ in 0..100 {
            let x = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let d = m.diffusion(&x);
            assert_eq!(d[[0, 1]], d[[1, 0]]);
        }
    }

    #[test]
    fn coefficients_are_periodic() {
        let m = make_example_model();
        let mut rng = seed::stream(22, "model-periodic");
        let tol = 2f64.powi(-40);
        for _ in 0..10_000 {
            let x = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let k = [rng.gen_range(-3i32..=3) as f64, rng.gen_range(-3i32..=3) as f64];
            let xs = [x[0] + k[0], x[1] + k[1]];
            let (b, bs) = (m.drift(&x), m.drift(&xs));
            let (s, ss) = (m.sigma(&x), m.sigma(&xs));
            for i in 0..2 {
                assert!((b[i] - bs[i]).abs() <= tol * b[i].abs().max(1.0));
                for j in 0..2 {
                    assert!((s[[i, j]] - ss[[i, j]]).abs() <= tol * s[[i, j]].abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn drift_is_gradient_of_half_f_squared() {
        let m = make_example_model();
        let g = |x: &[f64]| {
            let f = m.f(x);
            0.5 * f * f
        };
        let mut rng = seed::stream(23, "model-grad");
        let h = 1e-5;
        for _ in 0..1000 {
            let x = [rng.gen::<f64>(), rng.gen::<f64>()];
            let b = m.drift(&x);
            for i in 0..2 {
                let mut xp = x;
                let mut xm = x;
                xp[i] += h;
                xm[i] -= h;
                let fd = (g(&xp) - g(&xm)) / (2.0 * h);
                let scale = fd.abs().max(1e-3);
                assert!(
                    (b[i] - fd).abs() / scale <= 1e-6,
                    "gradient identity failed at {x:?}: {} vs {}",
                    b[i],
                    fd
                );
            }
        }
    }

    #[test]
    fn example_model_is_uniformly_elliptic() {
        let m = make_example_model();
        let mut rng = seed::stream(24, "model-elliptic");
        for _ in 0..10_000 {
            let x = [rng.gen::<f64>(), rng.gen::<f64>()];
            let d = m.diffusion(&x);
            assert!(min_eig_sym2(&d) >= 0.125 - 1e-12);
        }
    }
}
