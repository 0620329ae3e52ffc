//! State-space models.
//!
//! A model is the pair of a measurable map `a` and an i.i.d. noise law,
//! generating the chain
//!
//! ```text
//! X(t+1) = a(X(t), N(t+1)),   X(0) = x.
//! ```
//!
//! The state Jacobian uses the convention `[grad a(x,n)]_{i,j} = d a_j / d x_i`,
//! so column `j` holds the gradient of the j-th component of `a`. The
//! sensitivity recursion in [`crate::simulate`] multiplies by the transpose of
//! this matrix.
//!
//! Three closed-form reference models ship with the crate: a linear scalar
//! model, a saturated (tanh) scalar model, and a planar rotation-contraction.
//! All three expose their one-step transition density, which the grid modules
//! need, and a certified Jacobian norm bound.

#[allow(unused_imports)]
use num_traits::Float;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::rng::NoiseStream;
use crate::{ErgoError, Result};

const INV_SQRT_2PI: f64 = 0.3989422804014327;

/// Law of the i.i.d. noise sequence.
#[derive(Debug, Clone)]
pub enum NoiseLaw {
    /// Independent standard-normal components.
    Gaussian,
    /// Independent components uniform on [-1, 1).
    Uniform,
    /// Finite discrete law on noise vectors; probabilities sum to 1.
    Tabulated {
        /// Support points.
        atoms: Vec<DVector<f64>>,
        /// Probabilities, same length as `atoms`.
        probs: Vec<f64>,
    },
}

impl NoiseLaw {
    /// One draw of dimension `dim` from `stream`.
    pub fn sample(&self, dim: usize, stream: &mut NoiseStream) -> DVector<f64> {
        match self {
            NoiseLaw::Gaussian => DVector::from_fn(dim, |_, _| stream.standard_normal()),
            NoiseLaw::Uniform => DVector::from_fn(dim, |_, _| stream.uniform_sym()),
            NoiseLaw::Tabulated { atoms, probs } => {
                let u = stream.uniform01();
                let mut cum = 0.0;
                for (atom, p) in atoms.iter().zip(probs) {
                    cum += p;
                    if u < cum {
                        return atom.clone();
                    }
                }
                atoms[atoms.len() - 1].clone()
            }
        }
    }
}

/// A nonlinear state-space model: dimensions, map, state Jacobian, noise law,
/// and (when available) a closed-form one-step transition density.
///
/// Implementations must be immutable after construction; they are shared
/// freely across worker threads.
pub trait StateSpaceModel: Send + Sync {
    /// Short identifier used in reports and path bundles.
    fn name(&self) -> &str;
    /// State dimension.
    fn dim_state(&self) -> usize;
    /// Noise dimension.
    fn dim_noise(&self) -> usize;
    /// The map `a(x, n)`. Dimensions are the caller's responsibility; use
    /// [`eval_map`] for the checked variant.
    fn map(&self, x: &DVector<f64>, n: &DVector<f64>) -> DVector<f64>;
    /// State Jacobian with entry `(i, j) = d a_j / d x_i`.
    fn jacobian(&self, x: &DVector<f64>, n: &DVector<f64>) -> DMatrix<f64>;
    /// The noise law.
    fn noise_law(&self) -> &NoiseLaw;
    /// One-step transition density `p(x, y)`, when known in closed form.
    fn density(&self, _x: &DVector<f64>, _y: &DVector<f64>) -> Option<f64> {
        None
    }
    /// Certified bound on the Jacobian norm, when known.
    fn jacobian_bound(&self) -> Option<f64> {
        None
    }
}

fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(ErgoError::DimensionMismatch { what, expected, got })
    }
}

/// Checked evaluation of the model map.
pub fn eval_map(
    model: &dyn StateSpaceModel,
    x: &DVector<f64>,
    n: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_dim("state vector", model.dim_state(), x.len())?;
    check_dim("noise vector", model.dim_noise(), n.len())?;
    Ok(model.map(x, n))
}

/// Checked evaluation of the state Jacobian.
pub fn eval_jacobian(
    model: &dyn StateSpaceModel,
    x: &DVector<f64>,
    n: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    check_dim("state vector", model.dim_state(), x.len())?;
    check_dim("noise vector", model.dim_noise(), n.len())?;
    Ok(model.jacobian(x, n))
}

/// One noise draw from the model's law.
pub fn sample_noise(model: &dyn StateSpaceModel, stream: &mut NoiseStream) -> DVector<f64> {
    model.noise_law().sample(model.dim_noise(), stream)
}

/// Central finite-difference Jacobian of the map, in the same `(i, j)`
/// convention as [`StateSpaceModel::jacobian`]. This is the validation oracle
/// for analytic Jacobians; step `1e-6 * (1 + |x_i|)` per coordinate balances
/// truncation against round-off at double precision.
pub fn fd_jacobian(
    model: &dyn StateSpaceModel,
    x: &DVector<f64>,
    n: &DVector<f64>,
) -> DMatrix<f64> {
    let l = model.dim_state();
    let mut out = DMatrix::zeros(l, l);
    for i in 0..l {
        let h = 1e-6 * (1.0 + x[i].abs());
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        let fp = model.map(&xp, n);
        let fm = model.map(&xm, n);
        for j in 0..l {
            out[(i, j)] = (fp[j] - fm[j]) / (2.0 * h);
        }
    }
    out
}

fn require_contractive(rho: f64) -> Result<()> {
    if !rho.is_finite() || rho.abs() >= 1.0 {
        return Err(ErgoError::InvalidParameter {
            what: "rho",
            detail: format!("need |rho| < 1, got {rho}"),
        });
    }
    Ok(())
}

fn require_positive_sigma(sigma: f64) -> Result<()> {
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(ErgoError::InvalidParameter {
            what: "sigma",
            detail: format!("need sigma > 0, got {sigma}"),
        });
    }
    Ok(())
}

/// Linear scalar model `a(x, n) = rho*x + sigma*n` with standard Gaussian
/// noise. The workhorse of the closed-form test oracles: `S(t) = rho^t`,
/// `P^t x = rho^t x`, stationary law `N(0, sigma^2/(1 - rho^2))`.
#[derive(Debug, Clone)]
pub struct Ar1 {
    rho: f64,
    sigma: f64,
    law: NoiseLaw,
    name: String,
}

impl Ar1 {
    /// Requires `|rho| < 1` and `sigma > 0`.
    pub fn new(rho: f64, sigma: f64) -> Result<Self> {
        require_contractive(rho)?;
        require_positive_sigma(sigma)?;
        Ok(Ar1 { rho, sigma, law: NoiseLaw::Gaussian, name: String::from("ar1") })
    }

    /// Contraction factor.
    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// Noise scale.
    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Stationary variance `sigma^2 / (1 - rho^2)`.
    pub fn stationary_variance(&self) -> f64 {
        self.sigma * self.sigma / (1.0 - self.rho * self.rho)
    }
}

impl StateSpaceModel for Ar1 {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim_state(&self) -> usize {
        1
    }

    fn dim_noise(&self) -> usize {
        1
    }

    fn map(&self, x: &DVector<f64>, n: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(alloc::vec![self.rho * x[0] + self.sigma * n[0]])
    }

    fn jacobian(&self, _x: &DVector<f64>, _n: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, self.rho)
    }

    fn noise_law(&self) -> &NoiseLaw {
        &self.law
    }

    fn density(&self, x: &DVector<f64>, y: &DVector<f64>) -> Option<f64> {
        let z = (y[0] - self.rho * x[0]) / self.sigma;
        Some(INV_SQRT_2PI / self.sigma * (-0.5 * z * z).exp())
    }

    fn jacobian_bound(&self) -> Option<f64> {
        Some(self.rho.abs())
    }
}

/// Saturated scalar model `a(x, n) = rho*tanh(x) + sigma*n` with Gaussian
/// noise. Globally bounded drift, Jacobian `rho*(1 - tanh^2 x)`.
#[derive(Debug, Clone)]
pub struct Tanh1 {
    rho: f64,
    sigma: f64,
    law: NoiseLaw,
    name: String,
}

impl Tanh1 {
    /// Requires `|rho| < 1` and `sigma > 0`.
    pub fn new(rho: f64, sigma: f64) -> Result<Self> {
        require_contractive(rho)?;
        require_positive_sigma(sigma)?;
        Ok(Tanh1 { rho, sigma, law: NoiseLaw::Gaussian, name: String::from("tanh1") })
    }
}

impl StateSpaceModel for Tanh1 {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim_state(&self) -> usize {
        1
    }

    fn dim_noise(&self) -> usize {
        1
    }

    fn map(&self, x: &DVector<f64>, n: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(alloc::vec![self.rho * x[0].tanh() + self.sigma * n[0]])
    }

    fn jacobian(&self, x: &DVector<f64>, _n: &DVector<f64>) -> DMatrix<f64> {
        let th = x[0].tanh();
        DMatrix::from_element(1, 1, self.rho * (1.0 - th * th))
    }

    fn noise_law(&self) -> &NoiseLaw {
        &self.law
    }

    fn density(&self, x: &DVector<f64>, y: &DVector<f64>) -> Option<f64> {
        let z = (y[0] - self.rho * x[0].tanh()) / self.sigma;
        Some(INV_SQRT_2PI / self.sigma * (-0.5 * z * z).exp())
    }

    fn jacobian_bound(&self) -> Option<f64> {
        Some(self.rho.abs())
    }
}

/// Planar rotation-contraction `a(x, n) = rho*R(theta)*x + sigma*n` with
/// independent Gaussian noise per component. `R(theta)` is the rotation by
/// `theta`, so the Jacobian is the constant `rho*R(theta)` and the sensitivity
/// has norm exactly `rho^t`.
#[derive(Debug, Clone)]
pub struct RotCon2 {
    rho: f64,
    theta: f64,
    sigma: f64,
    rot: DMatrix<f64>,
    law: NoiseLaw,
    name: String,
}

impl RotCon2 {
    /// Requires `|rho| < 1` and `sigma > 0`.
    pub fn new(rho: f64, theta: f64, sigma: f64) -> Result<Self> {
        require_contractive(rho)?;
        require_positive_sigma(sigma)?;
        if !theta.is_finite() {
            return Err(ErgoError::InvalidParameter {
                what: "theta",
                detail: format!("need a finite angle, got {theta}"),
            });
        }
        let (s, c) = theta.sin_cos();
        let rot = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
        Ok(RotCon2 { rho, theta, sigma, rot, law: NoiseLaw::Gaussian, name: String::from("rotcon2") })
    }

    /// Rotation angle.
    pub fn theta(&self) -> f64 {
        self.theta
    }
}

impl StateSpaceModel for RotCon2 {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim_state(&self) -> usize {
        2
    }

    fn dim_noise(&self) -> usize {
        2
    }

    fn map(&self, x: &DVector<f64>, n: &DVector<f64>) -> DVector<f64> {
        let mut y = &self.rot * x;
        y *= self.rho;
        y + self.sigma * n
    }

    fn jacobian(&self, _x: &DVector<f64>, _n: &DVector<f64>) -> DMatrix<f64> {
        // (i,j) = d a_j / d x_i is the transpose of the standard Jacobian
        // rho*R(theta).
        self.rot.transpose() * self.rho
    }

    fn noise_law(&self) -> &NoiseLaw {
        &self.law
    }

    fn density(&self, x: &DVector<f64>, y: &DVector<f64>) -> Option<f64> {
        let mean = self.rho * (&self.rot * x);
        let z0 = (y[0] - mean[0]) / self.sigma;
        let z1 = (y[1] - mean[1]) / self.sigma;
        let c = INV_SQRT_2PI / self.sigma;
        Some(c * c * (-0.5 * (z0 * z0 + z1 * z1)).exp())
    }

    fn jacobian_bound(&self) -> Option<f64> {
        Some(self.rho.abs())
    }
}
