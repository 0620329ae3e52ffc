//! Joint simulation of the chain and its sensitivity process, Lyapunov-type
//! exponents, and contraction diagnostics.
//!
//! The sensitivity process is the state derivative `S(t) = dX(t)/dX(0)`,
//! started at the identity and advanced by the chain rule with the model's
//! state Jacobian along the realized trajectory. Exponent estimators work in
//! log scale with power-of-two rescaling of `S`, so horizons far beyond
//! floating-point range are handled exactly.

#[allow(unused_imports)]
use num_traits::Float;

use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::model::{eval_jacobian, eval_map, sample_noise, StateSpaceModel};
use crate::rng::NoiseStream;
use crate::{par, ErgoError, Result};

/// Matrix norm used to reduce the sensitivity matrix to a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixNorm {
    /// Largest singular value.
    Spectral,
    /// Square root of the sum of squared entries.
    Frobenius,
    /// Maximum absolute row sum (the induced sup-norm).
    MaxRowSum,
}

impl MatrixNorm {
    /// Evaluates the norm.
    pub fn apply(&self, m: &DMatrix<f64>) -> f64 {
        match self {
            MatrixNorm::Spectral => m.singular_values().max(),
            MatrixNorm::Frobenius => m.norm(),
            MatrixNorm::MaxRowSum => {
                let mut out: f64 = 0.0;
                for i in 0..m.nrows() {
                    let mut row = 0.0;
                    for j in 0..m.ncols() {
                        row += m[(i, j)].abs();
                    }
                    out = out.max(row);
                }
                out
            }
        }
    }
}

/// One simulated trajectory with its sensitivity matrices.
#[derive(Debug, Clone)]
pub struct PathBundle {
    /// States `X(0), ..., X(T)`.
    pub states: Vec<DVector<f64>>,
    /// Sensitivities `S(0) = I, ..., S(T)`, where `S(t) = dX(t)/dX(0)`.
    pub sens: Vec<DMatrix<f64>>,
    /// Master seed the path was drawn from.
    pub seed: u64,
    /// Name of the model that produced the path.
    pub model_name: String,
}

/// A Monte Carlo exponent estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct ExponentEstimate {
    /// Estimated exponent (per unit time).
    pub value: f64,
    /// Standard error of the estimate.
    pub std_error: f64,
    /// Horizon used.
    pub horizon: usize,
    /// Number of independent replications.
    pub replications: u64,
    /// Matrix norm the sensitivity was reduced with.
    pub norm: MatrixNorm,
}

/// Joint chain/sensitivity state with power-of-two rescaling. The true
/// sensitivity is `2^log2_scale * s`.
struct JointWalker<'a> {
    model: &'a dyn StateSpaceModel,
    x: DVector<f64>,
    s: DMatrix<f64>,
    log2_scale: i64,
    t: usize,
}

impl<'a> JointWalker<'a> {
    fn new(model: &'a dyn StateSpaceModel, x0: &DVector<f64>) -> Result<Self> {
        if x0.len() != model.dim_state() {
            return Err(ErgoError::DimensionMismatch {
                what: "initial state",
                expected: model.dim_state(),
                got: x0.len(),
            });
        }
        if x0.iter().any(|c| !c.is_finite()) {
            return Err(ErgoError::InvalidParameter {
                what: "initial state",
                detail: "coordinates must be finite".into(),
            });
        }
        let d = model.dim_state();
        Ok(JointWalker { model, x: x0.clone(), s: DMatrix::identity(d, d), log2_scale: 0, t: 0 })
    }

    /// Advances one step with the given noise draw.
    fn step_with(&mut self, noise: &DVector<f64>) -> Result<()> {
        // The stored Jacobian is (i,j) = da_j/dx_i; transposing gives the
        // standard chain-rule factor d a_i / d x_j.
        let jac = eval_jacobian(self.model, &self.x, noise)?;
        self.s = jac.transpose() * &self.s;
        self.x = eval_map(self.model, &self.x, noise)?;
        self.t += 1;
        let xnorm = self.x.amax();
        if !xnorm.is_finite() || xnorm > 1e150 {
            return Err(ErgoError::Diverged { t: self.t, norm: xnorm });
        }
        Ok(())
    }

    fn step(&mut self, stream: &mut NoiseStream) -> Result<()> {
        let noise = sample_noise(self.model, stream);
        self.step_with(&noise)
    }

    /// Rescales `s` by an exact power of two when its magnitude drifts out of
    /// comfortable floating-point range.
    fn rescale(&mut self) {
        let amax = self.s.amax();
        if amax == 0.0 || (1e-120..=1e120).contains(&amax) {
            return;
        }
        let shift = -(amax.log2().round() as i64);
        // Two half-shifts keep each power-of-two factor representable even
        // when the total shift exceeds the f64 exponent range.
        let h1 = shift / 2;
        let h2 = shift - h1;
        self.s *= 2.0f64.powi(h1 as i32);
        self.s *= 2.0f64.powi(h2 as i32);
        self.log2_scale -= shift;
    }

    /// `log ||S(t)||` accounting for accumulated rescaling.
    fn log_norm(&self, norm: MatrixNorm) -> f64 {
        self.log2_scale as f64 * core::f64::consts::LN_2 + norm.apply(&self.s).ln()
    }
}

/// Simulates one path of length `t` from `x0`, recording states and exact
/// (unrescaled) sensitivity matrices.
///
/// Long horizons on strongly contracting or expanding models can push the raw
/// sensitivity outside floating-point range; the exponent estimators below
/// rescale internally and should be preferred there.
pub fn simulate_path(
    model: &dyn StateSpaceModel,
    x0: &DVector<f64>,
    t: usize,
    seed: u64,
) -> Result<PathBundle> {
    let mut walker = JointWalker::new(model, x0)?;
    let mut stream = NoiseStream::master(seed);
    let mut states = Vec::with_capacity(t + 1);
    let mut sens = Vec::with_capacity(t + 1);
    states.push(walker.x.clone());
    sens.push(walker.s.clone());
    for _ in 0..t {
        walker.step(&mut stream)?;
        states.push(walker.x.clone());
        sens.push(walker.s.clone());
    }
    Ok(PathBundle { states, sens, seed, model_name: walker.model.name().into() })
}

/// Per-replication `log ||S(t)||` for the replication with substream `index`.
fn replicate_log_norm(
    model: &dyn StateSpaceModel,
    x0: &DVector<f64>,
    t: usize,
    norm: MatrixNorm,
    seed: u64,
    index: u64,
) -> Result<f64> {
    let mut walker = JointWalker::new(model, x0)?;
    let mut stream = NoiseStream::substream(seed, index);
    for _ in 0..t {
        walker.step(&mut stream)?;
        walker.rescale();
    }
    Ok(walker.log_norm(norm))
}

fn check_horizon_reps(t: usize, reps: u64) -> Result<()> {
    if t == 0 {
        return Err(ErgoError::TooFewPoints { what: "horizon", need: 1, got: 0 });
    }
    if reps < 2 {
        return Err(ErgoError::TooFewPoints { what: "replications", need: 2, got: reps as usize });
    }
    Ok(())
}

/// Top Lyapunov exponent estimate under the spectral norm.
pub fn lyapunov_exponent(
    model: &dyn StateSpaceModel,
    x0: &DVector<f64>,
    t: usize,
    reps: u64,
    seed: u64,
) -> Result<ExponentEstimate> {
    lyapunov_exponent_with_norm(model, x0, t, reps, seed, MatrixNorm::Spectral)
}

/// Top Lyapunov exponent estimate: the mean over replications of
/// `log ||S(t)|| / t`, with the across-replication standard error.
pub fn lyapunov_exponent_with_norm(
    model: &dyn StateSpaceModel,
    x0: &DVector<f64>,
    t: usize,
    reps: u64,
    seed: u64,
    norm: MatrixNorm,
) -> Result<ExponentEstimate> {
    check_horizon_reps(t, reps)?;
    let results = par::map_indexed(reps as usize, |r| {
        replicate_log_norm(model, x0, t, norm, seed, r as u64)
    });
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for r in results {
        let y = r?;
        sum += y;
        sumsq += y * y;
    }
    let n = reps as f64;
    let mean = sum / n;
    let var = (sumsq / n - mean * mean).max(0.0) * n / (n - 1.0);
    Ok(ExponentEstimate {
        value: mean / t as f64,
        std_error: (var / n).sqrt() / t as f64,
        horizon: t,
        replications: reps,
        norm,
    })
}

/// Annealed (moment) exponent of order `p`: `log E ||S(t)||^p / t`, computed
/// in log scale, with a delta-method standard error.
///
/// Unlike the almost-sure exponent, this weights rare expansive realizations
/// by their full moment contribution, so it dominates `p` times the Lyapunov
/// exponent.
pub fn mean_exponent(
    model: &dyn StateSpaceModel,
    x0: &DVector<f64>,
    t: usize,
    p: f64,
    reps: u64,
    seed: u64,
) -> Result<ExponentEstimate> {
    if !(p > 0.0) || !p.is_finite() {
        return Err(ErgoError::NonPositive { what: "moment order", value: p });
    }
    check_horizon_reps(t, reps)?;
    let norm = MatrixNorm::Spectral;
    let results = par::map_indexed(reps as usize, |r| {
        replicate_log_norm(model, x0, t, norm, seed, r as u64)
    });
    let mut ls1 = crate::quad::LogSum::new(); // sum of exp(p y)
    let mut ls2 = crate::quad::LogSum::new(); // sum of exp(2 p y)
    for r in results {
        let y = r?;
        ls1.add(p * y);
        ls2.add(2.0 * p * y);
    }
    let n = reps as f64;
    let l1 = ls1.value() - n.ln(); // log mean exp(p y)
    let l2 = ls2.value() - n.ln();
    // Delta method for the log of a sample mean.
    let rel_var = ((l2 - 2.0 * l1).exp() - 1.0).max(0.0);
    Ok(ExponentEstimate {
        value: l1 / t as f64,
        std_error: (rel_var / n).sqrt() / t as f64,
        horizon: t,
        replications: reps,
        norm,
    })
}

/// Exponent estimate at one start point of a contraction sweep.
#[derive(Debug, Clone)]
pub struct ContractionRow {
    /// Start point.
    pub x0: DVector<f64>,
    /// Lyapunov exponent estimate from this start.
    pub value: f64,
    /// Standard error.
    pub std_error: f64,
}

/// Result of [`contraction_diagnostic`]: per-start exponent estimates and
/// their worst (largest) value.
#[derive(Debug, Clone)]
pub struct ContractionReport {
    /// One row per start point, in input order.
    pub rows: Vec<ContractionRow>,
    /// Largest exponent estimate across rows.
    pub worst: f64,
    /// Horizon used.
    pub horizon: usize,
    /// Replications per start point.
    pub replications: u64,
    /// Matrix norm used.
    pub norm: MatrixNorm,
}

/// Estimates the Lyapunov exponent from every start point in `xs`, to probe
/// uniformity of contraction over initial conditions.
///
/// Each (start, replication) pair draws from the substream indexed by
/// `start_index << 32 | replication`, so adding replications or start points
/// never reshuffles existing draws.
pub fn contraction_diagnostic(
    model: &dyn StateSpaceModel,
    xs: &[DVector<f64>],
    t: usize,
    reps: u64,
    seed: u64,
) -> Result<ContractionReport> {
    if xs.is_empty() {
        return Err(ErgoError::TooFewPoints { what: "start points", need: 1, got: 0 });
    }
    if xs.len() as u64 > u32::MAX as u64 || reps > u32::MAX as u64 {
        return Err(ErgoError::TooLarge {
            what: "contraction sweep",
            size: (xs.len() as u128).max(reps as u128),
            limit: u32::MAX as u128,
        });
    }
    check_horizon_reps(t, reps)?;
    let norm = MatrixNorm::Spectral;
    let mut rows = Vec::with_capacity(xs.len());
    let mut worst = f64::NEG_INFINITY;
    for (xi, x0) in xs.iter().enumerate() {
        let results = par::map_indexed(reps as usize, |r| {
            let index = (xi as u64) << 32 | r as u64;
            replicate_log_norm(model, x0, t, norm, seed, index)
        });
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for r in results {
            let y = r?;
            sum += y;
            sumsq += y * y;
        }
        let n = reps as f64;
        let mean = sum / n;
        let var = (sumsq / n - mean * mean).max(0.0) * n / (n - 1.0);
        let value = mean / t as f64;
        worst = worst.max(value);
        rows.push(ContractionRow {
            x0: x0.clone(),
            value,
            std_error: (var / n).sqrt() / t as f64,
        });
    }
    Ok(ContractionReport { rows, worst, horizon: t, replications: reps, norm })
}
