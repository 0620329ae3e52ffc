//! Nonlinear generator of the exponential semigroup and multiplicative
//! drift-condition certificates.
//!
//! The nonlinear generator acts on a potential `F` as
//! `H(F)(x) = log E[exp(F(a(x, N)))] - F(x)`; a drift certificate asks for
//! `H(eta V)(x) <= -eta delta W(x) + eta b` on a ball and without the `b`
//! term outside it, uniformly over tilts `eta`. Everything here works in the
//! log domain so large potentials never overflow.

#[allow(unused_imports)]
use num_traits::Float;

use alloc::format;
use alloc::sync::Arc;
use alloc::vec::Vec;

use nalgebra::DVector;

use crate::kernelgrid::{Grid, GridKernel};
use crate::model::{eval_map, sample_noise, NoiseLaw, StateSpaceModel};
use crate::norms::{GridFunction, WeightFunction};
use crate::quad::{gauss_hermite_normal, gauss_legendre, logsumexp, LogSum};
use crate::rng::NoiseStream;
use crate::semigroup::EstimatorResult;
use crate::{par, ErgoError, Result};

/// Slack used when classifying drift inequalities as satisfied, absorbing
/// quadrature roundoff without hiding real violations.
pub const DRIFT_TOL: f64 = 1e-8;

/// Quadrature nodes per noise dimension at the base refinement level; the
/// tail check doubles this.
const QUAD_NODES: usize = 64;

/// One atom of a noise quadrature rule: log-probability and noise vector.
type NoiseRule = Vec<(f64, DVector<f64>)>;

fn noise_rule_1d(law: &NoiseLaw, nodes: usize) -> Result<Vec<(f64, f64)>> {
    match law {
        NoiseLaw::Gaussian => {
            let (points, probs) = gauss_hermite_normal(nodes)?;
            Ok(points.into_iter().zip(probs.into_iter().map(|p| p.ln())).map(|(x, lp)| (lp, x)).collect())
        }
        NoiseLaw::Uniform => {
            let (points, weights) = gauss_legendre(nodes)?;
            // Density 1/2 on [-1, 1].
            Ok(points
                .into_iter()
                .zip(weights.into_iter().map(|w| (w / 2.0).ln()))
                .map(|(x, lp)| (lp, x))
                .collect())
        }
        NoiseLaw::Tabulated { .. } => unreachable!("tabulated laws never reach the 1-d rule"),
    }
}

/// Tensor quadrature rule for the model's noise law. Tabulated laws are
/// summed exactly; continuous laws use `nodes` points per dimension.
fn noise_rule(model: &dyn StateSpaceModel, nodes: usize) -> Result<NoiseRule> {
    let dim = model.dim_noise();
    let law = model.noise_law();
    if let NoiseLaw::Tabulated { atoms, probs } = law {
        return Ok(atoms.iter().zip(probs).map(|(a, &p)| (p.ln(), a.clone())).collect());
    }
    if dim == 0 || dim > 2 {
        return Err(ErgoError::InvalidParameter {
            what: "noise dimension",
            detail: format!("quadrature supports 1 or 2 noise dimensions, got {dim}"),
        });
    }
    let one = noise_rule_1d(law, nodes)?;
    if dim == 1 {
        return Ok(one
            .into_iter()
            .map(|(lp, x)| (lp, DVector::from_element(1, x)))
            .collect());
    }
    let mut rule = Vec::with_capacity(one.len() * one.len());
    for &(lp_a, xa) in &one {
        for &(lp_b, xb) in &one {
            rule.push((lp_a + lp_b, DVector::from_column_slice(&[xa, xb])));
        }
    }
    Ok(rule)
}

fn generator_with_rule(
    model: &dyn StateSpaceModel,
    f: &(dyn Fn(&DVector<f64>) -> f64 + Sync),
    x: &DVector<f64>,
    rule: &NoiseRule,
) -> Result<f64> {
    let mut terms = Vec::with_capacity(rule.len());
    for (lp, noise) in rule {
        let y = eval_map(model, x, noise)?;
        terms.push(lp + f(&y));
    }
    Ok(logsumexp(&terms) - f(x))
}

/// Evaluates the nonlinear generator `H(F)(x) = log E[exp F(a(x,N))] - F(x)`
/// by deterministic quadrature over the noise law.
///
/// The rule is evaluated at two refinement levels; disagreement beyond
/// relative `1e-8` means the exponential moment is not resolved — typically
/// because `E exp(F)` is infinite — and is reported as a diverged integral
/// rather than a number.
pub fn nonlinear_generator(
    model: &dyn StateSpaceModel,
    f: &(dyn Fn(&DVector<f64>) -> f64 + Sync),
    x: &DVector<f64>,
) -> Result<f64> {
    if x.len() != model.dim_state() {
        return Err(ErgoError::DimensionMismatch {
            what: "evaluation point",
            expected: model.dim_state(),
            got: x.len(),
        });
    }
    let coarse = noise_rule(model, QUAD_NODES)?;
    let value = generator_with_rule(model, f, x, &coarse)?;
    if matches!(model.noise_law(), NoiseLaw::Tabulated { .. }) {
        // Finite sums are exact; no refinement needed.
        if !value.is_finite() {
            return Err(ErgoError::IntegralDiverged { at: format!("x = {:?}", x.as_slice()) });
        }
        return Ok(value);
    }
    let fine = noise_rule(model, 2 * QUAD_NODES)?;
    let refined = generator_with_rule(model, f, x, &fine)?;
    if !refined.is_finite() || (refined - value).abs() > 1e-8 * (1.0 + refined.abs()) {
        return Err(ErgoError::IntegralDiverged { at: format!("x = {:?}", x.as_slice()) });
    }
    Ok(refined)
}

/// Monte Carlo estimate of the nonlinear generator at `x`, with a
/// delta-method standard error for the log of the empirical exponential
/// moment. Deterministic for a fixed seed, independent of worker count.
pub fn nonlinear_generator_mc(
    model: &dyn StateSpaceModel,
    f: &(dyn Fn(&DVector<f64>) -> f64 + Sync),
    x: &DVector<f64>,
    n: u64,
    seed: u64,
) -> Result<EstimatorResult<f64>> {
    if n < 2 {
        return Err(ErgoError::TooFewPoints { what: "replications", need: 2, got: n as usize });
    }
    if x.len() != model.dim_state() {
        return Err(ErgoError::DimensionMismatch {
            what: "evaluation point",
            expected: model.dim_state(),
            got: x.len(),
        });
    }
    struct Acc {
        log_sum: LogSum,
        log_sum_sq: LogSum,
        error: Option<ErgoError>,
    }
    let acc = par::fold_reps(
        n,
        || Acc { log_sum: LogSum::new(), log_sum_sq: LogSum::new(), error: None },
        |acc, rep| {
            if acc.error.is_some() {
                return;
            }
            let mut stream = NoiseStream::substream(seed, rep);
            let noise = sample_noise(model, &mut stream);
            match eval_map(model, x, &noise) {
                Ok(y) => {
                    let z = f(&y);
                    acc.log_sum.add(z);
                    acc.log_sum_sq.add(2.0 * z);
                }
                Err(e) => acc.error = Some(e),
            }
        },
        |a, b| {
            if a.error.is_none() {
                a.error = b.error;
            }
            a.log_sum.merge(b.log_sum);
            a.log_sum_sq.merge(b.log_sum_sq);
        },
    );
    if let Some(e) = acc.error {
        return Err(e);
    }
    let nf = n as f64;
    let l1 = acc.log_sum.value() - nf.ln(); // log mean exp(F)
    let l2 = acc.log_sum_sq.value() - nf.ln(); // log mean exp(2F)
    if !l1.is_finite() {
        return Err(ErgoError::IntegralDiverged { at: format!("x = {:?}", x.as_slice()) });
    }
    // Delta method: Var(log m) ~ Var(m)/m^2 = (E e^{2F}/ (E e^F)^2 - 1)/n.
    let rel_var = ((l2 - 2.0 * l1).exp() - 1.0).max(0.0);
    let std_error = (rel_var / nf).sqrt();
    Ok(EstimatorResult { value: l1 - f(x), std_error, samples: n, seed })
}

/// Evaluates the nonlinear generator through a discretized kernel: row-wise
/// `log sum_j K_ij exp(F_j) - F_i`. Requires a nonnegative kernel.
pub fn nonlinear_generator_kernel(k: &GridKernel, f: &GridFunction) -> Result<GridFunction> {
    if k.is_signed() {
        return Err(ErgoError::InvalidParameter {
            what: "kernel sign",
            detail: format!("the log-domain generator needs a nonnegative kernel"),
        });
    }
    let n = k.grid().len();
    if f.grid().len() != n {
        return Err(ErgoError::DimensionMismatch {
            what: "grid function length",
            expected: n,
            got: f.grid().len(),
        });
    }
    let m = k.matrix();
    let fv = f.values();
    let rows = par::map_indexed(n, |i| {
        let mut terms = Vec::with_capacity(n);
        for j in 0..n {
            let kij = m[(i, j)];
            if kij > 0.0 {
                terms.push(kij.ln() + fv[j]);
            }
        }
        logsumexp(&terms) - fv[i]
    });
    GridFunction::new(k.grid().clone(), DVector::from_vec(rows))
}

/// Applies the linear generator `P f - f` through a discretized kernel.
pub fn generator_apply(k: &GridKernel, f: &GridFunction) -> Result<GridFunction> {
    let n = k.grid().len();
    if f.grid().len() != n {
        return Err(ErgoError::DimensionMismatch {
            what: "grid function length",
            expected: n,
            got: f.grid().len(),
        });
    }
    let out = k.apply(f.values()) - f.values();
    GridFunction::new(k.grid().clone(), out)
}

/// A multiplicative drift-condition specification: potential `V` through a
/// weight function, minorant `W >= 1`, margin `delta > 0`, offset `b >= 0`,
/// and the radius of the central ball where the offset may act.
#[derive(Clone)]
pub struct DV3Spec {
    /// Weight `v = exp(eta V)` carrying the potential `V`.
    pub v: WeightFunction,
    /// Minorant `W`, required to be at least 1 everywhere it is probed.
    pub w: Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>,
    /// Drift margin `delta`.
    pub delta: f64,
    /// Offset allowed inside the central ball.
    pub b: f64,
    /// Radius of the central ball.
    pub c_radius: f64,
}

impl core::fmt::Debug for DV3Spec {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("DV3Spec")
            .field("delta", &self.delta)
            .field("b", &self.b)
            .field("c_radius", &self.c_radius)
            .finish()
    }
}

/// Drift-condition verdict at a single tilt `eta`.
#[derive(Debug, Clone)]
pub struct EtaReport {
    /// The tilt this row refers to.
    pub eta: f64,
    /// Largest value of `H(eta V) + eta delta W - eta b 1_C` over the grid.
    pub max_violation: f64,
    /// Whether the inequality holds within [`DRIFT_TOL`].
    pub pass: bool,
    /// Smallest offset that would make the inequality hold with the given
    /// ball; infinite when the inequality fails outside the ball.
    pub min_b: f64,
    /// Smallest ball radius compatible with the specified offset,
    /// interpolated between grid shells; zero when no ball is needed,
    /// infinite when the largest grid shell still violates or when the
    /// offset is exceeded somewhere no ball could absorb it.
    pub min_c_radius: f64,
    /// The offset the minimal ball would require.
    pub b_at_min_radius: f64,
}

/// Drift-condition verdicts across tilts.
#[derive(Debug, Clone)]
pub struct Dv3Report {
    /// One verdict per requested tilt, in input order.
    pub etas: Vec<EtaReport>,
    /// Whether every tilt passed.
    pub pass: bool,
}

/// Verifies a multiplicative drift condition on a grid, for each tilt in
/// `etas`: `H(eta V)(x) + eta delta W(x) <= eta b` on the central ball and
/// `<= 0` outside it, within [`DRIFT_TOL`].
///
/// Also reports, per tilt, the smallest offset compatible with the given
/// ball and the smallest ball radius compatible with any offset, so a failed
/// specification comes with the repair that would make it pass.
pub fn dv3_check(
    model: &dyn StateSpaceModel,
    spec: &DV3Spec,
    grid: &Grid,
    etas: &[f64],
) -> Result<Dv3Report> {
    if !(spec.delta > 0.0) || !spec.delta.is_finite() {
        return Err(ErgoError::NonPositive { what: "drift margin", value: spec.delta });
    }
    if !(spec.b >= 0.0) || !spec.b.is_finite() {
        return Err(ErgoError::InvalidParameter {
            what: "drift offset",
            detail: format!("b must be finite and nonnegative, got {}", spec.b),
        });
    }
    if !(spec.c_radius >= 0.0) || !spec.c_radius.is_finite() {
        return Err(ErgoError::InvalidParameter {
            what: "ball radius",
            detail: format!("c_radius must be finite and nonnegative, got {}", spec.c_radius),
        });
    }
    if etas.is_empty() {
        return Err(ErgoError::TooFewPoints { what: "tilts", need: 1, got: 0 });
    }
    if grid.dim() != model.dim_state() {
        return Err(ErgoError::DimensionMismatch {
            what: "grid dimension",
            expected: model.dim_state(),
            got: grid.dim(),
        });
    }
    let n = grid.len();

    // Node data shared across tilts, with the weight contract checked on the
    // way: V >= 0 and W >= 1.
    let mut radii = Vec::with_capacity(n);
    let mut w_vals = Vec::with_capacity(n);
    for i in 0..n {
        let node = grid.node(i);
        let v = spec.v.big_v(node);
        if !(v >= 0.0) {
            return Err(ErgoError::InvalidParameter {
                what: "drift potential",
                detail: format!("V must be nonnegative, got {v} at node {i}"),
            });
        }
        let w = (spec.w)(node);
        if !(w >= 1.0 - 1e-12) {
            return Err(ErgoError::InvalidParameter {
                what: "drift minorant",
                detail: format!("W must be at least 1, got {w} at node {i}"),
            });
        }
        radii.push(node.norm());
        w_vals.push(w);
    }

    let ball_edge = spec.c_radius * (1.0 + 1e-12) + 1e-12;
    let mut reports = Vec::with_capacity(etas.len());
    let mut all_pass = true;
    for &eta in etas {
        if !(eta > 0.0 && eta <= 1.0) {
            return Err(ErgoError::InvalidParameter {
                what: "drift tilt",
                detail: format!("eta must lie in (0, 1], got {eta}"),
            });
        }
        let tilted = |y: &DVector<f64>| eta * spec.v.log_weight(y);
        let u: Vec<Result<f64>> = par::map_indexed(n, |i| {
            let h = nonlinear_generator(model, &tilted, grid.node(i))?;
            Ok(h + eta * spec.delta * w_vals[i])
        });
        let mut u_vals = Vec::with_capacity(n);
        for r in u {
            u_vals.push(r?);
        }
        let report = summarize_tilt(eta, spec, &radii, &u_vals, ball_edge);
        all_pass &= report.pass;
        reports.push(report);
    }
    Ok(Dv3Report { etas: reports, pass: all_pass })
}

/// Aggregates per-node drift margins `u_i = H(eta V)(x_i) + eta delta W(x_i)`
/// into the verdict for one tilt.
fn summarize_tilt(
    eta: f64,
    spec: &DV3Spec,
    radii: &[f64],
    u_vals: &[f64],
    ball_edge: f64,
) -> EtaReport {
    let n = u_vals.len();
    let mut max_violation = f64::NEG_INFINITY;
    let mut max_u_in_ball = f64::NEG_INFINITY;
    let mut outside_ok = true;
    for i in 0..n {
        let in_ball = radii[i] <= ball_edge;
        let slack = u_vals[i] - if in_ball { eta * spec.b } else { 0.0 };
        max_violation = max_violation.max(slack);
        if in_ball {
            max_u_in_ball = max_u_in_ball.max(u_vals[i]);
        } else if u_vals[i] > DRIFT_TOL {
            outside_ok = false;
        }
    }
    let pass = max_violation <= DRIFT_TOL;
    let min_b = if outside_ok { max_u_in_ball.max(0.0) } else { f64::INFINITY };

    // Radial profile: per distinct radius shell, the worst margin on it.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| radii[a].partial_cmp(&radii[b]).unwrap());
    let mut shells: Vec<(f64, f64)> = Vec::new();
    for &i in &order {
        match shells.last_mut() {
            Some((r, u)) if (radii[i] - *r).abs() <= 1e-9 * (1.0 + *r) => {
                *u = u.max(u_vals[i]);
            }
            _ => shells.push((radii[i], u_vals[i])),
        }
    }
    let last_violating = shells.iter().rposition(|&(_, u)| u > DRIFT_TOL);
    let max_u = u_vals.iter().fold(f64::NEG_INFINITY, |a, &u| a.max(u));
    let min_c_radius = if max_u > eta * spec.b + DRIFT_TOL {
        // No ball can absorb a margin above the specified offset.
        f64::INFINITY
    } else {
        match last_violating {
            None => 0.0,
            Some(j) if j + 1 == shells.len() => f64::INFINITY,
            Some(j) => {
                let (r0, u0) = shells[j];
                let (r1, u1) = shells[j + 1];
                r0 + (r1 - r0) * u0 / (u0 - u1)
            }
        }
    };
    let b_at_min_radius = if min_c_radius.is_finite() {
        let edge = min_c_radius * (1.0 + 1e-12) + 1e-12;
        radii
            .iter()
            .zip(u_vals)
            .filter(|&(&r, _)| r <= edge)
            .fold(0.0_f64, |acc, (_, &u)| acc.max(u))
    } else {
        u_vals.iter().fold(0.0_f64, |acc, &u| acc.max(u))
    };
    EtaReport { eta, max_violation, pass, min_b, min_c_radius, b_at_min_radius }
}
