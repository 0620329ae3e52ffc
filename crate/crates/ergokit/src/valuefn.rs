//! Poisson-equation and discounted value-function solvers on discretized
//! kernels, pathwise gradient series, and the central-limit variance of
//! ergodic averages.
//!
//! The Poisson solution `h` satisfies `(I - P) h = c - pi(c)` with `pi(h) = 0`;
//! the discounted solution satisfies `h = c + alpha P h`. Both come with a
//! direct linear solve and a Neumann-series iteration, which agree up to
//! solver tolerance and provide an internal cross-check.

#[allow(unused_imports)]
use num_traits::Float;

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::kernelgrid::GridKernel;
use crate::model::StateSpaceModel;
use crate::norms::decay_rate_fit;
use crate::rng::NoiseStream;
use crate::semigroup::{EstimatorResult, TestFunction};
use crate::{par, ErgoError, Result};

/// How a value-function equation should be solved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SolveMode {
    /// Direct solve on small grids, series with an estimated horizon on
    /// large ones.
    Auto,
    /// Dense LU factorization of the (rank-corrected) resolvent.
    LinearSolve,
    /// Neumann series summed until the current term's weighted norm drops
    /// below `tol`, up to `t_max` terms.
    Series {
        /// Maximum number of series terms.
        t_max: usize,
        /// Stopping tolerance on the weighted norm of the current term.
        tol: f64,
    },
}

/// The method a solution was actually produced with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveMethod {
    /// Dense linear solve.
    LinearSolve,
    /// Truncated series with the recorded number of terms.
    Series {
        /// Terms summed before the stopping rule fired.
        terms: usize,
    },
}

/// A solved value function on a grid.
#[derive(Debug, Clone)]
pub struct ValueSolution {
    /// Node values of the solution.
    pub h: DVector<f64>,
    /// Stationary mean of the cost (Poisson solutions only).
    pub mean_cost: Option<f64>,
    /// Method actually used.
    pub method: SolveMethod,
    /// Weighted sup norm of the equation residual.
    pub residual_vnorm: f64,
    /// Discount factor (discounted solutions only).
    pub alpha: Option<f64>,
}

fn weight_nodes(k: &GridKernel) -> DVector<f64> {
    k.weight_values()
        .cloned()
        .unwrap_or_else(|| DVector::from_element(k.grid().len(), 1.0))
}

fn vnorm_vec(d: &DVector<f64>, v_nodes: &DVector<f64>) -> f64 {
    let mut out: f64 = 0.0;
    for i in 0..d.len() {
        out = out.max(d[i].abs() / v_nodes[i]);
    }
    out
}

fn check_mode(mode: &SolveMode) -> Result<()> {
    if let SolveMode::Series { tol, .. } = mode {
        if !(*tol >= 0.0) || !tol.is_finite() {
            return Err(ErgoError::InvalidParameter {
                what: "series tolerance",
                detail: alloc::format!("tolerance must be finite and nonnegative, got {tol}"),
            });
        }
    }
    Ok(())
}

/// Sums `sum_t alpha^t M^t b` until the weighted norm of the current term
/// drops below `tol`.
fn series_sum(
    m: &DMatrix<f64>,
    b: &DVector<f64>,
    v_nodes: &DVector<f64>,
    alpha: f64,
    t_max: usize,
    tol: f64,
    label: &'static str,
) -> Result<(DVector<f64>, usize)> {
    let mut h = DVector::zeros(b.len());
    let mut d = b.clone();
    for t in 0..=t_max {
        let nm = vnorm_vec(&d, v_nodes);
        if nm < tol {
            return Ok((h, t));
        }
        h += &d;
        if t < t_max {
            d = m * &d;
            if alpha != 1.0 {
                d *= alpha;
            }
        } else {
            return Err(ErgoError::NotConverged { what: label, iterations: t_max, last: nm });
        }
    }
    unreachable!("series loop always returns")
}

/// Estimated number of terms for the series to reach `tol`, from a geometric
/// fit to the first few term norms.
fn estimate_horizon(
    m: &DMatrix<f64>,
    b: &DVector<f64>,
    v_nodes: &DVector<f64>,
    alpha: f64,
    tol: f64,
) -> usize {
    let mut d = b.clone();
    let mut series = Vec::with_capacity(12);
    for t in 0..12u32 {
        let nm = vnorm_vec(&d, v_nodes);
        if nm <= 0.0 {
            return 12;
        }
        series.push((t as f64, nm));
        d = m * &d;
        if alpha != 1.0 {
            d *= alpha;
        }
    }
    let rho = match decay_rate_fit(&series) {
        Ok(fit) => fit.rho0.clamp(1e-6, 0.999_999),
        Err(_) => 0.999_999,
    };
    let b0 = series[0].1.max(1e-300);
    let t = ((tol / b0).ln() / rho.ln()).ceil();
    if t.is_finite() && t > 12.0 {
        (t as usize).min(200_000)
    } else {
        12
    }
}

/// Solves the Poisson equation `(I - P) h = c - pi(c)` on a discretized
/// kernel, normalized so the solution has stationary mean zero.
///
/// The direct mode solves the rank-corrected system
/// `(I - M + 1 pi^T) h = c - pi(c)`, whose correction removes the unit
/// eigenvalue while leaving the solution on the mean-zero subspace untouched.
/// Requires the kernel's stationary vector.
pub fn poisson_solve(
    k: &GridKernel,
    c: &TestFunction,
    mode: SolveMode,
) -> Result<ValueSolution> {
    check_mode(&mode)?;
    let pi = k.stationary().ok_or(ErgoError::MissingStationary)?;
    let n = k.grid().len();
    let c_vals = DVector::from_fn(n, |i, _| c.eval(k.grid().node(i)));
    let mean_cost = pi.dot(&c_vals);
    let b = DVector::from_fn(n, |i, _| c_vals[i] - mean_cost);
    let v_nodes = weight_nodes(k);
    let m = k.matrix();

    let (mut h, method) = match mode {
        SolveMode::LinearSolve => (poisson_direct(m, pi, &b)?, SolveMethod::LinearSolve),
        SolveMode::Series { t_max, tol } => {
            let (h, terms) = series_sum(m, &b, &v_nodes, 1.0, t_max, tol, "poisson series")?;
            (h, SolveMethod::Series { terms })
        }
        SolveMode::Auto => {
            if n <= 2000 {
                (poisson_direct(m, pi, &b)?, SolveMethod::LinearSolve)
            } else {
                let tol = 1e-10;
                let t_max = estimate_horizon(m, &b, &v_nodes, 1.0, tol);
                let (h, terms) = series_sum(m, &b, &v_nodes, 1.0, t_max, tol, "poisson series")?;
                (h, SolveMethod::Series { terms })
            }
        }
    };
    // Polish the mean-zero normalization against accumulated roundoff.
    let shift = pi.dot(&h);
    for i in 0..n {
        h[i] -= shift;
    }
    let residual = &h - m * &h - &b;
    let residual_vnorm = vnorm_vec(&residual, &v_nodes);
    Ok(ValueSolution { h, mean_cost: Some(mean_cost), method, residual_vnorm, alpha: None })
}

fn poisson_direct(
    m: &DMatrix<f64>,
    pi: &DVector<f64>,
    b: &DVector<f64>,
) -> Result<DVector<f64>> {
    let n = b.len();
    let mut a = DMatrix::identity(n, n) - m;
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] += pi[j];
        }
    }
    a.lu().solve(b).ok_or(ErgoError::IllConditioned {
        what: "poisson linear solve",
        residual: f64::INFINITY,
    })
}

/// Solves the discounted equation `h = c + alpha P h` for `0 <= alpha < 1`.
pub fn discounted_solve(
    k: &GridKernel,
    c: &TestFunction,
    alpha: f64,
    mode: SolveMode,
) -> Result<ValueSolution> {
    check_mode(&mode)?;
    if !(0.0..1.0).contains(&alpha) || !alpha.is_finite() {
        return Err(ErgoError::InvalidParameter {
            what: "discount factor",
            detail: alloc::format!("alpha must lie in [0, 1), got {alpha}"),
        });
    }
    let n = k.grid().len();
    let c_vals = DVector::from_fn(n, |i, _| c.eval(k.grid().node(i)));
    let v_nodes = weight_nodes(k);
    let m = k.matrix();

    let (h, method) = match mode {
        SolveMode::LinearSolve => (discounted_direct(m, alpha, &c_vals)?, SolveMethod::LinearSolve),
        SolveMode::Series { t_max, tol } => {
            let (h, terms) =
                series_sum(m, &c_vals, &v_nodes, alpha, t_max, tol, "discounted series")?;
            (h, SolveMethod::Series { terms })
        }
        SolveMode::Auto => {
            if n <= 2000 {
                (discounted_direct(m, alpha, &c_vals)?, SolveMethod::LinearSolve)
            } else {
                let tol = 1e-10;
                let t_max = estimate_horizon(m, &c_vals, &v_nodes, alpha, tol);
                let (h, terms) =
                    series_sum(m, &c_vals, &v_nodes, alpha, t_max, tol, "discounted series")?;
                (h, SolveMethod::Series { terms })
            }
        }
    };
    let residual = &h - alpha * (m * &h) - &c_vals;
    let residual_vnorm = vnorm_vec(&residual, &v_nodes);
    Ok(ValueSolution { h, mean_cost: None, method, residual_vnorm, alpha: Some(alpha) })
}

fn discounted_direct(m: &DMatrix<f64>, alpha: f64, c: &DVector<f64>) -> Result<DVector<f64>> {
    let n = c.len();
    let a = DMatrix::identity(n, n) - m * alpha;
    a.lu().solve(c).ok_or(ErgoError::IllConditioned {
        what: "discounted linear solve",
        residual: f64::INFINITY,
    })
}

/// Central-limit variance of the ergodic average of the cost the solution
/// was built from: `pi(h^2) - pi((P h)^2)`, clipped at zero.
pub fn clt_variance(k: &GridKernel, sol: &ValueSolution) -> Result<f64> {
    let pi = k.stationary().ok_or(ErgoError::MissingStationary)?;
    let h = &sol.h;
    let ph = k.apply(h);
    let mut out = 0.0;
    for i in 0..h.len() {
        out += pi[i] * (h[i] * h[i] - ph[i] * ph[i]);
    }
    Ok(out.max(0.0))
}

/// A pathwise gradient series estimate produced by [`poisson_gradient`] or
/// [`discounted_gradient`].
#[derive(Debug, Clone)]
pub struct GradientSeries {
    /// The summed gradient estimate with componentwise standard errors.
    pub estimate: EstimatorResult<DVector<f64>>,
    /// Euclidean norms of the estimated term means, one per examined term
    /// (the last entry is the sub-tolerance term that triggered the stop).
    pub term_norms: Vec<f64>,
    /// Number of terms actually summed; the stopping term is excluded.
    pub terms_used: usize,
}

struct SeriesRep {
    terms: Vec<DVector<f64>>,
}

fn gradient_series(
    model: &dyn StateSpaceModel,
    c: &TestFunction,
    x: &DVector<f64>,
    alpha: f64,
    t_max: usize,
    tol: f64,
    n: u64,
    seed: u64,
    label: &'static str,
) -> Result<GradientSeries> {
    if n < 2 {
        return Err(ErgoError::TooFewPoints { what: "replications", need: 2, got: n as usize });
    }
    if !(tol > 0.0) || !tol.is_finite() {
        return Err(ErgoError::NonPositive { what: "series tolerance", value: tol });
    }
    let d = model.dim_state();
    if x.len() != d {
        return Err(ErgoError::DimensionMismatch {
            what: "evaluation point",
            expected: d,
            got: x.len(),
        });
    }

    // Per replication: the pathwise term S(t)^T grad c(X(t)) for every t.
    let results = par::map_indexed(n as usize, |r| -> Result<SeriesRep> {
        let mut stream = NoiseStream::substream(seed, r as u64);
        let mut xt = x.clone();
        let mut s = DMatrix::identity(d, d);
        let mut terms = Vec::with_capacity(t_max + 1);
        terms.push(c.gradient(&xt)); // t = 0: S = I
        for step in 1..=t_max {
            let noise = crate::model::sample_noise(model, &mut stream);
            let jac = crate::model::eval_jacobian(model, &xt, &noise)?;
            s = jac.transpose() * s;
            xt = crate::model::eval_map(model, &xt, &noise)?;
            let norm = xt.amax();
            if !norm.is_finite() || norm > 1e150 {
                return Err(ErgoError::Diverged { t: step, norm });
            }
            terms.push(s.transpose() * c.gradient(&xt));
        }
        Ok(SeriesRep { terms })
    });

    let nf = n as f64;
    let mut term_sum: Vec<DVector<f64>> = alloc::vec![DVector::zeros(d); t_max + 1];
    // Welford statistics of the per-replication prefix sums, folded in
    // replication order. The centered recurrence keeps an exactly zero
    // second moment when every replication produces the same number, so a
    // variance-free estimator reports a standard error of literally zero.
    let mut prefix_mean: Vec<DVector<f64>> = alloc::vec![DVector::zeros(d); t_max + 1];
    let mut prefix_m2: Vec<DVector<f64>> = alloc::vec![DVector::zeros(d); t_max + 1];
    let mut count = 0.0f64;
    for r in results {
        let rep = r?;
        count += 1.0;
        let mut prefix: DVector<f64> = DVector::zeros(d);
        for (t, term) in rep.terms.iter().enumerate() {
            let weight = alpha.powi(t as i32);
            for a in 0..d {
                let w = weight * term[a];
                term_sum[t][a] += w;
                prefix[a] += w;
                let delta = prefix[a] - prefix_mean[t][a];
                prefix_mean[t][a] += delta / count;
                prefix_m2[t][a] += delta * (prefix[a] - prefix_mean[t][a]);
            }
        }
    }

    // Stop at the first term whose estimated mean is inside tolerance; that
    // term is excluded from the sum, matching the value-function series.
    let mut stop = None;
    let mut term_norms = Vec::new();
    for (t, ts) in term_sum.iter().enumerate() {
        let mean_norm = (ts / nf).norm();
        term_norms.push(mean_norm);
        if mean_norm < tol {
            stop = Some(t);
            break;
        }
    }
    let Some(t_star) = stop else {
        return Err(ErgoError::NotConverged {
            what: label,
            iterations: t_max,
            last: *term_norms.last().unwrap_or(&f64::INFINITY),
        });
    };

    let (value, std_error) = if t_star == 0 {
        (DVector::zeros(d), DVector::zeros(d))
    } else {
        let value = prefix_mean[t_star - 1].clone();
        let mut std_error: DVector<f64> = DVector::zeros(d);
        for a in 0..d {
            let var = (prefix_m2[t_star - 1][a] / (nf - 1.0)).max(0.0);
            std_error[a] = (var / nf).sqrt();
        }
        (value, std_error)
    };
    Ok(GradientSeries {
        estimate: EstimatorResult { value, std_error, samples: n, seed },
        term_norms,
        terms_used: t_star,
    })
}

/// Pathwise Monte Carlo estimate of the gradient of the Poisson solution at
/// `x`: the series of gradient-semigroup terms applied to `grad c`, summed
/// until the current term's estimated mean is below `tol`.
#[allow(clippy::too_many_arguments)]
pub fn poisson_gradient(
    model: &dyn StateSpaceModel,
    c: &TestFunction,
    x: &DVector<f64>,
    t_max: usize,
    tol: f64,
    n: u64,
    seed: u64,
) -> Result<GradientSeries> {
    gradient_series(model, c, x, 1.0, t_max, tol, n, seed, "poisson gradient series")
}

/// Pathwise Monte Carlo estimate of the gradient of the discounted value
/// function at `x`, with terms damped by `alpha^t`.
#[allow(clippy::too_many_arguments)]
pub fn discounted_gradient(
    model: &dyn StateSpaceModel,
    c: &TestFunction,
    alpha: f64,
    x: &DVector<f64>,
    t_max: usize,
    tol: f64,
    n: u64,
    seed: u64,
) -> Result<GradientSeries> {
    if !(0.0..1.0).contains(&alpha) || !alpha.is_finite() {
        return Err(ErgoError::InvalidParameter {
            what: "discount factor",
            detail: alloc::format!("alpha must lie in [0, 1), got {alpha}"),
        });
    }
    gradient_series(model, c, x, alpha, t_max, tol, n, seed, "discounted gradient series")
}
