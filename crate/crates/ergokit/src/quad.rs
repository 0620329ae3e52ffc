//! Quadrature rules and log-domain reductions shared by the generator and
//! kernel modules.

#[allow(unused_imports)]
use num_traits::Float;

use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::{ErgoError, Result};

const SQRT_PI: f64 = 1.7724538509055159;

/// Sorted eigenvalues of the symmetric tridiagonal Jacobi matrix with the
/// given off-diagonal entries: the nodes of the corresponding Gauss rule.
fn jacobi_nodes(off_diag: &[f64], label: &'static str) -> Result<Vec<f64>> {
    let n = off_diag.len() + 1;
    let mut jac = DMatrix::zeros(n, n);
    for (k, &b) in off_diag.iter().enumerate() {
        jac[(k, k + 1)] = b;
        jac[(k + 1, k)] = b;
    }
    let eig = nalgebra::SymmetricEigen::try_new(jac, 1e-15, 100_000).ok_or(
        ErgoError::NotConverged { what: label, iterations: 100_000, last: 0.0 },
    )?;
    let mut nodes: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    nodes.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(nodes)
}

/// Gauss weights at the given nodes through the Christoffel function
/// `w_k = 1 / sum_j p_j(t_k)^2` over the orthonormal polynomials `p_j`,
/// run by their three-term recurrence `b_{k+1} p_{k+1} = t p_k - b_k p_{k-1}`.
///
/// Unlike the eigenvector-based weight formula, the recurrence keeps the
/// exponentially small tail weights accurate in relative terms, which the
/// log-domain generator evaluations rely on.
fn christoffel_weights(nodes: &[f64], off_diag: &[f64], p0: f64) -> Vec<f64> {
    let n = nodes.len();
    let mut weights = Vec::with_capacity(n);
    for &t in nodes {
        let mut prev = 0.0_f64;
        let mut cur = p0;
        let mut sum = cur * cur;
        for k in 1..n {
            let next = (t * cur - if k >= 2 { off_diag[k - 2] * prev } else { 0.0 }) / off_diag[k - 1];
            prev = cur;
            cur = next;
            sum += cur * cur;
        }
        weights.push(1.0 / sum);
    }
    weights
}

/// Gauss-Hermite rule for the physicists' weight `exp(-t^2)`: returns
/// `(nodes, weights)` with `sum_k w_k f(t_k) ~ int exp(-t^2) f(t) dt`.
///
/// Nodes come from the Golub-Welsch eigenproblem for the Hermite Jacobi
/// matrix (off-diagonal `sqrt(k/2)`), weights from the Christoffel function.
pub(crate) fn gauss_hermite(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 {
        return Err(ErgoError::InvalidParameter {
            what: "quadrature order",
            detail: alloc::string::String::from("need at least one node"),
        });
    }
    let off_diag: Vec<f64> = (1..n).map(|k| (k as f64 / 2.0).sqrt()).collect();
    let nodes = jacobi_nodes(&off_diag, "hermite eigensolve")?;
    // Orthonormal against exp(-t^2): p_0 = pi^{-1/4}.
    let weights = christoffel_weights(&nodes, &off_diag, 1.0 / SQRT_PI.sqrt());
    Ok((nodes, weights))
}

/// Gauss-Hermite rule in probabilists' form: `(points, probs)` with
/// `sum_k p_k f(x_k) ~ E f(N)` for standard normal `N`; the probs sum to 1.
pub(crate) fn gauss_hermite_normal(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let (t, w) = gauss_hermite(n)?;
    let sqrt2 = core::f64::consts::SQRT_2;
    let points = t.iter().map(|&tk| sqrt2 * tk).collect();
    let probs = w.iter().map(|&wk| wk / SQRT_PI).collect();
    Ok((points, probs))
}

/// Gauss-Legendre rule on `[-1, 1]`: returns `(nodes, weights)` with
/// `sum_k w_k f(t_k) ~ int_{-1}^{1} f(t) dt`; the weights sum to 2.
///
/// Same construction as the Hermite rule, with the Legendre off-diagonal
/// entries `k / sqrt(4k^2 - 1)` and `p_0 = 1/sqrt(2)`.
pub(crate) fn gauss_legendre(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 {
        return Err(ErgoError::InvalidParameter {
            what: "quadrature order",
            detail: alloc::string::String::from("need at least one node"),
        });
    }
    let off_diag: Vec<f64> = (1..n)
        .map(|k| {
            let kf = k as f64;
            kf / (4.0 * kf * kf - 1.0).sqrt()
        })
        .collect();
    let nodes = jacobi_nodes(&off_diag, "legendre eigensolve")?;
    let weights = christoffel_weights(&nodes, &off_diag, 1.0 / core::f64::consts::SQRT_2);
    Ok((nodes, weights))
}

/// `log(sum exp(x_i))`, stable under large magnitudes. Empty input and
/// all-`-inf` input return `-inf`.
pub(crate) fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// Streaming log-sum-exp accumulator with an order-fixed merge, so chunked
/// reductions stay bit-identical for any worker count.
#[derive(Clone, Copy, Debug)]
pub(crate) struct LogSum {
    max: f64,
    sum: f64,
}

impl LogSum {
    pub(crate) fn new() -> Self {
        LogSum { max: f64::NEG_INFINITY, sum: 0.0 }
    }

    pub(crate) fn add(&mut self, x: f64) {
        if x == f64::NEG_INFINITY {
            return;
        }
        if x > self.max {
            if self.max.is_finite() {
                self.sum = self.sum * (self.max - x).exp() + 1.0;
            } else {
                self.sum = 1.0;
            }
            self.max = x;
        } else {
            self.sum += (x - self.max).exp();
        }
    }

    pub(crate) fn merge(&mut self, other: LogSum) {
        if other.max == f64::NEG_INFINITY {
            return;
        }
        if other.max > self.max {
            if self.max.is_finite() {
                self.sum = self.sum * (self.max - other.max).exp() + other.sum;
            } else {
                self.sum = other.sum;
            }
            self.max = other.max;
        } else {
            self.sum += other.sum * (other.max - self.max).exp();
        }
    }

    /// `log(sum exp)` of everything added so far.
    pub(crate) fn value(&self) -> f64 {
        if self.max == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.max + self.sum.ln()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gauss_hermite_low_orders_match_closed_forms() {
        let (t, w) = gauss_hermite(1).unwrap();
        assert_relative_eq!(t[0], 0.0, epsilon = 1e-14);
        assert_relative_eq!(w[0], SQRT_PI, max_relative = 1e-14);

        // Two-node rule: nodes at +-1/sqrt(2), equal weights sqrt(pi)/2.
        let (t, w) = gauss_hermite(2).unwrap();
        assert_relative_eq!(t[1], core::f64::consts::FRAC_1_SQRT_2, max_relative = 1e-12);
        assert_relative_eq!(w[0], SQRT_PI / 2.0, max_relative = 1e-12);
    }

    #[test]
    fn normal_rule_reproduces_gaussian_moments() {
        let (x, p) = gauss_hermite_normal(64).unwrap();
        let total: f64 = p.iter().sum();
        assert_relative_eq!(total, 1.0, max_relative = 1e-13);
        for (order, expect) in [(2u32, 1.0), (4, 3.0), (6, 15.0), (8, 105.0)] {
            let m: f64 = x.iter().zip(&p).map(|(&xk, &pk)| pk * xk.powi(order as i32)).sum();
            assert_relative_eq!(m, expect, max_relative = 1e-12);
        }
        // E exp(0.2 N^2) = 1/sqrt(1 - 0.4).
        let m: f64 = x.iter().zip(&p).map(|(&xk, &pk)| pk * (0.2 * xk * xk).exp()).sum();
        assert_relative_eq!(m, 1.0 / 0.6_f64.sqrt(), max_relative = 1e-10);
    }

    #[test]
    fn gauss_legendre_integrates_polynomials_and_exponentials() {
        let (t, w) = gauss_legendre(2).unwrap();
        // Two-node rule: nodes +-1/sqrt(3), weights 1.
        assert_relative_eq!(t[1], 1.0 / 3.0_f64.sqrt(), max_relative = 1e-13);
        assert_relative_eq!(w[0], 1.0, max_relative = 1e-13);

        let (t, w) = gauss_legendre(32).unwrap();
        let total: f64 = w.iter().sum();
        assert_relative_eq!(total, 2.0, max_relative = 1e-13);
        let quartic: f64 = t.iter().zip(&w).map(|(&tk, &wk)| wk * tk.powi(4)).sum();
        assert_relative_eq!(quartic, 2.0 / 5.0, max_relative = 1e-12);
        // int_{-1}^{1} e^t dt = e - 1/e.
        let exp: f64 = t.iter().zip(&w).map(|(&tk, &wk)| wk * tk.exp()).sum();
        assert_relative_eq!(exp, core::f64::consts::E - (-1.0_f64).exp(), max_relative = 1e-14);
    }

    #[test]
    fn logsumexp_handles_extremes() {
        assert_relative_eq!(
            logsumexp(&[1000.0, 1000.0]),
            1000.0 + core::f64::consts::LN_2,
            max_relative = 1e-15
        );
        assert_eq!(logsumexp(&[]), f64::NEG_INFINITY);
        assert_eq!(logsumexp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }

    #[test]
    fn streaming_logsum_matches_batch() {
        let xs = [3.0, -700.0, 701.5, 0.0, 699.9];
        let mut a = LogSum::new();
        let mut b = LogSum::new();
        a.add(xs[0]);
        a.add(xs[1]);
        b.add(xs[2]);
        b.add(xs[3]);
        b.add(xs[4]);
        a.merge(b);
        assert_relative_eq!(a.value(), logsumexp(&xs), max_relative = 1e-14);
    }
}
