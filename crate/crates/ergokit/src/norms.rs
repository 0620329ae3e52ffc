//! Weighted sup norms and their first-order refinements.
//!
//! Weights have the form `v(x) = exp(eta * V(x))` with `V >= 0`, so `v >= 1`
//! and the plain sup norm is always dominated. Function data lives on grids
//! as node values, optionally with per-axis derivative values for the
//! first-order norms.

#[allow(unused_imports)]
use num_traits::Float;

use alloc::format;
use alloc::sync::Arc;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::kernelgrid::{Grid, GridKernel};
use crate::{ErgoError, Result};

type ScalarFn = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;
type VectorFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;

/// Multiplicative weight `v(x) = exp(eta * V(x))` built from a nonnegative
/// potential `V` and a tilt `eta` in `(0, 1]`.
#[derive(Clone)]
pub struct WeightFunction {
    big_v: ScalarFn,
    grad_big_v: VectorFn,
    eta: f64,
}

impl core::fmt::Debug for WeightFunction {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("WeightFunction").field("eta", &self.eta).finish()
    }
}

impl WeightFunction {
    /// Builds a weight from a potential, its gradient, and a tilt.
    pub fn new(
        big_v: impl Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
        grad_big_v: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        eta: f64,
    ) -> Result<Self> {
        if !(eta > 0.0 && eta <= 1.0) {
            return Err(ErgoError::InvalidParameter {
                what: "weight tilt",
                detail: format!("eta must lie in (0, 1], got {eta}"),
            });
        }
        Ok(WeightFunction { big_v: Arc::new(big_v), grad_big_v: Arc::new(grad_big_v), eta })
    }

    /// The quadratic potential `V(x) = coef * |x|^2` at tilt 1.
    pub fn quadratic(coef: f64) -> Result<Self> {
        if !(coef >= 0.0) {
            return Err(ErgoError::NonPositive { what: "quadratic weight coefficient", value: coef });
        }
        Self::new(
            move |x: &DVector<f64>| coef * x.norm_squared(),
            move |x: &DVector<f64>| x * (2.0 * coef),
            1.0,
        )
    }

    /// The trivial weight `v = 1`.
    pub fn one() -> Self {
        Self::new(|_x| 0.0, |x| DVector::zeros(x.len()), 1.0).expect("unit weight is valid")
    }

    /// The same potential at a different tilt.
    pub fn with_eta(&self, eta: f64) -> Result<Self> {
        if !(eta > 0.0 && eta <= 1.0) {
            return Err(ErgoError::InvalidParameter {
                what: "weight tilt",
                detail: format!("eta must lie in (0, 1], got {eta}"),
            });
        }
        Ok(WeightFunction { big_v: self.big_v.clone(), grad_big_v: self.grad_big_v.clone(), eta })
    }

    /// The tilt `eta`.
    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// Potential value `V(x)`.
    pub fn big_v(&self, x: &DVector<f64>) -> f64 {
        (self.big_v)(x)
    }

    /// Potential gradient at `x`.
    pub fn grad_big_v(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.grad_big_v)(x)
    }

    /// Weight value `exp(eta * V(x))`.
    pub fn weight(&self, x: &DVector<f64>) -> f64 {
        (self.eta * (self.big_v)(x)).exp()
    }

    /// Log weight `eta * V(x)`, for log-domain computations.
    pub fn log_weight(&self, x: &DVector<f64>) -> f64 {
        self.eta * (self.big_v)(x)
    }

    /// Weight values on every node of a grid.
    pub fn values_on(&self, grid: &Grid) -> DVector<f64> {
        DVector::from_fn(grid.len(), |i, _| self.weight(grid.node(i)))
    }

    /// Checks the weight contract at the given probes: `V >= 0` (so `v >= 1`)
    /// and the supplied gradient against finite differences of `V`.
    pub fn validate_on(&self, probes: &[DVector<f64>]) -> Result<()> {
        for x in probes {
            let val = self.big_v(x);
            if !(val >= 0.0) {
                return Err(ErgoError::InvalidParameter {
                    what: "weight potential",
                    detail: format!("V must be nonnegative, got {val} at a probe"),
                });
            }
            let g = self.grad_big_v(x);
            let mut scale = 1.0 + g.amax();
            for a in 0..x.len() {
                let h = 1e-5 * (1.0 + x[a].abs());
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[a] += h;
                xm[a] -= h;
                let fd = (self.big_v(&xp) - self.big_v(&xm)) / (2.0 * h);
                scale = scale.max(1.0 + fd.abs());
                if (g[a] - fd).abs() > 1e-4 * scale {
                    return Err(ErgoError::InvalidParameter {
                        what: "weight gradient",
                        detail: format!(
                            "axis {a}: supplied {} vs finite difference {fd}",
                            g[a]
                        ),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Function data on a grid: node values, optionally per-axis derivatives.
#[derive(Debug, Clone)]
pub struct GridFunction {
    grid: Arc<Grid>,
    values: DVector<f64>,
    derivs: Option<Vec<DVector<f64>>>,
}

impl GridFunction {
    /// Wraps node values, checking length and finiteness.
    pub fn new(grid: Arc<Grid>, values: DVector<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(ErgoError::DimensionMismatch {
                what: "grid function values",
                expected: grid.len(),
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ErgoError::InvalidParameter {
                what: "grid function values",
                detail: "values must be finite".into(),
            });
        }
        Ok(GridFunction { grid, values, derivs: None })
    }

    /// Samples a scalar function on the grid nodes.
    pub fn from_fn(grid: &Arc<Grid>, f: impl Fn(&DVector<f64>) -> f64) -> Result<Self> {
        let values = DVector::from_fn(grid.len(), |i, _| f(grid.node(i)));
        Self::new(grid.clone(), values)
    }

    /// Samples a function and its analytic gradient on the grid nodes.
    pub fn from_fn_with_grad(
        grid: &Arc<Grid>,
        f: impl Fn(&DVector<f64>) -> f64,
        grad: impl Fn(&DVector<f64>) -> DVector<f64>,
    ) -> Result<Self> {
        let mut out = Self::from_fn(grid, f)?;
        let mut derivs = Vec::with_capacity(grid.dim());
        for a in 0..grid.dim() {
            derivs.push(DVector::from_fn(grid.len(), |i, _| grad(grid.node(i))[a]));
        }
        out.derivs = Some(derivs);
        Ok(out)
    }

    /// Supplies explicit per-axis derivative values.
    pub fn with_derivs(mut self, derivs: Vec<DVector<f64>>) -> Result<Self> {
        if derivs.len() != self.grid.dim() {
            return Err(ErgoError::DimensionMismatch {
                what: "derivative axes",
                expected: self.grid.dim(),
                got: derivs.len(),
            });
        }
        for d in &derivs {
            if d.len() != self.grid.len() {
                return Err(ErgoError::DimensionMismatch {
                    what: "derivative values",
                    expected: self.grid.len(),
                    got: d.len(),
                });
            }
        }
        self.derivs = Some(derivs);
        Ok(self)
    }

    /// Fills missing derivatives by grid differences.
    pub fn with_grid_derivs(mut self) -> Result<Self> {
        if self.derivs.is_none() {
            self.derivs = Some(self.grid.gradient(&self.values)?);
        }
        Ok(self)
    }

    /// The grid.
    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    /// Node values.
    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    /// Per-axis derivative values, when present.
    pub fn derivs(&self) -> Option<&[DVector<f64>]> {
        self.derivs.as_deref()
    }
}

/// Weighted sup norm `max_i |f(x_i)| / v(x_i)`.
pub fn v_norm(f: &GridFunction, v: &WeightFunction) -> Result<f64> {
    if f.grid().is_empty() {
        return Err(ErgoError::TooFewPoints { what: "grid nodes", need: 1, got: 0 });
    }
    let mut out: f64 = 0.0;
    for i in 0..f.grid().len() {
        out = out.max(f.values()[i].abs() / v.weight(f.grid().node(i)));
    }
    Ok(out)
}

/// First-order weighted norm: the maximum of the weighted sup norms of the
/// function and each of its partial derivatives. Requires derivative data.
pub fn sobolev_norm_v1(f: &GridFunction, v: &WeightFunction) -> Result<f64> {
    let derivs = f.derivs().ok_or(ErgoError::InvalidParameter {
        what: "derivs",
        detail: "first-order norm needs derivative values; \
                 call with_grid_derivs or supply them"
            .into(),
    })?;
    let mut out = v_norm(f, v)?;
    for d in derivs {
        let g = GridFunction::new(f.grid().clone(), d.clone())?;
        out = out.max(v_norm(&g, v)?);
    }
    Ok(out)
}

/// Weighted total variation `sum_i |mu_i| v(x_i)` of a signed measure given
/// by node weights.
pub fn measure_v_norm(mu: &DVector<f64>, grid: &Grid, v: &WeightFunction) -> Result<f64> {
    if mu.len() != grid.len() {
        return Err(ErgoError::DimensionMismatch {
            what: "measure weights",
            expected: grid.len(),
            got: mu.len(),
        });
    }
    Ok((0..grid.len()).map(|i| mu[i].abs() * v.weight(grid.node(i))).sum())
}

/// Induced weighted operator norm of a kernel matrix on node weights:
/// `max_i sum_j |K[i,j]| v(x_j) / v(x_i)`.
pub fn operator_v_norm_matrix(m: &DMatrix<f64>, v_nodes: &DVector<f64>) -> f64 {
    let mut out: f64 = 0.0;
    for i in 0..m.nrows() {
        let mut row = 0.0;
        for j in 0..m.ncols() {
            row += m[(i, j)].abs() * v_nodes[j];
        }
        out = out.max(row / v_nodes[i]);
    }
    out
}

/// Induced weighted operator norm of a grid kernel.
pub fn operator_v_norm(k: &GridKernel, v: &WeightFunction) -> f64 {
    operator_v_norm_matrix(k.matrix(), &v.values_on(k.grid()))
}

/// First-order induced weighted operator norm of a kernel matrix: the plain
/// induced norm, maximized with the induced norms of the row-differentiated
/// matrices along each axis. Bounds the first-order weighted norm of `K f`
/// by the first-order weighted norm of `f` (up to grid-difference error).
pub fn operator_v1_norm_matrix(m: &DMatrix<f64>, grid: &Grid, v_nodes: &DVector<f64>) -> f64 {
    let mut out = operator_v_norm_matrix(m, v_nodes);
    for a in 0..grid.dim() {
        let da = grid.matrix_row_gradient(m, a);
        out = out.max(operator_v_norm_matrix(&da, v_nodes));
    }
    out
}

/// First-order induced weighted operator norm of a grid kernel.
pub fn operator_v1_norm(k: &GridKernel, v: &WeightFunction) -> f64 {
    operator_v1_norm_matrix(k.matrix(), k.grid(), &v.values_on(k.grid()))
}

/// Geometric decay fit `norm(t) ~ b0 * rho0^t` produced by
/// [`decay_rate_fit`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayFit {
    /// Fitted prefactor.
    pub b0: f64,
    /// Fitted rate.
    pub rho0: f64,
    /// Coefficient of determination of the log-linear fit.
    pub r_squared: f64,
}

/// Least-squares fit of `log norm` against `t` for a positive norm sequence.
pub fn decay_rate_fit(series: &[(f64, f64)]) -> Result<DecayFit> {
    if series.len() < 3 {
        return Err(ErgoError::TooFewPoints {
            what: "decay series",
            need: 3,
            got: series.len(),
        });
    }
    for &(_, y) in series {
        if !(y > 0.0) {
            return Err(ErgoError::NonPositive { what: "decay series value", value: y });
        }
    }
    let n = series.len() as f64;
    let tbar: f64 = series.iter().map(|&(t, _)| t).sum::<f64>() / n;
    let ybar: f64 = series.iter().map(|&(_, y)| y.ln()).sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for &(t, y) in series {
        sxy += (t - tbar) * (y.ln() - ybar);
        sxx += (t - tbar) * (t - tbar);
    }
    if sxx == 0.0 {
        return Err(ErgoError::TooFewPoints { what: "distinct times", need: 2, got: 1 });
    }
    let slope = sxy / sxx;
    let intercept = ybar - slope * tbar;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for &(t, y) in series {
        let ly = y.ln();
        ss_res += (ly - (intercept + slope * t)).powi(2);
        ss_tot += (ly - ybar).powi(2);
    }
    let r_squared = if ss_tot < 1e-24 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(DecayFit { b0: intercept.exp(), rho0: slope.exp(), r_squared })
}
