//! Grid discretization of transition kernels and the operator toolbox built
//! on it: smooth cutoffs, truncation, centering, spectra, eigenprojections,
//! and finite-rank approximation.
//!
//! A kernel on a tensor grid is the matrix `K[i,j] ~ p(x_i, x_j) w_j` where
//! `w_j` are trapezoid quadrature weights, so `K f` approximates `P f` and
//! `mu^T K` approximates the pushforward of the measure with node weights
//! `mu`. Grids are capped at two dimensions; Monte Carlo modules cover higher
//! dimensional state spaces.

#[allow(unused_imports)]
use num_traits::Float;

use alloc::format;
use alloc::sync::Arc;
use alloc::vec::Vec;

use nalgebra::{Complex, DMatrix, DVector};

use crate::model::StateSpaceModel;
use crate::norms::{self, WeightFunction};
use crate::{bernstein, par, ErgoError, Result};

/// One-step transition density as a shareable closure.
pub type DensityFn = Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> f64 + Send + Sync>;

/// Uniform axis of a tensor grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridAxis {
    /// Left endpoint.
    pub lo: f64,
    /// Right endpoint.
    pub hi: f64,
    /// Node count (at least 2).
    pub m: usize,
    /// Node spacing `(hi - lo) / (m - 1)`.
    pub step: f64,
}

/// Requested grid geometry: one entry per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    /// Left endpoints per axis.
    pub lo: Vec<f64>,
    /// Right endpoints per axis.
    pub hi: Vec<f64>,
    /// Node counts per axis.
    pub m: Vec<usize>,
}

impl GridSpec {
    /// One-dimensional spec.
    pub fn line(lo: f64, hi: f64, m: usize) -> Self {
        GridSpec { lo: alloc::vec![lo], hi: alloc::vec![hi], m: alloc::vec![m] }
    }

    /// Two-dimensional spec with the same geometry on both axes.
    pub fn square(lo: f64, hi: f64, m: usize) -> Self {
        GridSpec { lo: alloc::vec![lo; 2], hi: alloc::vec![hi; 2], m: alloc::vec![m; 2] }
    }
}

/// Tensor product grid over one or two axes, with trapezoid quadrature
/// weights. Nodes are stored row-major: the first axis varies slowest.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    axes: Vec<GridAxis>,
    nodes: Vec<DVector<f64>>,
    weights: Vec<f64>,
}

impl Grid {
    /// Builds the grid described by `spec`.
    pub fn from_spec(spec: &GridSpec) -> Result<Grid> {
        let dim = spec.lo.len();
        if dim == 0 || dim > 2 {
            return Err(ErgoError::InvalidParameter {
                what: "grid dimension",
                detail: format!("supported dimensions are 1 and 2, got {dim}"),
            });
        }
        if spec.hi.len() != dim || spec.m.len() != dim {
            return Err(ErgoError::DimensionMismatch {
                what: "grid spec",
                expected: dim,
                got: spec.hi.len().min(spec.m.len()),
            });
        }
        let mut axes = Vec::with_capacity(dim);
        for a in 0..dim {
            let (lo, hi, m) = (spec.lo[a], spec.hi[a], spec.m[a]);
            if m < 2 {
                return Err(ErgoError::TooFewPoints { what: "grid axis", need: 2, got: m });
            }
            if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
                return Err(ErgoError::InvalidParameter {
                    what: "grid bounds",
                    detail: format!("need finite lo < hi, got [{lo}, {hi}]"),
                });
            }
            axes.push(GridAxis { lo, hi, m, step: (hi - lo) / (m - 1) as f64 });
        }
        let total: usize = axes.iter().map(|a| a.m).product();
        let mut nodes = Vec::with_capacity(total);
        let mut weights = Vec::with_capacity(total);
        for flat in 0..total {
            let mi = Self::decode(&axes, flat);
            let mut x = DVector::zeros(dim);
            let mut w = 1.0;
            for a in 0..dim {
                let ax = &axes[a];
                x[a] = ax.lo + mi[a] as f64 * ax.step;
                let edge = mi[a] == 0 || mi[a] == ax.m - 1;
                w *= if edge { ax.step / 2.0 } else { ax.step };
            }
            nodes.push(x);
            weights.push(w);
        }
        Ok(Grid { axes, nodes, weights })
    }

    /// Uniform 1-D grid on `[lo, hi]` with `m` nodes.
    pub fn line(lo: f64, hi: f64, m: usize) -> Result<Grid> {
        Self::from_spec(&GridSpec::line(lo, hi, m))
    }

    fn decode(axes: &[GridAxis], flat: usize) -> [usize; 2] {
        if axes.len() == 1 {
            [flat, 0]
        } else {
            let m1 = axes[1].m;
            [flat / m1, flat % m1]
        }
    }

    fn encode(&self, mi: [usize; 2]) -> usize {
        if self.axes.len() == 1 {
            mi[0]
        } else {
            mi[0] * self.axes[1].m + mi[1]
        }
    }

    /// Number of axes.
    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    /// Total node count.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Whether the grid has no nodes. Construction forbids this; the method
    /// exists for the usual container conventions.
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Axis `a`.
    pub fn axis(&self, a: usize) -> &GridAxis {
        &self.axes[a]
    }

    /// Node `i`.
    pub fn node(&self, i: usize) -> &DVector<f64> {
        &self.nodes[i]
    }

    /// All nodes in storage order.
    pub fn nodes(&self) -> &[DVector<f64>] {
        &self.nodes
    }

    /// Trapezoid quadrature weight of node `i`.
    pub fn quad_weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    /// All quadrature weights in storage order.
    pub fn quad_weights(&self) -> &[f64] {
        &self.weights
    }

    /// Index of the node closest to `x` in the max metric.
    pub fn nearest_index(&self, x: &DVector<f64>) -> usize {
        let mut mi = [0usize; 2];
        for a in 0..self.dim() {
            let ax = &self.axes[a];
            let k = ((x[a] - ax.lo) / ax.step).round();
            mi[a] = (k.max(0.0) as usize).min(ax.m - 1);
        }
        self.encode(mi)
    }

    /// Whether `other` has identical axes.
    pub fn same_shape(&self, other: &Grid) -> bool {
        self.axes == other.axes
    }

    /// Per-axis first derivatives of node values: central differences in the
    /// interior, one-sided at the boundary.
    pub fn gradient(&self, values: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
        if values.len() != self.len() {
            return Err(ErgoError::DimensionMismatch {
                what: "grid values",
                expected: self.len(),
                got: values.len(),
            });
        }
        let mut out = Vec::with_capacity(self.dim());
        for a in 0..self.dim() {
            let mut d = DVector::zeros(self.len());
            for i in 0..self.len() {
                let (ip, im, denom) = self.stencil(i, a);
                d[i] = (values[ip] - values[im]) / denom;
            }
            out.push(d);
        }
        Ok(out)
    }

    /// Difference stencil for node `i` along axis `a`: forward/backward at the
    /// boundary, central inside. Returns `(plus, minus, denominator)`.
    fn stencil(&self, i: usize, a: usize) -> (usize, usize, f64) {
        let mi = Self::decode(&self.axes, i);
        let ax = &self.axes[a];
        let k = mi[a];
        let mut up = mi;
        let mut dn = mi;
        if k == 0 {
            up[a] = 1;
            (self.encode(up), i, ax.step)
        } else if k == ax.m - 1 {
            dn[a] = k - 1;
            (i, self.encode(dn), ax.step)
        } else {
            up[a] = k + 1;
            dn[a] = k - 1;
            (self.encode(up), self.encode(dn), 2.0 * ax.step)
        }
    }

    /// Differentiates every column of `m` along axis `a` of the row index,
    /// with the same stencils as [`Grid::gradient`]. Row `i` of the result
    /// holds the derivative of `m`'s rows at node `i`.
    pub fn matrix_row_gradient(&self, m: &DMatrix<f64>, a: usize) -> DMatrix<f64> {
        let n = self.len();
        let cols = m.ncols();
        let mut out = DMatrix::zeros(n, cols);
        for i in 0..n {
            let (ip, im, denom) = self.stencil(i, a);
            for j in 0..cols {
                out[(i, j)] = (m[(ip, j)] - m[(im, j)]) / denom;
            }
        }
        out
    }
}

/// A discretized transition kernel on a grid.
#[derive(Clone)]
pub struct GridKernel {
    grid: Arc<Grid>,
    matrix: DMatrix<f64>,
    row_normalized: bool,
    signed: bool,
    stationary: Option<DVector<f64>>,
    weight_values: Option<DVector<f64>>,
    density: Option<DensityFn>,
}

impl core::fmt::Debug for GridKernel {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("GridKernel")
            .field("nodes", &self.grid.len())
            .field("row_normalized", &self.row_normalized)
            .field("signed", &self.signed)
            .field("has_stationary", &self.stationary.is_some())
            .finish()
    }
}

impl GridKernel {
    /// The grid the kernel lives on.
    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    /// The kernel matrix, entry `(i,j) ~ p(x_i, x_j) w_j`.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Whether rows were rescaled to sum to exactly 1.
    pub fn is_row_normalized(&self) -> bool {
        self.row_normalized
    }

    /// Whether entries may be negative (centered or truncated kernels).
    pub fn is_signed(&self) -> bool {
        self.signed
    }

    /// Stationary probability vector over nodes, when computed.
    pub fn stationary(&self) -> Option<&DVector<f64>> {
        self.stationary.as_ref()
    }

    /// Weight values `v(x_i)` attached to the kernel, if any.
    pub fn weight_values(&self) -> Option<&DVector<f64>> {
        self.weight_values.as_ref()
    }

    /// Attaches weight values `v(x_i)` used for default residual norms.
    pub fn set_weight(&mut self, v: &WeightFunction) {
        self.weight_values = Some(v.values_on(&self.grid));
    }

    /// The underlying density, when the kernel was built from one.
    pub fn density(&self) -> Option<&DensityFn> {
        self.density.as_ref()
    }

    /// `K f` on node values: the discrete analogue of `P f`.
    pub fn apply(&self, f: &DVector<f64>) -> DVector<f64> {
        &self.matrix * f
    }

    /// `mu^T K` on node weights: the discrete pushforward of a measure.
    pub fn apply_measure(&self, mu: &DVector<f64>) -> DVector<f64> {
        self.matrix.tr_mul(mu)
    }

    /// Mean of node values under the stationary vector.
    pub fn stationary_mean(&self, f: &DVector<f64>) -> Result<f64> {
        let pi = self.stationary.as_ref().ok_or(ErgoError::MissingStationary)?;
        Ok(pi.dot(f))
    }
}

/// Discretizes the model's transition density on the given grid with the
/// default escape-mass tolerance of `1e-8`.
pub fn discretize(
    model: &Arc<dyn StateSpaceModel>,
    spec: &GridSpec,
    normalize: bool,
) -> Result<GridKernel> {
    discretize_with(model, spec, normalize, 1e-8)
}

/// Discretizes with an explicit escape-mass tolerance.
///
/// The escape mass is measured as the stationary-weighted lost row mass
/// `sum_i pi_i max(0, 1 - rowsum_i)` before normalization, so it reflects how
/// much probability the chain actually leaks off the grid rather than the
/// worst boundary row, whose rows are nearly never visited.
pub fn discretize_with(
    model: &Arc<dyn StateSpaceModel>,
    spec: &GridSpec,
    normalize: bool,
    leak_tol: f64,
) -> Result<GridKernel> {
    let grid = Arc::new(Grid::from_spec(spec)?);
    if model.dim_state() != grid.dim() {
        return Err(ErgoError::DimensionMismatch {
            what: "grid dimension",
            expected: model.dim_state(),
            got: grid.dim(),
        });
    }
    let probe = grid.node(0);
    if model.density(probe, probe).is_none() {
        return Err(ErgoError::MissingDensity);
    }
    let m = model.clone();
    let density: DensityFn = Arc::new(move |x, y| m.density(x, y).unwrap_or(0.0));
    kernel_from_density(grid, density, normalize, leak_tol)
}

/// Builds a kernel directly from a density closure on an existing grid.
pub fn kernel_from_density(
    grid: Arc<Grid>,
    density: DensityFn,
    normalize: bool,
    leak_tol: f64,
) -> Result<GridKernel> {
    let n = grid.len();
    let entries = (n as u128) * (n as u128);
    if entries > 200_000_000 {
        return Err(ErgoError::TooLarge {
            what: "kernel matrix entries",
            size: entries,
            limit: 200_000_000,
        });
    }
    let g = grid.clone();
    let d = density.clone();
    let rows: Vec<Vec<f64>> = par::map_indexed(n, move |i| {
        let xi = g.node(i);
        (0..n).map(|j| d(xi, g.node(j)) * g.quad_weight(j)).collect()
    });
    let raw = DMatrix::from_fn(n, n, |i, j| rows[i][j]);

    let mut row_sums = DVector::zeros(n);
    for i in 0..n {
        let mut s = 0.0;
        for j in 0..n {
            s += raw[(i, j)];
        }
        row_sums[i] = s;
        if !(s > 0.0) {
            return Err(ErgoError::GridTooSmall { leak: 1.0 });
        }
    }
    let mut normalized = raw.clone();
    for i in 0..n {
        for j in 0..n {
            normalized[(i, j)] /= row_sums[i];
        }
    }
    let pi = stationary_vector(&normalized)?;
    let leak: f64 = (0..n).map(|i| pi[i] * (1.0 - row_sums[i]).max(0.0)).sum();
    if leak > leak_tol {
        return Err(ErgoError::GridTooSmall { leak });
    }
    let (matrix, stationary) = if normalize { (normalized, Some(pi)) } else { (raw, None) };
    Ok(GridKernel {
        grid,
        matrix,
        row_normalized: normalize,
        signed: false,
        stationary,
        weight_values: None,
        density: Some(density),
    })
}

/// Dominant left eigenvector of a row-stochastic matrix by power iteration,
/// normalized to a probability vector.
fn stationary_vector(m: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = m.nrows();
    let mut mu = DVector::from_element(n, 1.0 / n as f64);
    let mut last_diff = f64::INFINITY;
    for _ in 0..200_000 {
        let mut next = m.tr_mul(&mu);
        let total: f64 = next.iter().sum();
        next /= total;
        last_diff = (0..n).map(|i| (next[i] - mu[i]).abs()).fold(0.0, f64::max);
        mu = next;
        if last_diff < 1e-14 {
            return Ok(mu);
        }
    }
    Err(ErgoError::NotConverged {
        what: "stationary power iteration",
        iterations: 200_000,
        last: last_diff,
    })
}

/// Smooth cutoff at level `n`: a product of 1-D profiles equal to 1 on
/// `|x_i| <= n`, 0 outside `|x_i| <= n+1`, with the cubic smoothstep in
/// between. The profile's slope is bounded by 1.5, inside the required
/// bound of 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CutoffFunction {
    n: usize,
}

/// Builds the level-`n` cutoff.
pub fn smooth_cutoff(n: usize) -> CutoffFunction {
    CutoffFunction { n }
}

impl CutoffFunction {
    /// The level `n`.
    pub fn level(&self) -> usize {
        self.n
    }

    /// 1-D profile value at radius `r`.
    pub fn profile(&self, r: f64) -> f64 {
        let u = (r.abs() - self.n as f64).clamp(0.0, 1.0);
        1.0 - u * u * (3.0 - 2.0 * u)
    }

    /// Derivative of the 1-D profile at `r`. Zero at and beyond the knots, so
    /// the profile is C1.
    pub fn profile_deriv(&self, r: f64) -> f64 {
        let a = r.abs() - self.n as f64;
        if a <= 0.0 || a >= 1.0 {
            0.0
        } else {
            -6.0 * a * (1.0 - a) * r.signum()
        }
    }

    /// Product profile over all coordinates.
    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        x.iter().map(|&c| self.profile(c)).product()
    }

    /// Partial derivative of the product profile along `axis`.
    pub fn partial(&self, x: &DVector<f64>, axis: usize) -> f64 {
        let mut out = self.profile_deriv(x[axis]);
        for (a, &c) in x.iter().enumerate() {
            if a != axis {
                out *= self.profile(c);
            }
        }
        out
    }
}

/// Two-sided truncation `chi_n(x_i) K[i,j] chi_m(x_j)`. The result is flagged
/// signed because rows no longer sum to 1.
pub fn truncate_kernel(k: &GridKernel, n: usize, m: usize) -> GridKernel {
    let chi_row = smooth_cutoff(n);
    let chi_col = smooth_cutoff(m);
    let size = k.grid.len();
    let row_f: Vec<f64> = (0..size).map(|i| chi_row.eval(k.grid.node(i))).collect();
    let col_f: Vec<f64> = (0..size).map(|j| chi_col.eval(k.grid.node(j))).collect();
    let mut matrix = k.matrix.clone();
    for i in 0..size {
        for j in 0..size {
            matrix[(i, j)] *= row_f[i] * col_f[j];
        }
    }
    GridKernel {
        grid: k.grid.clone(),
        matrix,
        row_normalized: false,
        signed: true,
        stationary: None,
        weight_values: k.weight_values.clone(),
        density: None,
    }
}

/// The centered kernel `K - 1 (x) pi`, whose powers decay at the rate of the
/// second-largest eigenvalue of `K`.
pub fn center_kernel(k: &GridKernel) -> Result<GridKernel> {
    let pi = k.stationary.as_ref().ok_or(ErgoError::MissingStationary)?;
    let n = k.grid.len();
    let mut matrix = k.matrix.clone();
    for i in 0..n {
        for j in 0..n {
            matrix[(i, j)] -= pi[j];
        }
    }
    Ok(GridKernel {
        grid: k.grid.clone(),
        matrix,
        row_normalized: false,
        signed: true,
        stationary: None,
        weight_values: k.weight_values.clone(),
        density: None,
    })
}

/// Spectrum summary of a kernel.
#[derive(Debug, Clone)]
pub struct SpectrumReport {
    /// Largest-modulus eigenvalues, in decreasing modulus order.
    pub eigenvalues: Vec<Complex<f64>>,
    /// Modulus of the largest eigenvalue.
    pub spectral_radius: f64,
    /// Weighted-norm growth-rate estimate extrapolated from matrix powers.
    pub xi_v: f64,
    /// The raw sequence `(n, ||K^n||_v^(1/n))` behind the estimate.
    pub power_norms: Vec<(u32, f64)>,
}

/// Modulus of a complex scalar, spelled out so the `libm`-backed float path
/// works without the `std` feature of the complex type.
fn cmod(z: Complex<f64>) -> f64 {
    z.norm_sqr().sqrt()
}

fn complex_eigenvalues(m: &DMatrix<f64>) -> Result<Vec<Complex<f64>>> {
    let schur = nalgebra::Schur::try_new(m.clone(), 1e-13, 100_000).ok_or(
        ErgoError::NotConverged { what: "schur eigensolve", iterations: 100_000, last: 0.0 },
    )?;
    Ok(schur.complex_eigenvalues().iter().cloned().collect())
}

/// Dense eigensolve plus a power-norm estimate of the growth rate
/// `xi_v = lim ||K^n||_v^(1/n)`.
///
/// The extrapolated estimate is the ratio `(||K^32||_v / ||K^16||_v)^(1/16)`,
/// which cancels the constant prefactor of a geometric norm sequence; the raw
/// root sequence at `n = 8, 16, 32` is reported alongside.
pub fn spectrum_and_radius(
    k: &GridKernel,
    v: Option<&WeightFunction>,
    top_k: usize,
) -> Result<SpectrumReport> {
    let v_nodes = match (v, k.weight_values()) {
        (Some(w), _) => w.values_on(&k.grid),
        (None, Some(vals)) => vals.clone(),
        (None, None) => DVector::from_element(k.grid.len(), 1.0),
    };
    let mut eigs = complex_eigenvalues(&k.matrix)?;
    eigs.sort_by(|a, b| cmod(*b).partial_cmp(&cmod(*a)).unwrap());
    let spectral_radius = eigs.first().map(|e| cmod(*e)).unwrap_or(0.0);
    eigs.truncate(top_k);

    let p2 = &k.matrix * &k.matrix;
    let p4 = &p2 * &p2;
    let p8 = &p4 * &p4;
    let p16 = &p8 * &p8;
    let p32 = &p16 * &p16;
    let n8 = norms::operator_v_norm_matrix(&p8, &v_nodes);
    let n16 = norms::operator_v_norm_matrix(&p16, &v_nodes);
    let n32 = norms::operator_v_norm_matrix(&p32, &v_nodes);
    let power_norms = alloc::vec![
        (8u32, n8.powf(1.0 / 8.0)),
        (16u32, n16.powf(1.0 / 16.0)),
        (32u32, n32.powf(1.0 / 32.0)),
    ];
    let xi_v = if n16 > 0.0 { (n32 / n16).powf(1.0 / 16.0) } else { 0.0 };
    Ok(SpectrumReport { eigenvalues: eigs, spectral_radius, xi_v, power_norms })
}

/// Projection onto an invariant subspace, produced by
/// [`spectral_projection`].
#[derive(Debug, Clone)]
pub struct SpectralProjection {
    /// Number of eigenvalues (counted with conjugates) inside the disk.
    pub rank: usize,
    /// The projection matrix.
    pub matrix: DMatrix<f64>,
}

fn to_complex(m: &DMatrix<f64>) -> DMatrix<Complex<f64>> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| Complex::new(m[(i, j)], 0.0))
}

/// One eigenvector of `m` for the (approximately known) eigenvalue `lambda`,
/// by shifted inverse iteration.
fn inverse_iteration(
    m: &DMatrix<Complex<f64>>,
    lambda: Complex<f64>,
) -> Result<DVector<Complex<f64>>> {
    let n = m.nrows();
    let shift = lambda + Complex::new(1e-10 * (1.0 + cmod(lambda)), 0.0);
    let mut shifted = m.clone();
    for i in 0..n {
        shifted[(i, i)] -= shift;
    }
    let lu = shifted.lu();
    // Deterministic start with components on every coordinate direction.
    let mut x = DVector::from_fn(n, |i, _| {
        Complex::new(1.0 + 0.3 * ((i as f64) * 1.7).sin(), 0.2 * ((i as f64) * 0.9).cos())
    });
    x /= Complex::new(x.norm(), 0.0);
    let mut residual = f64::INFINITY;
    for _ in 0..200 {
        let y = lu.solve(&x).ok_or(ErgoError::IllConditioned {
            what: "inverse iteration solve",
            residual: 0.0,
        })?;
        x = &y / Complex::new(y.norm(), 0.0);
        let r = m * &x - &x * lambda;
        residual = r.norm();
        if residual < 1e-11 * (1.0 + cmod(lambda)) {
            break;
        }
    }
    if residual > 1e-7 * (1.0 + cmod(lambda)) {
        return Err(ErgoError::IllConditioned { what: "inverse iteration", residual });
    }
    Ok(x)
}

/// Projection onto the invariant subspace of the eigenvalues inside the disk
/// `|z - center| < radius`.
///
/// Eigenvalues are located by a dense Schur decomposition, eigenvectors by
/// inverse iteration, and the projection assembled as the sum of rank-one
/// terms `x y^T / (y^T x)` over the cluster (conjugate pairs contribute their
/// doubled real part). Errors if an eigenvalue sits on the disk boundary,
/// if the disk splits a conjugate pair, or if the assembled matrix fails the
/// idempotence and commutation checks at `1e-8`.
pub fn spectral_projection(
    k: &GridKernel,
    center: Complex<f64>,
    radius: f64,
) -> Result<SpectralProjection> {
    if !(radius > 0.0) {
        return Err(ErgoError::NonPositive { what: "cluster radius", value: radius });
    }
    let n = k.grid.len();
    let eigs = complex_eigenvalues(&k.matrix)?;
    for e in &eigs {
        let dist = (cmod(e - center) - radius).abs();
        if dist < 1e-8 {
            return Err(ErgoError::BoundaryCluster { distance: dist });
        }
    }
    let inside: Vec<Complex<f64>> = eigs.iter().filter(|e| cmod(*e - center) < radius).cloned().collect();
    if inside.is_empty() {
        return Ok(SpectralProjection { rank: 0, matrix: DMatrix::zeros(n, n) });
    }
    for e in &inside {
        if e.im.abs() > 1e-10 {
            let conj_in = inside.iter().any(|f| cmod(f - e.conj()) < 1e-8);
            if !conj_in {
                return Err(ErgoError::InvalidParameter {
                    what: "cluster disk",
                    detail: format!("disk splits the conjugate pair at {e}"),
                });
            }
        }
    }

    let mc = to_complex(&k.matrix);
    let mt = mc.transpose();
    let mut proj = DMatrix::<Complex<f64>>::zeros(n, n);
    for e in &inside {
        if e.im < -1e-10 {
            continue; // handled together with its conjugate
        }
        let x = inverse_iteration(&mc, *e)?;
        let y = inverse_iteration(&mt, *e)?;
        // Plain bilinear product y^T x (no conjugation), so the arbitrary
        // complex phases of the two iterates cancel between numerator and
        // denominator.
        let denom: Complex<f64> = y.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
        if cmod(denom) < 1e-12 {
            return Err(ErgoError::IllConditioned {
                what: "biorthogonal normalization",
                residual: cmod(denom),
            });
        }
        let term = &x * y.transpose() / denom;
        if e.im > 1e-10 {
            proj += term.map(|c| Complex::new(2.0 * c.re, 0.0));
        } else {
            proj += term;
        }
    }
    let max_im = proj.iter().map(|c| c.im.abs()).fold(0.0, f64::max);
    if max_im > 1e-8 {
        return Err(ErgoError::IllConditioned { what: "projection imaginary part", residual: max_im });
    }
    let p = proj.map(|c| c.re);
    let scale = 1.0 + p.amax();
    let idem = (&p * &p - &p).amax();
    let comm = (&k.matrix * &p - &p * &k.matrix).amax();
    if idem > 1e-8 * scale || comm > 1e-8 * scale {
        return Err(ErgoError::IllConditioned {
            what: "projection validation",
            residual: idem.max(comm),
        });
    }
    Ok(SpectralProjection { rank: inside.len(), matrix: p })
}

/// Operator-norm truncation errors `(err_v, err_v1)` of replacing `K` by its
/// two-sided `(n, m)` truncation.
///
/// `err_v` is the induced weighted-sup operator norm of the difference.
/// `err_v1` additionally accounts for first derivatives of the image: the
/// difference kernel's rows are differentiated in the state argument by grid
/// differences, and the worst case over unit-weighted-norm inputs is taken,
/// so the pair bounds the error in the first-order weighted norm.
pub fn truncation_error(k: &GridKernel, n: usize, m: usize, v: &WeightFunction) -> (f64, f64) {
    let v_nodes = v.values_on(&k.grid);
    let trunc = truncate_kernel(k, n, m);
    let diff = &k.matrix - &trunc.matrix;
    let err_v = norms::operator_v_norm_matrix(&diff, &v_nodes);
    let mut err_v1 = err_v;
    for a in 0..k.grid.dim() {
        let da = k.grid.matrix_row_gradient(&diff, a);
        err_v1 = err_v1.max(norms::operator_v_norm_matrix(&da, &v_nodes));
    }
    (err_v, err_v1)
}

/// A rank-factored kernel `sum_k s_k (x) nu_k`: left functions on nodes and
/// right measures with quadrature weights folded in.
#[derive(Debug, Clone)]
pub struct FiniteRankKernel {
    grid: Arc<Grid>,
    left: Vec<DVector<f64>>,
    right: Vec<DVector<f64>>,
}

impl FiniteRankKernel {
    /// Number of rank-one terms.
    pub fn rank(&self) -> usize {
        self.left.len()
    }

    /// The grid the factors live on.
    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    /// Left factor functions on nodes.
    pub fn left_functions(&self) -> &[DVector<f64>] {
        &self.left
    }

    /// Right factor measures on nodes.
    pub fn right_measures(&self) -> &[DVector<f64>] {
        &self.right
    }

    /// Applies the factored operator to node values without materializing the
    /// dense matrix.
    pub fn apply(&self, f: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.grid.len());
        for (s, r) in self.left.iter().zip(&self.right) {
            let c = r.dot(f);
            out.axpy(c, s, 1.0);
        }
        out
    }

    /// Dense matrix `sum_k s_k r_k^T`.
    pub fn materialize(&self) -> DMatrix<f64> {
        let n = self.grid.len();
        let mut out = DMatrix::zeros(n, n);
        for (s, r) in self.left.iter().zip(&self.right) {
            for i in 0..n {
                if s[i] == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[(i, j)] += s[i] * r[j];
                }
            }
        }
        out
    }
}

/// Finite-rank approximation of the `(box_n, box_n)`-truncated kernel.
///
/// The rescaled density `p(x, y) v(y)` is fitted by a tensor Bernstein
/// polynomial of degree `degree_m` on the box `[-(n+1), n+1]` per coordinate,
/// multiplied by the two cutoffs, and factored along the Bernstein basis of
/// the `x` block, giving rank at most `(degree_m + 1)^l`. Returns the factored
/// kernel and the measured first-order weighted operator-norm error against
/// the truncated kernel.
pub fn finite_rank_approx(
    k: &GridKernel,
    v: &WeightFunction,
    degree_m: usize,
    box_n: usize,
) -> Result<(FiniteRankKernel, f64)> {
    let density = k.density.as_ref().ok_or(ErgoError::MissingDensity)?.clone();
    let l = k.grid.dim();
    let edge = (box_n + 1) as f64;
    for a in 0..l {
        if k.grid.axis(a).lo > -edge || k.grid.axis(a).hi < edge {
            return Err(ErgoError::InvalidParameter {
                what: "truncation box",
                detail: format!(
                    "box half-width {edge} exceeds grid axis {a} [{}, {}]",
                    k.grid.axis(a).lo,
                    k.grid.axis(a).hi
                ),
            });
        }
    }
    let dims = 2 * l;
    let lo = alloc::vec![-edge; dims];
    let hi = alloc::vec![edge; dims];
    let vf = v.clone();
    let dens = density.clone();
    let phi = move |z: &[f64]| {
        let x = DVector::from_row_slice(&z[..l]);
        let y = DVector::from_row_slice(&z[l..]);
        dens(&x, &y) * vf.weight(&y)
    };
    let fit = bernstein::bernstein_fit(&phi, &lo, &hi, degree_m, dims)?;
    let coeffs = fit.coeffs();
    let mp1 = degree_m + 1;

    let rank = mp1.pow(l as u32);
    let size = k.grid.len();
    if (rank as u128) * (size as u128) > 100_000_000 {
        return Err(ErgoError::TooLarge {
            what: "finite rank factors",
            size: rank as u128 * size as u128,
            limit: 100_000_000,
        });
    }
    let chi = smooth_cutoff(box_n);

    // Bernstein basis values per node coordinate, on the box's unit scale.
    let unit = |c: f64| (c + edge) / (2.0 * edge);
    let node_basis: Vec<Option<Vec<Vec<f64>>>> = (0..size)
        .map(|i| {
            let x = k.grid.node(i);
            if x.iter().any(|&c| c.abs() > edge) {
                None // outside the box the cutoff vanishes anyway
            } else {
                Some((0..l).map(|a| bernstein::basis(degree_m, unit(x[a]))).collect())
            }
        })
        .collect();

    let mut left = Vec::with_capacity(rank);
    let mut right = Vec::with_capacity(rank);
    for kflat in 0..rank {
        // Multi-index over the x block, first axis slowest.
        let mut kidx = [0usize; 2];
        {
            let mut rem = kflat;
            for a in (0..l).rev() {
                kidx[a] = rem % mp1;
                rem /= mp1;
            }
        }
        let mut s = DVector::zeros(size);
        for i in 0..size {
            if let Some(b) = &node_basis[i] {
                let mut val = chi.eval(k.grid.node(i));
                for a in 0..l {
                    val *= b[a][kidx[a]];
                }
                s[i] = val;
            }
        }
        // Contract the y block of the coefficient tensor against the y basis.
        let y_block = mp1.pow(l as u32);
        let offset = kflat * y_block;
        let mut r = DVector::zeros(size);
        for j in 0..size {
            if let Some(b) = &node_basis[j] {
                let cut = chi.eval(k.grid.node(j));
                if cut == 0.0 {
                    continue;
                }
                let mut acc = 0.0;
                for yflat in 0..y_block {
                    let mut rem = yflat;
                    let mut basis_prod = 1.0;
                    for a in (0..l).rev() {
                        basis_prod *= b[a][rem % mp1];
                        rem /= mp1;
                    }
                    acc += coeffs[offset + yflat] * basis_prod;
                }
                let y = k.grid.node(j);
                r[j] = acc * cut * k.grid.quad_weight(j) / v.weight(y);
            }
        }
        left.push(s);
        right.push(r);
    }
    let t = FiniteRankKernel { grid: k.grid.clone(), left, right };

    let truncated = truncate_kernel(k, box_n, box_n);
    let diff = &truncated.matrix - t.materialize();
    let v_nodes = v.values_on(&k.grid);
    let err_v1 = norms::operator_v1_norm_matrix(&diff, &k.grid, &v_nodes);
    Ok((t, err_v1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Ar1;
    use approx::assert_relative_eq;

    fn ar1_kernel(lo: f64, hi: f64, m: usize) -> GridKernel {
        let model: Arc<dyn StateSpaceModel> = Arc::new(Ar1::new(0.5, 1.0).unwrap());
        // The [-6, 6] box leaks ~2e-7 of stationary mass, so tests on the
        // narrower grids pass an explicit tolerance.
        discretize_with(&model, &GridSpec::line(lo, hi, m), true, 1e-6).unwrap()
    }

    #[test]
    fn grid_nodes_and_weights_tile_the_box() {
        let g = Grid::line(-1.0, 1.0, 5).unwrap();
        assert_eq!(g.len(), 5);
        assert_relative_eq!(g.node(2)[0], 0.0, epsilon = 1e-15);
        let total: f64 = (0..g.len()).map(|i| g.quad_weight(i)).sum();
        assert_relative_eq!(total, 2.0, max_relative = 1e-14);

        let g2 = Grid::from_spec(&GridSpec::square(-1.0, 1.0, 5)).unwrap();
        assert_eq!(g2.len(), 25);
        let total2: f64 = (0..g2.len()).map(|i| g2.quad_weight(i)).sum();
        assert_relative_eq!(total2, 4.0, max_relative = 1e-14);
        assert_eq!(g2.nearest_index(&DVector::from_row_slice(&[0.1, -0.6])), 2 * 5 + 1);
    }

    #[test]
    fn grid_gradient_is_exact_on_affine_data() {
        let g = Grid::line(0.0, 1.0, 11).unwrap();
        let vals = DVector::from_fn(g.len(), |i, _| 3.0 * g.node(i)[0] + 1.0);
        let d = g.gradient(&vals).unwrap();
        for i in 0..g.len() {
            assert_relative_eq!(d[0][i], 3.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn discretized_rows_are_stochastic_and_stationary_matches() {
        let k = ar1_kernel(-8.0, 8.0, 401);
        let n = k.grid().len();
        for i in 0..n {
            let s: f64 = (0..n).map(|j| k.matrix()[(i, j)]).sum();
            assert!((s - 1.0).abs() < 1e-12, "row {i} sums to {s}");
        }
        let pi = k.stationary().unwrap();
        let residual = (k.apply_measure(pi) - pi).amax();
        assert!(residual < 1e-10, "stationary residual {residual}");
        let total: f64 = pi.iter().sum();
        assert_relative_eq!(total, 1.0, max_relative = 1e-12);
        // Stationary law of the linear model is N(0, 4/3).
        let var: f64 = (0..n).map(|i| pi[i] * k.grid().node(i)[0].powi(2)).sum();
        assert_relative_eq!(var, 4.0 / 3.0, max_relative = 1e-3);
    }

    #[test]
    fn small_grid_is_rejected_with_measured_leak() {
        let model: Arc<dyn StateSpaceModel> = Arc::new(Ar1::new(0.5, 1.0).unwrap());
        let err = discretize(&model, &GridSpec::line(-2.0, 2.0, 81), true).unwrap_err();
        match err {
            ErgoError::GridTooSmall { leak } => assert!(leak > 1e-4, "leak {leak}"),
            other => panic!("expected grid-too-small, got {other:?}"),
        }
    }

    #[test]
    fn deterministic_map_without_density_is_rejected() {
        struct NoDensity;
        impl StateSpaceModel for NoDensity {
            fn name(&self) -> &str {
                "nodensity"
            }
            fn dim_state(&self) -> usize {
                1
            }
            fn dim_noise(&self) -> usize {
                1
            }
            fn map(&self, x: &DVector<f64>, _n: &DVector<f64>) -> DVector<f64> {
                x * 0.5
            }
            fn jacobian(&self, _x: &DVector<f64>, _n: &DVector<f64>) -> DMatrix<f64> {
                DMatrix::from_element(1, 1, 0.5)
            }
            fn noise_law(&self) -> &crate::model::NoiseLaw {
                &crate::model::NoiseLaw::Gaussian
            }
        }
        let model: Arc<dyn StateSpaceModel> = Arc::new(NoDensity);
        let err = discretize(&model, &GridSpec::line(-8.0, 8.0, 101), true).unwrap_err();
        assert!(matches!(err, ErgoError::MissingDensity));
    }

    #[test]
    fn two_step_kernel_matches_squared_kernel() {
        // Chapman-Kolmogorov: squaring the one-step matrix equals
        // discretizing the two-step density N(rho^2 x, sigma^2 (1 + rho^2)).
        let k1 = ar1_kernel(-8.0, 8.0, 401);
        let two_step: Arc<dyn StateSpaceModel> =
            Arc::new(Ar1::new(0.25, 1.25_f64.sqrt()).unwrap());
        let k2 = discretize(&two_step, &GridSpec::line(-8.0, 8.0, 401), true).unwrap();
        let sq = k1.matrix() * k1.matrix();
        assert!((&sq - k2.matrix()).amax() < 1e-4);
    }

    #[test]
    fn cutoff_profile_shape_and_bounds() {
        let chi = smooth_cutoff(2);
        assert_eq!(chi.profile(1.99), 1.0);
        assert_eq!(chi.profile(-2.0), 1.0);
        assert_eq!(chi.profile(3.0), 0.0);
        assert_eq!(chi.profile(-3.5), 0.0);
        assert_relative_eq!(chi.profile(2.5), 0.5, max_relative = 1e-14);
        assert_relative_eq!(chi.profile_deriv(2.5), -1.5, max_relative = 1e-14);
        // C1 at the knots: derivative vanishes from both sides.
        for r in [2.0, 3.0] {
            assert!(chi.profile_deriv(r - 1e-9).abs() < 1e-8);
            assert!(chi.profile_deriv(r + 1e-9).abs() < 1e-8);
        }
        // Derivative bound over dense probes, well inside the required 2.
        let mut stream = crate::rng::NoiseStream::master(31);
        for _ in 0..10_000 {
            let x = DVector::from_fn(2, |_, _| 8.0 * (stream.uniform_sym()));
            for a in 0..2 {
                assert!(chi.partial(&x, a).abs() <= 1.5 + 1e-12);
            }
        }
    }

    #[test]
    fn truncation_vanishes_beyond_extent_and_zeroes_far_rows() {
        let k = ar1_kernel(-6.0, 6.0, 121);
        let t = truncate_kernel(&k, 9, 9);
        assert!((&t.matrix - &k.matrix).amax() < 1e-15);
        assert!(t.is_signed());

        let t0 = truncate_kernel(&k, 0, 9);
        let n = k.grid().len();
        for i in 0..n {
            if k.grid().node(i)[0].abs() >= 1.0 {
                for j in 0..n {
                    assert_eq!(t0.matrix[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn truncation_error_decays_and_orders() {
        let k = ar1_kernel(-6.0, 6.0, 241);
        let v = WeightFunction::quadratic(0.1).unwrap();
        let mut prev = f64::INFINITY;
        for n in 2..=5 {
            let (ev, ev1) = truncation_error(&k, n, n, &v);
            assert!(ev <= ev1 + 1e-15, "v-norm must not exceed first-order norm");
            assert!(ev1 < prev, "error must decrease at level {n}");
            prev = ev1;
        }
        let (ev6, ev16) = truncation_error(&k, 6, 6, &v);
        assert!(ev6 < 1e-6 && ev16 < 1e-6, "errors at level 6: {ev6}, {ev16}");
    }

    #[test]
    fn centered_kernel_annihilates_constants_and_scales_linearly() {
        let k = ar1_kernel(-8.0, 8.0, 401);
        let c = center_kernel(&k).unwrap();
        let n = k.grid().len();
        for i in 0..n {
            let s: f64 = (0..n).map(|j| c.matrix()[(i, j)]).sum();
            assert!(s.abs() < 1e-10, "centered row {i} sums to {s}");
        }
        let ones = DVector::from_element(n, 1.0);
        assert!(c.apply(&ones).amax() < 1e-10);
        // The identity function has stationary mean zero, so centering leaves
        // its image rho * x untouched.
        let x = DVector::from_fn(n, |i, _| k.grid().node(i)[0]);
        let cx = c.apply(&x);
        for i in 0..n {
            let xi = k.grid().node(i)[0];
            if xi.abs() <= 5.0 {
                assert_relative_eq!(cx[i], 0.5 * xi, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn spectrum_matches_geometric_eigenvalues() {
        let k = ar1_kernel(-8.0, 8.0, 201);
        let v = WeightFunction::quadratic(0.1).unwrap();
        let rep = spectrum_and_radius(&k, Some(&v), 4).unwrap();
        let expect = [1.0, 0.5, 0.25, 0.125];
        for (e, x) in rep.eigenvalues.iter().zip(expect) {
            assert!(e.im.abs() < 1e-8);
            assert!((e.re - x).abs() < 1e-3, "eigenvalue {} vs {x}", e.re);
        }
        assert_relative_eq!(rep.spectral_radius, 1.0, max_relative = 1e-6);
        assert!((rep.xi_v - 1.0).abs() < 0.02);

        let c = center_kernel(&k).unwrap();
        let crep = spectrum_and_radius(&c, Some(&v), 1).unwrap();
        assert!((crep.spectral_radius - 0.5).abs() < 1e-3);
        assert!((crep.xi_v - crep.spectral_radius).abs() < 0.02 * crep.spectral_radius);
    }

    #[test]
    fn identity_kernel_spectrum_is_all_ones() {
        let grid = Arc::new(Grid::line(-1.0, 1.0, 21).unwrap());
        let n = grid.len();
        let k = GridKernel {
            grid,
            matrix: DMatrix::identity(n, n),
            row_normalized: true,
            signed: false,
            stationary: None,
            weight_values: None,
            density: None,
        };
        let rep = spectrum_and_radius(&k, None, 5).unwrap();
        for e in &rep.eigenvalues {
            assert_relative_eq!(e.re, 1.0, max_relative = 1e-10);
        }
        assert_relative_eq!(rep.xi_v, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn perron_projection_is_one_tensor_stationary() {
        let k = ar1_kernel(-8.0, 8.0, 201);
        let p = spectral_projection(&k, Complex::new(1.0, 0.0), 0.2).unwrap();
        assert_eq!(p.rank, 1);
        let pi = k.stationary().unwrap();
        let n = k.grid().len();
        let expect = DMatrix::from_fn(n, n, |_i, j| pi[j]);
        assert!((&p.matrix - &expect).amax() < 1e-8);
    }

    #[test]
    fn projection_disk_cases() {
        let k = ar1_kernel(-8.0, 8.0, 201);
        let empty = spectral_projection(&k, Complex::new(-0.7, 0.0), 0.1).unwrap();
        assert_eq!(empty.rank, 0);
        assert_eq!(empty.matrix.amax(), 0.0);

        let second = spectral_projection(&k, Complex::new(0.5, 0.0), 0.1).unwrap();
        assert_eq!(second.rank, 1);
        let m = &second.matrix;
        assert!((m * m - m).amax() < 1e-8);
        assert!((k.matrix() * m - m * k.matrix()).amax() < 1e-8);

        // Boundary contact: an eigenvalue at distance ~0 from the circle.
        let err = spectral_projection(&k, Complex::new(0.75, 0.0), 0.25);
        assert!(matches!(err, Err(ErgoError::BoundaryCluster { .. })));
    }

    #[test]
    fn finite_rank_factorization_matches_dense_and_converges() {
        let k = ar1_kernel(-6.0, 6.0, 121);
        let v = WeightFunction::quadratic(0.1).unwrap();
        let mut prev = f64::INFINITY;
        for m in [8usize, 16, 32] {
            let (t, err) = finite_rank_approx(&k, &v, m, 4).unwrap();
            assert_eq!(t.rank(), m + 1);
            // Factored application equals dense materialization.
            let f = DVector::from_fn(k.grid().len(), |i, _| (k.grid().node(i)[0] * 0.3).tanh());
            let dense = t.materialize() * &f;
            assert!((t.apply(&f) - dense).amax() < 1e-12);
            assert!(err < prev, "degree {m} error {err} vs previous {prev}");
            prev = err;
        }
    }

    #[test]
    fn uniform_density_is_reproduced_at_degree_one() {
        // Transition density constant in both arguments: the Bernstein fit of
        // an affine function is exact, so the only error is roundoff.
        let grid = Arc::new(Grid::line(-6.0, 6.0, 121).unwrap());
        let dens: DensityFn = Arc::new(|_x, _y| 1.0 / 12.0);
        let k = kernel_from_density(grid, dens, true, 1e-8).unwrap();
        let v = WeightFunction::one();
        let (_t, err) = finite_rank_approx(&k, &v, 1, 4).unwrap();
        assert!(err < 1e-12, "uniform kernel error {err}");
    }
}
