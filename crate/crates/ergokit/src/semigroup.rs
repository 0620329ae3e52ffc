//! Monte Carlo estimation of the transition semigroup `P^t f` and of the
//! gradient semigroup, together with a common-random-numbers check of the
//! pathwise gradient identity.
//!
//! The pathwise gradient of `E f(X(t))` with respect to the start point is
//! `E [ S(t)^T grad f(X(t)) ]`, with `S(t)` the sensitivity process. The
//! checker estimates the same gradient by central finite differences driven
//! by the *same* noise panels, then compares the two estimates through their
//! per-replication paired differences, which removes almost all Monte Carlo
//! variance from the comparison.

#[allow(unused_imports)]
use num_traits::Float;

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::model::{eval_jacobian, eval_map, sample_noise, StateSpaceModel};
use crate::rng::NoiseStream;
use crate::{par, ErgoError, Result};

/// A Monte Carlo estimate with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorResult<T> {
    /// Point estimate.
    pub value: T,
    /// Standard error (componentwise for vector estimates).
    pub std_error: T,
    /// Number of replications used.
    pub samples: u64,
    /// Master seed the replications were drawn from.
    pub seed: u64,
}

/// Growth class of a test function, used by callers to pick compatible
/// weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Growth {
    /// Bounded with bounded gradient.
    Bounded,
    /// At most linear growth.
    Linear,
    /// At most quadratic growth.
    Quadratic,
}

type ScalarFn = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;
type GradFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;

/// A scalar observable with its analytic gradient and growth class.
#[derive(Clone)]
pub struct TestFunction {
    name: String,
    f: ScalarFn,
    grad: GradFn,
    growth: Growth,
}

impl core::fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("TestFunction")
            .field("name", &self.name)
            .field("growth", &self.growth)
            .finish()
    }
}

impl TestFunction {
    /// A custom observable.
    pub fn custom(
        name: impl Into<String>,
        f: impl Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
        grad: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        growth: Growth,
    ) -> Self {
        TestFunction { name: name.into(), f: Arc::new(f), grad: Arc::new(grad), growth }
    }

    /// Coordinate sum `sum_i x_i` (the identity in one dimension).
    pub fn linear() -> Self {
        Self::custom(
            "linear",
            |x: &DVector<f64>| x.iter().sum(),
            |x: &DVector<f64>| DVector::from_element(x.len(), 1.0),
            Growth::Linear,
        )
    }

    /// Squared norm `|x|^2`.
    pub fn square() -> Self {
        Self::custom(
            "square",
            |x: &DVector<f64>| x.norm_squared(),
            |x: &DVector<f64>| x * 2.0,
            Growth::Quadratic,
        )
    }

    /// Bounded observable `sum_i tanh(x_i)`.
    pub fn tanh_sum() -> Self {
        Self::custom(
            "tanh",
            |x: &DVector<f64>| x.iter().map(|&c| c.tanh()).sum(),
            |x: &DVector<f64>| x.map(|c| 1.0 - c.tanh().powi(2)),
            Growth::Bounded,
        )
    }

    /// Constant observable.
    pub fn constant(c: f64) -> Self {
        Self::custom(
            "constant",
            move |_x: &DVector<f64>| c,
            |x: &DVector<f64>| DVector::zeros(x.len()),
            Growth::Bounded,
        )
    }

    /// The observable's name.
    pub fn name(&self) -> &str {
        &self.name
    }

    /// The growth class.
    pub fn growth(&self) -> Growth {
        self.growth
    }

    /// Value at `x`.
    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        (self.f)(x)
    }

    /// Gradient at `x`.
    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.grad)(x)
    }

    /// Validates the analytic gradient against central finite differences at
    /// the given probe points.
    pub fn check_gradient(&self, probes: &[DVector<f64>]) -> Result<()> {
        for x in probes {
            let g = self.gradient(x);
            if g.len() != x.len() {
                return Err(ErgoError::DimensionMismatch {
                    what: "test function gradient",
                    expected: x.len(),
                    got: g.len(),
                });
            }
            for a in 0..x.len() {
                let h = 1e-5 * (1.0 + x[a].abs());
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[a] += h;
                xm[a] -= h;
                let fd = (self.eval(&xp) - self.eval(&xm)) / (2.0 * h);
                let scale = 1.0 + g[a].abs().max(fd.abs());
                if (g[a] - fd).abs() > 1e-4 * scale {
                    return Err(ErgoError::InvalidParameter {
                        what: "test function gradient",
                        detail: alloc::format!(
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

fn check_samples(n: u64) -> Result<()> {
    if n < 2 {
        return Err(ErgoError::TooFewPoints { what: "replications", need: 2, got: n as usize });
    }
    Ok(())
}

fn check_state(model: &dyn StateSpaceModel, x0: &DVector<f64>) -> Result<()> {
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
    Ok(())
}

fn check_diverged(x: &DVector<f64>, t: usize) -> Result<()> {
    let norm = x.amax();
    if !norm.is_finite() || norm > 1e150 {
        return Err(ErgoError::Diverged { t, norm });
    }
    Ok(())
}

/// Advances the chain alone through a fixed noise panel.
fn walk_chain(
    model: &dyn StateSpaceModel,
    x0: &DVector<f64>,
    panel: &[DVector<f64>],
) -> Result<DVector<f64>> {
    let mut x = x0.clone();
    for (step, noise) in panel.iter().enumerate() {
        x = eval_map(model, &x, noise)?;
        check_diverged(&x, step + 1)?;
    }
    Ok(x)
}

/// Advances chain and sensitivity through a fixed noise panel.
fn walk_joint(
    model: &dyn StateSpaceModel,
    x0: &DVector<f64>,
    panel: &[DVector<f64>],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = model.dim_state();
    let mut x = x0.clone();
    let mut s = DMatrix::identity(d, d);
    for (step, noise) in panel.iter().enumerate() {
        let jac = eval_jacobian(model, &x, noise)?;
        s = jac.transpose() * s;
        x = eval_map(model, &x, noise)?;
        check_diverged(&x, step + 1)?;
    }
    Ok((x, s))
}

fn draw_panel(model: &dyn StateSpaceModel, t: usize, stream: &mut NoiseStream) -> Vec<DVector<f64>> {
    (0..t).map(|_| sample_noise(model, stream)).collect()
}

/// Monte Carlo estimate of `P^t f(x0) = E[f(X(t)) | X(0) = x0]`.
pub fn estimate_ptf(
    model: &dyn StateSpaceModel,
    f: &TestFunction,
    x0: &DVector<f64>,
    t: usize,
    n: u64,
    seed: u64,
) -> Result<EstimatorResult<f64>> {
    check_samples(n)?;
    check_state(model, x0)?;
    let results = par::map_indexed(n as usize, |r| -> Result<f64> {
        let mut stream = NoiseStream::substream(seed, r as u64);
        let panel = draw_panel(model, t, &mut stream);
        Ok(f.eval(&walk_chain(model, x0, &panel)?))
    });
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for r in results {
        let y = r?;
        sum += y;
        sumsq += y * y;
    }
    let nf = n as f64;
    let mean = sum / nf;
    let var = (sumsq / nf - mean * mean).max(0.0) * nf / (nf - 1.0);
    Ok(EstimatorResult { value: mean, std_error: (var / nf).sqrt(), samples: n, seed })
}

/// Pathwise Monte Carlo estimate of the gradient semigroup applied to
/// `grad f`: the componentwise mean of `S(t)^T grad f(X(t))`, which equals
/// the gradient of `P^t f` at `x0` for smooth models.
pub fn estimate_qt_grad(
    model: &dyn StateSpaceModel,
    f: &TestFunction,
    x0: &DVector<f64>,
    t: usize,
    n: u64,
    seed: u64,
) -> Result<EstimatorResult<DVector<f64>>> {
    check_samples(n)?;
    check_state(model, x0)?;
    let d = model.dim_state();
    let results = par::map_indexed(n as usize, |r| -> Result<DVector<f64>> {
        let mut stream = NoiseStream::substream(seed, r as u64);
        let panel = draw_panel(model, t, &mut stream);
        let (x, s) = walk_joint(model, x0, &panel)?;
        Ok(s.transpose() * f.gradient(&x))
    });
    let mut sum: DVector<f64> = DVector::zeros(d);
    let mut sumsq: DVector<f64> = DVector::zeros(d);
    for r in results {
        let g = r?;
        for a in 0..d {
            sum[a] += g[a];
            sumsq[a] += g[a] * g[a];
        }
    }
    let nf = n as f64;
    let value = sum / nf;
    let mut std_error = DVector::zeros(d);
    for a in 0..d {
        let var: f64 = (sumsq[a] / nf - value[a] * value[a]).max(0.0) * nf / (nf - 1.0);
        std_error[a] = (var / nf).sqrt();
    }
    Ok(EstimatorResult { value, std_error, samples: n, seed })
}

/// Outcome of [`gradient_identity_check`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Mean pathwise gradient estimate.
    pub pathwise: DVector<f64>,
    /// Mean central-difference estimate at step `h`.
    pub finite_diff: DVector<f64>,
    /// Mean of the per-replication paired differences (pathwise minus
    /// finite difference).
    pub paired_diff: DVector<f64>,
    /// Standard error of the paired differences.
    pub paired_se: DVector<f64>,
    /// Per-axis acceptance tolerance.
    pub tolerance: DVector<f64>,
    /// Per-axis difference step used.
    pub step: DVector<f64>,
    /// Whether every axis passed.
    pub pass: bool,
    /// Replications used.
    pub samples: u64,
    /// Master seed.
    pub seed: u64,
}

struct GradCheckRep {
    pathwise: DVector<f64>,
    d1: DVector<f64>,
    d2: DVector<f64>,
    f_mag: DVector<f64>,
}

/// Checks the gradient identity `grad P^t f = E[S(t)^T grad f(X(t))]` by
/// comparing the pathwise estimator against central finite differences of
/// the chain driven by the same noise panels.
///
/// Each replication draws one noise panel and reuses it for the joint walk
/// and for all four shifted chain walks per axis (`x0 +- h e_a` and
/// `x0 +- 2h e_a`), so the comparison is a paired test: its tolerance is
/// three paired standard errors plus a Richardson estimate `|D(h) - D(2h)|/3`
/// of the difference bias plus a floating-point cancellation floor. `h`
/// defaults to `1e-4 (1 + |x0_a|)` per axis; an explicit step below `1e-8`
/// is rejected.
pub fn gradient_identity_check(
    model: &dyn StateSpaceModel,
    f: &TestFunction,
    x0: &DVector<f64>,
    t: usize,
    n: u64,
    seed: u64,
    h: Option<f64>,
) -> Result<GradCheckReport> {
    check_samples(n)?;
    check_state(model, x0)?;
    let d = model.dim_state();
    let step = match h {
        Some(v) => {
            if !(v >= 1e-8) || !v.is_finite() {
                return Err(ErgoError::InvalidParameter {
                    what: "difference step",
                    detail: alloc::format!("step must be finite and at least 1e-8, got {v}"),
                });
            }
            DVector::from_element(d, v)
        }
        None => DVector::from_fn(d, |a, _| 1e-4 * (1.0 + x0[a].abs())),
    };

    let step_ref = &step;
    let results = par::map_indexed(n as usize, |r| -> Result<GradCheckRep> {
        let mut stream = NoiseStream::substream(seed, r as u64);
        let panel = draw_panel(model, t, &mut stream);
        let (x, s) = walk_joint(model, x0, &panel)?;
        let pathwise = s.transpose() * f.gradient(&x);
        let mut d1 = DVector::zeros(d);
        let mut d2 = DVector::zeros(d);
        let mut f_mag = DVector::zeros(d);
        for a in 0..d {
            let ha = step_ref[a];
            let shifted = |delta: f64| -> Result<f64> {
                let mut y0 = x0.clone();
                y0[a] += delta;
                Ok(f.eval(&walk_chain(model, &y0, &panel)?))
            };
            let fp = shifted(ha)?;
            let fm = shifted(-ha)?;
            let fp2 = shifted(2.0 * ha)?;
            let fm2 = shifted(-2.0 * ha)?;
            d1[a] = (fp - fm) / (2.0 * ha);
            d2[a] = (fp2 - fm2) / (4.0 * ha);
            f_mag[a] = fp.abs() + fm.abs();
        }
        Ok(GradCheckRep { pathwise, d1, d2, f_mag })
    });

    let mut path_sum: DVector<f64> = DVector::zeros(d);
    let mut d1_sum: DVector<f64> = DVector::zeros(d);
    let mut d2_sum: DVector<f64> = DVector::zeros(d);
    let mut pd_sum: DVector<f64> = DVector::zeros(d);
    let mut pd_sq: DVector<f64> = DVector::zeros(d);
    let mut f_mag_sum: DVector<f64> = DVector::zeros(d);
    for r in results {
        let rep = r?;
        for a in 0..d {
            let pd = rep.pathwise[a] - rep.d1[a];
            path_sum[a] += rep.pathwise[a];
            d1_sum[a] += rep.d1[a];
            d2_sum[a] += rep.d2[a];
            pd_sum[a] += pd;
            pd_sq[a] += pd * pd;
            f_mag_sum[a] += rep.f_mag[a];
        }
    }
    let nf = n as f64;
    let pathwise = path_sum / nf;
    let finite_diff = d1_sum / nf;
    let paired_diff = pd_sum / nf;
    let mut paired_se = DVector::zeros(d);
    let mut tolerance = DVector::zeros(d);
    for a in 0..d {
        let mean = paired_diff[a];
        let var: f64 = (pd_sq[a] / nf - mean * mean).max(0.0) * nf / (nf - 1.0);
        paired_se[a] = (var / nf).sqrt();
        let richardson = (finite_diff[a] - d2_sum[a] / nf).abs() / 3.0;
        // Cancellation floor: the quotient (f(+h) - f(-h)) / 2h loses about
        // eps * |f| / (2h) of absolute accuracy per replication.
        let cancel = 8.0 * f64::EPSILON * (f_mag_sum[a] / nf) / (2.0 * step[a]);
        tolerance[a] = 3.0 * paired_se[a] + richardson + cancel + 1e-12;
    }
    let pass = (0..d).all(|a| paired_diff[a].abs() <= tolerance[a]);
    Ok(GradCheckReport {
        pathwise,
        finite_diff,
        paired_diff,
        paired_se,
        tolerance,
        step,
        pass,
        samples: n,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Ar1, RotCon2, Tanh1};
    use approx::assert_relative_eq;

    #[test]
    fn builtin_gradients_pass_their_own_check() {
        let mut stream = NoiseStream::master(5);
        let probes: Vec<DVector<f64>> =
            (0..20).map(|_| DVector::from_fn(2, |_, _| 3.0 * stream.uniform_sym())).collect();
        for f in [TestFunction::linear(), TestFunction::square(), TestFunction::tanh_sum()] {
            f.check_gradient(&probes).unwrap();
        }
        let wrong = TestFunction::custom(
            "wrong",
            |x: &DVector<f64>| x.norm_squared(),
            |x: &DVector<f64>| x * 3.0,
            Growth::Quadratic,
        );
        assert!(wrong.check_gradient(&probes).is_err());
    }

    #[test]
    fn builtins_reduce_to_the_scalar_observables_in_one_dimension() {
        let x = DVector::from_element(1, 0.7);
        assert_relative_eq!(TestFunction::linear().eval(&x), 0.7);
        assert_relative_eq!(TestFunction::square().eval(&x), 0.49);
        assert_relative_eq!(TestFunction::tanh_sum().eval(&x), 0.7f64.tanh());
        assert_relative_eq!(TestFunction::constant(2.5).eval(&x), 2.5);
    }

    #[test]
    fn mean_estimates_match_linear_model_closed_forms() {
        let model = Ar1::new(0.5, 1.0).unwrap();
        let x0 = DVector::from_element(1, 2.0);
        let t = 3;
        let est = estimate_ptf(&model, &TestFunction::linear(), &x0, t, 40_000, 17).unwrap();
        let expect = 0.5f64.powi(3) * 2.0;
        assert!(
            (est.value - expect).abs() < 4.0 * est.std_error,
            "{} vs {expect} (se {})",
            est.value,
            est.std_error
        );

        let est2 = estimate_ptf(&model, &TestFunction::square(), &x0, t, 40_000, 18).unwrap();
        let r2 = 0.25f64.powi(3);
        let expect2 = r2 * 4.0 + (4.0 / 3.0) * (1.0 - r2);
        assert!((est2.value - expect2).abs() < 4.0 * est2.std_error);
    }

    #[test]
    fn pathwise_gradient_is_deterministic_for_the_linear_model() {
        let model = Ar1::new(0.5, 1.0).unwrap();
        let x0 = DVector::from_element(1, 2.0);
        let est =
            estimate_qt_grad(&model, &TestFunction::linear(), &x0, 3, 100, 23).unwrap();
        assert_eq!(est.value[0], 0.125);
        assert_eq!(est.std_error[0], 0.0);
    }

    #[test]
    fn estimates_replay_bit_identically() {
        let model = Tanh1::new(0.9, 0.4).unwrap();
        let x0 = DVector::from_element(1, 0.5);
        let a = estimate_ptf(&model, &TestFunction::tanh_sum(), &x0, 4, 5000, 3).unwrap();
        let b = estimate_ptf(&model, &TestFunction::tanh_sum(), &x0, 4, 5000, 3).unwrap();
        assert_eq!(a.value.to_bits(), b.value.to_bits());
        let g1 = estimate_qt_grad(&model, &TestFunction::square(), &x0, 4, 5000, 3).unwrap();
        let g2 = estimate_qt_grad(&model, &TestFunction::square(), &x0, 4, 5000, 3).unwrap();
        assert_eq!(g1.value[0].to_bits(), g2.value[0].to_bits());
    }

    #[test]
    fn gradient_identity_holds_on_the_smooth_nonlinear_model() {
        let model = Tanh1::new(0.9, 0.4).unwrap();
        let x0 = DVector::from_element(1, 0.5);
        let rep = gradient_identity_check(
            &model,
            &TestFunction::tanh_sum(),
            &x0,
            3,
            20_000,
            41,
            None,
        )
        .unwrap();
        assert!(rep.pass, "paired diff {:?} vs tol {:?}", rep.paired_diff, rep.tolerance);
        assert!(rep.paired_diff.amax() < 1e-6);
        // The two estimators agree closely in absolute terms as well.
        assert!((rep.pathwise[0] - rep.finite_diff[0]).abs() < 1e-6);
    }

    #[test]
    fn gradient_identity_holds_in_two_dimensions() {
        let model = RotCon2::new(0.9, 0.7, 0.5).unwrap();
        let x0 = DVector::from_row_slice(&[1.0, -0.5]);
        let rep = gradient_identity_check(
            &model,
            &TestFunction::square(),
            &x0,
            2,
            10_000,
            43,
            None,
        )
        .unwrap();
        assert!(rep.pass, "paired diff {:?} vs tol {:?}", rep.paired_diff, rep.tolerance);
    }

    #[test]
    fn paired_differences_vanish_when_differences_are_exact() {
        // For a linear chain map and a quadratic observable the central
        // difference has no bias, so the paired differences are pure
        // floating-point cancellation noise.
        let model = Ar1::new(0.5, 1.0).unwrap();
        let x0 = DVector::from_element(1, 1.0);
        let rep = gradient_identity_check(
            &model,
            &TestFunction::square(),
            &x0,
            2,
            2000,
            7,
            None,
        )
        .unwrap();
        assert!(rep.pass);
        assert!(rep.paired_diff.amax() < 1e-9, "{:?}", rep.paired_diff);
    }

    #[test]
    fn wrong_analytic_gradient_is_flagged() {
        // f = |x|^2 with a deliberately wrong gradient 3x: the pathwise
        // estimator is consistently off by 50%.
        let model = Ar1::new(0.5, 1.0).unwrap();
        let wrong = TestFunction::custom(
            "wrong",
            |x: &DVector<f64>| x.norm_squared(),
            |x: &DVector<f64>| x * 3.0,
            Growth::Quadratic,
        );
        let x0 = DVector::from_element(1, 1.0);
        let rep = gradient_identity_check(&model, &wrong, &x0, 2, 2000, 7, None).unwrap();
        assert!(!rep.pass);
    }

    #[test]
    fn bad_steps_and_sizes_are_rejected() {
        let model = Ar1::new(0.5, 1.0).unwrap();
        let x0 = DVector::from_element(1, 1.0);
        let f = TestFunction::linear();
        assert!(matches!(
            gradient_identity_check(&model, &f, &x0, 2, 100, 1, Some(1e-9)),
            Err(ErgoError::InvalidParameter { what: "difference step", .. })
        ));
        assert!(matches!(
            estimate_ptf(&model, &f, &x0, 2, 1, 1),
            Err(ErgoError::TooFewPoints { .. })
        ));
        let bad_x = DVector::from_row_slice(&[1.0, 2.0]);
        assert!(matches!(
            estimate_ptf(&model, &f, &bad_x, 2, 100, 1),
            Err(ErgoError::DimensionMismatch { .. })
        ));
    }
}
