//! Acceptance gate: twelve end-to-end checks of the toolkit against closed
//! forms and structural properties, one printed verdict line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so every line is always
//! visible in `cargo test` output; exits nonzero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Instant;

use ergokit::drift::{dv3_check, nonlinear_generator, nonlinear_generator_mc, DV3Spec};
use ergokit::kernelgrid::{
    center_kernel, discretize, discretize_with, smooth_cutoff, spectrum_and_radius,
    truncation_error, Grid, GridKernel, GridSpec,
};
use ergokit::model::{Ar1, RotCon2, StateSpaceModel, Tanh1};
use ergokit::norms::{decay_rate_fit, sobolev_norm_v1, v_norm, GridFunction, WeightFunction};
use ergokit::semigroup::{gradient_identity_check, TestFunction};
use ergokit::simulate::{
    contraction_diagnostic, lyapunov_exponent, mean_exponent, simulate_path,
};
use ergokit::valuefn::{
    clt_variance, discounted_gradient, discounted_solve, poisson_solve, SolveMode,
};
use ergokit::DVector;

type Verdict = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !($cond) {
            return Err(format!($($msg)+));
        }
    };
}

fn er<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn ar1() -> Ar1 {
    Ar1::new(0.5, 1.0).unwrap()
}

fn ar1_kernel(m: usize) -> GridKernel {
    let model: Arc<dyn StateSpaceModel> = Arc::new(ar1());
    let mut k = discretize(&model, &GridSpec::line(-8.0, 8.0, m), true).unwrap();
    k.set_weight(&WeightFunction::quadratic(0.1).unwrap());
    k
}

fn scalar(x: f64) -> DVector<f64> {
    DVector::from_element(1, x)
}

/// Sensitivity process on the linear-Gaussian model: S(t) must equal the
/// autoregression coefficient to the power t, exactly up to rounding.
fn c01_sensitivity() -> Verdict {
    let model = ar1();
    let bundle = simulate_path(&model, &scalar(1.0), 50, 42).map_err(er)?;
    ensure!(bundle.sens.len() == 51, "expected 51 sensitivity matrices");
    for (t, s) in bundle.sens.iter().enumerate() {
        let exact = 0.5f64.powi(t as i32);
        let got = s[(0, 0)];
        ensure!(
            (got - exact).abs() <= 1e-12,
            "S({t}) = {got}, expected {exact} (error {:e})",
            (got - exact).abs()
        );
    }
    Ok(())
}

/// Pathwise gradient of the t-step expectation agrees with common-random-
/// number finite differences on every model x observable x horizon combo.
fn c02_gradient_identity() -> Verdict {
    let models: Vec<(Arc<dyn StateSpaceModel>, DVector<f64>)> = vec![
        (Arc::new(ar1()), scalar(0.3)),
        (Arc::new(Tanh1::new(0.5, 1.0).unwrap()), scalar(0.3)),
        (Arc::new(RotCon2::new(0.5, 0.5, 1.0).unwrap()), DVector::from_vec(vec![0.3, -0.2])),
    ];
    let observables = [TestFunction::linear(), TestFunction::square(), TestFunction::tanh_sum()];
    let mut combo = 0u64;
    for (model, x0) in &models {
        for f in &observables {
            for t in [1usize, 2, 5] {
                combo += 1;
                let report =
                    gradient_identity_check(model.as_ref(), f, x0, t, 100_000, 1000 + combo, None)
                        .map_err(er)?;
                ensure!(
                    report.pass,
                    "{} / {} / t={t}: pathwise {:?} vs fd {:?}, paired diff {:?} > tol {:?}",
                    model.name(),
                    f.name(),
                    report.pathwise.as_slice(),
                    report.finite_diff.as_slice(),
                    report.paired_diff.as_slice(),
                    report.tolerance.as_slice()
                );
            }
        }
    }
    ensure!(combo == 27, "expected 27 combinations, ran {combo}");
    Ok(())
}

/// Poisson equation on the discretized kernel reproduces hand-derived
/// solutions, solves to a tiny residual, and is centered to mean zero.
fn c03_poisson() -> Verdict {
    let k = ar1_kernel(401);
    let at_one = |h: &DVector<f64>| h[k.grid().nearest_index(&scalar(1.0))];

    let lin = poisson_solve(&k, &TestFunction::linear(), SolveMode::Auto).map_err(er)?;
    let h1 = at_one(&lin.h);
    ensure!((h1 - 2.0).abs() <= 1e-4, "linear cost: h(1) = {h1}, expected 2.0");
    ensure!(
        lin.residual_vnorm <= 1e-6,
        "linear cost: residual {:.3e} > 1e-6",
        lin.residual_vnorm
    );
    let mean = k.stationary_mean(&lin.h).map_err(er)?;
    ensure!(mean.abs() <= 1e-8, "linear cost: stationary mean of h is {mean:.3e}");

    let quad = poisson_solve(&k, &TestFunction::square(), SolveMode::Auto).map_err(er)?;
    let h1q = at_one(&quad.h);
    ensure!(
        (h1q - (-4.0 / 9.0)).abs() <= 1e-3,
        "quadratic cost: h(1) = {h1q}, expected -0.4444"
    );
    ensure!(
        quad.residual_vnorm <= 1e-6,
        "quadratic cost: residual {:.3e} > 1e-6",
        quad.residual_vnorm
    );
    let meanq = k.stationary_mean(&quad.h).map_err(er)?;
    ensure!(meanq.abs() <= 1e-8, "quadratic cost: stationary mean of h is {meanq:.3e}");
    Ok(())
}

/// Discounted value function matches the resolvent closed form, and the
/// pathwise gradient series reproduces it with literally zero variance.
fn c04_discounted() -> Verdict {
    let k = ar1_kernel(401);
    let sol = discounted_solve(&k, &TestFunction::linear(), 0.9, SolveMode::Auto).map_err(er)?;
    let h1 = sol.h[k.grid().nearest_index(&scalar(1.0))];
    let exact = 1.0 / 0.55;
    ensure!((h1 - exact).abs() <= 1e-4, "h_alpha(1) = {h1}, expected {exact}");
    ensure!(sol.residual_vnorm <= 1e-6, "residual {:.3e} > 1e-6", sol.residual_vnorm);

    let model = ar1();
    let series = discounted_gradient(
        &model,
        &TestFunction::linear(),
        0.9,
        &scalar(1.0),
        200,
        1e-12,
        64,
        7,
    )
    .map_err(er)?;
    let grad = series.estimate.value[0];
    let se = series.estimate.std_error[0];
    ensure!(
        (grad - exact).abs() <= 1e-10,
        "gradient series gave {grad}, expected {exact} (error {:e})",
        (grad - exact).abs()
    );
    ensure!(se == 0.0, "gradient series variance must vanish on a linear model, got se {se:e}");
    Ok(())
}

/// Leading kernel eigenvalues match the known geometric ladder, are stable
/// under grid refinement, and the power-norm growth estimate agrees with
/// the centered spectral radius.
fn c05_spectrum() -> Verdict {
    let v = WeightFunction::quadratic(0.1).map_err(er)?;
    let expected = [1.0, 0.5, 0.25, 0.125];

    let mut moduli = Vec::new();
    for m in [201usize, 401] {
        let k = ar1_kernel(m);
        let report = spectrum_and_radius(&k, Some(&v), 4).map_err(er)?;
        let mods: Vec<f64> =
            report.eigenvalues.iter().map(|z| (z.re * z.re + z.im * z.im).sqrt()).collect();
        for (i, want) in expected.iter().enumerate() {
            ensure!(
                (mods[i] - want).abs() <= 1e-3,
                "M={m}: eigenvalue {i} is {}, expected {want}",
                mods[i]
            );
        }
        moduli.push(mods);
    }
    for i in 0..4 {
        let drift = (moduli[0][i] - moduli[1][i]).abs();
        ensure!(drift <= 2e-3, "eigenvalue {i} moved {drift:.2e} between M=201 and M=401");
    }

    let centered = center_kernel(&ar1_kernel(401)).map_err(er)?;
    let report = spectrum_and_radius(&centered, Some(&v), 1).map_err(er)?;
    ensure!(
        (report.spectral_radius - 0.5).abs() <= 1e-3,
        "centered spectral radius {}, expected 0.5",
        report.spectral_radius
    );
    let rel = (report.xi_v - report.spectral_radius).abs() / report.spectral_radius;
    ensure!(
        rel <= 0.02,
        "power-norm estimate {} is {:.1}% off the spectral radius {}",
        report.xi_v,
        100.0 * rel,
        report.spectral_radius
    );
    Ok(())
}

/// Iterating the centered kernel on the identity observable decays
/// geometrically at the second-eigenvalue rate, in the weighted sup norm
/// and in the first-order weighted norm.
fn c06_decay() -> Verdict {
    let v = WeightFunction::quadratic(0.1).map_err(er)?;
    let k = center_kernel(&ar1_kernel(401)).map_err(er)?;
    let grid = k.grid().clone();
    let mut f = DVector::from_fn(grid.len(), |i, _| grid.node(i)[0]);

    let mut vnorms = Vec::new();
    let mut v1norms = Vec::new();
    for t in 0..=30usize {
        let gf = GridFunction::new(grid.clone(), f.clone())
            .map_err(er)?
            .with_grid_derivs()
            .map_err(er)?;
        vnorms.push((t as f64, v_norm(&gf, &v).map_err(er)?));
        v1norms.push((t as f64, sobolev_norm_v1(&gf, &v).map_err(er)?));
        f = k.apply(&f);
    }

    let fit = decay_rate_fit(&vnorms).map_err(er)?;
    ensure!(
        (fit.rho0 - 0.5).abs() <= 0.025,
        "sup-norm decay rate {} outside 0.5 +- 0.025",
        fit.rho0
    );
    ensure!(fit.r_squared > 0.99, "sup-norm fit R^2 = {}", fit.r_squared);

    let fit1 = decay_rate_fit(&v1norms).map_err(er)?;
    ensure!(
        (fit1.rho0 - 0.5).abs() <= 0.05,
        "first-order-norm decay rate {} outside 0.5 +- 0.05",
        fit1.rho0
    );
    Ok(())
}

/// The log-moment generator matches its Gaussian closed form pointwise, and
/// the drift verifier reports the hand-computed minimal offset and ball,
/// including under a halved tilt.
fn c07_drift() -> Verdict {
    let model = ar1();
    let big_v = |x: &DVector<f64>| 0.1 * x[0] * x[0];
    let offset = -0.5 * 0.8f64.ln();
    for i in 0..=120 {
        let x = -6.0 + 0.1 * i as f64;
        let got = nonlinear_generator(&model, &big_v, &scalar(x)).map_err(er)?;
        let exact = -0.068_75 * x * x + offset;
        ensure!(
            (got - exact).abs() <= 1e-6,
            "generator at x={x}: {got} vs closed form {exact} (error {:e})",
            (got - exact).abs()
        );
    }

    let spec = DV3Spec {
        v: WeightFunction::quadratic(0.1).map_err(er)?,
        w: Arc::new(|x: &DVector<f64>| 1.0 + x[0] * x[0]),
        delta: 0.05,
        b: 0.2,
        c_radius: 3.0,
    };
    let grid = Grid::from_spec(&GridSpec::line(-6.0, 6.0, 241)).map_err(er)?;
    let report = dv3_check(&model, &spec, &grid, &[1.0, 0.5]).map_err(er)?;
    let full = &report.etas[0];
    ensure!(full.pass, "full-tilt drift inequality failed: {:?}", full);
    ensure!(
        (full.min_c_radius - 2.94).abs() <= 0.02,
        "minimal ball radius {} outside 2.94 +- 0.02",
        full.min_c_radius
    );
    ensure!(
        (full.min_b - 0.162).abs() <= 2e-3,
        "minimal offset {} outside 0.162 +- 0.002",
        full.min_b
    );
    ensure!(
        (full.b_at_min_radius - 0.162).abs() <= 2e-3,
        "offset at the minimal ball {} outside 0.162 +- 0.002",
        full.b_at_min_radius
    );
    let half = &report.etas[1];
    ensure!(half.pass, "half-tilt drift inequality failed: {:?}", half);
    Ok(())
}

/// Polynomial smoothing: exact sup error on the square function, strictly
/// shrinking value and gradient errors on a sine as the degree doubles, and
/// affine functions reproduced to rounding error.
fn c08_bernstein() -> Verdict {
    let (val, _) = ergokit::bernstein::uniform_errors(
        |z: &[f64]| z[0] * z[0],
        |z: &[f64]| vec![2.0 * z[0]],
        &[0.0],
        &[1.0],
        10,
        10_000,
    )
    .map_err(er)?;
    ensure!(
        (val - 0.025).abs() <= 1e-9,
        "square-function sup error {val}, expected 0.025 (error {:e})",
        (val - 0.025).abs()
    );

    let pi = std::f64::consts::PI;
    let mut prev: Option<(f64, f64)> = None;
    for m in [8usize, 16, 32, 64] {
        let errs = ergokit::bernstein::uniform_errors(
            |z: &[f64]| (pi * z[0]).sin(),
            |z: &[f64]| vec![pi * (pi * z[0]).cos()],
            &[0.0],
            &[1.0],
            m,
            10_000,
        )
        .map_err(er)?;
        if let Some((pv, pg)) = prev {
            ensure!(
                errs.0 < pv && errs.1 < pg,
                "errors did not both shrink at degree {m}: value {pv} -> {}, gradient {pg} -> {}",
                errs.0,
                errs.1
            );
        }
        prev = Some(errs);
    }

    let (aval, agrad) = ergokit::bernstein::uniform_errors(
        |z: &[f64]| 1.5 - 2.0 * z[0],
        |_z: &[f64]| vec![-2.0],
        &[0.0],
        &[1.0],
        6,
        2_000,
    )
    .map_err(er)?;
    ensure!(
        aval <= 1e-12 && agrad <= 1e-12,
        "affine function not reproduced exactly: value error {aval:e}, gradient error {agrad:e}"
    );
    Ok(())
}

/// Two-sided kernel truncation: the first-order operator error strictly
/// shrinks as the cutoff level grows and vanishes once the cutoff plateau
/// covers the whole grid; the cutoff profile respects its slope bound.
fn c09_truncation() -> Verdict {
    let model: Arc<dyn StateSpaceModel> = Arc::new(ar1());
    let mut k = discretize_with(&model, &GridSpec::line(-6.0, 6.0, 241), true, 1e-6).map_err(er)?;
    let v = WeightFunction::quadratic(0.1).map_err(er)?;
    k.set_weight(&v);

    let mut errs = Vec::new();
    for n in 2..=6usize {
        errs.push(truncation_error(&k, n, n, &v).1);
    }
    for (i, w) in errs.windows(2).enumerate() {
        ensure!(
            w[1] < w[0],
            "first-order truncation error rose from level {} to {}: {:?}",
            i + 2,
            i + 3,
            errs
        );
    }
    ensure!(
        errs[4] < 1e-6,
        "error at level 6 is {:.3e}, expected below 1e-6 once the cutoff covers the grid",
        errs[4]
    );

    let chi = smooth_cutoff(3);
    let span = 5.0; // profile varies only on [3, 4]; probe well past it
    let mut worst: f64 = 0.0;
    for i in 0..10_000 {
        let r = -span + 2.0 * span * (i as f64) / 9_999.0;
        worst = worst.max(chi.profile_deriv(r).abs());
    }
    ensure!(worst <= 2.0, "cutoff slope reached {worst}, bound is 2");
    Ok(())
}

/// Top Lyapunov exponent and the order-2 mean growth exponent agree with
/// their linear-model values to near machine precision.
fn c10_lyapunov() -> Verdict {
    let log_half = 0.5f64.ln();
    let top = lyapunov_exponent(&ar1(), &scalar(1.0), 50, 8, 5).map_err(er)?;
    ensure!(
        (top.value - log_half).abs() <= 1e-10,
        "scalar model exponent {} vs {log_half}",
        top.value
    );

    let rot = RotCon2::new(0.5, 0.5, 1.0).map_err(er)?;
    let top2 =
        lyapunov_exponent(&rot, &DVector::from_vec(vec![1.0, 0.0]), 50, 8, 5).map_err(er)?;
    ensure!(
        (top2.value - log_half).abs() <= 1e-10,
        "rotation model exponent {} vs {log_half}",
        top2.value
    );

    let mean2 = mean_exponent(&ar1(), &scalar(1.0), 50, 2.0, 8, 5).map_err(er)?;
    ensure!(
        (mean2.value - 2.0 * log_half).abs() <= 1e-10,
        "order-2 mean exponent {} vs {}",
        mean2.value,
        2.0 * log_half
    );
    Ok(())
}

/// Long-run variance of the identity observable under the discretized
/// kernel matches the closed form.
fn c11_clt_variance() -> Verdict {
    let k = ar1_kernel(401);
    let sol = poisson_solve(&k, &TestFunction::linear(), SolveMode::Auto).map_err(er)?;
    let sigma2 = clt_variance(&k, &sol).map_err(er)?;
    ensure!((sigma2 - 4.0).abs() <= 0.01, "long-run variance {sigma2}, expected 4.0");
    Ok(())
}

/// Every stochastic estimate above is bit-identical when rerun with the
/// same seed, whether the worker pool has one thread or four.
fn c12_determinism() -> Verdict {
    fn stochastic_suite() -> Result<Vec<u64>, String> {
        let mut bits = Vec::new();
        let mut push_all = |v: &[f64]| bits.extend(v.iter().map(|x| x.to_bits()));

        let tanh = Tanh1::new(0.5, 1.0).map_err(er)?;
        let rot = RotCon2::new(0.5, 0.5, 1.0).map_err(er)?;

        let g1 = gradient_identity_check(
            &tanh,
            &TestFunction::square(),
            &scalar(0.3),
            2,
            20_000,
            11,
            None,
        )
        .map_err(er)?;
        push_all(g1.pathwise.as_slice());
        push_all(g1.finite_diff.as_slice());
        push_all(g1.paired_se.as_slice());

        let g2 = gradient_identity_check(
            &rot,
            &TestFunction::tanh_sum(),
            &DVector::from_vec(vec![0.3, -0.2]),
            3,
            10_000,
            12,
            None,
        )
        .map_err(er)?;
        push_all(g2.pathwise.as_slice());
        push_all(g2.finite_diff.as_slice());

        let ly = lyapunov_exponent(&tanh, &scalar(0.5), 40, 16, 13).map_err(er)?;
        push_all(&[ly.value, ly.std_error]);

        let starts = [scalar(-2.0), scalar(0.0), scalar(2.0)];
        let con = contraction_diagnostic(&tanh, &starts, 30, 8, 14).map_err(er)?;
        for row in &con.rows {
            push_all(&[row.value, row.std_error]);
        }
        push_all(&[con.worst]);

        let gs = discounted_gradient(
            &tanh,
            &TestFunction::linear(),
            0.9,
            &scalar(0.5),
            200,
            1e-6,
            5_000,
            15,
        )
        .map_err(er)?;
        push_all(gs.estimate.value.as_slice());
        push_all(gs.estimate.std_error.as_slice());

        let gen = nonlinear_generator_mc(
            &tanh,
            &|x: &DVector<f64>| 0.1 * x[0] * x[0],
            &scalar(1.0),
            20_000,
            16,
        )
        .map_err(er)?;
        push_all(&[gen.value, gen.std_error]);
        Ok(bits)
    }

    let pool = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| e.to_string())
    };
    let one = pool(1)?.install(stochastic_suite)?;
    let four_pool = pool(4)?;
    let four = four_pool.install(stochastic_suite)?;
    let again = four_pool.install(stochastic_suite)?;

    ensure!(!one.is_empty(), "determinism suite produced no numbers");
    ensure!(
        four == again,
        "same seed, same pool: reruns disagreed ({} of {} words differ)",
        four.iter().zip(&again).filter(|(a, b)| a != b).count(),
        four.len()
    );
    ensure!(
        one == four,
        "1-thread and 4-thread pools disagreed ({} of {} words differ)",
        one.iter().zip(&four).filter(|(a, b)| a != b).count(),
        one.len()
    );
    Ok(())
}

fn main() {
    let criteria: Vec<(&str, fn() -> Verdict)> = vec![
        ("01 pathwise sensitivity matches the closed form", c01_sensitivity),
        ("02 gradient identity across models, observables, horizons", c02_gradient_identity),
        ("03 Poisson equation closed forms", c03_poisson),
        ("04 discounted value and zero-variance gradient series", c04_discounted),
        ("05 kernel spectrum, grid stability, growth-rate estimate", c05_spectrum),
        ("06 geometric decay rate fit", c06_decay),
        ("07 drift generator closed form and repair margins", c07_drift),
        ("08 polynomial approximation error bounds", c08_bernstein),
        ("09 truncation error decay and cutoff slope", c09_truncation),
        ("10 Lyapunov exponents", c10_lyapunov),
        ("11 long-run variance", c11_clt_variance),
        ("12 determinism across worker counts", c12_determinism),
    ];

    println!("acceptance: {} criteria", criteria.len());
    let mut passed = 0usize;
    for (name, run) in &criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panicked".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(()) => {
                passed += 1;
                println!("  {name} ... PASS ({secs:.2} s)");
            }
            Err(msg) => {
                println!("  {name} ... FAIL ({secs:.2} s)");
                println!("      {msg}");
            }
        }
    }
    println!("acceptance: {passed}/{} passed", criteria.len());
    if passed != criteria.len() {
        std::process::exit(1);
    }
}
