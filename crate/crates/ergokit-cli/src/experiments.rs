//! The experiment runners: each resolves its inputs (recording defaults
//! into the effective config), calls into the toolkit, and packages a
//! [`Report`].

use std::sync::Arc;

use serde_json::Value;

use ergokit::drift::{self, DV3Spec};
use ergokit::kernelgrid::{self, Grid, GridKernel};
use ergokit::norms::{self, GridFunction};
use ergokit::semigroup;
use ergokit::simulate;
use ergokit::valuefn::{self, SolveMethod};
use ergokit::DVector;

use crate::config::{self, ExperimentConfig, Resolved};
use crate::report::{num, point, Body, Format, Report};
use crate::CliError;

/// Dispatches an experiment by name.
pub fn run(experiment: &str, cfg: ExperimentConfig) -> Result<Report, CliError> {
    let mut r = Resolved::new(cfg);
    r.cfg.experiment = Some(experiment.to_string());
    match experiment {
        "gradcheck" => gradcheck(r),
        "poisson" => value_solve(r, Equation::Poisson),
        "discounted" => value_solve(r, Equation::Discounted),
        "decay" => decay(r),
        "spectrum" => spectrum(r),
        "drift" => drift_check(r),
        "lyapunov" => lyapunov(r),
        "contraction" => contraction(r),
        "bernstein" => bernstein(r),
        "truncation" => truncation(r),
        other => Err(CliError::msg(format!(
            "unknown experiment {other:?}; expected one of gradcheck, poisson, discounted, decay, spectrum, drift, lyapunov, contraction, bernstein, truncation"
        ))),
    }
}

/// A vector as a JSON value: scalar in one dimension, array otherwise.
fn vec_value(v: &DVector<f64>) -> Value {
    if v.len() == 1 {
        num(v[0])
    } else {
        Value::Array(v.iter().map(|&c| num(c)).collect())
    }
}

fn node_coords(grid: &Grid, i: usize) -> Vec<f64> {
    grid.node(i).iter().cloned().collect()
}

fn gradcheck(mut r: Resolved) -> Result<Report, CliError> {
    let model = r.model()?;
    let dim = model.dim_state();
    let f = r.observable("x2", dim)?;
    let x = r.point(dim)?;
    let t = *r.params().t.get_or_insert(2);
    let n = r.mc_n(100_000);
    let step = r.params().step;
    let seed = r.seed_required("gradcheck")?;
    let rep = semigroup::gradient_identity_check(model.as_ref(), &f, &x, t, n, seed, step)?;
    let pass = rep.pass;
    let body = Body::Object(vec![
        ("estimate_pathwise", vec_value(&rep.pathwise)),
        ("estimate_fd", vec_value(&rep.finite_diff)),
        ("paired_diff", vec_value(&rep.paired_diff)),
        ("pooled_se", vec_value(&rep.paired_se)),
        ("tolerance", vec_value(&rep.tolerance)),
        ("step", vec_value(&rep.step)),
        ("samples", Value::from(rep.samples)),
        ("seed", Value::from(rep.seed)),
        ("pass", Value::Bool(pass)),
    ]);
    Ok(Report { config: r.cfg, body, pass, natural: Format::Json })
}

enum Equation {
    Poisson,
    Discounted,
}

fn value_solve(mut r: Resolved, eq: Equation) -> Result<Report, CliError> {
    let model = r.model()?;
    let k = r.kernel(&model, -8.0, 8.0, 401)?;
    let cost_name = r.params().cost.get_or_insert_with(|| "x".to_string()).clone();
    let c = config::build_cost(&cost_name, &k)?;
    let mode = r.solve_mode()?;
    let residual_tol = *r.tolerances().residual.get_or_insert(1e-6);

    let (sol, alpha) = match eq {
        Equation::Poisson => (valuefn::poisson_solve(&k, &c, mode)?, None),
        Equation::Discounted => {
            let a = *r.params().alpha.get_or_insert(0.9);
            (valuefn::discounted_solve(&k, &c, a, mode)?, Some(a))
        }
    };

    let n = k.grid().len();
    let c_vals = DVector::from_fn(n, |i, _| c.eval(k.grid().node(i)));
    let mh = k.apply(&sol.h);
    let residual: DVector<f64> = match eq {
        Equation::Poisson => {
            let cb = sol.mean_cost.unwrap_or(0.0);
            DVector::from_fn(n, |i, _| sol.h[i] - mh[i] - (c_vals[i] - cb))
        }
        Equation::Discounted => {
            let a = alpha.unwrap();
            DVector::from_fn(n, |i, _| sol.h[i] - a * mh[i] - c_vals[i])
        }
    };

    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        rows.push(vec![point(&node_coords(k.grid(), i)), num(sol.h[i]), num(residual[i])]);
    }
    let mut footer: Vec<(&'static str, Value)> = Vec::new();
    if let Some(cb) = sol.mean_cost {
        footer.push(("mean_cost", num(cb)));
    }
    if let Some(a) = alpha {
        footer.push(("alpha", num(a)));
    }
    footer.push(("residual_vnorm", num(sol.residual_vnorm)));
    footer.push((
        "method",
        Value::String(match sol.method {
            SolveMethod::LinearSolve => "direct".to_string(),
            SolveMethod::Series { terms } => format!("series:{terms}"),
        }),
    ));
    let pass = sol.residual_vnorm <= residual_tol;
    let body = Body::Table { columns: vec!["node", "h", "residual"], rows, footer };
    Ok(Report { config: r.cfg, body, pass, natural: Format::Csv })
}

fn decay(mut r: Resolved) -> Result<Report, CliError> {
    let model = r.model()?;
    let k = r.kernel(&model, -8.0, 8.0, 401)?;
    let v = r.weight()?;
    let cost_name = r.params().cost.get_or_insert_with(|| "x".to_string()).clone();
    let c = config::build_cost(&cost_name, &k)?;
    let tmax = *r.params().tmax.get_or_insert(30);

    let centered = kernelgrid::center_kernel(&k)?;
    let grid = k.grid().clone();
    let n = grid.len();
    let mut f = DVector::from_fn(n, |i, _| c.eval(grid.node(i)));
    let mut rows = Vec::with_capacity(tmax + 1);
    let mut series_v = Vec::with_capacity(tmax + 1);
    let mut series_v1 = Vec::with_capacity(tmax + 1);
    for t in 0..=tmax {
        let gf = GridFunction::new(grid.clone(), f.clone())?.with_grid_derivs()?;
        let vn = norms::v_norm(&gf, &v)?;
        let v1n = norms::sobolev_norm_v1(&gf, &v)?;
        rows.push(vec![Value::from(t), num(vn), num(v1n)]);
        series_v.push((t as f64, vn));
        series_v1.push((t as f64, v1n));
        f = centered.apply(&f);
    }
    let fit_v = norms::decay_rate_fit(&series_v)?;
    let fit_v1 = norms::decay_rate_fit(&series_v1)?;
    let footer = vec![
        ("b0", num(fit_v.b0)),
        ("rho0", num(fit_v.rho0)),
        ("r_squared", num(fit_v.r_squared)),
        ("b0_v1", num(fit_v1.b0)),
        ("rho0_v1", num(fit_v1.rho0)),
        ("r_squared_v1", num(fit_v1.r_squared)),
    ];
    let body = Body::Table { columns: vec!["t", "vnorm", "v1norm"], rows, footer };
    Ok(Report { config: r.cfg, body, pass: true, natural: Format::Csv })
}

fn spectrum(mut r: Resolved) -> Result<Report, CliError> {
    let model = r.model()?;
    let k = r.kernel(&model, -8.0, 8.0, 401)?;
    let v = r.weight()?;
    let top = *r.params().top.get_or_insert(6);
    let centered = *r.params().centered.get_or_insert(false);
    let export = r.params().export_kernel.clone();

    let target: GridKernel = if centered { kernelgrid::center_kernel(&k)? } else { k };
    if let Some(path) = &export {
        let m = target.matrix();
        let mut text = String::new();
        for i in 0..m.nrows() {
            let cells: Vec<String> =
                (0..m.ncols()).map(|j| crate::report::format_value(&num(m[(i, j)]))).collect();
            text.push_str(&cells.join(","));
            text.push('\n');
        }
        std::fs::write(path, text)
            .map_err(|e| CliError::msg(format!("cannot write kernel matrix {path:?}: {e}")))?;
    }

    let rep = kernelgrid::spectrum_and_radius(&target, Some(&v), top)?;
    let mut rows = Vec::with_capacity(rep.eigenvalues.len());
    for (i, e) in rep.eigenvalues.iter().enumerate() {
        let modulus = (e.re * e.re + e.im * e.im).sqrt();
        rows.push(vec![Value::from(i), num(e.re), num(e.im), num(modulus)]);
    }
    let mut footer = vec![
        ("spectral_radius", num(rep.spectral_radius)),
        ("xi_v", num(rep.xi_v)),
    ];
    for (p, root) in &rep.power_norms {
        let key: &'static str = match p {
            8 => "power_norm_8",
            16 => "power_norm_16",
            32 => "power_norm_32",
            _ => "power_norm",
        };
        footer.push((key, num(*root)));
    }
    let body = Body::Table { columns: vec!["index", "re", "im", "modulus"], rows, footer };
    Ok(Report { config: r.cfg, body, pass: true, natural: Format::Json })
}

fn drift_check(mut r: Resolved) -> Result<Report, CliError> {
    let model = r.model()?;
    let dim = model.dim_state();
    let v = r.weight()?;

    let default_w = match dim {
        1 => "1+x^2",
        _ => "1+x1^2+x2^2",
    };
    let w_src = r.params().w.get_or_insert_with(|| default_w.to_string()).clone();
    let w_expr = crate::expr::parse(&w_src)
        .map_err(|m| CliError::msg(format!("params.w expression {w_src:?}: {m}")))?;
    if w_expr.max_var() > dim {
        return Err(CliError::msg(format!(
            "params.w reads coordinate x{} but the state has {dim}",
            w_expr.max_var()
        )));
    }

    let delta = *r.params().delta.get_or_insert(0.05);
    let b = *r.params().b.get_or_insert(0.0);
    let c_radius = *r.params().c_radius.get_or_insert(0.0);
    let etas = r.params().etas.get_or_insert_with(|| vec![1.0]).clone();

    let spec = DV3Spec {
        v,
        w: Arc::new(move |x: &DVector<f64>| w_expr.eval(x)),
        delta,
        b,
        c_radius,
    };
    let gspec = r.grid_spec(dim, -6.0, 6.0, 241)?;
    let grid = Grid::from_spec(&gspec)?;
    let rep = drift::dv3_check(model.as_ref(), &spec, &grid, &etas)?;

    let first = &rep.etas[0];
    let mut pairs: Vec<(&'static str, Value)> = vec![
        ("max_violation", num(first.max_violation)),
        ("min_b", num(first.min_b)),
        ("min_C_radius", num(first.min_c_radius)),
        ("b_at_min_radius", num(first.b_at_min_radius)),
        ("pass", Value::Bool(rep.pass)),
    ];
    if rep.etas.len() > 1 {
        let tilts: Vec<Value> = rep
            .etas
            .iter()
            .map(|e| {
                let mut m = serde_json::Map::new();
                m.insert("eta".to_string(), num(e.eta));
                m.insert("max_violation".to_string(), num(e.max_violation));
                m.insert("min_b".to_string(), num(e.min_b));
                m.insert("min_C_radius".to_string(), num(e.min_c_radius));
                m.insert("b_at_min_radius".to_string(), num(e.b_at_min_radius));
                m.insert("pass".to_string(), Value::Bool(e.pass));
                Value::Object(m)
            })
            .collect();
        pairs.push(("tilts", Value::Array(tilts)));
    }
    let pass = rep.pass;
    Ok(Report { config: r.cfg, body: Body::Object(pairs), pass, natural: Format::Json })
}

fn lyapunov(mut r: Resolved) -> Result<Report, CliError> {
    let model = r.model()?;
    let dim = model.dim_state();
    let x0 = r.point(dim)?;
    let t = *r.params().t.get_or_insert(50);
    let reps = r.mc_reps(16);
    let p = r.params().p;
    let seed = r.seed_required("lyapunov")?;
    let est = match p {
        None => simulate::lyapunov_exponent(model.as_ref(), &x0, t, reps, seed)?,
        Some(order) => simulate::mean_exponent(model.as_ref(), &x0, t, order, reps, seed)?,
    };
    let coords: Vec<f64> = x0.iter().cloned().collect();
    let rows = vec![vec![
        point(&coords),
        num(est.value),
        num(est.std_error),
        Value::from(est.horizon),
        Value::from(est.replications),
        Value::from(seed),
    ]];
    let body = Body::Table {
        columns: vec!["x0", "estimate", "std_error", "T", "reps", "seed"],
        rows,
        footer: vec![],
    };
    Ok(Report { config: r.cfg, body, pass: true, natural: Format::Csv })
}

fn contraction(mut r: Resolved) -> Result<Report, CliError> {
    let model = r.model()?;
    let dim = model.dim_state();
    let starts: Vec<Vec<f64>> = r
        .params()
        .starts
        .get_or_insert_with(|| {
            [-2.0, 0.0, 2.0].iter().map(|&c| vec![c; dim]).collect()
        })
        .clone();
    for (i, s) in starts.iter().enumerate() {
        if s.len() != dim {
            return Err(CliError::msg(format!(
                "params.starts[{i}] has {} coordinates but the model state has {dim}",
                s.len()
            )));
        }
    }
    let t = *r.params().t.get_or_insert(50);
    let reps = r.mc_reps(16);
    let seed = r.seed_required("contraction")?;
    let points: Vec<DVector<f64>> =
        starts.iter().map(|s| DVector::from_column_slice(s)).collect();
    let rep = simulate::contraction_diagnostic(model.as_ref(), &points, t, reps, seed)?;
    let mut rows = Vec::with_capacity(rep.rows.len());
    for row in &rep.rows {
        let coords: Vec<f64> = row.x0.iter().cloned().collect();
        rows.push(vec![
            point(&coords),
            num(row.value),
            num(row.std_error),
            Value::from(rep.horizon),
            Value::from(rep.replications),
            Value::from(seed),
        ]);
    }
    let body = Body::Table {
        columns: vec!["x0", "estimate", "std_error", "T", "reps", "seed"],
        rows,
        footer: vec![("worst", num(rep.worst))],
    };
    Ok(Report { config: r.cfg, body, pass: true, natural: Format::Csv })
}

fn bernstein(mut r: Resolved) -> Result<Report, CliError> {
    let fname = r.params().f.get_or_insert_with(|| "z2".to_string()).clone();
    let m = *r.params().m.get_or_insert(10);
    let lo = *r.params().lo.get_or_insert(0.0);
    let hi = *r.params().hi.get_or_insert(1.0);
    let probes = *r.params().probes.get_or_insert(10_000);

    let f = config::build_test_function(&fname, 1)?;
    let (sup_val_err, sup_grad_err) = ergokit::bernstein::uniform_errors(
        |z: &[f64]| f.eval(&DVector::from_column_slice(z)),
        |z: &[f64]| {
            let g = f.gradient(&DVector::from_column_slice(z));
            g.iter().cloned().collect()
        },
        &[lo],
        &[hi],
        m,
        probes,
    )?;
    let body = Body::Object(vec![
        ("sup_val_err", num(sup_val_err)),
        ("sup_grad_err", num(sup_grad_err)),
    ]);
    Ok(Report { config: r.cfg, body, pass: true, natural: Format::Json })
}

fn truncation(mut r: Resolved) -> Result<Report, CliError> {
    let model = r.model()?;
    let k = r.kernel(&model, -8.0, 8.0, 401)?;
    let v = r.weight()?;
    let levels = r.params().levels.get_or_insert_with(|| vec![2, 3, 4, 5, 6]).clone();
    if levels.is_empty() {
        return Err(CliError::msg("params.levels must name at least one truncation level"));
    }
    let probes = *r.params().probes.get_or_insert(10_000);

    let mut rows = Vec::with_capacity(levels.len());
    for &n in &levels {
        let (err_v, err_v1) = kernelgrid::truncation_error(&k, n, n, &v);
        rows.push(vec![Value::from(n), num(err_v), num(err_v1)]);
    }

    // Largest cutoff slope over a dense probe sweep; the profile's bound
    // is 2, attained nowhere (the cubic tops out at 1.5).
    let mut max_slope = 0.0f64;
    for &n in &levels {
        let chi = kernelgrid::smooth_cutoff(n);
        let lo = -(n as f64 + 2.0);
        let hi = n as f64 + 2.0;
        for i in 0..probes {
            let rpt = lo + (hi - lo) * i as f64 / (probes.max(2) - 1) as f64;
            max_slope = max_slope.max(chi.profile_deriv(rpt).abs());
        }
    }

    let body = Body::Table {
        columns: vec!["n", "err_v", "err_v1"],
        rows,
        footer: vec![("cutoff_max_abs_slope", num(max_slope))],
    };
    Ok(Report { config: r.cfg, body, pass: true, natural: Format::Csv })
}
