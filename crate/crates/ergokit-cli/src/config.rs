//! Experiment configuration: the JSON schema, strict loading with
//! key-path errors, and resolution of defaults into an effective config
//! that every artifact embeds for replay.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use ergokit::kernelgrid::{self, GridKernel, GridSpec};
use ergokit::model::{Ar1, RotCon2, StateSpaceModel, Tanh1};
use ergokit::norms::WeightFunction;
use ergokit::semigroup::{Growth, TestFunction};
use ergokit::valuefn::SolveMode;
use ergokit::DVector;

use crate::expr;
use crate::CliError;

/// One experiment, fully described. Every field is optional in the file;
/// defaults are filled in while the experiment resolves its inputs, and the
/// filled config is embedded in the artifact.
#[derive(Serialize, Deserialize, Clone, Debug, Default)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Experiment tag; decides the dispatch for `ergokit run`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub experiment: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelCfg>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight: Option<WeightCfg>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridCfg>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mc: Option<McCfg>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub params: Option<Params>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tolerances: Option<Tolerances>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputCfg>,
}

/// Model family and parameters.
#[derive(Serialize, Deserialize, Clone, Debug)]
#[serde(deny_unknown_fields)]
pub struct ModelCfg {
    /// One of `ar1`, `tanh1`, `rotcon2`.
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    /// Rotation angle; `rotcon2` only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
}

impl Default for ModelCfg {
    fn default() -> Self {
        ModelCfg { name: "ar1".to_string(), rho: None, sigma: None, theta: None }
    }
}

/// Weight `v = exp(eta V)`: the potential `V` as an expression, plus the
/// tilt.
#[derive(Serialize, Deserialize, Clone, Debug, Default)]
#[serde(deny_unknown_fields)]
pub struct WeightCfg {
    /// Potential expression, e.g. `"0.1*x^2"`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
}

/// Uniform tensor grid: `m` nodes per axis on `[lo, hi]`.
#[derive(Serialize, Deserialize, Clone, Debug)]
#[serde(deny_unknown_fields)]
pub struct GridCfg {
    pub lo: f64,
    pub hi: f64,
    pub m: usize,
}

impl GridCfg {
    /// Parses the flag form `lo:hi:m`, e.g. `-8:8:401`.
    pub fn parse_flag(s: &str) -> Result<GridCfg, CliError> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(CliError::msg(format!(
                "grid must look like lo:hi:m, e.g. -8:8:401, got {s:?}"
            )));
        }
        let lo: f64 = parts[0]
            .parse()
            .map_err(|_| CliError::msg(format!("bad grid lower bound {:?}", parts[0])))?;
        let hi: f64 = parts[1]
            .parse()
            .map_err(|_| CliError::msg(format!("bad grid upper bound {:?}", parts[1])))?;
        let m: usize = parts[2]
            .parse()
            .map_err(|_| CliError::msg(format!("bad grid node count {:?}", parts[2])))?;
        Ok(GridCfg { lo, hi, m })
    }
}

/// Monte Carlo budget and seed.
#[derive(Serialize, Deserialize, Clone, Debug, Default)]
#[serde(deny_unknown_fields)]
pub struct McCfg {
    /// Sample count for estimators that draw one stream of replications.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<u64>,
    /// Replication count for exponent estimators.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reps: Option<u64>,
    /// Master seed; mandatory for stochastic experiments.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Experiment-specific knobs; each experiment reads the subset it needs.
#[derive(Serialize, Deserialize, Clone, Debug, Default)]
#[serde(deny_unknown_fields)]
pub struct Params {
    /// Cost: `x`, `x2`, `tanh`, `file:<path>`, or an expression.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cost: Option<String>,
    /// Discount factor.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Solver mode: `auto`, `direct`, or `series`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    /// Horizon for gradient checks and exponent estimates.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t: Option<usize>,
    /// Maximum horizon for decay traces and series solves.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tmax: Option<usize>,
    /// Evaluation point.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x: Option<Vec<f64>>,
    /// Start points for contraction sweeps; the first entry doubles as the
    /// exponent start when only one point is needed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub starts: Option<Vec<Vec<f64>>>,
    /// Test function: `x`, `x2`, `tanh`, `z2`, or an expression.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f: Option<String>,
    /// Polynomial degree.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    /// Finite-difference step for gradient checks.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step: Option<f64>,
    /// Moment order for annealed exponents; absent means the almost-sure
    /// exponent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    /// How many leading eigenvalues to report.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top: Option<usize>,
    /// Analyze the centered kernel instead of the raw one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub centered: Option<bool>,
    /// Write the kernel matrix to this CSV path.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub export_kernel: Option<String>,
    /// Truncation levels to sweep.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<usize>>,
    /// Minorant expression for drift checks.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w: Option<String>,
    /// Drift margin.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    /// Drift offset inside the central ball.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
    /// Central ball radius.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c_radius: Option<f64>,
    /// Tilts to verify.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub etas: Option<Vec<f64>>,
    /// Fitting box lower corner (per axis) for polynomial fits.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lo: Option<f64>,
    /// Fitting box upper corner.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hi: Option<f64>,
    /// Probe count for sup-error scans.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probes: Option<usize>,
}

/// Numerical tolerances.
#[derive(Serialize, Deserialize, Clone, Debug, Default)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    /// Stopping tolerance for series solves.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub series: Option<f64>,
    /// Acceptance threshold on the weighted residual norm of value-function
    /// solves.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub residual: Option<f64>,
    /// Largest stationary-weighted boundary mass a grid may lose before
    /// discretization is refused.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub leak: Option<f64>,
}

/// Artifact destination and format.
#[derive(Serialize, Deserialize, Clone, Debug, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputCfg {
    /// File path; stdout when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    /// `csv` or `json`; each experiment has a natural default.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub format: Option<String>,
}

/// Loads and schema-validates a config file, reporting the path to the
/// offending key on failure.
pub fn load(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::msg(format!("cannot read config {}: {e}", path.display())))?;
    parse(&text).map_err(|e| CliError::msg(format!("config {}: {e}", path.display())))
}

/// Parses a config from JSON text, reporting the path to the offending key
/// on failure.
pub fn parse(text: &str) -> Result<ExperimentConfig, CliError> {
    let mut de = serde_json::Deserializer::from_str(text);
    let result: Result<ExperimentConfig, _> = serde_path_to_error::deserialize(&mut de);
    match result {
        Ok(cfg) => Ok(cfg),
        Err(e) => {
            let path = e.path().to_string();
            let inner = e.inner();
            if path == "." {
                Err(CliError::msg(format!("schema error: {inner}")))
            } else {
                Err(CliError::msg(format!("schema error at {path}: {inner}")))
            }
        }
    }
}

/// Wraps a config while an experiment resolves it: every accessor fills in
/// the default it used, so `cfg` ends up as the complete effective config
/// to embed in the artifact.
pub struct Resolved {
    pub cfg: ExperimentConfig,
}

impl Resolved {
    pub fn new(cfg: ExperimentConfig) -> Self {
        Resolved { cfg }
    }

    /// Builds the model, filling family defaults.
    pub fn model(&mut self) -> Result<Arc<dyn StateSpaceModel>, CliError> {
        let m = self.cfg.model.get_or_insert_with(ModelCfg::default);
        let rho = *m.rho.get_or_insert(0.5);
        let sigma = *m.sigma.get_or_insert(1.0);
        let built: Arc<dyn StateSpaceModel> = match m.name.as_str() {
            "ar1" => Arc::new(Ar1::new(rho, sigma)?),
            "tanh1" => Arc::new(Tanh1::new(rho, sigma)?),
            "rotcon2" => {
                let theta = *m.theta.get_or_insert(0.5);
                Arc::new(RotCon2::new(rho, theta, sigma)?)
            }
            other => {
                return Err(CliError::msg(format!(
                    "unknown model {other:?}; expected ar1, tanh1, or rotcon2"
                )))
            }
        };
        if m.name != "rotcon2" {
            m.theta = None;
        }
        Ok(built)
    }

    /// Grid spec for a model of dimension `dim`, filling `(lo, hi, m)`
    /// defaults.
    pub fn grid_spec(&mut self, dim: usize, lo: f64, hi: f64, m: usize) -> Result<GridSpec, CliError> {
        let g = self.cfg.grid.get_or_insert(GridCfg { lo, hi, m });
        match dim {
            1 => Ok(GridSpec::line(g.lo, g.hi, g.m)),
            2 => Ok(GridSpec::square(g.lo, g.hi, g.m)),
            d => Err(CliError::msg(format!("grids support 1 or 2 dimensions, model has {d}"))),
        }
    }

    /// Discretized kernel on the configured grid, with the configured
    /// weight attached.
    pub fn kernel(
        &mut self,
        model: &Arc<dyn StateSpaceModel>,
        lo: f64,
        hi: f64,
        m: usize,
    ) -> Result<GridKernel, CliError> {
        let spec = self.grid_spec(model.dim_state(), lo, hi, m)?;
        let leak = *self.tolerances().leak.get_or_insert(1e-8);
        let mut k = kernelgrid::discretize_with(model, &spec, true, leak)?;
        let v = self.weight()?;
        k.set_weight(&v);
        Ok(k)
    }

    /// Weight function from the config, defaulting to `V(x) = 0.1 |x|^2`
    /// at tilt 1.
    pub fn weight(&mut self) -> Result<WeightFunction, CliError> {
        let w = self.cfg.weight.get_or_insert_with(WeightCfg::default);
        let eta = *w.eta.get_or_insert(1.0);
        match &w.v {
            None => {
                w.v = Some("0.1*x^2".to_string());
                Ok(WeightFunction::quadratic(0.1)?.with_eta(eta)?)
            }
            Some(src) => {
                let e = expr::parse(src).map_err(|m| {
                    CliError::msg(format!("weight.v expression {src:?}: {m}"))
                })?;
                let grads = e.gradient(e.max_var().max(1));
                Ok(WeightFunction::new(
                    move |x: &DVector<f64>| e.eval(x),
                    move |x: &DVector<f64>| {
                        DVector::from_fn(x.len(), |i, _| {
                            grads.get(i).map(|g| g.eval(x)).unwrap_or(0.0)
                        })
                    },
                    eta,
                )?)
            }
        }
    }

    /// Observable from `params.f`, filling the default back in.
    pub fn observable(&mut self, default: &str, dim: usize) -> Result<TestFunction, CliError> {
        let name = self.params().f.get_or_insert_with(|| default.to_string()).clone();
        build_test_function(&name, dim)
    }

    /// The params section, created on demand.
    pub fn params(&mut self) -> &mut Params {
        self.cfg.params.get_or_insert_with(Params::default)
    }

    /// The tolerances section, created on demand.
    pub fn tolerances(&mut self) -> &mut Tolerances {
        self.cfg.tolerances.get_or_insert_with(Tolerances::default)
    }

    /// Master seed; errors for stochastic experiments when absent.
    pub fn seed_required(&mut self, experiment: &str) -> Result<u64, CliError> {
        let mc = self.cfg.mc.get_or_insert_with(McCfg::default);
        mc.seed.ok_or_else(|| {
            CliError::msg(format!(
                "experiment {experiment:?} is stochastic and needs a master seed: set mc.seed in the config or pass --seed"
            ))
        })
    }

    /// Sample count with a default.
    pub fn mc_n(&mut self, default: u64) -> u64 {
        let mc = self.cfg.mc.get_or_insert_with(McCfg::default);
        *mc.n.get_or_insert(default)
    }

    /// Replication count with a default.
    pub fn mc_reps(&mut self, default: u64) -> u64 {
        let mc = self.cfg.mc.get_or_insert_with(McCfg::default);
        *mc.reps.get_or_insert(default)
    }

    /// Solve mode from `params.mode` plus series tolerances.
    pub fn solve_mode(&mut self) -> Result<SolveMode, CliError> {
        let tol = *self.tolerances().series.get_or_insert(1e-10);
        let mode = self.params().mode.get_or_insert_with(|| "auto".to_string()).clone();
        match mode.as_str() {
            "auto" => Ok(SolveMode::Auto),
            "direct" => Ok(SolveMode::LinearSolve),
            "series" => {
                let t_max = *self.params().tmax.get_or_insert(200_000);
                Ok(SolveMode::Series { t_max, tol })
            }
            other => Err(CliError::msg(format!(
                "unknown solve mode {other:?}; expected auto, direct, or series"
            ))),
        }
    }

    /// Evaluation point from `params.x`, default zeros.
    pub fn point(&mut self, dim: usize) -> Result<DVector<f64>, CliError> {
        let x = self
            .params()
            .x
            .get_or_insert_with(|| vec![0.0; dim])
            .clone();
        if x.len() != dim {
            return Err(CliError::msg(format!(
                "params.x has {} coordinates but the model state has {dim}",
                x.len()
            )));
        }
        Ok(DVector::from_vec(x))
    }
}

/// Builds a named or expression test function on `dim` coordinates.
pub fn build_test_function(name: &str, dim: usize) -> Result<TestFunction, CliError> {
    match name {
        "x" => Ok(TestFunction::linear()),
        "x2" | "z2" => Ok(TestFunction::square()),
        "tanh" => Ok(TestFunction::tanh_sum()),
        _ => {
            if let Some(path) = name.strip_prefix("file:") {
                return Err(CliError::msg(format!(
                    "file-backed functions are only usable as solver costs; cannot differentiate {path:?}"
                )));
            }
            let e = expr::parse(name)
                .map_err(|m| CliError::msg(format!("expression {name:?}: {m}")))?;
            if e.max_var() > dim {
                return Err(CliError::msg(format!(
                    "expression {name:?} reads coordinate x{} but the state has {dim}",
                    e.max_var()
                )));
            }
            let grads = e.gradient(dim);
            let eg = e.clone();
            Ok(TestFunction::custom(
                name,
                move |x: &DVector<f64>| eg.eval(x),
                move |x: &DVector<f64>| DVector::from_fn(dim, |i, _| grads[i].eval(x)),
                Growth::Quadratic,
            ))
        }
    }
}

/// Builds a solver cost, which additionally supports `file:<path>`: a JSON
/// array of per-node values looked up by nearest grid node.
pub fn build_cost(name: &str, k: &GridKernel) -> Result<TestFunction, CliError> {
    if let Some(path) = name.strip_prefix("file:") {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::msg(format!("cannot read cost file {path:?}: {e}")))?;
        let values: Vec<f64> = serde_json::from_str(&text)
            .map_err(|e| CliError::msg(format!("cost file {path:?} must hold a JSON array of numbers: {e}")))?;
        if values.len() != k.grid().len() {
            return Err(CliError::msg(format!(
                "cost file {path:?} holds {} values but the grid has {} nodes",
                values.len(),
                k.grid().len()
            )));
        }
        let grid = k.grid().clone();
        let vals = DVector::from_vec(values);
        return Ok(TestFunction::custom(
            format!("file:{path}"),
            move |x: &DVector<f64>| vals[grid.nearest_index(x)],
            |x: &DVector<f64>| DVector::zeros(x.len()),
            Growth::Bounded,
        ));
    }
    build_test_function(name, k.grid().dim())
}
