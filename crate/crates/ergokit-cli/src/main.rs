//! `ergokit`: config-driven experiments over the ergokit toolkit.
//!
//! JSON configs are the canonical interface (`ergokit run config.json`);
//! every subcommand also takes flags, which override config keys. Artifacts
//! embed the full effective config and seed, so any emitted file replays
//! bit-for-bit from its own header. Exit codes: 0 success, 2 numerical
//! check failure, 1 error.

mod config;
mod experiments;
mod expr;
mod report;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{ExperimentConfig, GridCfg, McCfg, ModelCfg, OutputCfg, Params, WeightCfg};
use ergokit::ErgoError;

/// A fatal CLI error; printed to stderr, exit code 1.
#[derive(Debug)]
pub struct CliError(String);

impl CliError {
    pub fn msg(s: impl Into<String>) -> Self {
        CliError(s.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<ErgoError> for CliError {
    fn from(e: ErgoError) -> Self {
        CliError(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "ergokit",
    version,
    about = "Stability, sensitivity, and spectral experiments for nonlinear state-space Markov chains"
)]
struct Cli {
    /// Master seed for stochastic experiments (overrides mc.seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Write the artifact to this path instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Artifact format; each experiment has a natural default.
    #[arg(long, global = true, value_enum)]
    format: Option<FormatArg>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

impl FormatArg {
    fn as_str(self) -> &'static str {
        match self {
            FormatArg::Csv => "csv",
            FormatArg::Json => "json",
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the experiment described by a JSON config file.
    Run {
        /// Config file; its "experiment" key picks the experiment.
        config: PathBuf,
    },
    /// Check the pathwise gradient identity against common-random-number
    /// finite differences.
    Gradcheck(GradcheckArgs),
    /// Solve the Poisson equation on a discretized kernel.
    Poisson(ValueArgs),
    /// Solve the discounted value function on a discretized kernel.
    Discounted(ValueArgs),
    /// Trace weighted norms of the centered semigroup and fit the decay
    /// rate.
    Decay(DecayArgs),
    /// Eigenvalues, spectral radius, and power-norm growth of a kernel.
    Spectrum(SpectrumArgs),
    /// Verify a multiplicative drift condition.
    Drift(DriftArgs),
    /// Estimate the top Lyapunov exponent (or a moment exponent).
    Lyapunov(ExponentArgs),
    /// Estimate contraction exponents from several start points.
    Contraction(ContractionArgs),
    /// Bernstein approximation sup errors for values and gradients.
    Bernstein(BernsteinArgs),
    /// Truncation error sweep plus the cutoff slope bound.
    Truncation(TruncationArgs),
}

#[derive(Args, Clone, Default)]
struct CommonArgs {
    /// Base config file; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
struct ModelFlags {
    /// Model family: ar1, tanh1, rotcon2.
    #[arg(long)]
    model: Option<String>,
    /// Contraction factor.
    #[arg(long, allow_hyphen_values = true)]
    rho: Option<f64>,
    /// Noise scale.
    #[arg(long)]
    sigma: Option<f64>,
    /// Rotation angle (rotcon2).
    #[arg(long, allow_hyphen_values = true)]
    theta: Option<f64>,
}

impl ModelFlags {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if self.model.is_none() && self.rho.is_none() && self.sigma.is_none() && self.theta.is_none()
        {
            return;
        }
        let m = cfg.model.get_or_insert_with(ModelCfg::default);
        if let Some(name) = &self.model {
            m.name = name.clone();
        }
        if let Some(rho) = self.rho {
            m.rho = Some(rho);
        }
        if let Some(sigma) = self.sigma {
            m.sigma = Some(sigma);
        }
        if let Some(theta) = self.theta {
            m.theta = Some(theta);
        }
    }
}

#[derive(Args, Clone, Default)]
struct GridFlags {
    /// Grid as lo:hi:m, e.g. -8:8:401.
    #[arg(long, allow_hyphen_values = true)]
    grid: Option<String>,
    /// Largest stationary-weighted boundary mass the grid may lose.
    #[arg(long)]
    leak: Option<f64>,
}

impl GridFlags {
    fn apply(&self, cfg: &mut ExperimentConfig) -> Result<(), CliError> {
        if let Some(s) = &self.grid {
            cfg.grid = Some(GridCfg::parse_flag(s)?);
        }
        if let Some(leak) = self.leak {
            cfg.tolerances.get_or_insert_with(Default::default).leak = Some(leak);
        }
        Ok(())
    }
}

#[derive(Args, Clone, Default)]
struct WeightFlags {
    /// Weight potential V as an expression; the weight is exp(eta V).
    #[arg(long = "weight", alias = "V", allow_hyphen_values = true)]
    weight: Option<String>,
    /// Weight tilt eta in (0, 1].
    #[arg(long)]
    eta: Option<f64>,
}

impl WeightFlags {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if self.weight.is_none() && self.eta.is_none() {
            return;
        }
        let w = cfg.weight.get_or_insert_with(WeightCfg::default);
        if let Some(v) = &self.weight {
            w.v = Some(v.clone());
        }
        if let Some(eta) = self.eta {
            w.eta = Some(eta);
        }
    }
}

fn params(cfg: &mut ExperimentConfig) -> &mut Params {
    cfg.params.get_or_insert_with(Params::default)
}

fn parse_f64_list(s: &str, what: &str) -> Result<Vec<f64>, CliError> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| CliError::msg(format!("bad {what} entry {p:?} in {s:?}")))
        })
        .collect()
}

fn parse_usize_list(s: &str, what: &str) -> Result<Vec<usize>, CliError> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| CliError::msg(format!("bad {what} entry {p:?} in {s:?}")))
        })
        .collect()
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    model: ModelFlags,
    /// Observable: x, x2, tanh, or an expression.
    #[arg(long)]
    f: Option<String>,
    /// Evaluation point, comma-separated coordinates.
    #[arg(long, allow_hyphen_values = true)]
    x: Option<String>,
    /// Horizon.
    #[arg(long)]
    t: Option<usize>,
    /// Replications.
    #[arg(long)]
    n: Option<u64>,
    /// Finite-difference step.
    #[arg(long)]
    step: Option<f64>,
}

impl GradcheckArgs {
    fn into_config(self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = base_config(&self.common, "gradcheck")?;
        self.model.apply(&mut cfg);
        let p = params(&mut cfg);
        if let Some(f) = self.f {
            p.f = Some(f);
        }
        if let Some(t) = self.t {
            p.t = Some(t);
        }
        if let Some(step) = self.step {
            p.step = Some(step);
        }
        if let Some(x) = &self.x {
            p.x = Some(parse_f64_list(x, "coordinate")?);
        }
        if let Some(n) = self.n {
            cfg.mc.get_or_insert_with(McCfg::default).n = Some(n);
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct ValueArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    grid: GridFlags,
    #[command(flatten)]
    weight: WeightFlags,
    /// Cost: x, x2, tanh, file:<path>, or an expression.
    #[arg(long)]
    cost: Option<String>,
    /// Discount factor (discounted only).
    #[arg(long)]
    alpha: Option<f64>,
    /// Solver mode: auto, direct, series.
    #[arg(long)]
    mode: Option<String>,
}

impl ValueArgs {
    fn into_config(self, experiment: &str) -> Result<ExperimentConfig, CliError> {
        let mut cfg = base_config(&self.common, experiment)?;
        self.model.apply(&mut cfg);
        self.grid.apply(&mut cfg)?;
        self.weight.apply(&mut cfg);
        let p = params(&mut cfg);
        if let Some(c) = self.cost {
            p.cost = Some(c);
        }
        if let Some(a) = self.alpha {
            p.alpha = Some(a);
        }
        if let Some(m) = self.mode {
            p.mode = Some(m);
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct DecayArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    grid: GridFlags,
    #[command(flatten)]
    weight: WeightFlags,
    /// Cost: x, x2, tanh, file:<path>, or an expression.
    #[arg(long)]
    cost: Option<String>,
    /// Largest horizon traced.
    #[arg(long)]
    tmax: Option<usize>,
}

impl DecayArgs {
    fn into_config(self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = base_config(&self.common, "decay")?;
        self.model.apply(&mut cfg);
        self.grid.apply(&mut cfg)?;
        self.weight.apply(&mut cfg);
        let p = params(&mut cfg);
        if let Some(c) = self.cost {
            p.cost = Some(c);
        }
        if let Some(t) = self.tmax {
            p.tmax = Some(t);
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct SpectrumArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    grid: GridFlags,
    #[command(flatten)]
    weight: WeightFlags,
    /// How many leading eigenvalues to report.
    #[arg(long)]
    top: Option<usize>,
    /// Analyze the centered kernel.
    #[arg(long)]
    centered: bool,
    /// Also write the kernel matrix to this CSV path.
    #[arg(long)]
    export_kernel: Option<String>,
}

impl SpectrumArgs {
    fn into_config(self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = base_config(&self.common, "spectrum")?;
        self.model.apply(&mut cfg);
        self.grid.apply(&mut cfg)?;
        self.weight.apply(&mut cfg);
        let p = params(&mut cfg);
        if let Some(t) = self.top {
            p.top = Some(t);
        }
        if self.centered {
            p.centered = Some(true);
        }
        if let Some(path) = self.export_kernel {
            p.export_kernel = Some(path);
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct DriftArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    grid: GridFlags,
    #[command(flatten)]
    weight: WeightFlags,
    /// Minorant W as an expression (at least 1 everywhere).
    #[arg(long = "W", allow_hyphen_values = true)]
    w: Option<String>,
    /// Drift margin delta.
    #[arg(long)]
    delta: Option<f64>,
    /// Offset allowed inside the central ball.
    #[arg(long)]
    b: Option<f64>,
    /// Central ball radius.
    #[arg(long)]
    c_radius: Option<f64>,
    /// Tilts to verify, comma-separated.
    #[arg(long)]
    etas: Option<String>,
}

impl DriftArgs {
    fn into_config(self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = base_config(&self.common, "drift")?;
        self.model.apply(&mut cfg);
        self.grid.apply(&mut cfg)?;
        self.weight.apply(&mut cfg);
        let p = params(&mut cfg);
        if let Some(w) = self.w {
            p.w = Some(w);
        }
        if let Some(d) = self.delta {
            p.delta = Some(d);
        }
        if let Some(b) = self.b {
            p.b = Some(b);
        }
        if let Some(c) = self.c_radius {
            p.c_radius = Some(c);
        }
        if let Some(etas) = &self.etas {
            p.etas = Some(parse_f64_list(etas, "tilt")?);
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct ExponentArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    model: ModelFlags,
    /// Start point, comma-separated coordinates.
    #[arg(long, allow_hyphen_values = true)]
    x0: Option<String>,
    /// Horizon.
    #[arg(long)]
    t: Option<usize>,
    /// Replications.
    #[arg(long)]
    reps: Option<u64>,
    /// Moment order; absent means the almost-sure exponent.
    #[arg(long)]
    p: Option<f64>,
}

impl ExponentArgs {
    fn into_config(self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = base_config(&self.common, "lyapunov")?;
        self.model.apply(&mut cfg);
        let p = params(&mut cfg);
        if let Some(x0) = &self.x0 {
            p.x = Some(parse_f64_list(x0, "coordinate")?);
        }
        if let Some(t) = self.t {
            p.t = Some(t);
        }
        if let Some(order) = self.p {
            p.p = Some(order);
        }
        if let Some(reps) = self.reps {
            cfg.mc.get_or_insert_with(McCfg::default).reps = Some(reps);
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct ContractionArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    model: ModelFlags,
    /// Start point, comma-separated coordinates; repeat for several starts.
    #[arg(long, allow_hyphen_values = true)]
    x0: Vec<String>,
    /// Horizon.
    #[arg(long)]
    t: Option<usize>,
    /// Replications per start.
    #[arg(long)]
    reps: Option<u64>,
}

impl ContractionArgs {
    fn into_config(self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = base_config(&self.common, "contraction")?;
        self.model.apply(&mut cfg);
        let p = params(&mut cfg);
        if !self.x0.is_empty() {
            let mut starts = Vec::with_capacity(self.x0.len());
            for s in &self.x0 {
                starts.push(parse_f64_list(s, "coordinate")?);
            }
            p.starts = Some(starts);
        }
        if let Some(t) = self.t {
            p.t = Some(t);
        }
        if let Some(reps) = self.reps {
            cfg.mc.get_or_insert_with(McCfg::default).reps = Some(reps);
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct BernsteinArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Function to approximate: z2, x, tanh, or an expression in z.
    #[arg(long)]
    f: Option<String>,
    /// Polynomial degree.
    #[arg(long)]
    m: Option<usize>,
    /// Box lower corner.
    #[arg(long, allow_hyphen_values = true)]
    lo: Option<f64>,
    /// Box upper corner.
    #[arg(long, allow_hyphen_values = true)]
    hi: Option<f64>,
    /// Probe count for the sup errors.
    #[arg(long)]
    probes: Option<usize>,
}

impl BernsteinArgs {
    fn into_config(self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = base_config(&self.common, "bernstein")?;
        let p = params(&mut cfg);
        if let Some(f) = self.f {
            p.f = Some(f);
        }
        if let Some(m) = self.m {
            p.m = Some(m);
        }
        if let Some(lo) = self.lo {
            p.lo = Some(lo);
        }
        if let Some(hi) = self.hi {
            p.hi = Some(hi);
        }
        if let Some(probes) = self.probes {
            p.probes = Some(probes);
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TruncationArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    grid: GridFlags,
    #[command(flatten)]
    weight: WeightFlags,
    /// Truncation levels, comma-separated.
    #[arg(long)]
    levels: Option<String>,
}

impl TruncationArgs {
    fn into_config(self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = base_config(&self.common, "truncation")?;
        self.model.apply(&mut cfg);
        self.grid.apply(&mut cfg)?;
        self.weight.apply(&mut cfg);
        if let Some(levels) = &self.levels {
            params(&mut cfg).levels = Some(parse_usize_list(levels, "level")?);
        }
        Ok(cfg)
    }
}

/// Loads the base config (if given) and stamps the experiment tag.
fn base_config(common: &CommonArgs, experiment: &str) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => config::load(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.experiment = Some(experiment.to_string());
    Ok(cfg)
}

fn main() -> ExitCode {
    // Cap the worker pool before any parallel work. Results are invariant
    // to the thread count; only wall time changes.
    if let Ok(s) = std::env::var("ERGOKIT_THREADS") {
        match s.parse::<usize>() {
            Ok(n) if n >= 1 => {
                rayon::ThreadPoolBuilder::new().num_threads(n).build_global().ok();
            }
            _ => {
                eprintln!("ergokit: error: ERGOKIT_THREADS must be a positive integer, got {s:?}");
                return ExitCode::from(1);
            }
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("ergokit: error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<u8, CliError> {
    let mut cfg = match cli.cmd {
        Cmd::Run { config } => config::load(&config)?,
        Cmd::Gradcheck(a) => a.into_config()?,
        Cmd::Poisson(a) => a.into_config("poisson")?,
        Cmd::Discounted(a) => a.into_config("discounted")?,
        Cmd::Decay(a) => a.into_config()?,
        Cmd::Spectrum(a) => a.into_config()?,
        Cmd::Drift(a) => a.into_config()?,
        Cmd::Lyapunov(a) => a.into_config()?,
        Cmd::Contraction(a) => a.into_config()?,
        Cmd::Bernstein(a) => a.into_config()?,
        Cmd::Truncation(a) => a.into_config()?,
    };

    if let Some(seed) = cli.seed {
        cfg.mc.get_or_insert_with(McCfg::default).seed = Some(seed);
    }
    if let Some(out) = &cli.out {
        cfg.output.get_or_insert_with(OutputCfg::default).path =
            Some(out.display().to_string());
    }
    if let Some(fmt) = cli.format {
        cfg.output.get_or_insert_with(OutputCfg::default).format =
            Some(fmt.as_str().to_string());
    }

    let experiment = cfg
        .experiment
        .clone()
        .ok_or_else(|| CliError::msg("config has no \"experiment\" key"))?;
    let mut report = experiments::run(&experiment, cfg)?;
    let format = report.resolve_format()?;
    let text = report.render(format);
    match report.config.output.as_ref().and_then(|o| o.path.clone()) {
        Some(path) => std::fs::write(&path, text)
            .map_err(|e| CliError::msg(format!("cannot write {path:?}: {e}")))?,
        None => print!("{text}"),
    }
    Ok(if report.pass { 0 } else { 2 })
}
