//! The `torus-sync` command line.
//!
//! Exit codes: 0 success, 1 experiment reported `pass = false`, 2 usage or
//! input error, 3 numerical failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::criterion::{check_criterion, find_criterion_boundary, ratio_sweep, SweepRow, M_FULL_CIRCLE, M_SEMICIRCLE};
use crate::dynamics::{integrate, IntegratorKind, NormalizerSpec, ParticleState, SimConfig, WeightSpec};
use crate::error::SyncError;
use crate::experiments::{
    build_counterexample, default_appendix_grids, geometric_grid, metastability_profile, monte_carlo_sync_with,
    tau_property_audit, trial_rng, AppendixRegime, Cell, ExperimentResult,
};
use crate::interaction::InteractionKernel;
use crate::io::{
    open_output, read_state_file, read_weights_file, render_sweep_svg, sidecar_path, sweep_table, trajectory_table, write_csv,
    write_json, IoError,
};
use crate::stability::{classify_stationary_point, ClassifyTolerances, StationaryReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// A kernel spec string, validated at parse time.
#[derive(Clone, Debug, Serialize)]
#[serde(transparent)]
pub struct KernelArg(String);

impl FromStr for KernelArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.parse::<InteractionKernel>().map_err(|e| e.to_string())?;
        Ok(KernelArg(s.to_string()))
    }
}

impl KernelArg {
    pub fn kernel(&self) -> InteractionKernel {
        self.0.parse().expect("validated at parse time")
    }
}

#[derive(Parser, Debug, Serialize)]
#[command(name = "torus-sync", version, about = "Synchronization of mean-field particle systems on the circle")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Serialize)]
pub struct GlobalArgs {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Emit JSON instead of CSV.
    #[arg(long, global = true)]
    pub json: bool,
    /// Output file (standard output when omitted).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "snake_case", tag = "subcommand")]
pub enum Command {
    /// Evaluate the synchronization criterion for one kernel.
    Criterion(CriterionArgs),
    /// Synchronization ratio of the self-attention kernel over a β grid.
    Sweep(SweepArgs),
    /// Integrate the particle dynamics from one initial condition.
    Simulate(SimulateArgs),
    /// Classify a stationary state.
    Analyze(AnalyzeArgs),
    /// Monte-Carlo synchronization study.
    Mc(McArgs),
    /// Build the three-cluster stationary state for β < −2/3.
    Counterexample(CounterexampleArgs),
    /// Cluster-count profile of the self-attention dynamics.
    Metastability(MetastabilityArgs),
    /// Numerical audits of the appendix inequalities or of τ.
    Audit(AuditArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct MArgs {
    /// Use M = π instead of M = 2π.
    #[arg(long, alias = "semicircle", conflicts_with = "m")]
    pub m_semicircle: bool,
    /// Explicit M in (0, 2π].
    #[arg(long)]
    pub m: Option<f64>,
}

impl MArgs {
    fn resolve(&self) -> f64 {
        match (self.m, self.m_semicircle) {
            (Some(m), _) => m,
            (None, true) => M_SEMICIRCLE,
            (None, false) => M_FULL_CIRCLE,
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct CriterionArgs {
    #[arg(long)]
    pub kernel: KernelArg,
    #[command(flatten)]
    pub m: MArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct SweepArgs {
    #[arg(long, allow_negative_numbers = true, default_value_t = -1.0)]
    pub beta_min: f64,
    #[arg(long, allow_negative_numbers = true, default_value_t = 10.0)]
    pub beta_max: f64,
    /// Number of grid points.
    #[arg(long, visible_alias = "steps", default_value_t = 500)]
    pub points: usize,
    /// Geometric spacing (needs beta-min > 0).
    #[arg(long)]
    pub log: bool,
    #[command(flatten)]
    pub m: MArgs,
    /// Also write an SVG chart of the ratio.
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum IntegratorArg {
    Rk45,
    Rk4,
}

#[derive(Args, Debug, Serialize)]
pub struct IntegrationArgs {
    #[arg(long, value_enum, default_value_t = IntegratorArg::Rk45)]
    pub integrator: IntegratorArg,
    /// Fixed step for rk4.
    #[arg(long, default_value_t = 1e-2)]
    pub dt: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub dt_init: f64,
    #[arg(long, default_value_t = 1e-9)]
    pub rtol: f64,
    #[arg(long, default_value_t = 1e-11)]
    pub atol: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub sync_tol: f64,
}

impl IntegrationArgs {
    fn config(&self, t_max: f64, sample_every: f64, seed: u64) -> SimConfig {
        let integrator = match self.integrator {
            IntegratorArg::Rk45 => IntegratorKind::Rk45Adaptive { dt_init: self.dt_init, rtol: self.rtol, atol: self.atol },
            IntegratorArg::Rk4 => IntegratorKind::Rk4Fixed { dt: self.dt },
        };
        SimConfig { integrator, t_max, sample_every, sync_tol: self.sync_tol, seed }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct WeightArgs {
    /// Particle weights c, one positive number per line.
    #[arg(long)]
    pub weights_file: Option<PathBuf>,
    /// Row weights w1, one positive number per line.
    #[arg(long)]
    pub row_weights_file: Option<PathBuf>,
    /// Divide each velocity by the attention normalizer.
    #[arg(long)]
    pub normalized: bool,
}

impl WeightArgs {
    fn weights(&self, n: usize) -> Result<WeightSpec, CliError> {
        let c = match &self.weights_file {
            Some(p) => read_weights_file(p)?,
            None => vec![1.0; n],
        };
        let w1 = self.row_weights_file.as_deref().map(read_weights_file).transpose()?;
        let w = WeightSpec { c, w1 };
        w.validate(n).map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(w)
    }

    fn normalizer(&self) -> NormalizerSpec {
        if self.normalized {
            NormalizerSpec::Attention
        } else {
            NormalizerSpec::None
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct SimulateArgs {
    #[arg(long)]
    pub kernel: KernelArg,
    /// Particle count; implied by the file for `file:` initial conditions.
    #[arg(long)]
    pub n: Option<usize>,
    /// `uniform`, `ngon` or `file:<path>`.
    #[arg(long, default_value = "uniform")]
    pub init: String,
    #[arg(long, default_value_t = 1e4)]
    pub t_max: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sample_every: f64,
    #[command(flatten)]
    pub integration: IntegrationArgs,
    #[command(flatten)]
    pub weights: WeightArgs,
    /// Append the angles x_0..x_{n-1} to every row.
    #[arg(long)]
    pub dump_angles: bool,
    /// Gap threshold for the cluster_count column (default π/(4√β) for β > 1, else π/4).
    #[arg(long)]
    pub gap_threshold: Option<f64>,
}

#[derive(Args, Debug, Serialize)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub kernel: KernelArg,
    #[arg(long)]
    pub state_file: PathBuf,
    #[command(flatten)]
    pub weights: WeightArgs,
    #[arg(long, default_value_t = 1e-8)]
    pub merge_tol: f64,
    #[arg(long, default_value_t = 1e-9)]
    pub instability_tol: f64,
    #[arg(long, default_value_t = 1e-10)]
    pub residual_tol: f64,
}

#[derive(Args, Debug, Serialize)]
pub struct McArgs {
    #[arg(long)]
    pub kernel: KernelArg,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 1e6)]
    pub t_max: f64,
    #[arg(long, default_value_t = 100.0)]
    pub sample_every: f64,
    #[command(flatten)]
    pub integration: IntegrationArgs,
    #[command(flatten)]
    pub weights: WeightArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct CounterexampleArgs {
    #[arg(long, allow_negative_numbers = true)]
    pub beta: f64,
    #[arg(long)]
    pub n: usize,
    /// Classify the constructed state.
    #[arg(long)]
    pub analyze: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct MetastabilityArgs {
    #[arg(long)]
    pub beta: f64,
    #[arg(long)]
    pub n: usize,
    /// Comma-separated sample times.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,5,10,50")]
    pub times: Vec<f64>,
    #[arg(long)]
    pub gap_threshold: Option<f64>,
    /// Integrate without the attention normalizer.
    #[arg(long)]
    pub unnormalized: bool,
    #[command(flatten)]
    pub integration: IntegrationArgs,
}

#[derive(Clone, Copy, Debug, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Appendix,
    Tau,
}

#[derive(Args, Debug, Serialize)]
pub struct AuditArgs {
    #[arg(long, value_enum, default_value_t = Suite::Appendix)]
    pub suite: Suite,
    /// Grid points per regime (appendix) or in total (tau).
    #[arg(long)]
    pub points: Option<usize>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(IoError),
    Numerical(SyncError),
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Io(e)
    }
}

impl From<SyncError> for CliError {
    fn from(e: SyncError) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e)
        } else {
            CliError::Usage(e.to_string())
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Io(_) => EXIT_USAGE,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Io(e) => write!(f, "io error: {e}"),
            CliError::Numerical(e) => write!(f, "numerical error: {e}"),
        }
    }
}

/// A table plus a free-form summary, emitted as CSV (summary and config in
/// the sidecar) or JSON (everything in one document).
struct Output {
    columns: Vec<String>,
    rows: Vec<Vec<Cell>>,
    summary: Value,
    pass: Option<bool>,
}

impl Output {
    fn from_experiment(r: ExperimentResult, extra: Value) -> Self {
        let mut summary = Map::new();
        summary.insert("name".into(), json!(r.name));
        summary.insert("parameters".into(), json!(r.parameters));
        summary.insert("pass".into(), json!(r.pass));
        summary.insert("seed".into(), json!(r.seed));
        if let Value::Object(m) = extra {
            summary.extend(m);
        }
        Output { columns: r.columns, rows: r.rows, summary: Value::Object(summary), pass: r.pass }
    }
}

fn emit(global: &GlobalArgs, config: &Value, out: &Output) -> Result<(), CliError> {
    if global.json {
        let rows: Vec<Value> = out
            .rows
            .iter()
            .map(|r| Value::Object(out.columns.iter().cloned().zip(r.iter().map(|c| json!(c))).collect()))
            .collect();
        let doc = json!({ "config": config, "summary": out.summary, "columns": out.columns, "rows": rows });
        write_json(open_output(global.out.as_deref())?, &doc)?;
    } else {
        write_csv(open_output(global.out.as_deref())?, &out.columns, &out.rows)?;
        let meta = json!({ "config": config, "summary": out.summary });
        match &global.out {
            Some(p) => {
                let side = sidecar_path(p);
                let f = std::fs::File::create(&side).map_err(|source| IoError::File { path: side.clone(), source })?;
                write_json(f, &meta)?;
            }
            None => eprintln!("{}", serde_json::to_string(&meta).map_err(IoError::from)?),
        }
    }
    Ok(())
}

fn default_gap_threshold(kernel: &InteractionKernel) -> f64 {
    match kernel.beta() {
        Some(b) if b > 1.0 => std::f64::consts::PI / (4.0 * b.sqrt()),
        _ => std::f64::consts::FRAC_PI_4,
    }
}

fn initial_state(init: &str, n: Option<usize>, seed: u64) -> Result<ParticleState, CliError> {
    let need_n = || n.ok_or_else(|| CliError::Usage(format!("--n is required for --init {init}")));
    let state = if init == "uniform" {
        ParticleState::uniform(need_n()?, &mut trial_rng(seed, 0))?
    } else if init == "ngon" {
        ParticleState::ngon(need_n()?)?
    } else if let Some(path) = init.strip_prefix("file:") {
        let st = read_state_file(Path::new(path))?;
        if let Some(n) = n {
            if n != st.n() {
                return Err(CliError::Usage(format!("--n {n} does not match the {} angles in {path}", st.n())));
            }
        }
        st
    } else {
        return Err(CliError::Usage(format!("unknown initial condition {init:?}; expected uniform, ngon or file:<path>")));
    };
    Ok(state)
}

fn report_row(report: &StationaryReport) -> (Vec<String>, Vec<Vec<Cell>>) {
    let cols = [
        "classification",
        "residual",
        "clusters",
        "tau_max",
        "min_cut_margin",
        "gap_lemma_ok",
        "max_jacobian_re",
        "max_hessian_eig",
    ];
    let row = vec![
        report.classification.as_str().into(),
        report.residual.into(),
        report.decomposition.k().into(),
        report.decomposition.tau_max.into(),
        report.cut_margins.minimum.into(),
        report.gap_lemma_ok.map_or(Cell::Text("n/a".into()), Cell::Bool),
        report.jacobian_eigs[0].re.into(),
        report.hessian_eigs.as_ref().and_then(|h| h.last().copied()).unwrap_or(f64::NAN).into(),
    ];
    (cols.iter().map(|c| c.to_string()).collect(), vec![row])
}

fn run_command(cli: &Cli) -> Result<Option<bool>, CliError> {
    let config = serde_json::to_value(cli).map_err(IoError::from)?;
    let g = &cli.global;
    let out = match &cli.command {
        Command::Criterion(a) => {
            let kernel = a.kernel.kernel();
            let r = check_criterion(&kernel, a.m.resolve())?;
            let cols = ["kernel", "tau", "fp0", "integral", "M", "lhs", "rhs", "ratio", "verdict", "method_discrepancy"];
            let row = vec![
                Cell::Text(kernel.spec_string()),
                r.tau.into(),
                r.fp0.into(),
                r.integral_i.into(),
                r.m.into(),
                r.lhs.into(),
                r.rhs.into(),
                r.ratio.into(),
                r.verdict.as_str().into(),
                r.method_discrepancy.into(),
            ];
            Output { columns: cols.iter().map(|c| c.to_string()).collect(), rows: vec![row], summary: json!(r), pass: None }
        }
        Command::Sweep(a) => {
            if !(a.beta_min < a.beta_max) {
                return Err(CliError::Usage(format!("empty β range [{}, {}]", a.beta_min, a.beta_max)));
            }
            if a.points < 2 {
                return Err(CliError::Usage("--points must be at least 2".into()));
            }
            let grid: Vec<f64> = if a.log {
                if !(a.beta_min > 0.0) {
                    return Err(CliError::Usage("--log needs --beta-min > 0".into()));
                }
                geometric_grid(a.beta_min, a.beta_max, a.points)
            } else {
                (0..a.points).map(|k| a.beta_min + (a.beta_max - a.beta_min) * k as f64 / (a.points - 1) as f64).collect()
            };
            let m = a.m.resolve();
            let rows = ratio_sweep(&grid, m)?;
            let boundary = sweep_boundary(&rows, m);
            if let Some(svg) = &a.svg {
                let doc = render_sweep_svg(&rows, &format!("synchronization ratio, M = {m:.4}"));
                std::fs::write(svg, doc).map_err(|source| IoError::File { path: svg.clone(), source })?;
            }
            let (columns, body) = sweep_table(&rows);
            Output { columns, rows: body, summary: json!({ "M": m, "boundary": boundary }), pass: None }
        }
        Command::Simulate(a) => {
            let kernel = a.kernel.kernel();
            let init = initial_state(&a.init, a.n, g.seed)?;
            let weights = a.weights.weights(init.n())?;
            let cfg = a.integration.config(a.t_max, a.sample_every, g.seed);
            let traj = integrate(&init, &kernel, &weights, a.weights.normalizer(), &cfg)?;
            let threshold = a.gap_threshold.unwrap_or_else(|| default_gap_threshold(&kernel));
            let (columns, rows) = trajectory_table(&traj, threshold, a.dump_angles);
            let summary = json!({
                "terminal_status": traj.terminal_status,
                "final_time": traj.final_time(),
                "final_diameter": traj.final_diameter(),
                "steps": traj.steps,
                "gap_threshold": threshold,
                "sim_config": cfg,
            });
            Output { columns, rows, summary, pass: None }
        }
        Command::Analyze(a) => {
            let kernel = a.kernel.kernel();
            let state = read_state_file(&a.state_file)?;
            let weights = a.weights.weights(state.n())?;
            let tol =
                ClassifyTolerances { merge_tol: a.merge_tol, instability_tol: a.instability_tol, residual_tol: a.residual_tol };
            let report = classify_stationary_point(&state, &kernel, &weights, a.weights.normalizer(), &tol)?;
            let (columns, rows) = report_row(&report);
            Output { columns, rows, summary: json!(report), pass: None }
        }
        Command::Mc(a) => {
            let kernel = a.kernel.kernel();
            let weights = a.weights.weights(a.n)?;
            let cfg = a.integration.config(a.t_max, a.sample_every, g.seed);
            let r = monte_carlo_sync_with(&kernel, &weights, a.trials, a.weights.normalizer(), &cfg)?;
            Output::from_experiment(r, json!({}))
        }
        Command::Counterexample(a) => {
            let state = build_counterexample(a.beta, a.n)?;
            let kernel = InteractionKernel::self_attention(a.beta);
            let rows: Vec<Vec<Cell>> = state.angles().iter().enumerate().map(|(i, &x)| vec![i.into(), x.into()]).collect();
            let (summary, pass) = if a.analyze {
                let report = classify_stationary_point(
                    &state,
                    &kernel,
                    &WeightSpec::unit(a.n),
                    NormalizerSpec::None,
                    &ClassifyTolerances::default(),
                )?;
                let pass = report.classification == crate::stability::Classification::StableNonsynchronized;
                (json!({ "beta": a.beta, "n": a.n, "analysis": report }), Some(pass))
            } else {
                (json!({ "beta": a.beta, "n": a.n }), None)
            };
            Output { columns: vec!["index".into(), "angle".into()], rows, summary, pass }
        }
        Command::Metastability(a) => {
            let normalizer = if a.unnormalized { NormalizerSpec::None } else { NormalizerSpec::Attention };
            let cfg = a.integration.config(1.0, 1.0, g.seed);
            let r = metastability_profile(a.beta, a.n, g.seed, &a.times, a.gap_threshold, normalizer, &cfg)?;
            Output::from_experiment(r, json!({}))
        }
        Command::Audit(a) => match a.suite {
            Suite::Appendix => {
                let grids: Vec<(AppendixRegime, Vec<f64>)> = match a.points {
                    None => default_appendix_grids(),
                    Some(0) => return Err(CliError::Usage("--points must be positive".into())),
                    Some(p) => AppendixRegime::ALL.iter().map(|r| (*r, r.grid(p))).collect(),
                };
                Output::from_experiment(crate::experiments::appendix_inequality_audit(&grids)?, json!({}))
            }
            Suite::Tau => {
                let points = a.points.unwrap_or(200);
                if points == 0 {
                    return Err(CliError::Usage("--points must be positive".into()));
                }
                let r = tau_property_audit(&geometric_grid(0.1, 100.0, points))?;
                let limit = InteractionKernel::self_attention(1e4).tau()? * 100.0;
                Output::from_experiment(r, json!({ "sqrt_beta_tau_at_1e4": limit }))
            }
        },
    };
    emit(g, &config, &out)?;
    Ok(out.pass)
}

/// Boundary of `ratio = 1` between the first pair of adjacent grid points
/// whose ratios straddle 1.
fn sweep_boundary(rows: &[SweepRow], m: f64) -> Option<f64> {
    rows.windows(2).find_map(|w| {
        let (a, b) = (w[0].report.as_ref().ok()?, w[1].report.as_ref().ok()?);
        if (a.ratio < 1.0) != (b.ratio < 1.0) {
            find_criterion_boundary(m, (w[0].beta, w[1].beta)).ok()
        } else {
            None
        }
    })
}

fn configure_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("TORUS_SYNC_THREADS") {
        let k: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|k| *k > 0)
            .ok_or_else(|| CliError::Usage(format!("TORUS_SYNC_THREADS must be a positive integer, got {v:?}")))?;
        // Only the first configuration in a process takes effect.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(k).build_global();
    }
    Ok(())
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = configure_threads().and_then(|_| run_command(&cli));
    match result {
        Ok(Some(false)) => EXIT_FAILED,
        Ok(_) => EXIT_OK,
        Err(e) => {
            eprintln!("torus-sync: {e}");
            e.exit_code()
        }
    }
}
