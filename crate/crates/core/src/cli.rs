//! Command-line front end: `solve` runs one level, `study` runs the mesh
//! sequence and writes the convergence and spectrum tables.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::diagnostics::{hess_f_extremal_eigs, SpectrumReport};
use crate::energy::{kkt_residual_from, SigmaField};
use crate::error::{Error, Result};
use crate::flow::{run_flow, Algorithm, FlowConfig, FlowResult};
use crate::io::{
    loglog_slope, write_convergence_table, write_field_vtk, write_trace_csv, ConvergenceRow,
    FinalDiagnostics, RunConfig, RunRecord,
};
use crate::linsolve::SolverConfig;
use crate::problems::{DeltaRule, LevelSetup, RectTransportProblem};

/// Environment variable overriding the output directory.
pub const OUT_DIR_ENV: &str = "MKFLOW_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "mkflow", version, about = "L1 optimal transport density via gradient flows")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the benchmark on one mesh level.
    Solve(SolveArgs),
    /// Run a mesh sequence and fit convergence rates.
    Study(StudyArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Optional `key = value` configuration file; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `alg1`, `alg2` or `alg3`.
    #[arg(long)]
    pub alg: Option<String>,
    /// Initial (or fixed) time step.
    #[arg(long, alias = "tau")]
    pub tau0: Option<f64>,
    /// Growth factor for the adaptive step, > 1.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Newton stopping tolerance.
    #[arg(long)]
    pub eps: Option<f64>,
    /// Stop once the gradient norm drops below this.
    #[arg(long)]
    pub toll: Option<f64>,
    /// Maximum number of time steps.
    #[arg(long)]
    pub n_step: Option<usize>,
    /// Maximum Newton iterations per step.
    #[arg(long)]
    pub r_max: Option<usize>,
    /// Activity threshold used by the KKT residual.
    #[arg(long)]
    pub kkt_toll: Option<f64>,
    /// `h` or `h2`.
    #[arg(long)]
    pub delta_rule: Option<String>,
    /// Intervals per side of the level-0 mesh.
    #[arg(long)]
    pub k0: Option<usize>,
    /// Output directory (defaults to `MKFLOW_OUT_DIR`, then `out`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SolveArgs {
    /// Mesh level; the mesh has `8·2^level` intervals per side at k0 = 8.
    #[arg(long)]
    pub level: Option<u32>,
    /// Also compute the extremal Hessian eigenvalues.
    #[arg(long)]
    pub spectrum: bool,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args)]
pub struct StudyArgs {
    /// Comma-separated, increasing mesh levels.
    #[arg(long, value_delimiter = ',')]
    pub levels: Option<Vec<u32>>,
    /// Skip the per-level spectrum reports.
    #[arg(long)]
    pub no_spectrum: bool,
    #[command(flatten)]
    pub common: CommonArgs,
}

/// Settings after merging defaults, config file and flags.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub algorithm: Algorithm,
    pub flow: FlowConfig,
    pub delta_rule: DeltaRule,
    pub base_divisions: usize,
    pub out: PathBuf,
    pub levels: Vec<u32>,
}

#[derive(Debug, Default, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    alg: Option<String>,
    tau0: Option<f64>,
    alpha: Option<f64>,
    eps: Option<f64>,
    toll: Option<f64>,
    n_step: Option<usize>,
    r_max: Option<usize>,
    kkt_toll: Option<f64>,
    delta_rule: Option<String>,
    k0: Option<usize>,
    out: Option<PathBuf>,
    level: Option<u32>,
    levels: Option<Vec<u32>>,
}

fn load_file(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))
}

fn resolve(
    common: &CommonArgs,
    level: Option<u32>,
    levels: Option<Vec<u32>>,
    study: bool,
) -> Result<Resolved> {
    let file = match &common.config {
        Some(p) => load_file(p)?,
        None => FileConfig::default(),
    };
    let d = FlowConfig::default();
    let flow = FlowConfig {
        tau0: common.tau0.or(file.tau0).unwrap_or(d.tau0),
        alpha: common.alpha.or(file.alpha).unwrap_or(d.alpha),
        eps: common.eps.or(file.eps).unwrap_or(d.eps),
        toll: common.toll.or(file.toll).unwrap_or(d.toll),
        n_step: common.n_step.or(file.n_step).unwrap_or(d.n_step),
        r_max: common.r_max.or(file.r_max).unwrap_or(d.r_max),
        kkt_toll: common.kkt_toll.or(file.kkt_toll).unwrap_or(d.kkt_toll),
        ..d
    };
    flow.validate()?;
    let algorithm = match common.alg.clone().or(file.alg) {
        Some(s) => s.parse()?,
        None if study => Algorithm::Alg3,
        None => Algorithm::Alg2,
    };
    let delta_rule = match common.delta_rule.clone().or(file.delta_rule) {
        Some(s) => s.parse()?,
        None => DeltaRule::H2,
    };
    let base_divisions = common.k0.or(file.k0).unwrap_or(8);
    if base_divisions == 0 || base_divisions % 8 != 0 {
        return Err(Error::config("k0", format!("must be a positive multiple of 8, got {base_divisions}")));
    }
    let out = common
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .or(file.out)
        .unwrap_or_else(|| PathBuf::from("out"));
    let levels = if study {
        let l = levels.or(file.levels).unwrap_or_else(|| vec![0, 1, 2, 3]);
        if l.is_empty() || l.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("levels", "must be nonempty and strictly increasing"));
        }
        l
    } else {
        vec![level.or(file.level).unwrap_or(0)]
    };
    Ok(Resolved {
        algorithm,
        flow,
        delta_rule,
        base_divisions,
        out,
        levels,
    })
}

/// Outcome of one level.
#[derive(Debug, Clone)]
pub struct LevelOutcome {
    pub record: RunRecord,
    pub result: FlowResult,
}

/// Runs one level of the benchmark and writes its artifacts into `dir`.
pub fn run_level(
    r: &Resolved,
    level: u32,
    spectrum: bool,
    dir: &Path,
) -> Result<LevelOutcome> {
    let started = Instant::now();
    let problem = RectTransportProblem::benchmark();
    let LevelSetup { coarse, ctx, .. } =
        problem.setup(r.base_divisions, level, r.delta_rule, SolverConfig::default())?;
    let result = run_flow(r.algorithm, &ctx, &r.flow)?;
    let eval = ctx.evaluate(&result.mu)?;
    let sigma = SigmaField::new(result.mu.values().iter().map(|m| m.sqrt()).collect(), level)?;
    let grad_norm = eval
        .grad_f(sigma.values())
        .iter()
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    let spectrum_report: Option<SpectrumReport> = if spectrum {
        Some(hess_f_extremal_eigs(&sigma, &ctx)?)
    } else {
        None
    };
    let errors = problem.error_report(&result.mu, eval.energy(), &coarse)?;
    let diagnostics = FinalDiagnostics {
        converged: result.trace.converged,
        energy: eval.energy(),
        w1_estimate: 0.5 * eval.energy(),
        grad_norm,
        kkt: kkt_residual_from(result.mu.values(), eval.grad_e(), r.flow.kkt_toll),
        spectrum: spectrum_report,
        errors: Some(errors),
    };
    let config = RunConfig {
        algorithm: r.algorithm,
        flow: r.flow.clone(),
        delta_rule: r.delta_rule,
        delta: ctx.delta,
        level,
        base_divisions: r.base_divisions,
    };
    write_trace_csv(&result.trace, dir.join("trace.csv"))?;
    write_field_vtk(&coarse, &result.mu, dir.join("mu.vtk"))?;
    let record = RunRecord::new(config, &result.trace, diagnostics, started.elapsed().as_secs_f64());
    record.write_json(dir.join("run.json"))?;
    Ok(LevelOutcome { record, result })
}

fn summary(level: u32, rec: &RunRecord) -> String {
    let d = &rec.diagnostics;
    let mut s = format!(
        "level {level}: {} after {} steps, energy {:.12}, |grad F| {:.3e}, KKT {:.3e}",
        if d.converged { "converged" } else { "not converged" },
        rec.trace.len(),
        d.energy,
        d.grad_norm,
        d.kkt
    );
    if let Some(e) = &d.errors {
        let _ = write!(s, ", l2 error {:.4e}, W1 error {:.4e}", e.l2_mu_error, e.w1_error);
    }
    if let Some(sp) = &d.spectrum {
        let _ = write!(s, ", lambda [{:.4e}, {:.4e}]", sp.lambda_min, sp.lambda_max);
    }
    s
}

pub fn cmd_solve(args: &SolveArgs) -> Result<i32> {
    let r = resolve(&args.common, args.level, None, false)?;
    let level = r.levels[0];
    let out = run_level(&r, level, args.spectrum, &r.out)?;
    println!("{}", summary(level, &out.record));
    Ok(if out.record.diagnostics.converged { 0 } else { 2 })
}

fn spectrum_table(reports: &[(f64, SpectrumReport)]) -> String {
    let mut s = String::from("level,h,delta,lambda_min,lambda_max,method,converged\n");
    for (h, r) in reports {
        let method = match r.method {
            crate::diagnostics::SpectrumMethod::Dense => "dense",
            crate::diagnostics::SpectrumMethod::Iterative => "iterative",
        };
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.level, h, r.delta, r.lambda_min, r.lambda_max, method, r.converged
        );
    }
    if reports.len() >= 2 {
        let h: Vec<f64> = reports.iter().map(|(h, _)| *h).collect();
        let lmin: Vec<f64> = reports.iter().map(|(_, r)| r.lambda_min).collect();
        let lmax: Vec<f64> = reports.iter().map(|(_, r)| r.lambda_max).collect();
        if let Ok(v) = loglog_slope(&h, &lmin) {
            let _ = writeln!(s, "# slope lambda_min {v}");
        }
        if let Ok(v) = loglog_slope(&h, &lmax) {
            let _ = writeln!(s, "# slope lambda_max {v}");
        }
    }
    s
}

pub fn cmd_study(args: &StudyArgs) -> Result<i32> {
    let r = resolve(&args.common, None, args.levels.clone(), true)?;
    let mut rows = Vec::new();
    let mut spectra = Vec::new();
    let mut failed = false;
    for &level in &r.levels {
        let dir = r.out.join(format!("level{level}"));
        match run_level(&r, level, !args.no_spectrum, &dir) {
            Ok(out) => {
                println!("{}", summary(level, &out.record));
                let d = &out.record.diagnostics;
                let h = std::f64::consts::SQRT_2 / (r.base_divisions << level) as f64;
                if !d.converged {
                    failed = true;
                }
                if let Some(e) = d.errors {
                    rows.push(ConvergenceRow {
                        level,
                        h,
                        l2_mu_error: e.l2_mu_error,
                        w1_error: e.w1_error,
                    });
                }
                if let Some(sp) = d.spectrum {
                    spectra.push((h, sp));
                }
            }
            Err(e) => {
                eprintln!("level {level}: failed: {e}");
                failed = true;
            }
        }
    }
    if rows.len() >= 2 {
        let path = r.out.join("convergence.csv");
        write_convergence_table(&rows, &path)?;
        let slopes = crate::io::convergence_slopes(&rows)?;
        println!(
            "slopes: l2_mu_error {:.4}, w1_error {:.4}",
            slopes.l2_mu_error, slopes.w1_error
        );
    } else {
        eprintln!("fewer than two levels finished; no convergence table written");
        failed = true;
    }
    if !spectra.is_empty() {
        let path = r.out.join("spectrum.csv");
        std::fs::create_dir_all(&r.out).map_err(|e| Error::io(&r.out, e))?;
        std::fs::write(&path, spectrum_table(&spectra)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(if failed { 2 } else { 0 })
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let res = match &cli.command {
        Command::Solve(a) => cmd_solve(a),
        Command::Study(a) => cmd_study(a),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
