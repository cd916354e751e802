//! Command-line runner: TOML config in, CSV tables and a text report out.

pub mod config;
pub mod run;

use crate::error::Error;
use crate::report::Table;
use crate::verify::{metrics_table, run_all, VerifyConfig};
use clap::{Parser, Subcommand};
use config::{ExperimentConfig, ExperimentKind};
use run::Check;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(name = "conelab", version, about = "Blow-up weights, singular spectra and decay expansions on spherical caps")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML config file; defaults are used without one.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory for CSV tables and report.txt.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Number of grid levels (each doubles the interior node count).
    #[arg(long, global = true)]
    pub refine: Option<usize>,
    /// Seed of the randomized property checks in verify-all.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Blow-up profile and weight with bound diagnostics.
    Rho,
    /// Eigenpairs of the singular operator per azimuthal sector.
    Spectrum,
    /// Boundary exponents of Fredholm solves with power-law sources.
    Fredholm,
    /// Cylinder solve of the difference field and its decay rates.
    Solve,
    /// Expansion extraction and remainder rate.
    Expand,
    /// The full acceptance suite.
    VerifyAll,
}

pub const EXIT_OK: u8 = 0;
pub const EXIT_CRITERION: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_SOLVER: u8 = 3;

impl Command {
    fn kind(self) -> Option<ExperimentKind> {
        match self {
            Command::Rho => Some(ExperimentKind::Rho),
            Command::Spectrum => Some(ExperimentKind::Spectrum),
            Command::Fredholm => Some(ExperimentKind::FredholmDecay),
            Command::Solve => Some(ExperimentKind::ConeSolve),
            Command::Expand => Some(ExperimentKind::Expansion),
            Command::VerifyAll => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Command::Rho => "rho",
            Command::Spectrum => "spectrum",
            Command::Fredholm => "fredholm",
            Command::Solve => "solve",
            Command::Expand => "expand",
            Command::VerifyAll => "verify-all",
        }
    }
}

/// Outcome of a run, before it is mapped to an exit code.
#[derive(Debug)]
pub struct Outcome {
    pub out_dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub failures: usize,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        _ => EXIT_SOLVER,
    }
}

/// Parses arguments, runs, and reports on stderr.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(&cli) {
        Ok(o) => {
            eprintln!("wrote {} files to {}", o.files.len(), o.out_dir.display());
            if o.failures > 0 {
                eprintln!("{} checks failed; see {}", o.failures, o.out_dir.join("report.txt").display());
                ExitCode::from(EXIT_CRITERION)
            } else {
                ExitCode::from(EXIT_OK)
            }
        }
        Err(e) => {
            eprintln!("conelab {}: {e}", cli.command.name());
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_source(path: Option<&Path>) -> crate::Result<Option<String>> {
    path.map(|p| std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))).transpose()
}

pub fn execute(cli: &Cli) -> crate::Result<Outcome> {
    let source = load_source(cli.config.as_deref())?;
    let config_name = cli.config.as_ref().map_or("<defaults>".to_string(), |p| p.display().to_string());
    match cli.command.kind() {
        None => {
            if cli.refine.is_some() {
                return Err(Error::Config("--refine applies to experiment verbs, not verify-all".into()));
            }
            let mut cfg: VerifyConfig = match &source {
                Some(s) => toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?,
                None => VerifyConfig::default(),
            };
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let canonical = toml::to_string(&cfg).map_err(|e| Error::Config(e.to_string()))?;
            let out_dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
            let reports = run_all(&cfg);
            let mut text = header("verify-all", &config_name, &canonical);
            writeln!(text, "settings:").unwrap();
            for line in canonical.lines() {
                writeln!(text, "  {line}").unwrap();
            }
            writeln!(text).unwrap();
            for r in &reports {
                writeln!(text, "{}", r.summary()).unwrap();
                for m in &r.metrics {
                    let status = if m.pass { "PASS" } else { "FAIL" };
                    writeln!(text, "    {status} {} = {:.6e} (tolerance {}, grid {})", m.name, m.value, m.tolerance, m.grid).unwrap();
                }
            }
            let failures = reports.iter().filter(|r| !r.pass()).count();
            writeln!(text, "\n{} of {} criteria passed", reports.len() - failures, reports.len()).unwrap();
            let files = write_outputs(&out_dir, &[metrics_table(&reports)], &text)?;
            for r in &reports {
                println!("{}", r.summary());
            }
            Ok(Outcome { out_dir, files, failures })
        }
        Some(kind) => {
            let mut cfg = match &source {
                Some(s) => ExperimentConfig::parse(s)?,
                None => ExperimentConfig::default(),
            };
            if let Some(k) = cfg.kind {
                if k != kind && k != ExperimentKind::Sweep {
                    return Err(Error::Config(format!("config kind {k:?} does not match verb {}", cli.command.name())));
                }
            }
            if let Some(r) = cli.refine {
                cfg.grid.refinements = r;
                cfg.validate()?;
            }
            let canonical = toml::to_string(&cfg).map_err(|e| Error::Config(e.to_string()))?;
            let out_dir = cli.out.clone().or_else(|| cfg.output.clone().map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("out"));
            let outputs = run::run(kind, &cfg)?;
            let (tables, checks) = run::merge(outputs);
            let text = experiment_report(cli.command.name(), &config_name, &canonical, &cfg, &checks);
            let files = write_outputs(&out_dir, &tables, &text)?;
            let failures = checks.iter().filter(|c| !c.metric.pass).count();
            Ok(Outcome { out_dir, files, failures })
        }
    }
}

fn header(verb: &str, config_name: &str, canonical: &str) -> String {
    let mut s = String::new();
    writeln!(s, "conelab {verb}").unwrap();
    writeln!(s, "config: {config_name}").unwrap();
    writeln!(s, "config sha256: {}", ExperimentConfig::hash(canonical)).unwrap();
    s
}

fn experiment_report(verb: &str, config_name: &str, canonical: &str, cfg: &ExperimentConfig, checks: &[Check]) -> String {
    let mut s = header(verb, config_name, canonical);
    let cases = cfg.cases();
    writeln!(s, "cases: {}", cases.len()).unwrap();
    for c in &cases {
        let grids: Vec<String> = (0..cfg.grid.refinements).map(|j| (c.interior << j).to_string()).collect();
        writeln!(s, "  {} n={} theta0={:.16e} interior={}", c.label(), c.n, c.theta0, grids.join(",")).unwrap();
    }
    writeln!(
        s,
        "tolerances: lock_tol={:e} fredholm.rel_tol={} cylinder.rel_tol={} expansion.rel_tol={} expansion.res_tol={:e}",
        cfg.schedule.lock_tol, cfg.fredholm.rel_tol, cfg.cylinder.rel_tol, cfg.expansion.rel_tol, cfg.expansion.res_tol
    )
    .unwrap();
    writeln!(s, "time grid: ht={} t_max={}", cfg.cylinder.ht, cfg.cylinder.t_max).unwrap();
    writeln!(s).unwrap();
    for c in checks {
        let m = &c.metric;
        let status = if m.pass { "PASS" } else { "FAIL" };
        writeln!(s, "{status} [{}] {} = {:.6e} (tolerance {}, grid {})", c.case, m.name, m.value, m.tolerance, m.grid).unwrap();
    }
    let failed = checks.iter().filter(|c| !c.metric.pass).count();
    writeln!(s, "\n{} of {} checks passed", checks.len() - failed, checks.len()).unwrap();
    s
}

/// Single collector: tables in order, then the report.
fn write_outputs(dir: &Path, tables: &[Table], report: &str) -> crate::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    for t in tables {
        files.push(t.write(dir)?);
    }
    let path = dir.join("report.txt");
    std::fs::write(&path, report)?;
    files.push(path);
    Ok(files)
}
