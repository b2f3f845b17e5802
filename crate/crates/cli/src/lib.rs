//! `stochwave` command-line front end.
//!
//! A thin shell over the library: every subcommand maps onto one library
//! call. Exit codes: 0 success, 1 validation failure, 2 usage or config
//! error, 3 numeric failure.

pub mod config;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use stochwave::harness::{summary, ExperimentConfig};
use stochwave::scheme::{run_path, PathNoise};
use stochwave::{
    assemble_operators, build_noise_factor, build_stepper, build_uniform_mesh, builtin_experiment,
    derive_stream, emit_report, predict_rates, run_convergence_experiment, ErrorColumn,
    FemFunction, StreamSpec,
};

use crate::config::{parse_config, CliConfig, ConfigError, SimulationSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Environment fallback for the worker count.
pub const WORKERS_ENV: &str = "STOCHWAVE_WORKERS";

#[derive(Debug, Parser)]
#[command(
    name = "stochwave",
    version,
    about = "Finite element / rational time stepping for the stochastic wave equation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one path and write snapshots.csv (time,x,u,v).
    Simulate(RunArgs),
    /// Run a Monte Carlo convergence experiment and write its report.
    Convergence(RunArgs),
    /// Run the invariant suite and print a pass/fail table.
    Validate,
    /// Print the predicted convergence exponents.
    PredictRates(SourceArgs),
}

#[derive(Debug, Args, Clone)]
pub struct SourceArgs {
    /// TOML configuration file.
    #[arg(long, conflicts_with = "builtin")]
    pub config: Option<PathBuf>,
    /// Built-in experiment name.
    #[arg(long)]
    pub builtin: Option<String>,
}

#[derive(Debug, Args, Clone)]
pub struct RunArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Master seed (overrides the configuration).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (overrides mc.workers and STOCHWAVE_WORKERS).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Monte Carlo sample count (overrides the configuration).
    #[arg(long)]
    pub samples: Option<usize>,
    /// Comma-separated snapshot times for `simulate` (default: final time).
    #[arg(long, value_delimiter = ',')]
    pub snapshot_times: Option<Vec<f64>>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Numeric(String),
    Validation,
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<stochwave::Error> for Failure {
    fn from(e: stochwave::Error) -> Self {
        if e.is_numeric() {
            Failure::Numeric(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(Failure::Validation) => EXIT_VALIDATION,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Numeric(msg)) => {
            eprintln!("numeric failure: {msg}");
            EXIT_NUMERIC
        }
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Simulate(args) => simulate(&args),
        Command::Convergence(args) => convergence(&args),
        Command::Validate => validate(),
        Command::PredictRates(source) => predict(&source),
    }
}

fn load_config(path: &Path) -> Result<CliConfig, Failure> {
    let text =
        fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    parse_config(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

enum Source {
    Config(CliConfig),
    Builtin(ExperimentConfig),
}

fn source(args: &SourceArgs) -> Result<Source, Failure> {
    match (&args.config, &args.builtin) {
        (Some(path), None) => Ok(Source::Config(load_config(path)?)),
        (None, Some(name)) => Ok(Source::Builtin(builtin_experiment(name)?)),
        _ => Err(Failure::Usage(
            "exactly one of --config or --builtin is required".into(),
        )),
    }
}

fn resolve_workers(
    flag: Option<usize>,
    configured: Option<usize>,
) -> Result<Option<usize>, Failure> {
    if flag.is_some() || configured.is_some() {
        return Ok(flag.or(configured));
    }
    match std::env::var(WORKERS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::Usage(format!("{WORKERS_ENV} = `{v}` is not a worker count"))),
        Err(_) => Ok(None),
    }
}

fn out_dir(flag: &Option<PathBuf>, config: Option<&CliConfig>, default: &str) -> PathBuf {
    flag.clone()
        .or_else(|| config.and_then(|c| c.output_dir().map(Path::to_path_buf)))
        .unwrap_or_else(|| PathBuf::from(default))
}

fn convergence(args: &RunArgs) -> Result<(), Failure> {
    let (mut experiment, config) = match source(&args.source)? {
        Source::Config(c) => (c.experiment()?, Some(c)),
        Source::Builtin(e) => (e, None),
    };
    if let Some(seed) = args.seed {
        experiment.mc.master_seed = seed;
    }
    if let Some(n) = args.samples {
        experiment.mc.n_samples = n;
    }
    if let Some(w) = resolve_workers(args.workers, config.as_ref().and_then(|c| c.workers()))? {
        experiment.mc.workers = w;
    }
    let dir = out_dir(&args.out, config.as_ref(), "stochwave-run");
    let report = run_convergence_experiment(&experiment)?;
    emit_report(&report, &dir)?;
    print!("{}", summary(&report));
    println!("report written to {}", dir.display());
    Ok(())
}

fn simulation_from_builtin(e: &ExperimentConfig) -> Result<SimulationSpec, Failure> {
    let n = (1.0 / e.reference.h).round() as usize;
    Ok(SimulationSpec {
        n_elements: n,
        dt: e.reference.dt,
        t_final: e.t_final,
        noise: e.noise,
        drift: e.drift,
        method: e.method,
        initial: e.initial,
        seed: e.mc.master_seed,
    })
}

fn simulate(args: &RunArgs) -> Result<(), Failure> {
    let (mut spec, config) = match source(&args.source)? {
        Source::Config(c) => (c.simulation()?, Some(c)),
        Source::Builtin(e) => (simulation_from_builtin(&e)?, None),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let mesh = build_uniform_mesh(spec.n_elements)?;
    let ops = Arc::new(assemble_operators(&mesh)?);
    let stepper = build_stepper(spec.method, ops.clone(), spec.dt)?;
    let initial = spec.initial.project(&ops)?;
    let times = args
        .snapshot_times
        .clone()
        .unwrap_or_else(|| vec![spec.t_final]);
    let factor = spec
        .noise
        .map(|n| build_noise_factor(&mesh, &ops, n))
        .transpose()?;
    let mut rng = derive_stream(StreamSpec::new(spec.seed, 0, 0));
    let noise = match &factor {
        Some(factor) => PathNoise::Sampled {
            factor,
            rng: &mut rng,
        },
        None => PathNoise::None,
    };
    let drift = (!spec.drift.is_zero()).then_some(spec.drift);
    let mut records: Vec<(f64, Vec<f64>, Vec<f64>)> = Vec::new();
    run_path(
        &stepper,
        drift.as_ref(),
        initial,
        spec.t_final,
        noise,
        &times,
        |s| {
            let u = FemFunction::new(&mesh, s.u.clone()).expect("state on mesh");
            let v = FemFunction::new(&mesh, s.v.clone()).expect("state on mesh");
            records.push((
                s.time,
                u.nodal_values_with_boundary(),
                v.nodal_values_with_boundary(),
            ));
        },
    )?;

    let dir = out_dir(&args.out, config.as_ref(), ".");
    fs::create_dir_all(&dir).map_err(|e| Failure::Usage(format!("{}: {e}", dir.display())))?;
    let path = dir.join("snapshots.csv");
    let io = |e: csv::Error| Failure::Usage(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(&path).map_err(io)?;
    w.write_record(["time", "x", "u", "v"]).map_err(io)?;
    for (t, u, v) in &records {
        for (i, x) in mesh.nodes().iter().enumerate() {
            w.serialize((t, x, u[i], v[i])).map_err(io)?;
        }
    }
    w.flush()
        .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    println!("{} snapshots written to {}", records.len(), path.display());
    Ok(())
}

fn validate() -> Result<(), Failure> {
    let checks = stochwave::validation::run_validation_suite();
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    let mut out = std::io::stdout().lock();
    for c in &checks {
        let _ = writeln!(
            out,
            "{:<width$}  {}  {}",
            c.name,
            if c.passed { "PASS" } else { "FAIL" },
            c.detail
        );
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    let _ = writeln!(out, "{} checks, {} failed", checks.len(), failed);
    if failed > 0 {
        Err(Failure::Validation)
    } else {
        Ok(())
    }
}

fn predict(source_args: &SourceArgs) -> Result<(), Failure> {
    let (params, dt_power) = match source(source_args)? {
        Source::Config(c) => {
            let p = c
                .params()?
                .ok_or_else(|| Failure::Usage("config has no [params] section".into()))?;
            let dt_power = c.experiment().map(|e| e.step_rule.dt_power()).ok();
            (p, dt_power)
        }
        Source::Builtin(e) => {
            let p = e.params.ok_or_else(|| {
                Failure::Usage(format!("builtin `{}` has no regularity parameters", e.name))
            })?;
            (p, Some(e.step_rule.dt_power()))
        }
    };
    let r = predict_rates(&params)?;
    println!("r                {:.6}", r.r);
    println!("r' (strong)      {:.6}", r.r_prime_strong);
    println!("r' (weak)        {:.6}", r.r_prime_weak);
    println!(
        "strong  h^{:.6} + dt^{:.6}",
        r.strong_h_exp, r.strong_dt_exp
    );
    println!(
        "negnorm h^{:.6} + dt^{:.6}",
        r.negnorm_h_exp, r.negnorm_dt_exp
    );
    println!(
        "weak    h^{:.6} + h^{:.6} dt^{:.6}",
        r.weak_h_exp, r.h_penalty_exp, r.weak_dt_exp
    );
    if let Some(p) = dt_power {
        println!(
            "slopes vs h at dt = h^{p}: strong {:.6}, weak {:.6}, negnorm {:.6}",
            r.slope_vs_h(ErrorColumn::Strong, p),
            r.slope_vs_h(ErrorColumn::Weak, p),
            r.slope_vs_h(ErrorColumn::Negnorm, p)
        );
    }
    Ok(())
}
