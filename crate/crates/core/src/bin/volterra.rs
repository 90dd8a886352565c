use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use env_logger::{Builder, Env};
use log::{error, info};

use volterra_core::run::{exit_code, run, write_outputs, Command, GridSpec, JobStatus, RunConfig};
use volterra_core::stochastic::ModelSpec;
use volterra_core::Error;

#[derive(Parser, Debug)]
#[command(name = "volterra", version, about = "Stochastic Volterra equations on an infinite horizon")]
struct Cli {
    /// JSON job description.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Seed for the Monte Carlo ensemble; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// `HORIZON,STEPS`, overrides the configuration.
    #[arg(long, global = true, value_parser = parse_grid)]
    grid: Option<GridSpec>,
    /// `tree` or `mc:PATHS`, overrides the configuration.
    #[arg(long, global = true, value_parser = parse_ensemble)]
    ensemble: Option<EnsembleArg>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Cmd {
    /// Critical weights and margins for a set of kernels.
    Domain,
    /// Forward equation on the ensemble.
    SimulateSvie,
    /// Backward equation by Picard iteration.
    SolveBsvie,
    /// Pairing identity between a linear forward equation and its adjoint.
    CheckDuality,
    /// Closed-form representation of a linear backward equation.
    Voc,
    /// Reduction of a backward Volterra solution to a backward SDE.
    BsdeReduce,
    /// Projected-gradient control optimization.
    Optimize,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Domain => Command::Domain,
            Cmd::SimulateSvie => Command::SimulateSvie,
            Cmd::SolveBsvie => Command::SolveBsvie,
            Cmd::CheckDuality => Command::CheckDuality,
            Cmd::Voc => Command::Voc,
            Cmd::BsdeReduce => Command::BsdeReduce,
            Cmd::Optimize => Command::Optimize,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum EnsembleArg {
    Tree,
    Mc(usize),
}

fn parse_grid(s: &str) -> Result<GridSpec, String> {
    let (t, n) = s.split_once(',').ok_or("expected HORIZON,STEPS")?;
    let horizon = t.trim().parse::<f64>().map_err(|e| format!("horizon: {e}"))?;
    let steps = n.trim().parse::<usize>().map_err(|e| format!("steps: {e}"))?;
    Ok(GridSpec { horizon, steps })
}

fn parse_ensemble(s: &str) -> Result<EnsembleArg, String> {
    match s.split_once(':') {
        None if s == "tree" => Ok(EnsembleArg::Tree),
        Some(("mc", m)) => m.parse().map(EnsembleArg::Mc).map_err(|e| format!("paths: {e}")),
        _ => Err("expected 'tree' or 'mc:PATHS'".into()),
    }
}

fn load(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_json(&std::fs::read_to_string(path)?)?,
        None => RunConfig {
            command: None,
            grid: GridSpec { horizon: 1.0, steps: 8 },
            ensemble: ModelSpec::Tree,
            problem: serde_json::Value::Object(Default::default()),
        },
    };
    let cmd = Command::from(cli.command);
    if let Some(c) = cfg.command {
        if c != cmd {
            log::warn!("configuration names '{}', running '{}'", c.name(), cmd.name());
        }
    }
    cfg.command = Some(cmd);
    if let Some(g) = cli.grid {
        cfg.grid = g;
    }
    match cli.ensemble {
        Some(EnsembleArg::Tree) => cfg.ensemble = ModelSpec::Tree,
        Some(EnsembleArg::Mc(paths)) => {
            let (seed, dim) = match cfg.ensemble {
                ModelSpec::MonteCarlo { seed, dim, .. } => (seed, dim),
                ModelSpec::Tree => (0, 1),
            };
            cfg.ensemble = ModelSpec::MonteCarlo { paths, seed, dim };
        }
        None => {}
    }
    if let (Some(s), ModelSpec::MonteCarlo { seed, .. }) = (cli.seed, &mut cfg.ensemble) {
        *seed = s;
    }
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<JobStatus, Error> {
    let cfg = load(cli)?;
    info!("running {} on grid T = {}, N = {}", cfg.command.unwrap().name(), cfg.grid.horizon, cfg.grid.steps);
    let job = run(&cfg)?;
    let manifest = write_outputs(&cfg, &job, &cli.out)?;
    for f in &manifest.outputs {
        info!("wrote {}", cli.out.join(&f.name).display());
    }
    println!("{}", serde_json::to_string_pretty(&job.summary).unwrap_or_default());
    Ok(job.status)
}

fn main() -> ExitCode {
    Builder::from_env(Env::new().filter_or("VOLTERRA_LOG", "warn")).init();
    // Usage errors share code 1 with other input errors; 2 is reserved for inadmissibility.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            error!("thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match execute(&cli) {
        Ok(JobStatus::Ok) => ExitCode::SUCCESS,
        Ok(JobStatus::Inadmissible) => {
            error!("parameters are outside the admissible domain");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
