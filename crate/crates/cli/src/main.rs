use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use effcon::algebra::AlgebraError;
use effcon::checks::{run_checks, CheckResult};
use effcon::config::{ConfigError, ModelConfig, SolveMode};
use effcon::constraints::ReductionError;
use effcon::dynamics::DynamicsError;
use effcon::pipeline::{derive, evolve, solve, Model, PipelineError};

#[derive(Parser)]
#[command(name = "effcon", version, about = "Effective constraint reduction and semiclassical evolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Output directory.
    #[arg(long, global = true, default_value = "./out")]
    out: PathBuf,
    /// Solution branch, `+` or `-`.
    #[arg(long, global = true, allow_hyphen_values = true, value_parser = parse_branch)]
    branch: Option<i8>,
    /// Truncation order in half powers of hbar.
    #[arg(long, global = true)]
    half_order: Option<u32>,
    #[arg(long, global = true)]
    mode: Option<Mode>,
    /// Stop integrating at the first monitor violation.
    #[arg(long, global = true)]
    halt_on_violation: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write the truncated constraint functions and gauge conditions.
    Derive { config: PathBuf },
    /// Solve the constraint surface and extract the residual generator.
    Solve { config: PathBuf },
    /// Integrate the effective equations and write the trajectory.
    Evolve { config: PathBuf },
    /// Run the invariant and oracle suites.
    Check { config: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Perturbative,
    Newton,
}

fn parse_branch(s: &str) -> Result<i8, String> {
    effcon::config::parse_branch(s).ok_or_else(|| format!("expected + or -, got `{}`", s))
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Failure { code, message: message.into() }
    }
}

fn config_failure(e: ConfigError) -> Failure {
    match e {
        ConfigError::Algebra(AlgebraError::AlgebraInconsistent(_)) => Failure::new(3, e.to_string()),
        other => Failure::new(2, other.to_string()),
    }
}

fn reduction_code(e: &ReductionError) -> u8 {
    match e {
        ReductionError::NoResidualFlow | ReductionError::MultipleResidualFlows(_) | ReductionError::UnsupportedGenerator(_) => 5,
        _ => 4,
    }
}

fn pipeline_failure(e: PipelineError) -> Failure {
    let code = match &e {
        PipelineError::Config(c) => return config_failure(c.clone()),
        PipelineError::Reduction(r) => reduction_code(r),
        PipelineError::Dynamics(DynamicsError::Reduction(r)) => reduction_code(r),
        PipelineError::Dynamics(DynamicsError::DegenerateClock | DynamicsError::MissingGenerator) => 5,
        PipelineError::Dynamics(_) => 6,
        PipelineError::Poly(_) => 4,
    };
    Failure::new(code, e.to_string())
}

fn load(cli: &Cli, path: &Path) -> Result<Model, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::new(2, format!("{}: {}", path.display(), e)))?;
    let mut cfg = ModelConfig::parse(&text).map_err(config_failure)?;
    apply_overrides(cli, &mut cfg)?;
    Ok(Model::new(cfg))
}

fn apply_overrides(cli: &Cli, cfg: &mut ModelConfig) -> Result<(), Failure> {
    if let Some(h) = cli.half_order {
        if h < 2 {
            return Err(Failure::new(2, "--half-order must be at least 2"));
        }
        cfg.half_order = h;
    }
    if let Some(b) = cli.branch {
        cfg.solve.branch = b;
    }
    if let Some(m) = cli.mode {
        cfg.solve.mode = match m {
            Mode::Perturbative => SolveMode::Perturbative,
            Mode::Newton => SolveMode::Newton,
        };
    }
    if cli.halt_on_violation {
        cfg.evolve.halt_on_violation = true;
    }
    Ok(())
}

fn write(dir: &Path, name: &str, text: &str) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::new(1, format!("{}: {}", dir.display(), e)))?;
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| Failure::new(1, format!("{}: {}", path.display(), e)))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Derive { config } => {
            let model = load(cli, config)?;
            let d = derive(&model);
            write(&cli.out, "constraints.txt", &d.constraints_txt)?;
            write(&cli.out, "gauge.txt", &d.gauge_txt)?;
        }
        Command::Solve { config } => {
            let model = load(cli, config)?;
            let d = derive(&model);
            let s = solve(&model, &d, None).map_err(pipeline_failure)?;
            write(&cli.out, "reduced.txt", &s.report)?;
        }
        Command::Evolve { config } => {
            let model = load(cli, config)?;
            let d = derive(&model);
            let s = solve(&model, &d, None).map_err(pipeline_failure)?;
            match evolve(&model, &s) {
                Ok(tr) => {
                    let mut csv = Vec::new();
                    tr.write_csv(&mut csv).map_err(|e| Failure::new(1, e.to_string()))?;
                    write(&cli.out, "trajectory.csv", &String::from_utf8_lossy(&csv))?;
                    write(&cli.out, "monitor.log", &tr.monitor_log())?;
                }
                Err(e) => {
                    write(&cli.out, "monitor.log", &format!("{}\n", e))?;
                    return Err(pipeline_failure(e));
                }
            }
        }
        Command::Check { config } => {
            let text = fs::read_to_string(config).map_err(|e| Failure::new(2, format!("{}: {}", config.display(), e)))?;
            let results = match ModelConfig::parse(&text) {
                Ok(mut cfg) => {
                    apply_overrides(cli, &mut cfg)?;
                    run_checks(&Model::new(cfg))
                }
                Err(ConfigError::Algebra(e)) => vec![CheckResult::new("algebra", false, e.to_string())],
                Err(e) => return Err(config_failure(e)),
            };
            let failed = results.iter().filter(|r| !r.passed).count();
            for r in &results {
                println!("{}", r.line());
            }
            if failed > 0 {
                return Err(Failure::new(1, format!("{} of {} checks failed", failed, results.len())));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
