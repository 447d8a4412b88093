use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mimpc_cli::commands;
use mimpc_cli::{CliError, RunConfig};

#[derive(Parser)]
#[command(name = "mimpc", version, about = "Actor-critic learning of mixed-integer MPC policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; the built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of RL steps.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train from theta0 and write the run directory.
    Train(Common),
    /// Print branch values, probabilities and inputs at one state.
    Solve {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        state: f64,
        /// Parameter overrides on theta0, e.g. `c=2,b=0.01`.
        #[arg(long, allow_hyphen_values = true)]
        theta: Option<String>,
        /// Write the query on this many states of [-1, 1] to `policy_sweep.csv` in --out.
        #[arg(long)]
        sweep: Option<usize>,
    },
    /// Check sensitivities against finite differences and compare the two gradient estimates.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, hide = true)]
        corrupt_jacobian: bool,
    },
    /// Monte-Carlo closed-loop cost of the policy at theta0 (or overrides).
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, allow_hyphen_values = true)]
        theta: Option<String>,
        #[arg(long)]
        rollouts: Option<usize>,
        /// Disable exploration.
        #[arg(long)]
        deterministic: bool,
    },
}

fn load(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(n) = common.steps {
        cfg.train.steps = n;
    }
    if let Some(o) = &common.out {
        cfg.output = Some(o.clone());
    }
    if let Err(issue) = cfg.validate() {
        return Err(CliError::Validation(format!("{}: {}", issue.key, issue.message)));
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(common) => {
            let cfg = load(&common)?;
            let out = cfg.output.clone().unwrap_or_else(|| PathBuf::from("runs").join(format!("seed-{}", cfg.seed)));
            let r = commands::train(&cfg, &out)?;
            println!(
                "J(theta0) = {} +- {}\nJ(theta_S) = {} +- {}\nratio {}\nfinal theta {:?}\nmanifest {} in {}",
                r.j0.mean,
                r.j0.stderr,
                r.j_final.mean,
                r.j_final.stderr,
                r.ratio(),
                r.log.final_theta.to_array(),
                r.manifest.hash,
                out.display()
            );
        }
        Command::Solve { common, state, theta, sweep } => {
            let cfg = load(&common)?;
            let th = commands::theta_overrides(&cfg.theta0, theta.as_deref().unwrap_or(""))?;
            match sweep {
                Some(n) => {
                    let dir = cfg.output.clone().unwrap_or_else(|| PathBuf::from("."));
                    std::fs::create_dir_all(&dir)?;
                    let path = dir.join("policy_sweep.csv");
                    commands::solve_sweep(&cfg, &th, -1.0, 1.0, n, &path)?;
                    println!("wrote {}", path.display());
                }
                None => print!("{}", commands::solve(&cfg, &th, state)?.render()),
            }
        }
        Command::Gradcheck { common, corrupt_jacobian } => {
            let cfg = load(&common)?;
            let opts = mimpc_cli::core::gradcheck::GradcheckOptions { corrupt_jacobian, ..cfg.gradcheck };
            let report = commands::gradcheck(&cfg, &opts)?;
            print!("{}", commands::render_gradcheck(&report));
            if !report.passed() {
                return Err(CliError::Numerical("gradient check failed".into()));
            }
        }
        Command::Evaluate { common, theta, rollouts, deterministic } => {
            let mut cfg = load(&common)?;
            cfg.evaluation.deterministic |= deterministic;
            let th = commands::theta_overrides(&cfg.theta0, theta.as_deref().unwrap_or(""))?;
            let r = rollouts.unwrap_or(cfg.evaluation.rollouts);
            let est = commands::estimate_performance(&cfg, &th, r, 0)?;
            println!("J = {} +- {} ({} rollouts)", est.mean, est.stderr, est.rollouts);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
