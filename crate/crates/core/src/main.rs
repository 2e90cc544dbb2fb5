use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use jumphjb::cli::{self, Model, RunConfig};
use jumphjb::Result;

#[derive(Parser)]
#[command(
    name = "jumphjb",
    version,
    about = "Threshold stopping of a jump-diffusion: closed-form value function and Monte Carlo check"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the value function and write the model file.
    Solve(ConfigArgs),
    /// Evaluate a model file at points or on a log grid (CSV).
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Comma-separated points.
        #[arg(long, conflicts_with = "grid")]
        points: Option<String>,
        /// Log-spaced grid `lo:hi:n`.
        #[arg(long)]
        grid: Option<String>,
    },
    /// Residual and knot-gap diagnostics for a model file.
    Check {
        #[arg(long)]
        model: PathBuf,
    },
    /// Monte Carlo estimate under the model's threshold policy.
    Simulate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Solve the boundary conditions, report them and write the model file.
    FitBoundary(ConfigArgs),
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the configured depth.
    #[arg(long)]
    depth: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(d) = self.depth {
            cfg.solve.depth = d;
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<i32> {
    let mut stdout = std::io::stdout().lock();
    match cli.command {
        Command::Solve(args) => cli::cmd_solve(&args.load()?, args.out.as_deref(), &mut stdout),
        Command::FitBoundary(args) => {
            cli::cmd_fit_boundary(&args.load()?, args.out.as_deref(), &mut stdout)
        }
        Command::Eval {
            model,
            points,
            grid,
        } => {
            let model = Model::load(&model)?;
            let xs = cli::parse_points(points.as_deref(), grid.as_deref())?;
            cli::cmd_eval(&model, &xs, &mut stdout)
        }
        Command::Check { model } => cli::cmd_check(&Model::load(&model)?, &mut stdout),
        Command::Simulate {
            config,
            model,
            seed,
            threads,
        } => {
            let mut cfg = config.load()?;
            if let (Some(seed), Some(sim)) = (seed, cfg.simulate.as_mut()) {
                sim.seed = seed;
            }
            let model = Model::load(&model)?;
            cli::cmd_simulate(&cfg, &model, config.out.as_deref(), threads, &mut stdout)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
