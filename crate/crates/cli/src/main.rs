use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "distill-lab", version, about = "Score distillation vs. DDIM inversion on an analytic diffusion oracle")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML experiment config; flags override its values
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// also write SVG charts
    #[arg(long, global = true)]
    pub svg: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the DDIM sampler and write the trajectory
    Sample(commands::SampleArgs),
    /// Invert a clean sample and write the inversion trajectory
    Invert(commands::InvertArgs),
    /// Fixed-point residual sweep over noise strategies
    Residuals(commands::ResidualsArgs),
    /// Reparametrization and cached-noise equivalence checks
    Equivalence(commands::EquivalenceArgs),
    /// Finite-difference check of the denoised-variable ODE
    OdeCheck(commands::OdeArgs),
    /// One distillation run
    Distill(commands::DistillArgs),
    /// Run the experiment named by a config (or by --name)
    Suite(commands::SuiteArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Sample(a) => commands::sample(a),
        Command::Invert(a) => commands::invert(a),
        Command::Residuals(a) => commands::residuals(a),
        Command::Equivalence(a) => commands::equivalence(a),
        Command::OdeCheck(a) => commands::ode_check(a),
        Command::Distill(a) => commands::distill(a),
        Command::Suite(a) => commands::suite(a),
    };
    match result {
        Ok(commands::Outcome::Pass) => ExitCode::SUCCESS,
        Ok(commands::Outcome::Fail) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
