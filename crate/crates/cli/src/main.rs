use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod error;
mod output;

use commands::{convert, eval, numerics, studies, train, transport};
use error::CliResult;

/// Advection-diffusion-reaction graph networks: training, evaluation and studies.
#[derive(Parser, Debug)]
#[command(name = "adrgnn", version = output::version_static(), about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on a graph or temporal dataset.
    Train(train::TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(eval::EvalArgs),
    /// Fit term subsets to the synthetic transport task.
    Transport(transport::TransportArgs),
    /// Relative Dirichlet energy and accuracy against depth.
    Energy(studies::EnergyArgs),
    /// Accuracy of every term subset.
    Ablate(studies::AblateArgs),
    /// Random hyperparameter search.
    Search(studies::SearchArgs),
    /// Operator-splitting discrepancy against step size.
    SplitStudy(numerics::SplitStudyArgs),
    /// Finite-difference gradient checks on the fixture suite.
    Gradcheck(numerics::GradcheckArgs),
    /// Convert an upstream temporal JSON file into a dataset container.
    Convert(convert::ConvertArgs),
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(a) => train::run(a),
        Command::Eval(a) => eval::run(a),
        Command::Transport(a) => transport::run(a),
        Command::Energy(a) => studies::energy(a),
        Command::Ablate(a) => studies::ablate(a),
        Command::Search(a) => studies::search(a),
        Command::SplitStudy(a) => numerics::split_study(a),
        Command::Gradcheck(a) => numerics::gradcheck(a),
        Command::Convert(a) => convert::run(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { error::USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            ExitCode::from(e.code)
        }
    }
}
