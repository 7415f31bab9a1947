mod args;
mod error;
mod offline;
mod review;
mod setup;

use std::process::ExitCode;

use clap::Parser;
use tracing_subscriber::EnvFilter;

use args::{Cli, Command};
use error::CliResult;

fn run(cli: &Cli) -> CliResult<serde_json::Value> {
    let config = || setup::load_config(cli.config.as_deref());
    match &cli.command {
        Command::Ingest(a) => offline::ingest(&config()?, a),
        Command::GenSftSeed(a) => review::gen_seed(&config()?, a),
        Command::SampleCandidates(a) => offline::sample(&config()?, a),
        Command::BuildPairs(a) => offline::build(&config()?, a),
        Command::Balance(a) => offline::balance(&config()?, a),
        Command::TrainDpo(a) => offline::train_dpo(&config()?, a),
        Command::RunCdpo(a) => offline::run_cdpo(&config()?, a),
        Command::Evaluate(a) => offline::evaluate(&config()?, a),
        Command::Export(a) => review::export(a),
        Command::ServeReview(a) => review::serve(a),
        Command::DemoToy(a) => offline::demo_toy(&config()?, a),
        Command::Review(a) => review::review(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(EnvFilter::try_from_env("RECAP_LOG").unwrap_or_else(|_| EnvFilter::new("info")))
        .init();
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
