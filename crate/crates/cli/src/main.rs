mod args;
mod commands;
mod run;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use commands::Ctx;
use negmine_core::Config;

fn load_config(cli: &Cli) -> anyhow::Result<Config> {
    let base = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    commands::resolve_config(base, &cli.command)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = load_config(&cli)?;
    if let Some(n) = cli.jobs.filter(|n| *n > 0) {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let ctx = Ctx { config, jobs: cli.jobs };
    match &cli.command {
        Command::Generate(a) => commands::generate(&ctx, a),
        Command::Filter(a) => commands::filter(&ctx, a),
        Command::Train(a) => commands::train(&ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::Stats(a) => commands::stats(&ctx, a),
        Command::Serve(a) => commands::serve(&ctx, a),
        Command::Export(a) => commands::export(&ctx, a),
        Command::Fixtures(a) => commands::fixtures(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
