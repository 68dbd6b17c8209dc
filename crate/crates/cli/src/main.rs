//! `falconer`: plan, run, generate supervision for and evaluate knowledge
//! mining pipelines.
//!
//! Exit codes: 0 ok, 1 internal error, 2 validation failure, 3 planner
//! failure, 4 backend unreachable, 5 bad arguments.

mod args;
mod backend;
mod commands;
mod config;
mod exit;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use serde_json::json;

use args::{Cli, Command};
use commands::Ctx;
use config::FileConfig;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(exit::BAD_ARGS),
            };
        }
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let json = cli.json;
    match dispatch(cli) {
        Ok(summary) => {
            if json {
                println!("{}", summary.to_json());
            }
            ExitCode::from(summary.code)
        }
        Err(err) => {
            let code = exit::classify(&err);
            log::error!("{err:#}");
            if json {
                println!(
                    "{}",
                    json!({"status": "error", "artifacts": [], "exit_code": code, "error": format!("{err:#}")})
                );
            }
            ExitCode::from(code)
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<commands::Summary> {
    let config = FileConfig::load(cli.config.as_deref())?;
    let ctx = Ctx {
        json: cli.json,
        seed: cli.seed.or(config.seed).unwrap_or(0),
        config,
    };
    match cli.command {
        Command::Plan(a) => commands::plan(&ctx, a),
        Command::Validate(a) => commands::validate(&ctx, a),
        Command::Run(a) => commands::run(&ctx, a),
        Command::Generate(a) => commands::generate(&ctx, a),
        Command::Degrade(a) => commands::degrade(&ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::ScorePlans(a) => commands::score_plans(&ctx, a),
    }
}
