//! `waypoint`: train, evaluate, ablate, plot and serve.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 for
//! runtime failures.

mod ablate;
mod args;
mod eval;
mod failure;
mod output;
mod plot;
mod svg;
mod train;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use crate::args::{Cli, Command};
use crate::failure::Failure;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train(a) => train::run(&cli.out, a),
        Command::Eval(a) => eval::run(&cli.out, a),
        Command::Ablate(a) => ablate::run(&cli.out, a),
        Command::Plot(a) => plot::run(a),
        Command::Serve(a) => serve(a),
    }
}

fn serve(a: args::ServeArgs) -> Result<(), Failure> {
    if !a.checkpoint_root.is_dir() {
        return Err(Failure::usage(format!(
            "checkpoint root {} is not a directory",
            a.checkpoint_root.display()
        )));
    }
    let cfg = waypoint_service::ServiceConfig {
        checkpoint_root: a.checkpoint_root,
        max_sessions: a.max_sessions,
        ..Default::default()
    };
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(Failure::runtime)?;
    rt.block_on(waypoint_service::serve(a.addr, cfg)).map_err(Failure::runtime)
}
