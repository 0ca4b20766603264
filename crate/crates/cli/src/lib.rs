//! Command-line driver for the sivit experiments.

pub mod args;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod run;

use std::ffi::OsString;

use clap::{CommandFactory, Parser};

use args::{Cli, Cmd};
use error::{CliError, CliResult, EXIT_OK};

/// Environment variable holding the log filter (`error`, `warn`, `info`, `debug`).
pub const LOG_ENV: &str = "SIVIT_LOG";

/// `--config FILE` as written on the command line, if any.
fn config_flag(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(v) = s.strip_prefix("--config=") {
            return Some(v.into());
        }
    }
    None
}

/// Splices config-file entries between the subcommand and its flags.
fn expand_config(args: Vec<OsString>) -> CliResult<Vec<OsString>> {
    let Some(path) = config_flag(&args) else { return Ok(args) };
    let Some(sub_name) = args.get(1).map(|s| s.to_string_lossy().into_owned()) else { return Ok(args) };
    let cmd = Cli::command();
    let Some(sub) = cmd.find_subcommand(&sub_name) else { return Ok(args) };
    let path = std::path::PathBuf::from(path);
    let flags = config::entries_to_flags(sub, &config::read_config(&path)?, &path)?;
    let mut out = args[..2].to_vec();
    out.extend(flags);
    out.extend_from_slice(&args[2..]);
    Ok(out)
}

pub fn parse(args: Vec<OsString>) -> Result<Cli, CliError> {
    let args = expand_config(args)?;
    Cli::try_parse_from(args).map_err(|e| CliError::Usage(e.to_string()))
}

pub fn dispatch(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Cmd::Generate(a) => commands::generate(a),
        Cmd::Train(a) => commands::train(a),
        Cmd::Replay(a) => commands::replay(a),
        Cmd::Evaluate(a) => commands::evaluate_cmd(a),
        Cmd::Compare(a) => commands::compare(a),
        Cmd::SweepPatch(a) => commands::sweep_patch(a),
        Cmd::Gradcheck(a) => commands::gradcheck(a),
        Cmd::Visualize(a) => commands::visualize(a),
    }
}

/// Runs the CLI and returns the process exit code.
pub fn run(args: Vec<OsString>) -> i32 {
    let cli = match expand_config(args).map(Cli::try_parse_from) {
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
        Ok(Err(e)) => {
            // help and version also arrive here, with exit code 0
            let _ = e.print();
            return e.exit_code();
        }
        Ok(Ok(cli)) => cli,
    };
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn init_logging() {
    let env = env_logger::Env::new().filter_or(LOG_ENV, "info");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).format_target(false).try_init();
}
