mod args;
mod commands;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{CommandFactory, Parser};

use args::Cli;

fn usage_error(message: &str) -> ExitCode {
    let mut cmd = Cli::command();
    eprintln!("asdkit: {message}\n\n{}", cmd.render_usage());
    ExitCode::from(2)
}

fn main() -> ExitCode {
    let argv = match args::merge_config(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => return usage_error(&format!("{e:#}")),
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(2),
            };
        }
    };
    if let Some(n) = cli.threads.filter(|&n| n > 0) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("asdkit: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if !e.is::<commands::Findings>() {
                eprintln!("asdkit: {e:#}");
            }
            ExitCode::from(1)
        }
    }
}
