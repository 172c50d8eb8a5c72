use std::process::ExitCode;

use clap::Parser;

mod commands;

use commands::{Cli, CommandError};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .format_target(false)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

impl CommandError {
    fn exit_code(&self) -> u8 {
        use ynet_core::Error;
        match self {
            CommandError::Core(Error::Config(_) | Error::Usage(_)) => 1,
            CommandError::Core(Error::Format(_) | Error::Io { .. }) => 2,
            CommandError::Core(Error::NonFinite(_)) => 3,
            CommandError::CheckFailed(_) => 3,
        }
    }
}
