use std::process::ExitCode;

use clap::Parser;

mod cli;

fn exit_code(err: &anyhow::Error) -> u8 {
    let usage = err.downcast_ref::<cli::UsageError>().is_some()
        || matches!(
            err.downcast_ref::<metok::Error>(),
            Some(metok::Error::Config(_))
        );
    if usage {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let args = match cli::Cli::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match cli::run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
