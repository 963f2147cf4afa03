use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(secret_ballot::cli::run(std::env::args_os()))
}
