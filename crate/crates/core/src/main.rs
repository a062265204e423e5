use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(ntxb::cli::run(std::env::args_os()))
}
