use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(promptalign::cli::run(std::env::args_os()))
}
