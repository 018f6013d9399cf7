use std::process::ExitCode;

fn main() -> ExitCode {
    levelset_core::cli::run(std::env::args_os())
}
