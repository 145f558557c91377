use std::process::ExitCode;

fn main() -> ExitCode {
    cotlab::cli::main_with_args(std::env::args_os())
}
