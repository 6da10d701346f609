use std::process::ExitCode;

fn main() -> ExitCode {
    verispec::cli::run(std::env::args_os())
}
