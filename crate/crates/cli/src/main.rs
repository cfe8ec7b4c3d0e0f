use std::process::ExitCode;

fn main() -> ExitCode {
    dgb_cli::app::main_with_args(std::env::args_os())
}
