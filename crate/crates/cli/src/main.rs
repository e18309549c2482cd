use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(layerseg_cli::run(std::env::args_os()))
}
