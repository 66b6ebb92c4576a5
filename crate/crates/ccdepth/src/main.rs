use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(ccdepth::cli::run(std::env::args()) as u8)
}
