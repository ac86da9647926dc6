use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(clinseq::harness::run(std::env::args()) as u8)
}
