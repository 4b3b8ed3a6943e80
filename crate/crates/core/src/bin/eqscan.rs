use std::process::ExitCode;

fn main() -> ExitCode {
    eqscan::harness::cli::run()
}
