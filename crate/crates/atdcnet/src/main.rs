use std::process::ExitCode;

fn main() -> ExitCode {
    atdcnet::cli::run()
}
