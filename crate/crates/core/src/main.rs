use std::process::ExitCode;

fn main() -> ExitCode {
    imr::cli::run()
}
