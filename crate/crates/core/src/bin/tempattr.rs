use std::process::ExitCode;

fn main() -> ExitCode {
    tempattr::cli::main()
}
