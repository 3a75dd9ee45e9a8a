use std::process::ExitCode;

fn main() -> ExitCode {
    match atlascrf::cli::run(std::env::args_os()) {
        Ok(()) => ExitCode::SUCCESS,
        // Help and version text were already printed.
        Err(atlascrf::Error::Config(msg)) if msg.is_empty() => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", atlascrf::cli::error_json(&e));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
