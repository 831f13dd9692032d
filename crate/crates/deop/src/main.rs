use std::io::{self, Write};
use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut stdout = io::stdout().lock();
    let outcome = match deop::cli::run(std::env::args_os(), &mut stdout) {
        Ok(outcome) => outcome,
        // prints usage; exits 2 on bad usage, 0 for --help
        Err(e) => e.exit(),
    };
    let _ = stdout.flush();
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {line}", e.kind());
            ExitCode::FAILURE
        }
    }
}
