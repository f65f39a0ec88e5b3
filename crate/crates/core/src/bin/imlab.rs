use std::process::ExitCode;

fn main() -> ExitCode {
    match imlab::cli::run() {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(imlab::cli::exit_code(&e) as u8)
        }
    }
}
