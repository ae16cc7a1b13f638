use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = squelchsim::Cli::parse();
    match squelchsim::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("squelchsim: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
