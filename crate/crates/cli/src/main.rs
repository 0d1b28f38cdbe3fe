use std::io::{self, Write};
use std::process::ExitCode;

use clap::Parser;
use fsaa_cli::args::{Cli, Command};
use fsaa_cli::commands;
use fsaa_cli::Result;

fn run(cli: &Cli) -> Result<bool> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match &cli.command {
        Command::Train(a) => commands::run_train(a, &mut out).map(|_| true),
        Command::Eval(a) => commands::run_eval(a, &mut out).map(|_| true),
        Command::Visualize(a) => commands::run_visualize(a, &mut out).map(|_| true),
        Command::Gradcheck(a) => commands::run_gradcheck(a, &mut out),
        Command::Ablate(a) => commands::run_ablate(a, &mut out, &mut io::stderr()).map(|_| true),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            let _ = writeln!(io::stderr(), "error: gradient check failed");
            ExitCode::from(1)
        }
        Err(e) => {
            let _ = writeln!(io::stderr(), "error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
