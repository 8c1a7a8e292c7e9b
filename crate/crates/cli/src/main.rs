mod args;
mod commands;
mod manifest;

use std::process::ExitCode;

use clap::Parser;
use mpfn::{Error, ErrorClass};

use args::{Cli, Command};

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Usage => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numeric => 4,
        ErrorClass::Io => 5,
        ErrorClass::Internal => 70,
    }
}

fn run(cli: &Cli) -> mpfn::Result<ExitCode> {
    let ok = |pass: bool, code: u8| {
        if pass {
            ExitCode::SUCCESS
        } else {
            ExitCode::from(code)
        }
    };
    match &cli.command {
        Command::Train(c) => commands::cmd_train(c).map(|_| ExitCode::SUCCESS),
        Command::Evaluate(c) => commands::cmd_evaluate(c).map(|_| ExitCode::SUCCESS),
        Command::Ensemble(c) => commands::cmd_ensemble(c).map(|_| ExitCode::SUCCESS),
        Command::Ablate(c) => commands::cmd_ablate(c).map(|_| ExitCode::SUCCESS),
        // a failed check is a numeric failure
        Command::Gradcheck(c) => commands::cmd_gradcheck(c).map(|pass| ok(pass, 4)),
        Command::ExportFusion(c) => commands::cmd_export(c).map(|_| ExitCode::SUCCESS),
        Command::Synth(c) => commands::cmd_synth(c).map(|_| ExitCode::SUCCESS),
        Command::Replay(c) => commands::cmd_replay(c).map(|same| ok(same, 1)),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
