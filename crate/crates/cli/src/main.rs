mod args;
mod commands;
mod failure;

use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;
use serde::Serialize;

use args::{Cli, Command, Layered};
use commands::Run;
use failure::Failure;

/// Written for every command so that a run can be repeated exactly.
#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config: serde_json::Value,
    seed: Option<u64>,
    inputs: &'a [std::path::PathBuf],
    outputs: &'a [std::path::PathBuf],
    version: &'static str,
    exit_code: u8,
    duration_secs: f64,
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("MILATTN_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| Failure::usage(format!("MILATTN_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure::usage(format!("cannot configure {threads} threads: {e}")))
}

fn dispatch<A, F>(name: &str, args: A, run: F) -> Result<u8, Failure>
where
    A: Layered,
    F: FnOnce(&A) -> Result<Run, Failure>,
{
    let started = Instant::now();
    let resolved = args.resolve()?;
    let outcome = run(&resolved)?;
    let manifest = RunManifest {
        command: name,
        config: serde_json::to_value(&resolved)?,
        seed: outcome.seed,
        inputs: &outcome.inputs,
        outputs: &outcome.outputs,
        version: env!("CARGO_PKG_VERSION"),
        exit_code: outcome.exit,
        duration_secs: started.elapsed().as_secs_f64(),
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    match &outcome.manifest {
        Some(path) => milattn::fsutil::write_atomic(path, json.as_bytes())?,
        None => eprint!("{json}"),
    }
    Ok(outcome.exit)
}

fn run(cli: Cli) -> Result<u8, Failure> {
    configure_threads()?;
    match cli.command {
        Command::GenData(a) => dispatch("gen-data", a, commands::gen_data),
        Command::Train(a) => dispatch("train", a, commands::train),
        Command::Finetune(a) => dispatch("finetune", a, commands::finetune),
        Command::Predict(a) => dispatch("predict", a, commands::predict),
        Command::Eval(a) => dispatch("eval", a, commands::eval),
        Command::Ensemble(a) => dispatch("ensemble", a, commands::ensemble),
        Command::Gradcheck(a) => dispatch("gradcheck", a, commands::gradcheck),
        Command::InspectAttention(a) => dispatch("inspect-attention", a, commands::inspect_attention),
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {f}");
            if f.code == failure::EXIT_USAGE {
                eprintln!("run `milattn --help` for usage");
            }
            ExitCode::from(f.code)
        }
    }
}
