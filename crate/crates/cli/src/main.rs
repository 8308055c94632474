//! `csreplay` command-line driver.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 for
//! data and I/O errors.

mod commands;
mod config;
mod io;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "csreplay", version, about = "Code-switched replay for continual language learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Code-switch a corpus against a bilingual lexicon.
    Codeswitch(commands::CodeswitchArgs),
    /// Write the step schedule of a run without training.
    Plan(config::RunArgs),
    /// Train the toy model through all phases.
    Train(config::RunArgs),
    /// Generate a synthetic multilingual task.
    Synth(commands::SynthArgs),
    /// Accuracy of a trained model on one corpus.
    Eval(commands::EvalArgs),
    /// Linear probes on a trained model's hidden layers.
    Probe(commands::ProbeArgs),
    /// Average accuracy, retention and layer deltas from saved tables.
    Metrics(commands::MetricsArgs),
    /// Entropy and switched-token mass of attention records.
    Attn(commands::AttnArgs),
    /// Part-of-speech frequency tables.
    Posfreq(commands::PosfreqArgs),
    /// Correlate POS frequency with per-category accuracy.
    Correlate(commands::CorrelateArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Codeswitch(a) => commands::codeswitch(a),
        Command::Plan(a) => commands::plan(a),
        Command::Train(a) => commands::train(a),
        Command::Synth(a) => commands::synth(a),
        Command::Eval(a) => commands::eval(a),
        Command::Probe(a) => commands::probe(a),
        Command::Metrics(a) => commands::metrics(a),
        Command::Attn(a) => commands::attn(a),
        Command::Posfreq(a) => commands::posfreq(a),
        Command::Correlate(a) => commands::correlate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
