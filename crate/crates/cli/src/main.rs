//! `mac`: data preparation, model building, evaluation, routing, benchmarks
//! and the completion service.

mod data;
mod eval;
mod routing;
mod serve;

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "mac", version, about = "Inline auto-completion for multimodal chat")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Turn dialog JSONL into prefix/completion samples.
    Prep(data::PrepArgs),
    /// Dataset statistics of a dialog JSONL file.
    Stats(data::StatsArgs),
    /// Write synthetic dialogs.
    Synth(data::SynthArgs),
    /// Build the MPC / MPC++ index from samples.
    BuildMpc(data::BuildMpcArgs),
    /// Train the QueryBlazer subword n-gram model from samples.
    BuildQb(data::BuildQbArgs),
    /// Score one model on test samples.
    Eval(eval::EvalArgs),
    /// Run candidate models and write router features, labels and costs.
    RouterLabel(routing::LabelArgs),
    /// Train a router.
    RouterTrain(routing::TrainArgs),
    /// Random search over router hyperparameters and λ.
    RouterSearch(routing::SearchArgs),
    /// Run a benchmark config end to end.
    Bench(eval::BenchArgs),
    /// Start the ghost-text service.
    Serve(serve::ServeArgs),
    /// Talk to a running service.
    Client(serve::ClientArgs),
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Prep(a) => data::prep(a),
        Command::Stats(a) => data::stats(a),
        Command::Synth(a) => data::synth(a),
        Command::BuildMpc(a) => data::build_mpc(a),
        Command::BuildQb(a) => data::build_qb(a),
        Command::Eval(a) => eval::eval(a),
        Command::RouterLabel(a) => routing::label(a),
        Command::RouterTrain(a) => routing::train(a),
        Command::RouterSearch(a) => routing::search(a),
        Command::Bench(a) => eval::bench(a),
        Command::Serve(a) => serve::serve(a),
        Command::Client(a) => serve::client(a),
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &PathBuf) -> Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}
