//! `mmb`: train, evaluate, report on and serve image-grounded dialogue
//! models.

mod eval_cmd;
mod generate_cmd;
mod layered;
mod report_cmd;
mod serve_cmd;
mod shared;
mod synth_cmd;
mod train_cmd;

use clap::{Parser, Subcommand};
use mmb_core::train::Stage;

#[derive(Parser)]
#[command(name = "mmb", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Domain-adaptive pre-training stage (captions, forum comments).
    AdaptPretrain(train_cmd::TrainArgs),
    /// Fine-tuning stage, optionally preceded by adapt-pretraining.
    Train(train_cmd::TrainArgs),
    /// Perplexity and generation metrics per dataset, as TSV.
    Eval(eval_cmd::EvalArgs),
    /// Beam-search replies for every episode in a JSONL file.
    Generate(generate_cmd::GenerateArgs),
    /// Offensive-reply rates per style conditioning, as TSV.
    SafetyReport(report_cmd::SafetyReportArgs),
    /// Gendered-word rates per gender control string, as TSV.
    DegenderReport(report_cmd::DegenderReportArgs),
    /// HTTP chat service.
    Serve(serve_cmd::ServeArgs),
    /// Synthetic fixture corpora with image features and stage configs.
    SynthData(synth_cmd::SynthArgs),
}

fn main() -> anyhow::Result<()> {
    let level = std::env::var("RUST_LOG")
        .ok()
        .and_then(|v| v.parse::<tracing::Level>().ok())
        .unwrap_or(tracing::Level::INFO);
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::AdaptPretrain(args) => train_cmd::run(&args, Stage::AdaptPretrain),
        Command::Train(args) => train_cmd::run(&args, Stage::Finetune),
        Command::Eval(args) => eval_cmd::run(args),
        Command::Generate(args) => generate_cmd::run(args),
        Command::SafetyReport(args) => report_cmd::safety(args),
        Command::DegenderReport(args) => report_cmd::degender(args),
        Command::Serve(args) => serve_cmd::run(args),
        Command::SynthData(args) => synth_cmd::run(&args),
    }
}
