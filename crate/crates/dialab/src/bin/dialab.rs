use clap::{Parser, Subcommand};

use dialab::cli;

#[derive(Parser)]
#[command(
    name = "dialab",
    about = "Desk-scale laboratory for pre-training based dialogue transformers",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus file.
    Synth(cli::SynthArgs),
    /// Build a vocabulary file from corpora.
    Vocab(cli::VocabArgs),
    /// Pretrain a causal or masked language model.
    Pretrain(cli::PretrainArgs),
    /// Fine-tune a framework from a pretrained checkpoint.
    Finetune(cli::FinetuneArgs),
    /// Sweep min-length so generated lengths match the corpus average.
    Calibrate(cli::CalibrateArgs),
    /// Generate responses with constrained beam search.
    Generate(cli::GenerateArgs),
    /// Score a hypothesis file against references.
    Evaluate(cli::EvaluateArgs),
    /// Render a framework-comparison table with significance stars.
    Compare(cli::CompareArgs),
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Cli::parse();
    let result = match &args.cmd {
        Cmd::Synth(a) => cli::cmd_synth(a),
        Cmd::Vocab(a) => cli::cmd_vocab(a),
        Cmd::Pretrain(a) => cli::cmd_pretrain(a),
        Cmd::Finetune(a) => cli::cmd_finetune(a),
        Cmd::Calibrate(a) => cli::cmd_calibrate(a),
        Cmd::Generate(a) => cli::cmd_generate(a),
        Cmd::Evaluate(a) => cli::cmd_evaluate(a),
        Cmd::Compare(a) => cli::cmd_compare(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
