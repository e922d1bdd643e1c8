use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use trustfed_cli::{cmd_ablate, cmd_compare, cmd_run, Options};

#[derive(Parser)]
#[command(name = "trustfed", version, about = "Federated dialogue-model simulator")]
struct Cli {
    /// Replace every seed in the spec file with streams derived from this value.
    #[arg(long, global = true)]
    seed_override: Option<u64>,

    /// Output directory; overrides `output_dir` in the spec file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the spec file's strategy once.
    Run { spec: PathBuf },
    /// Run Local, FedAvg, FedProx and FedDTRE under shared seeds.
    Compare { spec: PathBuf },
    /// Run fixed-alpha variants plus the adaptive strategy.
    Ablate {
        spec: PathBuf,
        #[arg(long = "alpha", value_delimiter = ',', required = true, num_args = 1..)]
        alphas: Vec<f64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let opts = Options {
        seed_override: cli.seed_override,
        out: cli.out,
    };
    let outcome = match &cli.command {
        Command::Run { spec } => cmd_run(spec, &opts),
        Command::Compare { spec } => cmd_compare(spec, &opts),
        Command::Ablate { spec, alphas } => cmd_ablate(spec, alphas, &opts),
    };
    match outcome {
        Ok(o) => {
            // Output may be piped into a closed reader; the files are already written.
            let mut out = std::io::stdout().lock();
            for run in &o.runs {
                let m = &run.result.metrics;
                let _ = writeln!(
                    out,
                    "{:<12} loss {:.4} -> {:.4}  BLEU-1 {:.4}  ROUGE-1 {:.4}  trust {:.4}",
                    run.label, run.result.initial_loss, run.result.final_loss, m.bleu_1, m.rouge_1, m.trust
                );
            }
            let _ = writeln!(out, "wrote {}", o.output_dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
