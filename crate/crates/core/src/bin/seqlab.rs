use std::io::{self, BufRead, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use seqlab::config::RunConfig;
use seqlab::run;

/// Scheduled-sampling experiments on small encoder-decoder transformers.
#[derive(Parser)]
#[command(version)]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set sampler.schedule.k=0.95`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write schedule curves and joint grids as CSV.
    ScheduleDump,
    /// Train a model, writing checkpoints and a step log.
    Train {
        /// Continue from the latest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Per-step precision with golden vs. generated prefixes.
    GapCurve {
        /// Defaults to the final checkpoint of the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Token accuracy, BLEU-lite and per-step curves on the evaluation split.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Decode source lines from a file (or stdin) to stdout.
    Decode {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn real_main() -> seqlab::Result<()> {
    let cli = Cli::parse();
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let ckpt = |c: Option<PathBuf>| c.unwrap_or_else(|| run::final_checkpoint(&cfg));
    match cli.command {
        Command::ScheduleDump => {
            for f in run::schedule_dump(&cfg)? {
                println!("{}", f.display());
            }
        }
        Command::Train { resume } => {
            let out = run::train(&cfg, resume)?;
            println!(
                "step {} loss {:.4} checkpoint {}",
                out.final_step,
                out.final_loss,
                out.checkpoint.display()
            );
        }
        Command::GapCurve { checkpoint } => {
            let c = run::gap_curve(&cfg, &ckpt(checkpoint))?;
            println!("step,training,inference,gap");
            for i in 0..c.gap.len() {
                let t = c.gap.steps[i];
                let tr = c.training.values[c.training.steps.binary_search(&t).unwrap()];
                let inf = c.inference.values[c.inference.steps.binary_search(&t).unwrap()];
                println!("{t},{tr:.4},{inf:.4},{:.4}", c.gap.values[i]);
            }
        }
        Command::Evaluate { checkpoint } => {
            print!("{}", run::evaluate(&cfg, &ckpt(checkpoint))?.summary());
        }
        Command::Decode { checkpoint, input } => {
            let lines: Vec<String> = match input {
                Some(p) => std::fs::read_to_string(p)?.lines().map(str::to_string).collect(),
                None => io::stdin().lock().lines().collect::<io::Result<_>>()?,
            };
            let mut out = io::stdout().lock();
            for l in run::decode_lines(&cfg, &ckpt(checkpoint), &lines)? {
                writeln!(out, "{l}")?;
            }
        }
    }
    Ok(())
}
