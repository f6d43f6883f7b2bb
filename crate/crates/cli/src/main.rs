use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use pdistill::harness::commands;
use pdistill::harness::config::{ConfigMap, RunConfig};

/// Train an autoregressive teacher, distil it into a parallel flow student,
/// sample from both and time them.
#[derive(Parser, Debug)]
#[command(name = "pdistill", version)]
struct Cli {
    /// Flat key=value settings file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for every random stream (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory for checkpoints, metrics and audio.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,

    /// Extra key=value override; repeatable, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Maximum-likelihood training of the teacher on the synthetic corpus.
    TrainTeacher,
    /// Train the phone classifier used by the perceptual loss.
    TrainClassifier,
    /// Distil a student from the teacher checkpoint in --out.
    Distill {
        /// Loss preset: kl+power, kl+power+perceptual or
        /// kl+power+perceptual+contrastive.
        #[arg(long)]
        preset: Option<String>,
    },
    /// Write WAVs from the teacher (ancestral) and student (parallel).
    Sample,
    /// Time ancestral against parallel generation.
    Bench,
    /// Cross-entropy-only against full-KL students on white noise.
    DemoMap,
    /// Autoregressive against feedforward fits of Fibonacci sequences.
    DemoFib,
    /// Print the resolved settings.
    ShowConfig,
}

fn resolve(cli: &Cli) -> pdistill::Result<RunConfig> {
    let mut map = match &cli.config {
        Some(path) => ConfigMap::load(path)?,
        None => ConfigMap::new(),
    };
    let mut flags = ConfigMap::new();
    for pair in &cli.overrides {
        flags.set_pair(pair)?;
    }
    if let Some(seed) = cli.seed {
        flags.set("seed", seed);
    }
    if let Command::Distill { preset: Some(p) } = &cli.command {
        flags.set("distill.preset", p);
    }
    map = map.merged(&flags);
    RunConfig::from_map(&map)
}

fn run(cli: &Cli) -> pdistill::Result<String> {
    let cfg = resolve(cli)?;
    let out = &cli.out;
    match &cli.command {
        Command::TrainTeacher => commands::cmd_train_teacher(&cfg, out),
        Command::TrainClassifier => commands::cmd_train_classifier(&cfg, out),
        Command::Distill { .. } => commands::cmd_distill(&cfg, out),
        Command::Sample => commands::cmd_sample(&cfg, out),
        Command::Bench => commands::cmd_bench(&cfg, out).map(|(_, text)| text),
        Command::DemoMap => commands::cmd_demo_map(&cfg, out).map(|(_, text)| text),
        Command::DemoFib => commands::cmd_demo_fib(&cfg, out).map(|(_, text)| text),
        Command::ShowConfig => Ok(cfg.to_map().to_text()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let start = Instant::now();
    match run(&cli) {
        Ok(text) => {
            println!("{}", text.trim_end());
            eprintln!("done in {:.1}s", start.elapsed().as_secs_f64());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
