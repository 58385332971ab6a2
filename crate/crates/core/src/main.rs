use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use musicdet::checkpoint::Checkpoint;
use musicdet::eval;
use musicdet::manifest::{Manifest, Split};
use musicdet::synth;
use musicdet::train::{self, TrainConfig, TrainMode};

#[derive(Parser)]
#[command(name = "musicdet", version, about = "Zero-shot detection of generated music with normalizing flows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus of real-like and fake-like clips
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n_real: usize,
        #[arg(long, default_value_t = 200)]
        n_fake: usize,
        #[arg(long, default_value_t = musicdet::rng::DEFAULT_SEED)]
        seed: u64,
    },
    /// Train a model on the train split of a manifest
    Train(TrainArgs),
    /// Score individual WAV files (higher means more likely real)
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        wav: Vec<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Score a manifest split and report the equal error rate
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Per-clip scores as CSV
        #[arg(long)]
        scores: Option<PathBuf>,
        /// Fail on unreadable clips instead of skipping them
        #[arg(long)]
        strict: bool,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Print a checkpoint's configuration, parameter counts and training losses
    Inspect {
        #[arg(long)]
        model: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "one-class")]
    mode: TrainMode,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    learning_rate: f64,
    #[arg(long, default_value_t = TrainConfig::default().beta1)]
    beta1: f64,
    #[arg(long, default_value_t = TrainConfig::default().beta2)]
    beta2: f64,
    #[arg(long, default_value_t = TrainConfig::default().epsilon)]
    adam_epsilon: f64,
    #[arg(long, default_value_t = TrainConfig::default().seed)]
    seed: u64,
    #[arg(long, default_value_t = TrainConfig::default().mu_real, allow_hyphen_values = true)]
    mu_real: f64,
    #[arg(long, default_value_t = -5.0, allow_hyphen_values = true)]
    mu_fake: f64,
    /// Flow steps per band
    #[arg(long, default_value_t = TrainConfig::default().band_steps)]
    band_steps: usize,
    #[arg(long, default_value_t = TrainConfig::default().n_bands)]
    n_bands: usize,
    #[arg(long, default_value_t = TrainConfig::default().global_steps)]
    global_steps: usize,
    #[arg(long, default_value_t = TrainConfig::default().hidden)]
    hidden: usize,
    /// Disable SpecAugment
    #[arg(long)]
    no_augment: bool,
    #[arg(long, default_value_t = 100.0)]
    clip_norm: f64,
    /// Disable gradient-norm clipping
    #[arg(long)]
    no_clip: bool,
}

impl TrainArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.adam_epsilon,
            seed: self.seed,
            mode: self.mode,
            mu_real: self.mu_real,
            mu_fake: Some(self.mu_fake),
            band_steps: self.band_steps,
            n_bands: self.n_bands,
            global_steps: self.global_steps,
            hidden: self.hidden,
            augment: !self.no_augment,
            clip_norm: (!self.no_clip).then_some(self.clip_norm),
        }
    }
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .context("cannot start worker pool")
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            out,
            n_real,
            n_fake,
            seed,
        } => {
            let manifest = synth::build_corpus(n_real, n_fake, &out, seed)?;
            eprintln!("wrote {}", manifest.display());
        }
        Command::Train(args) => {
            let manifest = Manifest::read(&args.manifest)?;
            let ckpt = train::train(&manifest, &args.config())?;
            ckpt.save(&args.out)?;
            eprintln!("saved {}", args.out.display());
        }
        Command::Score { model, wav, jobs } => {
            let ckpt = Checkpoint::load(&model)?;
            let scores: Vec<Result<f64>> = pool(jobs)?.install(|| {
                use rayon::prelude::*;
                wav.par_iter()
                    .map(|p| {
                        eval::score_file(&ckpt.model, p)
                            .with_context(|| format!("scoring {}", p.display()))
                    })
                    .collect()
            });
            for (path, score) in wav.iter().zip(scores) {
                println!("{} {}", path.display(), eval::format_score(score?));
            }
        }
        Command::Eval {
            model,
            manifest,
            split,
            report,
            scores,
            strict,
            jobs,
        } => {
            let ckpt = Checkpoint::load(&model)?;
            let manifest = Manifest::read(&manifest)?;
            let (records, skipped) = pool(jobs)?
                .install(|| eval::score_dataset(&ckpt.model, &manifest, Some(split), strict))?;
            if skipped > 0 {
                eprintln!("skipped {skipped} unreadable clips");
            }
            if let Some(path) = &scores {
                eval::write_scores_csv(&records, path)?;
            }
            let r = eval::compute_eer(&records)?;
            if let Some(path) = &report {
                eval::write_report_json(&r, path)?;
            }
            println!(
                "EER {:.4}% at threshold {} ({} real, {} fake)",
                100.0 * r.eer,
                eval::format_score(r.threshold_at_eer),
                r.n_real,
                r.n_fake
            );
        }
        Command::Inspect { model } => {
            let ckpt = Checkpoint::load(&model)?;
            let config = serde_json::to_string_pretty(&ckpt.config)?;
            let model_config = serde_json::to_string_pretty(ckpt.model.config())?;
            println!("training config:\n{config}");
            println!("model config:\n{model_config}");
            let params = ckpt.model.params();
            let total: usize = params.entries().iter().map(|e| e.value.numel()).sum();
            let trainable: usize = params
                .entries()
                .iter()
                .filter(|e| e.trainable)
                .map(|e| e.value.numel())
                .sum();
            println!("tensors: {}", params.len());
            println!("parameters: {total} ({trainable} trainable)");
            for (i, loss) in ckpt.log.iter().enumerate() {
                println!("epoch {}: {}", i + 1, eval::format_score(*loss));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
