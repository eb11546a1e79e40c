use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use spkcon_core::eval::{export_embeddings, import_embeddings, read_trials, score_trials, Report, ScoreOn};
use spkcon_core::frontend::{read_manifest, Mfcc};
use spkcon_core::harness::{self, checkpoint_path, generate_toy_corpus, load_encoder, RunConfig, ToySpec, Trainer};
use spkcon_core::numerics::Checkpoint;
use spkcon_core::{eval, par};

#[derive(Parser)]
#[command(name = "spkcon", version, about = "Contrastive speaker embeddings: train, extract, score")]
struct Cli {
    /// Run on a single worker thread.
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic toy corpus and a matching run config.
    GenToy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        speakers: usize,
        /// Held-out speakers used for the trial list.
        #[arg(long, default_value_t = 10)]
        eval_speakers: usize,
    },
    /// Train an encoder, then score the configured trials.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Skip the evaluation after training.
        #[arg(long)]
        no_eval: bool,
    },
    /// Embed every utterance of a manifest.
    Extract {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "embedding")]
        score_on: String,
    },
    /// Cosine-score a trial list against exported embeddings.
    Score {
        #[arg(long)]
        emb: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        /// Also write one score per trial to this file.
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Extract, score and report for a checkpoint's evaluation set.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        trials: Option<PathBuf>,
        /// Evaluation manifest; defaults to the one the run was configured with.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if cli.deterministic {
        par::single_threaded(|| run(cli.command))
    } else {
        run(cli.command)
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenToy {
            out,
            seed,
            speakers,
            eval_speakers,
        } => {
            let spec = ToySpec {
                train_speakers: speakers,
                eval_speakers,
                seed,
                ..ToySpec::default()
            };
            let toy = generate_toy_corpus(&out, &spec)?;
            println!("wrote {}", toy.config.display());
        }
        Command::Train {
            config,
            resume,
            no_eval,
        } => {
            let cfg = RunConfig::load(&config)?;
            let mut trainer = match resume {
                Some(path) => Trainer::resume(cfg.clone(), &Checkpoint::load(&path)?)?,
                None => Trainer::new(cfg.clone())?,
            };
            trainer.run()?;
            println!(
                "trained {} epochs; last checkpoint {}",
                trainer.epoch(),
                checkpoint_path(&cfg.out_dir, trainer.epoch()).display()
            );
            if !no_eval && cfg.trials.is_some() {
                let report = harness::evaluate(trainer.query(), &cfg)?;
                print!("{}", report.to_table());
            }
        }
        Command::Extract {
            ckpt,
            manifest,
            out,
            score_on,
        } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let cfg = RunConfig::parse(&ckpt.meta, std::path::Path::new(""))?;
            let params = load_encoder(&ckpt)?;
            let score_on: ScoreOn = score_on.parse()?;
            let mfcc = Mfcc::new(&cfg.frontend())?;
            let emb = eval::extract_embeddings(&read_manifest(&manifest)?, &params, &mfcc, score_on)?;
            export_embeddings(&emb, &out)?;
            println!("wrote {} embeddings to {}", emb.len(), out.display());
        }
        Command::Score { emb, trials, scores } => {
            let emb = import_embeddings(&emb)?;
            let trials = read_trials(&trials)?;
            let s = score_trials(&trials, &emb)?;
            if let Some(path) = scores {
                let text: String = s.iter().map(|v| format!("{v}\n")).collect();
                std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
            }
            let report = Report::compute(&trials, &s, &Default::default())?;
            print!("{}", report.to_table());
        }
        Command::Eval {
            ckpt,
            trials,
            manifest,
        } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let mut cfg = RunConfig::parse(&ckpt.meta, std::path::Path::new(""))?;
            if let Some(m) = manifest {
                cfg.eval_manifest = Some(m);
            }
            let Some(trials) = trials.or(cfg.trials.clone()) else {
                bail!("no trial list given and none configured for this run");
            };
            let params = load_encoder(&ckpt)?;
            let report = harness::evaluate_trials(&params, &cfg, &read_trials(&trials)?)?;
            harness::write_report(&report, &cfg.out_dir)?;
            print!("{}", report.to_table());
        }
    }
    Ok(())
}
