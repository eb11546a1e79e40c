//! Experiment harness: run configuration, the synthetic toy corpus, the
//! training loop and evaluation.

pub mod config;
pub mod synth;
pub mod toy;
pub mod train;

pub use config::{RunConfig, SEED_ENV};
pub use toy::{generate_toy_corpus, ToyCorpus, ToySpec};
pub use train::{checkpoint_path, load_encoder, StepLog, TrainData, Trainer, CHECKPOINT_DIR, METRICS_LOG};

use std::path::Path;

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::eval::{extract_embeddings, read_trials, score_trials, Embeddings, Report, Trial};
use crate::frontend::{read_manifest, Mfcc};

/// Embeddings of every utterance in the run's evaluation manifest.
pub fn eval_embeddings(params: &EncoderParams, cfg: &RunConfig) -> Result<Embeddings> {
    let manifest = cfg
        .eval_manifest
        .as_ref()
        .ok_or_else(|| Error::Config("eval.manifest is not set".into()))?;
    let mfcc = Mfcc::new(&cfg.frontend())?;
    extract_embeddings(&read_manifest(manifest)?, params, &mfcc, cfg.score_on)
}

pub fn evaluate_trials(params: &EncoderParams, cfg: &RunConfig, trials: &[Trial]) -> Result<Report> {
    let emb = eval_embeddings(params, cfg)?;
    Report::compute(trials, &score_trials(trials, &emb)?, &cfg.dcf)
}

/// Scores the run's trial list with `params` and writes `report.txt` to the
/// output directory.
pub fn evaluate(params: &EncoderParams, cfg: &RunConfig) -> Result<Report> {
    let trials_path = cfg
        .trials
        .as_ref()
        .ok_or_else(|| Error::Config("eval.trials is not set".into()))?;
    let report = evaluate_trials(params, cfg, &read_trials(trials_path)?)?;
    write_report(&report, &cfg.out_dir)?;
    Ok(report)
}

pub fn write_report(report: &Report, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("report.txt");
    std::fs::write(&path, report.to_kv()).map_err(|e| Error::io(&path, e))
}
