//! A very small synthetic corpus shared by the training-loop tests.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use spkcon_core::contrastive::LossKind;
use spkcon_core::harness::{generate_toy_corpus, RunConfig, ToyCorpus, ToySpec};

pub fn tiny_spec() -> ToySpec {
    ToySpec {
        train_speakers: 4,
        eval_speakers: 2,
        train_utterances: 4,
        eval_utterances: 3,
        seconds: (2.0, 2.4),
        rirs: 2,
        noises: 2,
        musics: 1,
        babbles: 1,
        seed: 11,
        ..ToySpec::default()
    }
}

/// Generated once per test binary under cargo's scratch directory; statics
/// are never dropped, so a temp dir here would leak.
pub fn tiny_corpus() -> &'static ToyCorpus {
    static CORPUS: OnceLock<ToyCorpus> = OnceLock::new();
    CORPUS.get_or_init(|| {
        let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(concat!("tiny-corpus-", env!("CARGO_CRATE_NAME")));
        let _ = std::fs::remove_dir_all(&dir);
        generate_toy_corpus(&dir, &tiny_spec()).unwrap()
    })
}

/// 16 training utterances, batches of 8, 3 epochs.
pub fn tiny_config(out: &Path, loss: LossKind) -> RunConfig {
    let c = tiny_corpus();
    let mut cfg = RunConfig::toy();
    cfg.train_manifest = c.train_manifest.clone();
    cfg.eval_manifest = Some(c.eval_manifest.clone());
    cfg.trials = Some(c.trials.clone());
    cfg.aug_manifest = Some(c.aug_manifest.clone());
    cfg.out_dir = out.to_path_buf();
    cfg.loss = loss;
    cfg.epochs = 3;
    cfg.batch_size = 8;
    cfg.queue_size = 12;
    cfg.proto.num_clusters = 3;
    cfg.proto.num_negatives = 4;
    cfg.proto.warmup_epochs = 1;
    cfg.labeled_speakers = 0.5;
    cfg.labeled_fraction = 0.25;
    cfg.wavaug = false;
    cfg.seed = 5;
    cfg
}

pub fn read_log(out: &Path) -> String {
    std::fs::read_to_string(out.join(spkcon_core::harness::METRICS_LOG)).unwrap()
}

pub fn out_dir(root: &Path, name: &str) -> PathBuf {
    root.join(name)
}
