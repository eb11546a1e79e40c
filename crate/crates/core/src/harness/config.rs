//! Run configuration.
//!
//! Grammar: one `key = value` per line; `#` starts a comment; blank lines are
//! ignored. A `preset` line (if present) is applied first and the remaining
//! keys override it, whatever their order. Relative paths resolve against the
//! config file's directory. `SPKCON_SEED` in the environment overrides `seed`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::contrastive::{LossConfig, LossKind};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::{DcfConfig, ScoreOn};
use crate::frontend::FrontendConfig;
use crate::prototypes::ProtoConfig;

pub const SEED_ENV: &str = "SPKCON_SEED";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train_manifest: PathBuf,
    pub eval_manifest: Option<PathBuf>,
    pub trials: Option<PathBuf>,
    pub aug_manifest: Option<PathBuf>,
    pub out_dir: PathBuf,

    pub arch: String,
    pub loss: LossKind,
    pub loss_cfg: LossConfig,
    pub queue_size: usize,
    pub proto: ProtoConfig,
    pub ema_momentum: f64,

    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub sgd_momentum: f64,
    pub seed: u64,
    /// Share of each batch drawn from labeled speakers (semi mode).
    pub labeled_fraction: f64,
    /// Share of training speakers whose labels are visible (semi mode).
    pub labeled_speakers: f64,

    pub wavaug: bool,
    pub specaug: bool,
    pub chunk_min: usize,
    pub chunk_max: usize,
    pub score_on: ScoreOn,
    pub dcf: DcfConfig,
    pub keep_checkpoints: usize,
}

impl RunConfig {
    /// Full-scale defaults.
    pub fn paper() -> Self {
        Self {
            train_manifest: PathBuf::new(),
            eval_manifest: None,
            trials: None,
            aug_manifest: None,
            out_dir: PathBuf::from("run"),
            arch: "tdnn-paper".into(),
            loss: LossKind::Moco,
            loss_cfg: LossConfig::default(),
            queue_size: 10000,
            proto: ProtoConfig::default(),
            ema_momentum: 0.999,
            epochs: 150,
            batch_size: 4096,
            lr_start: 0.1,
            lr_end: 1e-4,
            sgd_momentum: 0.9,
            seed: 0,
            labeled_fraction: 0.1,
            labeled_speakers: 1.0,
            wavaug: true,
            specaug: false,
            chunk_min: 200,
            chunk_max: 400,
            score_on: ScoreOn::Embedding,
            dcf: DcfConfig::default(),
            keep_checkpoints: 3,
        }
    }

    /// Desk-scale defaults for the synthetic corpus.
    pub fn toy() -> Self {
        Self {
            arch: "tdnn-tiny".into(),
            queue_size: 512,
            proto: ProtoConfig {
                num_clusters: 20,
                num_negatives: 64,
                warmup_epochs: 24,
                ..ProtoConfig::default()
            },
            loss_cfg: LossConfig {
                tau: 0.2,
                ..LossConfig::default()
            },
            ema_momentum: 0.9,
            epochs: 60,
            lr_start: 0.01,
            batch_size: 64,
            labeled_speakers: 0.15,
            chunk_min: 100,
            chunk_max: 200,
            ..Self::paper()
        }
    }

    pub fn encoder(&self) -> Result<EncoderConfig> {
        EncoderConfig::preset(&self.arch)
    }

    pub fn frontend(&self) -> FrontendConfig {
        FrontendConfig {
            min_chunk: self.chunk_min,
            max_chunk: self.chunk_max,
            ..FrontendConfig::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let mut cfg = Self::parse(&text, base)?;
        if let Ok(seed) = std::env::var(SEED_ENV) {
            cfg.seed = seed
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}=`{seed}` is not an unsigned integer")))?;
        }
        Ok(cfg)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut pairs = BTreeMap::new();
        let mut order = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if pairs.insert(k.clone(), v).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", lineno + 1)));
            }
            order.push(k);
        }
        let mut cfg = match pairs.get("preset").map(String::as_str) {
            None | Some("paper") => Self::paper(),
            Some("toy") => Self::toy(),
            Some(other) => return Err(Error::Config(format!("unknown preset `{other}`"))),
        };
        for key in order.iter().filter(|k| *k != "preset") {
            cfg.set(key, &pairs[key], base)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
        }
        fn flag(key: &str, value: &str) -> Result<bool> {
            match value {
                "true" | "on" | "yes" | "1" => Ok(true),
                "false" | "off" | "no" | "0" => Ok(false),
                _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{value}`"))),
            }
        }
        let path = |v: &str| {
            let p = Path::new(v);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        match key {
            "train.manifest" => self.train_manifest = path(value),
            "eval.manifest" => self.eval_manifest = Some(path(value)),
            "eval.trials" => self.trials = Some(path(value)),
            "aug.manifest" => self.aug_manifest = Some(path(value)),
            "out_dir" => self.out_dir = path(value),
            "arch" => self.arch = value.to_string(),
            "loss.kind" => self.loss = value.parse()?,
            "loss.tau" => self.loss_cfg.tau = num(key, value)?,
            "loss.lambda" => self.loss_cfg.lambda = num(key, value)?,
            "loss.alpha" => self.loss_cfg.alpha = num(key, value)?,
            "queue.size" => self.queue_size = num(key, value)?,
            "proto.clusters" => self.proto.num_clusters = num(key, value)?,
            "proto.negatives" => self.proto.num_negatives = num(key, value)?,
            "proto.warmup_epochs" => self.proto.warmup_epochs = num(key, value)?,
            "proto.eps" => self.proto.eps = num(key, value)?,
            "proto.cluster_every" => self.proto.cluster_every = num(key, value)?,
            "ema.momentum" => self.ema_momentum = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr.start" => self.lr_start = num(key, value)?,
            "lr.end" => self.lr_end = num(key, value)?,
            "sgd.momentum" => self.sgd_momentum = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "semi.labeled_fraction" => self.labeled_fraction = num(key, value)?,
            "semi.labeled_speakers" => self.labeled_speakers = num(key, value)?,
            "aug.wav" => self.wavaug = flag(key, value)?,
            "aug.spec" => self.specaug = flag(key, value)?,
            "chunk.min" => self.chunk_min = num(key, value)?,
            "chunk.max" => self.chunk_max = num(key, value)?,
            "eval.score_on" => self.score_on = value.parse()?,
            "eval.p_target" => self.dcf.p_target = num(key, value)?,
            "eval.c_miss" => self.dcf.c_miss = num(key, value)?,
            "eval.c_fa" => self.dcf.c_fa = num(key, value)?,
            "checkpoint.keep" => self.keep_checkpoints = num(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_cfg.validate()?;
        self.dcf.validate()?;
        self.encoder()?;
        if self.loss == LossKind::Proto {
            self.proto.validate()?;
        }
        let checks = [
            (self.batch_size >= 2, "batch_size must be at least 2"),
            (self.queue_size >= 1, "queue.size must be positive"),
            ((0.0..=1.0).contains(&self.ema_momentum), "ema.momentum must lie in [0, 1]"),
            (self.lr_start >= self.lr_end && self.lr_end > 0.0, "need lr.start >= lr.end > 0"),
            ((0.0..1.0).contains(&self.sgd_momentum), "sgd.momentum must lie in [0, 1)"),
            ((0.0..=1.0).contains(&self.labeled_fraction), "semi.labeled_fraction must lie in [0, 1]"),
            ((0.0..=1.0).contains(&self.labeled_speakers), "semi.labeled_speakers must lie in [0, 1]"),
            (
                self.chunk_min >= crate::encoder::MIN_FRAMES && self.chunk_max >= self.chunk_min,
                "need chunk.max >= chunk.min >= the encoder's receptive field",
            ),
            (self.keep_checkpoints >= 1, "checkpoint.keep must be positive"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        Ok(())
    }

    /// Canonical text form with absolute paths; parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        let p = |p: &Path| p.display().to_string();
        put("train.manifest", p(&self.train_manifest));
        if let Some(v) = &self.eval_manifest {
            put("eval.manifest", p(v));
        }
        if let Some(v) = &self.trials {
            put("eval.trials", p(v));
        }
        if let Some(v) = &self.aug_manifest {
            put("aug.manifest", p(v));
        }
        put("out_dir", p(&self.out_dir));
        put("arch", self.arch.clone());
        put("loss.kind", self.loss.to_string());
        put("loss.tau", self.loss_cfg.tau.to_string());
        put("loss.lambda", self.loss_cfg.lambda.to_string());
        put("loss.alpha", self.loss_cfg.alpha.to_string());
        put("queue.size", self.queue_size.to_string());
        put("proto.clusters", self.proto.num_clusters.to_string());
        put("proto.negatives", self.proto.num_negatives.to_string());
        put("proto.warmup_epochs", self.proto.warmup_epochs.to_string());
        put("proto.eps", self.proto.eps.to_string());
        put("proto.cluster_every", self.proto.cluster_every.to_string());
        put("ema.momentum", self.ema_momentum.to_string());
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("lr.start", self.lr_start.to_string());
        put("lr.end", self.lr_end.to_string());
        put("sgd.momentum", self.sgd_momentum.to_string());
        put("seed", self.seed.to_string());
        put("semi.labeled_fraction", self.labeled_fraction.to_string());
        put("semi.labeled_speakers", self.labeled_speakers.to_string());
        put("aug.wav", self.wavaug.to_string());
        put("aug.spec", self.specaug.to_string());
        put("chunk.min", self.chunk_min.to_string());
        put("chunk.max", self.chunk_max.to_string());
        put(
            "eval.score_on",
            match self.score_on {
                ScoreOn::Embedding => "embedding",
                ScoreOn::Projection => "projection",
            }
            .into(),
        );
        put("eval.p_target", self.dcf.p_target.to_string());
        put("eval.c_miss", self.dcf.c_miss.to_string());
        put("eval.c_fa", self.dcf.c_fa.to_string());
        put("checkpoint.keep", self.keep_checkpoints.to_string());
        s
    }
}
