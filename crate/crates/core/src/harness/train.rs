//! The training loop.
//!
//! All randomness is drawn from streams keyed by `(seed, purpose, epoch, ...)`,
//! so a run is reproducible regardless of thread count, and a run resumed from
//! an epoch checkpoint continues exactly where the original left off.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use super::config::RunConfig;
use crate::augment::{AugmentCorpus, SpecAugConfig, SpecAugDraw, WavAugConfig, WavAugDraw};
use crate::contrastive::{moco_loss, semi_terms, simclr_loss, LossKind, NegativeQueue};
use crate::encoder::{ema_update, pack, EncoderConfig, EncoderParams, Mode, RUNNING_STATS_MOMENTUM};
use crate::error::{Error, Result};
use crate::frontend::{
    energy_vad, load_wav, mean_normalize, read_manifest, sample_chunk, select_frames, FrontendConfig, Mfcc,
    Waveform,
};
use crate::numerics::{Checkpoint, CosineSchedule, OptimizerState, Tape, Tensor};
use crate::par;
use crate::prototypes::{joint_loss, sample_negatives, PrototypeBank};
use crate::rng::{stream, tag};

/// One training utterance with its clean front-end output cached.
struct Utterance {
    id: String,
    speaker: Option<usize>,
    /// Kept only when waveform augmentation is enabled.
    wave: Option<Waveform>,
    /// Frame indices kept by the clean-signal VAD, reused for augmented views.
    voiced: Vec<usize>,
    /// Post-VAD features, not normalized.
    features: Tensor<f32>,
}

/// The training corpus.
pub struct TrainData {
    utterances: Vec<Utterance>,
    speakers: Vec<String>,
    /// Per utterance: speaker index when its label is visible to the loss.
    visible: Vec<Option<usize>>,
}

impl TrainData {
    pub fn load(cfg: &RunConfig, mfcc: &Mfcc) -> Result<Self> {
        let entries = read_manifest(&cfg.train_manifest)?;
        let mut speakers: Vec<String> = entries.iter().filter_map(|e| e.speaker.clone()).collect();
        speakers.sort();
        speakers.dedup();
        let index: BTreeMap<&str, usize> = speakers.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let loaded = par::map(&entries, |e| -> Result<Option<Utterance>> {
            let wave = load_wav(&e.path)?;
            let vad = energy_vad(&wave, mfcc.config())?;
            let features = select_frames(&mfcc.compute(&wave)?, &vad)?;
            if features.rows() < cfg.chunk_min {
                log::warn!(
                    "dropping {}: {} voiced frames, chunks need {}",
                    e.utterance_id,
                    features.rows(),
                    cfg.chunk_min
                );
                return Ok(None);
            }
            Ok(Some(Utterance {
                id: e.utterance_id.clone(),
                speaker: e.speaker.as_deref().map(|s| index[s]),
                wave: cfg.wavaug.then_some(wave),
                voiced: (0..vad.len()).filter(|&t| vad[t]).collect(),
                features,
            }))
        });
        let mut utterances = Vec::with_capacity(loaded.len());
        for u in loaded {
            utterances.extend(u?);
        }
        if utterances.len() < cfg.batch_size {
            return Err(Error::Config(format!(
                "{} usable training utterances, fewer than one batch of {}",
                utterances.len(),
                cfg.batch_size
            )));
        }

        let visible = if cfg.loss == LossKind::Semi {
            let mut order: Vec<usize> = (0..speakers.len()).collect();
            order.shuffle(&mut stream(cfg.seed, &[tag("labeled-speakers")]));
            let count = ((cfg.labeled_speakers * speakers.len() as f64).round() as usize).min(speakers.len());
            let labeled: Vec<bool> = {
                let mut v = vec![false; speakers.len()];
                order[..count].iter().for_each(|&s| v[s] = true);
                v
            };
            utterances
                .iter()
                .map(|u| u.speaker.filter(|&s| labeled[s]))
                .collect()
        } else {
            vec![None; utterances.len()]
        };
        Ok(Self {
            utterances,
            speakers,
            visible,
        })
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn speakers(&self) -> &[String] {
        &self.speakers
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.utterances.iter().map(|u| u.id.as_str())
    }

    pub fn speaker_of(&self, i: usize) -> Option<usize> {
        self.utterances[i].speaker
    }

    /// Indices of utterances whose labels the loss may see.
    pub fn labeled(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.visible[i].is_some()).collect()
    }
}

/// Utterance indices of every batch of `epoch`.
///
/// Plain runs shuffle the corpus. Semi-supervised runs fill a fixed share of
/// each batch from labeled speakers, round-robin over speakers so that each
/// labeled speaker contributes several samples, and the rest from the
/// unlabeled pool.
pub fn epoch_batches(data: &TrainData, cfg: &RunConfig, epoch: u32) -> Vec<Vec<usize>> {
    let mut rng = stream(cfg.seed, &[tag("batches"), epoch as u64]);
    let n_batches = data.len() / cfg.batch_size;
    let labeled = data.labeled();
    if cfg.loss != LossKind::Semi || labeled.is_empty() || labeled.len() == data.len() {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        return order.chunks_exact(cfg.batch_size).map(<[usize]>::to_vec).collect();
    }
    let mut by_speaker: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in &labeled {
        by_speaker.entry(data.visible[i].expect("labeled")).or_default().push(i);
    }
    let mut lists: Vec<Vec<usize>> = by_speaker.into_values().collect();
    lists.shuffle(&mut rng);
    for l in &mut lists {
        l.shuffle(&mut rng);
    }
    let mut round_robin = Vec::with_capacity(labeled.len());
    for k in 0..lists.iter().map(Vec::len).max().unwrap_or(0) {
        round_robin.extend(lists.iter().filter_map(|l| l.get(k)));
    }
    let mut unlabeled: Vec<usize> = (0..data.len()).filter(|&i| data.visible[i].is_none()).collect();
    unlabeled.shuffle(&mut rng);

    let n_lab = ((cfg.labeled_fraction * cfg.batch_size as f64).round() as usize).clamp(2, cfg.batch_size - 1);
    let (mut li, mut ui) = (0, 0);
    (0..n_batches)
        .map(|_| {
            let mut b = Vec::with_capacity(cfg.batch_size);
            for _ in 0..n_lab {
                b.push(round_robin[li % round_robin.len()]);
                li += 1;
            }
            for _ in n_lab..cfg.batch_size {
                b.push(unlabeled[ui % unlabeled.len()]);
                ui += 1;
            }
            b
        })
        .collect()
}

/// Losses of one step, as logged.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub epoch: u32,
    pub loss: f64,
    pub moco: Option<f64>,
    pub proto: Option<f64>,
    pub sup: Option<f64>,
    pub lr: f64,
    pub queue: usize,
}

impl StepLog {
    pub fn to_line(&self) -> String {
        let mut s = format!("step={} epoch={} loss={}", self.step, self.epoch, self.loss);
        for (k, v) in [("moco", self.moco), ("proto", self.proto), ("sup", self.sup)] {
            if let Some(v) = v {
                s.push_str(&format!(" {k}={v}"));
            }
        }
        s.push_str(&format!(" lr={} queue={}", self.lr, self.queue));
        s
    }
}

pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const METRICS_LOG: &str = "metrics.log";
const KEY_PREFIX: &str = "key.";
/// Context kept before an augmented chunk so reverberation has a history.
const PRE_ROLL_FRAMES: usize = 50;

pub fn checkpoint_path(out_dir: &Path, epoch: u32) -> PathBuf {
    out_dir.join(CHECKPOINT_DIR).join(format!("epoch-{epoch:04}.ckpt"))
}

/// Query encoder of a checkpoint, the one used for scoring.
pub fn load_encoder(ckpt: &Checkpoint) -> Result<EncoderParams> {
    let cfg = RunConfig::parse(&ckpt.meta, Path::new(""))?;
    let query: Vec<(String, Tensor<f32>)> = ckpt
        .params
        .iter()
        .filter(|(n, _)| !n.starts_with(KEY_PREFIX))
        .cloned()
        .collect();
    EncoderParams::from_named(cfg.encoder()?, &query)
}

pub struct Trainer {
    cfg: RunConfig,
    data: TrainData,
    mfcc: Mfcc,
    aug: Option<AugmentCorpus>,
    wavaug: WavAugConfig,
    specaug: SpecAugConfig,
    query: EncoderParams,
    key: EncoderParams,
    opt: OptimizerState,
    queue: NegativeQueue,
    bank: Option<PrototypeBank>,
    schedule: CosineSchedule,
    steps_per_epoch: u64,
    /// Completed epochs.
    epoch: u32,
    step: u64,
    log: File,
}

impl Trainer {
    /// Fresh run: initializes both encoders from the seed, truncates the
    /// metrics log and writes the epoch-0 checkpoint.
    pub fn new(cfg: RunConfig) -> Result<Self> {
        let enc = cfg.encoder()?;
        let query = EncoderParams::init(enc.clone(), cfg.seed);
        let key = query.clone();
        let opt = OptimizerState::new(cfg.sgd_momentum as f32, cfg.lr_start as f32);
        let queue = NegativeQueue::new(cfg.queue_size, enc.proj_dim)?;
        let t = Self::assemble(cfg, enc, query, key, opt, queue, None, 0, 0, true)?;
        t.save_checkpoint()?;
        Ok(t)
    }

    /// Continues from an epoch checkpoint. Metrics logged after the
    /// checkpoint's step are discarded.
    pub fn resume(cfg: RunConfig, ckpt: &Checkpoint) -> Result<Self> {
        let enc = cfg.encoder()?;
        let (mut query, mut key) = (Vec::new(), Vec::new());
        for (n, t) in &ckpt.params {
            match n.strip_prefix(KEY_PREFIX) {
                Some(k) => key.push((k.to_string(), t.clone())),
                None => query.push((n.clone(), t.clone())),
            }
        }
        let query = EncoderParams::from_named(enc.clone(), &query)?;
        let key = EncoderParams::from_named(enc.clone(), &key)?;
        let queue = NegativeQueue::from_bytes(
            ckpt.section("queue")
                .ok_or_else(|| Error::Checkpoint("missing queue section".into()))?,
        )?;
        let bank = ckpt.section("bank").map(PrototypeBank::from_bytes).transpose()?;
        let log_path = cfg.out_dir.join(METRICS_LOG);
        if let Ok(text) = std::fs::read_to_string(&log_path) {
            let kept: String = text
                .lines()
                .filter(|l| {
                    l.strip_prefix("step=")
                        .and_then(|r| r.split(' ').next())
                        .and_then(|s| s.parse::<u64>().ok())
                        .is_none_or(|s| s <= ckpt.step)
                })
                .filter(|l| !l.starts_with("event=") || event_epoch(l).is_none_or(|e| e <= ckpt.epoch))
                .map(|l| format!("{l}\n"))
                .collect();
            std::fs::write(&log_path, kept).map_err(|e| Error::io(&log_path, e))?;
        }
        Self::assemble(
            cfg,
            enc,
            query,
            key,
            ckpt.optimizer.clone(),
            queue,
            bank,
            ckpt.epoch,
            ckpt.step,
            false,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        cfg: RunConfig,
        enc: EncoderConfig,
        query: EncoderParams,
        key: EncoderParams,
        opt: OptimizerState,
        queue: NegativeQueue,
        bank: Option<PrototypeBank>,
        epoch: u32,
        step: u64,
        fresh: bool,
    ) -> Result<Self> {
        let fe: FrontendConfig = cfg.frontend();
        if fe.n_ceps != enc.input_dim {
            return Err(Error::Config(format!(
                "front-end yields {} coefficients, `{}` expects {}",
                fe.n_ceps, cfg.arch, enc.input_dim
            )));
        }
        let mfcc = Mfcc::new(&fe)?;
        let wavaug = WavAugConfig::default();
        let aug = if cfg.wavaug {
            let path = cfg
                .aug_manifest
                .as_ref()
                .ok_or_else(|| Error::Config("aug.wav is on but aug.manifest is not set".into()))?;
            let corpus = AugmentCorpus::load(path)?;
            corpus.validate(&wavaug)?;
            Some(corpus)
        } else {
            None
        };
        let data = TrainData::load(&cfg, &mfcc)?;
        let steps_per_epoch = epoch_batches(&data, &cfg, 1).len() as u64;
        let schedule = CosineSchedule::new(cfg.lr_start, cfg.lr_end, steps_per_epoch * cfg.epochs as u64)?;
        std::fs::create_dir_all(cfg.out_dir.join(CHECKPOINT_DIR))
            .map_err(|e| Error::io(cfg.out_dir.join(CHECKPOINT_DIR), e))?;
        let log_path = cfg.out_dir.join(METRICS_LOG);
        let log = OpenOptions::new()
            .create(true)
            .write(true)
            .append(!fresh)
            .truncate(fresh)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        log::info!(
            "{} utterances from {} speakers, {} steps per epoch, {} weights",
            data.len(),
            data.speakers().len(),
            steps_per_epoch,
            query.num_weights()
        );
        Ok(Self {
            cfg,
            data,
            mfcc,
            aug,
            wavaug,
            specaug: SpecAugConfig::default(),
            query,
            key,
            opt,
            queue,
            bank,
            schedule,
            steps_per_epoch,
            epoch,
            step,
            log,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn query(&self) -> &EncoderParams {
        &self.query
    }

    pub fn key(&self) -> &EncoderParams {
        &self.key
    }

    pub fn queue(&self) -> &NegativeQueue {
        &self.queue
    }

    pub fn bank(&self) -> Option<&PrototypeBank> {
        self.bank.as_ref()
    }

    pub fn data(&self) -> &TrainData {
        &self.data
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.steps_per_epoch
    }

    /// Trains the remaining epochs, checkpointing after each.
    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.cfg.epochs as u32)
    }

    /// Trains until `epoch` epochs are complete.
    pub fn run_until(&mut self, epoch: u32) -> Result<()> {
        while self.epoch < epoch.min(self.cfg.epochs as u32) {
            self.train_epoch()?;
            self.save_checkpoint()?;
        }
        Ok(())
    }

    fn proto_active(&self, epoch: u32) -> bool {
        self.cfg.loss == LossKind::Proto && epoch as usize > self.cfg.proto.warmup_epochs
    }

    pub fn train_epoch(&mut self) -> Result<()> {
        let epoch = self.epoch + 1;
        if self.proto_active(epoch) {
            let since = epoch as usize - self.cfg.proto.warmup_epochs - 1;
            if self.bank.is_none() || since % self.cfg.proto.cluster_every == 0 {
                if self.bank.is_none() {
                    self.event(&format!("event=proto_start epoch={epoch}"))?;
                }
                self.recluster(epoch)?;
            }
        }
        let batches = epoch_batches(&self.data, &self.cfg, epoch);
        for (b, batch) in batches.iter().enumerate() {
            let record = self.train_step(epoch, b as u64, batch)?;
            writeln!(self.log, "{}", record.to_line()).map_err(|e| Error::io(self.cfg.out_dir.join(METRICS_LOG), e))?;
        }
        self.log.flush().map_err(|e| Error::io(self.cfg.out_dir.join(METRICS_LOG), e))?;
        self.epoch = epoch;
        Ok(())
    }

    fn event(&mut self, line: &str) -> Result<()> {
        log::info!("{line}");
        writeln!(self.log, "{line}").map_err(|e| Error::io(self.cfg.out_dir.join(METRICS_LOG), e))
    }

    /// Pseudo-labels from the key encoder's projections of whole utterances.
    fn recluster(&mut self, epoch: u32) -> Result<()> {
        let key = &self.key;
        let rows = par::map(&self.data.utterances, |u| -> Result<Vec<f32>> {
            let mut f = u.features.clone();
            mean_normalize(&mut f);
            Ok(key.encode(&[&f], Mode::Eval)?.remove(0).projection)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let d = rows[0].len();
        let emb = Tensor::new(vec![rows.len(), d], rows.concat())?;
        let mut rng = stream(self.cfg.seed, &[tag("kmeans"), epoch as u64]);
        self.bank = Some(PrototypeBank::build(&emb, &self.cfg.proto, epoch, &mut rng)?);
        Ok(())
    }

    /// A normalized chunk of utterance `i` for one view.
    ///
    /// With waveform augmentation the chunk is picked in post-VAD frame
    /// coordinates first; only the samples it spans, plus a pre-roll for the
    /// reverberation tail, are augmented and featurized, and the clean VAD
    /// decisions select the frames.
    fn view(&self, epoch: u32, i: usize, view: u64) -> Result<Tensor<f32>> {
        let u = &self.data.utterances[i];
        let mut rng = stream(self.cfg.seed, &[tag("view"), epoch as u64, tag(&u.id), view]);
        let fe = self.mfcc.config();
        let mut chunk = match (&self.aug, &u.wave) {
            (Some(corpus), Some(wave)) => {
                let available = u.voiced.len();
                let len = rng.random_range(fe.min_chunk..=fe.max_chunk).min(available);
                let start = rng.random_range(0..=available - len);
                let (f0, f1) = (u.voiced[start], u.voiced[start + len - 1]);
                let c0 = f0.saturating_sub(PRE_ROLL_FRAMES);
                let span = Waveform::new(
                    wave.samples[c0 * fe.hop_length..f1 * fe.hop_length + fe.win_length].to_vec(),
                );
                let augmented = WavAugDraw::sample(corpus, &self.wavaug, &mut rng)?.apply(&span, corpus)?;
                let feats = self.mfcc.compute(&augmented)?;
                let rows: Vec<f32> = u.voiced[start..start + len]
                    .iter()
                    .flat_map(|&t| feats.row(t - c0).iter().copied())
                    .collect();
                let mut chunk = Tensor::new(vec![len, feats.cols()], rows)?;
                mean_normalize(&mut chunk);
                chunk
            }
            _ => sample_chunk(&u.features, fe, &mut rng)
                .ok_or_else(|| Error::Contract(format!("{} has too few frames for a chunk", u.id)))?,
        };
        if self.cfg.specaug {
            let draw = SpecAugDraw::sample(chunk.rows(), chunk.cols(), &self.specaug, &mut rng);
            chunk = draw.apply(&chunk, self.specaug.fill);
            mean_normalize(&mut chunk);
        }
        Ok(chunk)
    }

    fn train_step(&mut self, epoch: u32, batch_index: u64, batch: &[usize]) -> Result<StepLog> {
        let lr = self.schedule.lr(self.step)?;
        self.opt.current_lr = lr as f32;
        let n = batch.len();
        let jobs: Vec<(usize, u64)> = batch.iter().flat_map(|&i| [(i, 0), (i, 1)]).collect();
        let views = par::map(&jobs, |&(i, v)| self.view(epoch, i, v))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let (va, vb): (Vec<&Tensor<f32>>, Vec<&Tensor<f32>>) = (
            views.iter().step_by(2).collect(),
            views.iter().skip(1).step_by(2).collect(),
        );

        let mut tape = Tape::<f32>::new();
        let vars = self.query.bind(&mut tape, true);
        let mut record = StepLog {
            step: self.step + 1,
            epoch,
            lr,
            ..StepLog::default()
        };
        let mut keys = None;
        let (loss, stats) = if self.cfg.loss == LossKind::SimClr {
            let mut both = va.clone();
            both.extend(&vb);
            let (x, layout) = pack(&both)?;
            let x = tape.constant(x);
            let out = self.query.forward(&mut tape, &vars, x, &layout, Mode::Train)?;
            finite_or_abort(&tape, out.projection, self.step + 1)?;
            let a = tape.gather_rows(out.projection, &(0..n).collect::<Vec<_>>())?;
            let b = tape.gather_rows(out.projection, &(n..2 * n).collect::<Vec<_>>())?;
            (simclr_loss(&mut tape, a, b, self.cfg.loss_cfg.tau)?, out.batch_stats)
        } else {
            let (x, layout) = pack(&va)?;
            let x = tape.constant(x);
            let out = self.query.forward(&mut tape, &vars, x, &layout, Mode::Train)?;
            finite_or_abort(&tape, out.projection, self.step + 1)?;
            let k: Vec<f32> = self
                .key
                .encode(&vb, Mode::Eval)?
                .into_iter()
                .flat_map(|p| p.projection)
                .collect();
            let k = Tensor::new(vec![n, self.key.config().proj_dim], k)?;
            let queue = self.queue.snapshot();
            let loss = match self.cfg.loss {
                LossKind::Moco => {
                    let l = moco_loss(&mut tape, out.projection, &k, &queue, self.cfg.loss_cfg.tau)?;
                    record.moco = Some(tape.value(l).item()? as f64);
                    l
                }
                LossKind::Proto if self.bank.is_some() => {
                    let bank = self.bank.as_ref().expect("checked");
                    let labels: Vec<usize> = batch.iter().map(|&i| bank.assignments[i]).collect();
                    let mut rng = stream(self.cfg.seed, &[tag("proto-negatives"), self.step + 1]);
                    let negatives = labels
                        .iter()
                        .map(|&s| sample_negatives(s, bank.num_clusters(), self.cfg.proto.num_negatives, &mut rng))
                        .collect::<Result<Vec<_>>>()?;
                    let (total, proto) =
                        joint_loss(&mut tape, out.projection, &k, &queue, bank, &labels, &negatives, &self.cfg.loss_cfg)?;
                    let p = tape.value(proto).item()? as f64;
                    record.proto = Some(p);
                    record.moco = Some(tape.value(total).item()? as f64 - self.cfg.loss_cfg.alpha * p);
                    total
                }
                LossKind::Proto => {
                    let l = moco_loss(&mut tape, out.projection, &k, &queue, self.cfg.loss_cfg.tau)?;
                    record.moco = Some(tape.value(l).item()? as f64);
                    l
                }
                LossKind::Semi => {
                    let labels: Vec<Option<usize>> = batch.iter().map(|&i| self.data.visible[i]).collect();
                    let t = semi_terms(&mut tape, out.projection, &k, &labels, &queue, &self.cfg.loss_cfg)?;
                    record.moco = Some(tape.value(t.moco).item()? as f64);
                    record.sup = t.sup.map(|s| tape.value(s).item().map(|v| v as f64)).transpose()?;
                    t.total
                }
                LossKind::SimClr => unreachable!("handled above"),
            };
            keys = Some(k);
            (loss, out.batch_stats)
        };
        record.loss = tape.value(loss).item()? as f64;
        if !record.loss.is_finite() {
            return Err(Error::Training(format!(
                "non-finite loss {} at step {} (epoch {epoch}, batch {batch_index})",
                record.loss, record.step
            )));
        }
        let mut grads = tape.backward(loss)?;
        let g: Vec<Tensor<f32>> = vars
            .iter()
            .map(|&v| grads.take(v).ok_or_else(|| Error::Contract("missing parameter gradient".into())))
            .collect::<Result<_>>()?;
        let names = self.query.names().to_vec();
        {
            let mut params: Vec<&mut Tensor<f32>> = self.query.tensors_mut().iter_mut().collect();
            let grefs: Vec<&Tensor<f32>> = g.iter().collect();
            self.opt.step(&mut params, &grefs, &names)?;
        }
        self.query.update_running(&stats, RUNNING_STATS_MOMENTUM)?;
        if let Some(k) = keys {
            ema_update(&mut self.key, &self.query, self.cfg.ema_momentum)?;
            self.queue.push(&k)?;
        }
        self.step += 1;
        record.queue = self.queue.len();
        Ok(record)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut params = self.query.named();
        params.extend(
            self.key
                .named()
                .into_iter()
                .map(|(n, t)| (format!("{KEY_PREFIX}{n}"), t)),
        );
        let mut sections = vec![("queue".to_string(), self.queue.to_bytes())];
        if let Some(b) = &self.bank {
            sections.push(("bank".into(), b.to_bytes()));
        }
        Checkpoint {
            meta: self.cfg.to_text(),
            step: self.step,
            epoch: self.epoch,
            params,
            optimizer: self.opt.clone(),
            sections,
        }
    }

    fn save_checkpoint(&self) -> Result<()> {
        self.checkpoint().save(&checkpoint_path(&self.cfg.out_dir, self.epoch))?;
        let keep = self.cfg.keep_checkpoints as u32;
        if self.epoch >= keep {
            let old = checkpoint_path(&self.cfg.out_dir, self.epoch - keep);
            if old.exists() {
                std::fs::remove_file(&old).map_err(|e| Error::io(&old, e))?;
            }
        }
        Ok(())
    }
}

/// A non-finite projection makes every loss non-finite; stop before the
/// loss kernels reject it as a contract violation.
fn finite_or_abort(tape: &Tape<f32>, v: crate::numerics::Var, step: u64) -> Result<()> {
    if tape.value(v).data().iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Training(format!("non-finite loss at step {step}: the query encoder produced NaN or inf")))
    }
}

fn event_epoch(line: &str) -> Option<u32> {
    line.split(' ')
        .find_map(|kv| kv.strip_prefix("epoch="))
        .and_then(|v| v.parse().ok())
}
