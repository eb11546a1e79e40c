//! Synthetic speaker-verification corpus for desk-scale runs.
//!
//! Speakers differ in pitch band and vocal-tract shape. Every utterance is
//! recorded under its own random condition (background noise at a random SNR,
//! sometimes reverberation, a mild channel coloration), so that the condition
//! is a nuisance shared by both views of an unaugmented chunk. Held-out
//! speakers provide the evaluation trials.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use super::synth::{babble, channel_filter, colored_noise, music, utterance, Voice};
use crate::augment::{add_noise, add_reverb, synthetic_rir};
use crate::error::{Error, Result};
use crate::eval::{format_trials, Trial};
use crate::frontend::{format_manifest, write_wav, ManifestEntry, Waveform};
use crate::par;
use crate::rng::{stream, tag};

#[derive(Clone, Debug, PartialEq)]
pub struct ToySpec {
    pub train_speakers: usize,
    pub eval_speakers: usize,
    pub train_utterances: usize,
    pub eval_utterances: usize,
    /// Utterance length range in seconds.
    pub seconds: (f64, f64),
    /// Recording-condition SNR range in dB.
    pub condition_snr: (f64, f64),
    pub condition_reverb_prob: f64,
    pub rirs: usize,
    pub noises: usize,
    pub musics: usize,
    pub babbles: usize,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            train_speakers: 20,
            eval_speakers: 10,
            train_utterances: 48,
            eval_utterances: 12,
            seconds: (2.0, 3.5),
            condition_snr: (0.0, 10.0),
            condition_reverb_prob: 0.8,
            rirs: 24,
            noises: 12,
            musics: 6,
            babbles: 6,
            seed: 0,
        }
    }
}

/// Paths written by [`generate_toy_corpus`].
#[derive(Clone, Debug, PartialEq)]
pub struct ToyCorpus {
    pub dir: PathBuf,
    pub train_manifest: PathBuf,
    pub eval_manifest: PathBuf,
    pub trials: PathBuf,
    pub aug_manifest: PathBuf,
    pub config: PathBuf,
}

struct Speaker {
    id: String,
    voice: Voice,
}

/// Disjoint pitch bands in 85..255 Hz, shuffled over speakers.
fn speakers(spec: &ToySpec) -> Vec<Speaker> {
    let total = spec.train_speakers + spec.eval_speakers;
    let mut rng = stream(spec.seed, &[tag("toy"), tag("speakers")]);
    let width = 170.0 / total as f64;
    let mut bands: Vec<usize> = (0..total).collect();
    bands.shuffle(&mut rng);
    bands
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            let lo = 85.0 + b as f64 * width;
            let voice = Voice::random((lo + 0.1 * width, lo + 0.9 * width), &mut rng);
            let id = if i < spec.train_speakers {
                format!("spk{i:03}")
            } else {
                format!("eval{:03}", i - spec.train_speakers)
            };
            Speaker { id, voice }
        })
        .collect()
}

/// One utterance under a fresh recording condition.
pub fn recorded_utterance<R: Rng + ?Sized>(voice: &Voice, spec: &ToySpec, rng: &mut R) -> Result<Waveform> {
    let seconds = rng.random_range(spec.seconds.0..=spec.seconds.1);
    let mut w = Waveform::new(utterance(voice, seconds, rng));
    if rng.random_bool(spec.condition_reverb_prob) {
        let rir = synthetic_rir(rng.random_range(0.2..0.7), 1500.0, rng);
        w = add_reverb(&w, &rir)?;
    }
    let color = rng.random_range(-0.5..0.95);
    let hum = rng.random_bool(0.3).then(|| rng.random_range(50.0..120.0));
    let noise = Waveform::new(colored_noise(seconds, color, hum, rng));
    let snr = rng.random_range(spec.condition_snr.0..=spec.condition_snr.1);
    w = add_noise(&w, &noise, snr)?;
    channel_filter(
        &mut w.samples,
        rng.random_range(300.0..3000.0),
        rng.random_range(-4.0..4.0),
        rng.random_range(0.7..2.0),
    );
    let peak = w.samples.iter().fold(0.0f32, |m, v| m.max(v.abs())).max(1e-9);
    let g = rng.random_range(0.3..0.9) / peak;
    w.samples.iter_mut().for_each(|v| *v *= g);
    Ok(w)
}

fn write(dir: &Path, rel: &str, w: &Waveform) -> Result<()> {
    write_wav(&dir.join(rel), w)
}

/// Target pairs within each speaker plus as many random cross-speaker pairs.
fn balanced_trials(ids: &[(String, String)], seed: u64) -> Vec<Trial> {
    let mut trials = Vec::new();
    for (i, (a, sa)) in ids.iter().enumerate() {
        for (b, sb) in &ids[i + 1..] {
            if sa == sb {
                trials.push(Trial {
                    target: true,
                    enroll: a.clone(),
                    test: b.clone(),
                });
            }
        }
    }
    let targets = trials.len();
    let mut rng = stream(seed, &[tag("toy"), tag("trials")]);
    let mut seen = std::collections::BTreeSet::new();
    while trials.len() < 2 * targets {
        let i = rng.random_range(0..ids.len());
        let j = rng.random_range(0..ids.len());
        if ids[i].1 != ids[j].1 && seen.insert((i.min(j), i.max(j))) {
            trials.push(Trial {
                target: false,
                enroll: ids[i].0.clone(),
                test: ids[j].0.clone(),
            });
        }
    }
    trials
}

/// Writes wavs, `train.tsv`, `eval.tsv`, `trials.txt`, `aug.tsv` and a
/// `toy.cfg` run config into `dir`. The output depends only on `spec`.
pub fn generate_toy_corpus(dir: &Path, spec: &ToySpec) -> Result<ToyCorpus> {
    if spec.train_speakers < 2 || spec.eval_speakers < 2 || spec.eval_utterances < 2 {
        return Err(Error::Config(
            "toy corpus needs at least 2 train speakers, 2 eval speakers and 2 eval utterances each".into(),
        ));
    }
    for sub in ["wav/train", "wav/eval", "wav/aug"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let speakers = speakers(spec);

    // (speaker index, utterance index, relative path)
    let mut jobs = Vec::new();
    for (s, spk) in speakers.iter().enumerate() {
        let (split, n) = if s < spec.train_speakers {
            ("train", spec.train_utterances)
        } else {
            ("eval", spec.eval_utterances)
        };
        for u in 0..n {
            jobs.push((s, u, format!("wav/{split}/{}-{u:03}.wav", spk.id)));
        }
    }
    par::map(&jobs, |(s, u, rel)| {
        let mut rng = stream(spec.seed, &[tag("toy"), tag("utt"), *s as u64, *u as u64]);
        write(dir, rel, &recorded_utterance(&speakers[*s].voice, spec, &mut rng)?)
    })
    .into_iter()
    .collect::<Result<()>>()?;

    let entry = |(s, u, rel): &(usize, usize, String)| ManifestEntry {
        utterance_id: format!("{}-{u:03}", speakers[*s].id),
        speaker: Some(speakers[*s].id.clone()),
        path: PathBuf::from(rel),
    };
    let (train, eval): (Vec<_>, Vec<_>) = jobs.iter().partition(|(s, _, _)| *s < spec.train_speakers);
    let train: Vec<ManifestEntry> = train.into_iter().map(entry).collect();
    let eval: Vec<ManifestEntry> = eval.into_iter().map(entry).collect();
    let ids: Vec<(String, String)> = eval
        .iter()
        .map(|e| (e.utterance_id.clone(), e.speaker.clone().unwrap_or_default()))
        .collect();
    let trials = balanced_trials(&ids, spec.seed);

    let aug = augmentation_set(dir, spec)?;

    let out = ToyCorpus {
        dir: dir.to_path_buf(),
        train_manifest: dir.join("train.tsv"),
        eval_manifest: dir.join("eval.tsv"),
        trials: dir.join("trials.txt"),
        aug_manifest: dir.join("aug.tsv"),
        config: dir.join("toy.cfg"),
    };
    let files = [
        (&out.train_manifest, format_manifest(&train)),
        (&out.eval_manifest, format_manifest(&eval)),
        (&out.trials, format_trials(&trials)),
        (&out.aug_manifest, aug),
        (
            &out.config,
            format!(
                "preset = toy\ntrain.manifest = train.tsv\neval.manifest = eval.tsv\neval.trials = trials.txt\n\
                 aug.manifest = aug.tsv\nout_dir = run\nseed = {}\n",
                spec.seed
            ),
        ),
    ];
    for (path, text) in files {
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    Ok(out)
}

/// Impulse responses, noise, music and babble recordings for WavAug.
/// Babble uses its own voices, none of which is a corpus speaker.
fn augmentation_set(dir: &Path, spec: &ToySpec) -> Result<String> {
    #[derive(Clone, Copy)]
    enum Kind {
        Rir,
        Noise,
        Music,
        Babble,
    }
    let mut jobs = Vec::new();
    for (kind, name, n) in [
        (Kind::Rir, "rir", spec.rirs),
        (Kind::Noise, "noise", spec.noises),
        (Kind::Music, "music", spec.musics),
        (Kind::Babble, "babble", spec.babbles),
    ] {
        for i in 0..n {
            jobs.push((kind, name, i));
        }
    }
    let lines = par::map(&jobs, |&(kind, name, i)| {
        let mut rng = stream(spec.seed, &[tag("toy"), tag(name), i as u64]);
        let w = match kind {
            Kind::Rir => synthetic_rir(rng.random_range(0.2..0.8), 1500.0, &mut rng),
            Kind::Noise => {
                let color = rng.random_range(-0.5..0.95);
                let hum = rng.random_bool(0.3).then(|| rng.random_range(50.0..120.0));
                Waveform::new(colored_noise(6.0, color, hum, &mut rng))
            }
            Kind::Music => Waveform::new(music(6.0, &mut rng)),
            Kind::Babble => {
                let talkers = rng.random_range(3..=6);
                let voices: Vec<Voice> = (0..talkers)
                    .map(|_| {
                        let lo = rng.random_range(85.0..240.0);
                        Voice::random((lo, lo + 15.0), &mut rng)
                    })
                    .collect();
                Waveform::new(babble(&voices, 6.0, &mut rng))
            }
        };
        let rel = format!("wav/aug/{name}-{i:03}.wav");
        write(dir, &rel, &w)?;
        Ok(format!("{name}\t{rel}\n"))
    });
    lines.into_iter().collect()
}
