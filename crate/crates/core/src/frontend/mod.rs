//! Waveforms to mean-normalized MFCC chunks.

mod chunk;
mod manifest;
mod mfcc;
mod vad;
mod wav;

pub use chunk::{mean_normalize, sample_chunk};
pub use manifest::{format_manifest, parse_manifest, read_manifest, ManifestEntry};
pub use mfcc::{frame_count, Mfcc};
pub use vad::{energy_vad, frame_log_energy, select_frames};
pub use wav::{load_wav, write_wav, SAMPLE_RATE};

use crate::error::Result;
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>) -> Self {
        Self {
            samples,
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>() / self.samples.len() as f64
    }
}

/// Where cepstral mean normalization is computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MeanNorm {
    PerChunk,
    PerUtterance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub win_length: usize,
    pub hop_length: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub n_ceps: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub preemphasis: f32,
    /// Added to the utterance's mean log-energy to form the VAD threshold.
    pub vad_offset: f64,
    /// Absolute log mean-square floor; frames below it are always dropped.
    pub vad_floor: f64,
    pub min_chunk: usize,
    pub max_chunk: usize,
    pub mean_norm: MeanNorm,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            sample_rate: SAMPLE_RATE,
            win_length: 400,
            hop_length: 160,
            n_fft: 512,
            n_mels: 30,
            n_ceps: 30,
            f_min: 20.0,
            f_max: 7600.0,
            preemphasis: 0.97,
            vad_offset: -4.0,
            vad_floor: (1e-7f64).ln(),
            min_chunk: 200,
            max_chunk: 400,
            mean_norm: MeanNorm::PerChunk,
        }
    }
}

/// A window of normalized MFCC frames, the unit of encoder input.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureChunk {
    /// `T x F`, one row per frame.
    pub frames: Tensor<f32>,
    pub utterance_id: String,
    pub speaker: Option<String>,
}

/// Post-VAD features of a whole utterance (not yet normalized).
pub fn utterance_features(w: &Waveform, mfcc: &Mfcc) -> Result<Tensor<f32>> {
    let mask = energy_vad(w, mfcc.config())?;
    select_frames(&mfcc.compute(w)?, &mask)
}
