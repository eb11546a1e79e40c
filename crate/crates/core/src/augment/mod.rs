//! Two independently augmented views per utterance: progressive waveform
//! augmentation (reverb, then noise/music/babble at class-specific SNRs) and
//! feature-level time warping with time/frequency masks.

mod signal;
mod specaug;
mod wavaug;

use std::fmt;
use std::path::Path;

use rand::Rng;

pub use signal::{add_noise, add_noise_at, add_reverb, fft_convolve, noise_segment};
pub use specaug::{specaug, SpecAugDraw};
pub use wavaug::{wavaug_view, NoiseDraw, WavAugDraw};

use crate::error::{Error, Result};
use crate::frontend::{load_wav, Waveform};

/// Identity below ±2, smoothly saturating to ±4 above.
pub fn soft_clip(x: f32) -> f32 {
    const KNEE: f32 = 2.0;
    let a = x.abs();
    if a <= KNEE {
        x
    } else {
        x.signum() * (KNEE + KNEE * ((a - KNEE) / KNEE).tanh())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NoiseClass {
    Noise,
    Music,
    Babble,
}

impl NoiseClass {
    pub const ALL: [NoiseClass; 3] = [NoiseClass::Noise, NoiseClass::Music, NoiseClass::Babble];
}

impl fmt::Display for NoiseClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseClass::Noise => "noise",
            NoiseClass::Music => "music",
            NoiseClass::Babble => "babble",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WavAugConfig {
    pub reverb_prob: f64,
    /// Probability of adding one of the noise classes after reverb.
    pub noise_prob: f64,
    pub snr_noise: Vec<f64>,
    pub snr_music: Vec<f64>,
    pub snr_babble: Vec<f64>,
    /// Relative weights of noise, music, babble.
    pub class_probs: [f64; 3],
}

impl Default for WavAugConfig {
    fn default() -> Self {
        Self {
            reverb_prob: 0.8,
            noise_prob: 1.0,
            snr_noise: vec![0.0, 5.0, 10.0, 15.0],
            snr_music: vec![5.0, 8.0, 10.0, 15.0],
            snr_babble: vec![13.0, 15.0, 17.0, 20.0],
            class_probs: [1.0 / 3.0; 3],
        }
    }
}

impl WavAugConfig {
    pub fn snr_list(&self, class: NoiseClass) -> &[f64] {
        match class {
            NoiseClass::Noise => &self.snr_noise,
            NoiseClass::Music => &self.snr_music,
            NoiseClass::Babble => &self.snr_babble,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [self.reverb_prob, self.noise_prob];
        if probs.iter().chain(&self.class_probs).any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("augmentation probabilities must lie in [0, 1]".into()));
        }
        if NoiseClass::ALL.iter().any(|&c| self.snr_list(c).is_empty()) {
            return Err(Error::Config("SNR lists must be non-empty".into()));
        }
        Ok(())
    }
}

/// What masked SpecAug cells are set to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskFill {
    ChunkMean,
    Zero,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpecAugConfig {
    pub warp_window: usize,
    pub max_time_mask: usize,
    pub max_freq_mask: usize,
    pub n_time_masks: usize,
    pub n_freq_masks: usize,
    pub fill: MaskFill,
}

impl Default for SpecAugConfig {
    fn default() -> Self {
        Self {
            warp_window: 10,
            max_time_mask: 5,
            max_freq_mask: 3,
            n_time_masks: 2,
            n_freq_masks: 2,
            fill: MaskFill::ChunkMean,
        }
    }
}

/// Impulse responses and additive-noise recordings, all at 16 kHz.
#[derive(Clone, Debug, Default)]
pub struct AugmentCorpus {
    pub rirs: Vec<Waveform>,
    pub noise: Vec<Waveform>,
    pub music: Vec<Waveform>,
    pub babble: Vec<Waveform>,
}

impl AugmentCorpus {
    pub fn list(&self, class: NoiseClass) -> &[Waveform] {
        match class {
            NoiseClass::Noise => &self.noise,
            NoiseClass::Music => &self.music,
            NoiseClass::Babble => &self.babble,
        }
    }

    /// Loads a `class<TAB>wav_path` manifest, class ∈ {rir, noise, music, babble}.
    pub fn load(manifest: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
        let base = manifest.parent().unwrap_or(Path::new(""));
        let mut corpus = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((class, path)) = line.split_once('\t') else {
                return Err(Error::Config(format!(
                    "{}:{}: expected `class<TAB>path`",
                    manifest.display(),
                    lineno + 1
                )));
            };
            let path = base.join(path);
            let wave = load_wav(&path)?;
            match class {
                "rir" => corpus.rirs.push(wave),
                "noise" => corpus.noise.push(wave),
                "music" => corpus.music.push(wave),
                "babble" => corpus.babble.push(wave),
                other => {
                    return Err(Error::Config(format!(
                        "{}:{}: unknown corpus class `{other}`",
                        manifest.display(),
                        lineno + 1
                    )))
                }
            }
        }
        Ok(corpus)
    }

    /// Checks that every list an enabled augmentation will draw from is populated.
    pub fn validate(&self, cfg: &WavAugConfig) -> Result<()> {
        if cfg.reverb_prob > 0.0 && self.rirs.is_empty() {
            return Err(Error::Augment("reverb enabled but the RIR list is empty".into()));
        }
        if cfg.noise_prob > 0.0 {
            for (c, &p) in NoiseClass::ALL.iter().zip(&cfg.class_probs) {
                if p > 0.0 && self.list(*c).is_empty() {
                    return Err(Error::Augment(format!("{c} enabled but its list is empty")));
                }
            }
        }
        Ok(())
    }
}

/// Synthetic room impulse response: a direct tap followed by sparse taps with
/// random sign under an exponential decay reaching −60 dB at `rt60` seconds.
pub fn synthetic_rir<R: Rng + ?Sized>(rt60: f64, density_per_sec: f64, rng: &mut R) -> Waveform {
    let sr = crate::frontend::SAMPLE_RATE as f64;
    let len = ((rt60 * sr) as usize).max(2);
    let mut taps = vec![0.0f32; len];
    taps[0] = 1.0;
    let expected = density_per_sec * rt60;
    let count = expected.round().max(1.0) as usize;
    // a short pre-delay keeps the direct path the strongest tap
    let start = (0.002 * sr) as usize;
    for _ in 0..count {
        let t = rng.random_range(start.min(len - 1)..len);
        let decay = 10f64.powf(-3.0 * t as f64 / sr / rt60);
        let amp = decay * rng.random_range(0.2..0.9);
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        taps[t] = (taps[t] + (sign * amp) as f32).clamp(-0.9, 0.9);
    }
    Waveform::new(taps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn soft_clip_is_identity_then_bounded() {
        for x in [-2.0f32, -0.3, 0.0, 1.0, 2.0] {
            assert_eq!(soft_clip(x), x);
        }
        for x in [2.5f32, 10.0, 1e6, f32::MAX] {
            let y = soft_clip(x);
            assert!(y > 2.0 && y <= 4.0);
            assert_eq!(soft_clip(-x), -y);
        }
    }

    #[test]
    fn synthetic_rir_peaks_at_zero() {
        let mut r = stream(5, &[]);
        for _ in 0..20 {
            let rir = synthetic_rir(0.4, 2000.0, &mut r);
            let peak = rir.samples.iter().map(|v| v.abs()).fold(0.0f32, f32::max);
            assert_eq!(peak, rir.samples[0].abs());
        }
    }
}
