use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{FrontendConfig, Waveform};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const LOG_FLOOR: f32 = 1e-10;

/// Number of whole frames in `len` samples.
pub fn frame_count(len: usize, win: usize, hop: usize) -> usize {
    if len < win {
        0
    } else {
        (len - win) / hop + 1
    }
}

fn hz_to_mel(f: f64) -> f64 {
    1127.0 * (1.0 + f / 700.0).ln()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * ((m / 1127.0).exp() - 1.0)
}

/// Precomputed MFCC pipeline: pre-emphasis, Hamming window, power spectrum,
/// triangular mel filterbank, log, orthonormal DCT-II.
pub struct Mfcc {
    cfg: FrontendConfig,
    window: Vec<f32>,
    /// `n_mels x (n_fft/2 + 1)`
    filters: Vec<f32>,
    /// Nonzero bin range of each filter.
    spans: Vec<(usize, usize)>,
    /// `n_ceps x n_mels`
    dct: Vec<f32>,
    fft: Arc<dyn Fft<f32>>,
}

impl Mfcc {
    pub fn new(cfg: &FrontendConfig) -> Result<Self> {
        if cfg.n_fft < cfg.win_length || cfg.n_ceps > cfg.n_mels || cfg.f_max <= cfg.f_min {
            return Err(Error::Config(format!(
                "inconsistent MFCC geometry: n_fft {}, window {}, {} cepstra from {} mels, band {}..{} Hz",
                cfg.n_fft, cfg.win_length, cfg.n_ceps, cfg.n_mels, cfg.f_min, cfg.f_max
            )));
        }
        let n = cfg.win_length;
        let window = (0..n)
            .map(|i| {
                (0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n as f64 - 1.0)).cos()) as f32
            })
            .collect();

        let bins = cfg.n_fft / 2 + 1;
        let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let mut filters = vec![0.0f32; cfg.n_mels * bins];
        for m in 0..cfg.n_mels {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..bins {
                let f = k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64;
                let w = if f > left && f <= center {
                    (f - left) / (center - left)
                } else if f > center && f < right {
                    (right - f) / (right - center)
                } else {
                    0.0
                };
                filters[m * bins + k] = w as f32;
            }
        }

        let spans = filters
            .chunks(bins)
            .map(|f| {
                let lo = f.iter().position(|&w| w != 0.0).unwrap_or(0);
                let hi = f.iter().rposition(|&w| w != 0.0).map_or(lo, |i| i + 1);
                (lo, hi)
            })
            .collect();

        let nm = cfg.n_mels as f64;
        let mut dct = vec![0.0f32; cfg.n_ceps * cfg.n_mels];
        for k in 0..cfg.n_ceps {
            let scale = if k == 0 { (1.0 / nm).sqrt() } else { (2.0 / nm).sqrt() };
            for j in 0..cfg.n_mels {
                dct[k * cfg.n_mels + j] = (scale
                    * (std::f64::consts::PI * k as f64 * (2.0 * j as f64 + 1.0) / (2.0 * nm)).cos())
                    as f32;
            }
        }

        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        Ok(Self {
            cfg: cfg.clone(),
            window,
            filters,
            spans,
            dct,
            fft,
        })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    /// `T x n_ceps` cepstra, one row per 25 ms frame at a 10 ms shift.
    pub fn compute(&self, w: &Waveform) -> Result<Tensor<f32>> {
        let cfg = &self.cfg;
        let frames = frame_count(w.samples.len(), cfg.win_length, cfg.hop_length);
        if frames == 0 {
            return Err(Error::Frontend(format!(
                "waveform of {} samples is shorter than one {}-sample frame",
                w.samples.len(),
                cfg.win_length
            )));
        }
        let bins = cfg.n_fft / 2 + 1;
        let mut buf = vec![Complex::new(0.0f32, 0.0); cfg.n_fft];
        let mut scratch = vec![Complex::new(0.0f32, 0.0); self.fft.get_inplace_scratch_len()];
        let mut frame = vec![0.0f32; cfg.win_length];
        let mut power = vec![0.0f32; bins];
        let mut logmel = vec![0.0f32; cfg.n_mels];
        let mut out = Vec::with_capacity(frames * cfg.n_ceps);
        for t in 0..frames {
            let start = t * cfg.hop_length;
            frame.copy_from_slice(&w.samples[start..start + cfg.win_length]);
            for i in (1..frame.len()).rev() {
                frame[i] -= cfg.preemphasis * frame[i - 1];
            }
            frame[0] -= cfg.preemphasis * frame[0];
            for (b, (&x, &h)) in buf.iter_mut().zip(frame.iter().zip(&self.window)) {
                *b = Complex::new(x * h, 0.0);
            }
            buf[cfg.win_length..].fill(Complex::new(0.0, 0.0));
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for (m, lm) in logmel.iter_mut().enumerate() {
                let (lo, hi) = self.spans[m];
                let e: f32 = self.filters[m * bins + lo..m * bins + hi]
                    .iter()
                    .zip(&power[lo..hi])
                    .map(|(f, p)| f * p)
                    .sum();
                *lm = e.max(LOG_FLOOR).ln();
            }
            for k in 0..cfg.n_ceps {
                let row = &self.dct[k * cfg.n_mels..(k + 1) * cfg.n_mels];
                out.push(row.iter().zip(&logmel).map(|(a, b)| a * b).sum());
            }
        }
        Tensor::new(vec![frames, cfg.n_ceps], out)
    }
}
