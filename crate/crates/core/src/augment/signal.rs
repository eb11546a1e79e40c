use std::cell::RefCell;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::soft_clip;
use crate::error::{Error, Result};
use crate::frontend::Waveform;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Full linear convolution via FFT; output length `a.len() + b.len() - 1`.
pub fn fft_convolve(a: &[f32], b: &[f32]) -> Vec<f32> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let out_len = a.len() + b.len() - 1;
    if a.len().min(b.len()) <= 32 {
        let mut out = vec![0.0f32; out_len];
        for (i, &x) in a.iter().enumerate() {
            for (j, &h) in b.iter().enumerate() {
                out[i + j] += x * h;
            }
        }
        return out;
    }
    let n = out_len.next_power_of_two();
    let (fwd, inv) = PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        (p.plan_fft_forward(n), p.plan_fft_inverse(n))
    });
    let pad = |s: &[f32]| {
        let mut v: Vec<Complex<f64>> = s.iter().map(|&x| Complex::new(x as f64, 0.0)).collect();
        v.resize(n, Complex::new(0.0, 0.0));
        v
    };
    let (mut fa, mut fb) = (pad(a), pad(b));
    fwd.process(&mut fa);
    fwd.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    inv.process(&mut fa);
    fa[..out_len].iter().map(|c| (c.re / n as f64) as f32).collect()
}

/// Reverberates `w` with `rir`: full convolution, aligned at the RIR's
/// strongest tap, truncated to the input length and rescaled to the input RMS.
pub fn add_reverb(w: &Waveform, rir: &Waveform) -> Result<Waveform> {
    if rir.samples.is_empty() {
        return Err(Error::Augment("empty room impulse response".into()));
    }
    if rir.sample_rate != w.sample_rate {
        return Err(Error::Augment(format!(
            "impulse response at {} Hz, signal at {} Hz",
            rir.sample_rate, w.sample_rate
        )));
    }
    let peak = rir
        .samples
        .iter()
        .enumerate()
        .fold((0, 0.0f32), |(bi, bv), (i, &v)| if v.abs() > bv { (i, v.abs()) } else { (bi, bv) })
        .0;
    let full = fft_convolve(&w.samples, &rir.samples);
    let mut out: Vec<f32> = full[peak..peak + w.samples.len()].to_vec();
    let (p_in, p_out) = (w.power(), Waveform::new(out.clone()).power());
    if p_out > 0.0 {
        let g = (p_in / p_out).sqrt() as f32;
        out.iter_mut().for_each(|x| *x = soft_clip(*x * g));
    }
    Ok(Waveform {
        samples: out,
        sample_rate: w.sample_rate,
    })
}

/// `noise` looped/cropped to `len` samples starting at `offset`.
pub fn noise_segment(noise: &[f32], len: usize, offset: usize) -> Vec<f32> {
    (0..len).map(|i| noise[(offset + i) % noise.len()]).collect()
}

/// `w + g·noise` with `g` chosen so that the signal-to-noise power ratio over
/// the whole segment equals `snr_db`.
pub fn add_noise(w: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform> {
    add_noise_at(w, noise, snr_db, 0)
}

pub fn add_noise_at(w: &Waveform, noise: &Waveform, snr_db: f64, offset: usize) -> Result<Waveform> {
    if !snr_db.is_finite() {
        return Err(Error::Augment(format!(
            "SNR must be finite, got {snr_db}; omit the noise instead"
        )));
    }
    if noise.samples.is_empty() {
        return Err(Error::Augment("empty noise waveform".into()));
    }
    let seg = noise_segment(&noise.samples, w.samples.len(), offset);
    let p_noise = Waveform::new(seg.clone()).power();
    if p_noise <= 0.0 {
        return Err(Error::Augment("noise segment has zero power".into()));
    }
    let g = (w.power() / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let samples = w
        .samples
        .iter()
        .zip(&seg)
        .map(|(&x, &n)| soft_clip((x as f64 + g * n as f64) as f32))
        .collect();
    Ok(Waveform {
        samples,
        sample_rate: w.sample_rate,
    })
}
