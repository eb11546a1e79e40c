//! Signal synthesis for the toy corpus: voiced "speech" from a harmonic
//! source shaped by formant resonances, and the noise, music and babble
//! recordings used for augmentation and recording conditions.

use std::f64::consts::PI;

use rand::Rng;

use crate::frontend::SAMPLE_RATE;

const SR: f64 = SAMPLE_RATE as f64;

/// Shared vowel inventory: first three formants (Hz) of a reference voice.
const VOWELS: [[f64; 3]; 6] = [
    [730.0, 1090.0, 2440.0],
    [270.0, 2290.0, 3010.0],
    [300.0, 870.0, 2240.0],
    [530.0, 1840.0, 2480.0],
    [570.0, 840.0, 2410.0],
    [440.0, 1020.0, 2240.0],
];
const BANDWIDTHS: [f64; 3] = [80.0, 110.0, 160.0];

/// Voice characteristics of one synthetic speaker.
#[derive(Clone, Debug, PartialEq)]
pub struct Voice {
    /// Range the speaker's fundamental frequency is drawn from, in Hz.
    pub f0_range: (f64, f64),
    /// Vocal-tract scale applied to every formant.
    pub formant_scale: f64,
    /// Per-formant offsets on top of the scale, in Hz.
    pub formant_shift: [f64; 3],
    /// Source roll-off exponent: harmonic `k` has amplitude `k^-tilt`.
    pub tilt: f64,
    /// Aspiration noise level relative to the voiced source.
    pub breathiness: f64,
    /// Syllables per second.
    pub rate: f64,
}

impl Voice {
    /// A random voice whose f0 lies in `f0_range`.
    pub fn random<R: Rng + ?Sized>(f0_range: (f64, f64), rng: &mut R) -> Self {
        Self {
            f0_range,
            formant_scale: rng.random_range(0.82..1.18),
            formant_shift: [
                rng.random_range(-60.0..60.0),
                rng.random_range(-150.0..150.0),
                rng.random_range(-200.0..200.0),
            ],
            tilt: rng.random_range(0.8..2.0),
            breathiness: rng.random_range(0.0..0.08),
            rate: rng.random_range(3.0..5.5),
        }
    }

    fn formants(&self, vowel: usize) -> [f64; 3] {
        let mut f = [0.0; 3];
        for (k, v) in f.iter_mut().enumerate() {
            *v = (VOWELS[vowel][k] * self.formant_scale + self.formant_shift[k]).max(150.0);
        }
        f
    }
}

/// Magnitude response of a cascade of resonators at `freq`.
fn envelope(formants: &[f64; 3], freq: f64) -> f64 {
    formants
        .iter()
        .zip(BANDWIDTHS)
        .map(|(&fc, bw)| {
            let half = bw / 2.0;
            // Two symmetric poles at ±fc, normalized to unit gain at DC.
            let a = ((fc * fc + half * half) / ((freq - fc).powi(2) + half * half)).sqrt();
            let b = ((fc * fc + half * half) / ((freq + fc).powi(2) + half * half)).sqrt();
            a * b
        })
        .product()
}

/// One utterance of `seconds` from `voice`: syllables separated by short
/// pauses, each on a random vowel with its own pitch.
pub fn utterance<R: Rng + ?Sized>(voice: &Voice, seconds: f64, rng: &mut R) -> Vec<f32> {
    let n = (seconds * SR) as usize;
    let mut out = vec![0.0f64; n];
    let mut t = (rng.random_range(0.02..0.12) * SR) as usize;
    while t < n {
        let dur = ((1.0 / voice.rate) * rng.random_range(0.6..1.1) * SR) as usize;
        let end = (t + dur).min(n);
        let vowel = rng.random_range(0..VOWELS.len());
        let next_vowel = rng.random_range(0..VOWELS.len());
        let f0_start = rng.random_range(voice.f0_range.0..voice.f0_range.1);
        let f0_end = (f0_start * rng.random_range(0.93..1.05)).clamp(voice.f0_range.0, voice.f0_range.1);
        syllable(
            voice,
            vowel,
            next_vowel,
            (f0_start, f0_end),
            &mut out[t..end],
            rng,
        );
        t = end + (rng.random_range(0.03..0.15) * SR) as usize;
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
    out.iter().map(|v| (0.5 * v / peak) as f32).collect()
}

fn syllable<R: Rng + ?Sized>(
    voice: &Voice,
    vowel: usize,
    next_vowel: usize,
    f0: (f64, f64),
    out: &mut [f64],
    rng: &mut R,
) {
    let len = out.len();
    if len < 2 {
        return;
    }
    let (fa, fb) = (voice.formants(vowel), voice.formants(next_vowel));
    let max_harm = (5000.0 / f0.0.min(f0.1)) as usize;
    let mut phase = vec![0.0f64; max_harm + 1];
    // Harmonic amplitudes are refreshed every block as formants glide.
    const BLOCK: usize = 160;
    let mut amps = vec![0.0f64; max_harm + 1];
    let mut breath_state = 0.0f64;
    for start in (0..len).step_by(BLOCK) {
        let frac = start as f64 / len as f64;
        // Hold the vowel for the first 60%, then glide towards the next one.
        let g = ((frac - 0.6) / 0.4).clamp(0.0, 1.0);
        let mut form = [0.0; 3];
        for k in 0..3 {
            form[k] = fa[k] + g * (fb[k] - fa[k]);
        }
        let f0_now = f0.0 + frac * (f0.1 - f0.0);
        for (h, a) in amps.iter_mut().enumerate().skip(1) {
            let f = h as f64 * f0_now;
            *a = if f < 7000.0 {
                (h as f64).powf(-voice.tilt) * envelope(&form, f)
            } else {
                0.0
            };
        }
        let norm = amps.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        for i in start..(start + BLOCK).min(len) {
            let x = i as f64 / len as f64;
            let env = (PI * x).sin().powf(0.6);
            let f0_i = f0.0 + x * (f0.1 - f0.0);
            let mut s = 0.0;
            for (h, p) in phase.iter_mut().enumerate().skip(1) {
                *p += 2.0 * PI * h as f64 * f0_i / SR;
                if amps[h] > 0.0 {
                    s += amps[h] * p.sin();
                }
            }
            let white: f64 = rng.random_range(-1.0..1.0);
            breath_state = 0.7 * breath_state + 0.3 * white;
            out[i] += env * (s / norm + voice.breathiness * breath_state);
        }
        for p in phase.iter_mut() {
            *p %= 2.0 * PI;
        }
    }
}

/// Colored noise: white noise through a one-pole filter with coefficient
/// `color` (positive is low-passed, negative high-passed), plus optional hum.
pub fn colored_noise<R: Rng + ?Sized>(seconds: f64, color: f64, hum_hz: Option<f64>, rng: &mut R) -> Vec<f32> {
    let n = (seconds * SR) as usize;
    let mut state = 0.0f64;
    let hum_level = rng.random_range(0.2..0.6);
    let out: Vec<f64> = (0..n)
        .map(|i| {
            let w: f64 = rng.random_range(-1.0..1.0);
            state = color * state + (1.0 - color.abs()) * w;
            let hum = hum_hz.map_or(0.0, |f| {
                hum_level * ((2.0 * PI * f * i as f64 / SR).sin() + 0.5 * (4.0 * PI * f * i as f64 / SR).sin())
            });
            state + hum
        })
        .collect();
    scale_to_peak(&out, 0.5)
}

/// Tonal "music": a sequence of chords of harmonic tones with a soft beat.
pub fn music<R: Rng + ?Sized>(seconds: f64, rng: &mut R) -> Vec<f32> {
    let n = (seconds * SR) as usize;
    let mut out = vec![0.0f64; n];
    let note_len = (rng.random_range(0.15..0.4) * SR) as usize;
    let mut t = 0;
    while t < n {
        let end = (t + note_len).min(n);
        let root = 110.0 * 2f64.powf(rng.random_range(0..24) as f64 / 12.0);
        let chord = [1.0, 2f64.powf(4.0 / 12.0), 2f64.powf(7.0 / 12.0)];
        for (k, &ratio) in chord.iter().enumerate() {
            let f = root * ratio * if k == 0 { 1.0 } else { 2.0 };
            for (j, o) in out[t..end].iter_mut().enumerate() {
                let decay = (-3.0 * j as f64 / note_len as f64).exp();
                let ph = 2.0 * PI * f * j as f64 / SR;
                *o += decay * (ph.sin() + 0.4 * (2.0 * ph).sin() + 0.2 * (3.0 * ph).sin());
            }
        }
        // percussive click at the note onset
        for o in out[t..(t + 200).min(end)].iter_mut() {
            *o += rng.random_range(-1.0..1.0);
        }
        t = end;
    }
    scale_to_peak(&out, 0.5)
}

/// Several overlapping talkers.
pub fn babble<R: Rng + ?Sized>(voices: &[Voice], seconds: f64, rng: &mut R) -> Vec<f32> {
    let n = (seconds * SR) as usize;
    let mut out = vec![0.0f64; n];
    for v in voices {
        for (o, s) in out.iter_mut().zip(utterance(v, seconds, rng)) {
            *o += s as f64;
        }
    }
    scale_to_peak(&out, 0.5)
}

/// Second-order peaking filter applied in place: a random microphone/channel
/// coloration.
pub fn channel_filter(x: &mut [f32], center_hz: f64, gain_db: f64, q: f64) {
    let a = 10f64.powf(gain_db / 40.0);
    let w0 = 2.0 * PI * center_hz / SR;
    let alpha = w0.sin() / (2.0 * q);
    let (b0, b1, b2) = (1.0 + alpha * a, -2.0 * w0.cos(), 1.0 - alpha * a);
    let (a0, a1, a2) = (1.0 + alpha / a, -2.0 * w0.cos(), 1.0 - alpha / a);
    let (mut x1, mut x2, mut y1, mut y2) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for v in x.iter_mut() {
        let x0 = *v as f64;
        let y0 = (b0 * x0 + b1 * x1 + b2 * x2 - a1 * y1 - a2 * y2) / a0;
        x2 = x1;
        x1 = x0;
        y2 = y1;
        y1 = y0;
        *v = y0 as f32;
    }
}

fn scale_to_peak(x: &[f64], peak: f64) -> Vec<f32> {
    let m = x.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    x.iter().map(|v| (peak * v / m) as f32).collect()
}
