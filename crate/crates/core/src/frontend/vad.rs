use super::mfcc::frame_count;
use super::{FrontendConfig, Waveform};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Per-frame log of the mean-square sample energy, same framing as the MFCCs.
pub fn frame_log_energy(w: &Waveform, cfg: &FrontendConfig) -> Vec<f64> {
    let frames = frame_count(w.samples.len(), cfg.win_length, cfg.hop_length);
    (0..frames)
        .map(|t| {
            let s = &w.samples[t * cfg.hop_length..t * cfg.hop_length + cfg.win_length];
            let e: f64 = s.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>() / s.len() as f64;
            (e + 1e-12).ln()
        })
        .collect()
}

/// Energy VAD: a frame is kept when its log-energy exceeds the utterance mean
/// plus `vad_offset` and the absolute floor `vad_floor`.
pub fn energy_vad(w: &Waveform, cfg: &FrontendConfig) -> Result<Vec<bool>> {
    let energy = frame_log_energy(w, cfg);
    if energy.is_empty() {
        return Err(Error::Frontend("utterance shorter than one frame".into()));
    }
    let mean = energy.iter().sum::<f64>() / energy.len() as f64;
    let threshold = (mean + cfg.vad_offset).max(cfg.vad_floor);
    let mask: Vec<bool> = energy.iter().map(|&e| e > threshold).collect();
    if !mask.iter().any(|&k| k) {
        return Err(Error::Frontend(
            "voice activity detection removed every frame".into(),
        ));
    }
    Ok(mask)
}

/// Rows of `features` whose mask entry is set.
pub fn select_frames(features: &Tensor<f32>, mask: &[bool]) -> Result<Tensor<f32>> {
    let n = features.rows().min(mask.len());
    let cols = features.cols();
    let mut data = Vec::with_capacity(n * cols);
    for t in (0..n).filter(|&t| mask[t]) {
        data.extend_from_slice(features.row(t));
    }
    let rows = data.len() / cols.max(1);
    if rows == 0 {
        return Err(Error::Frontend("no frames selected".into()));
    }
    Tensor::new(vec![rows, cols], data)
}
