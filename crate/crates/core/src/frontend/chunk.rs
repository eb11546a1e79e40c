use rand::Rng;

use super::FrontendConfig;
use crate::numerics::Tensor;

/// Subtracts the per-coefficient mean over all rows.
pub fn mean_normalize(features: &mut Tensor<f32>) {
    let (rows, cols) = (features.rows(), features.cols());
    if rows == 0 {
        return;
    }
    let mut mean = vec![0.0f64; cols];
    for t in 0..rows {
        for (m, &v) in mean.iter_mut().zip(features.row(t)) {
            *m += v as f64;
        }
    }
    let mean: Vec<f32> = mean.iter().map(|m| (m / rows as f64) as f32).collect();
    for t in 0..rows {
        for (v, m) in features.row_mut(t).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
}

/// Random contiguous window of post-VAD frames, mean-normalized.
///
/// Length is uniform in `[min_chunk, max_chunk]`, clipped to what the
/// utterance has. Returns `None` (skip the utterance) below `min_chunk` frames.
pub fn sample_chunk<R: Rng + ?Sized>(
    features: &Tensor<f32>,
    cfg: &FrontendConfig,
    rng: &mut R,
) -> Option<Tensor<f32>> {
    let available = features.rows();
    if available < cfg.min_chunk {
        return None;
    }
    let len = rng.random_range(cfg.min_chunk..=cfg.max_chunk).min(available);
    let start = rng.random_range(0..=available - len);
    let cols = features.cols();
    let data = features.data()[start * cols..(start + len) * cols].to_vec();
    let mut chunk = Tensor::new(vec![len, cols], data).ok()?;
    mean_normalize(&mut chunk);
    Some(chunk)
}
