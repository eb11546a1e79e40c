use rand::Rng;

use super::{MaskFill, SpecAugConfig};
use crate::frontend::FeatureChunk;
use crate::numerics::Tensor;

/// The random choices behind one SpecAug application.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SpecAugDraw {
    /// `(center, displacement)` in frames.
    pub warp: Option<(usize, i64)>,
    /// `(start, width)` over frames.
    pub time_masks: Vec<(usize, usize)>,
    /// `(start, width)` over coefficients.
    pub freq_masks: Vec<(usize, usize)>,
}

impl SpecAugDraw {
    pub fn sample<R: Rng + ?Sized>(frames: usize, dims: usize, cfg: &SpecAugConfig, rng: &mut R) -> Self {
        let w = cfg.warp_window;
        let warp = (w > 0 && frames > 2 * w + 1).then(|| {
            let center = rng.random_range(w..frames - w);
            let disp = rng.random_range(-(w as i64)..=w as i64);
            (center, disp)
        });
        let mut masks = |count: usize, max_width: usize, extent: usize| {
            (0..count)
                .map(|_| {
                    let width = rng.random_range(0..=max_width.min(extent));
                    let start = rng.random_range(0..=extent - width);
                    (start, width)
                })
                .collect::<Vec<_>>()
        };
        let time_masks = masks(cfg.n_time_masks, cfg.max_time_mask, frames);
        let freq_masks = masks(cfg.n_freq_masks, cfg.max_freq_mask, dims);
        Self {
            warp,
            time_masks,
            freq_masks,
        }
    }

    pub fn apply(&self, frames: &Tensor<f32>, fill: MaskFill) -> Tensor<f32> {
        let (t, f) = (frames.rows(), frames.cols());
        let mut out = match self.warp {
            Some((center, disp)) if disp != 0 => time_warp(frames, center, disp),
            _ => frames.clone(),
        };
        let value = match fill {
            MaskFill::Zero => 0.0,
            MaskFill::ChunkMean => {
                (frames.data().iter().map(|&v| v as f64).sum::<f64>() / frames.len().max(1) as f64) as f32
            }
        };
        for &(start, width) in &self.time_masks {
            for row in start..(start + width).min(t) {
                out.row_mut(row).fill(value);
            }
        }
        for &(start, width) in &self.freq_masks {
            for row in 0..t {
                let r = out.row_mut(row);
                r[start.min(f)..(start + width).min(f)].fill(value);
            }
        }
        out
    }
}

/// Piecewise-linear time remap moving frame `center` to `center + disp`.
fn time_warp(frames: &Tensor<f32>, center: usize, disp: i64) -> Tensor<f32> {
    let (t, f) = (frames.rows(), frames.cols());
    let last = (t - 1) as f64;
    let c = center as f64;
    let target = (c + disp as f64).clamp(1.0, last - 1.0);
    let mut out = Tensor::zeros(&[t, f]);
    for row in 0..t {
        let r = row as f64;
        let src = if r <= target {
            r * c / target
        } else {
            c + (r - target) * (last - c) / (last - target)
        };
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(t - 1);
        let frac = (src - lo as f64) as f32;
        let (a, b) = (frames.row(lo), frames.row(hi));
        for (k, o) in out.row_mut(row).iter_mut().enumerate() {
            *o = a[k] * (1.0 - frac) + b[k] * frac;
        }
    }
    out
}

/// Time warp plus time and frequency masking.
pub fn specaug<R: Rng + ?Sized>(chunk: &FeatureChunk, cfg: &SpecAugConfig, rng: &mut R) -> FeatureChunk {
    let draw = SpecAugDraw::sample(chunk.frames.rows(), chunk.frames.cols(), cfg, rng);
    FeatureChunk {
        frames: draw.apply(&chunk.frames, cfg.fill),
        utterance_id: chunk.utterance_id.clone(),
        speaker: chunk.speaker.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frames() -> Tensor<f32> {
        Tensor::new(
            vec![200, 30],
            (0..6000).map(|i| ((i * 31 % 71) as f32 - 35.0) / 10.0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn null_draw_is_identity() {
        let d = SpecAugDraw {
            warp: Some((100, 0)),
            time_masks: vec![(10, 0), (50, 0)],
            freq_masks: vec![(3, 0), (7, 0)],
        };
        assert_eq!(d.apply(&frames(), MaskFill::ChunkMean), frames());
    }

    #[test]
    fn time_mask_fills_with_mean() {
        let x = frames();
        let mean = (x.data().iter().map(|&v| v as f64).sum::<f64>() / x.len() as f64) as f32;
        let d = SpecAugDraw {
            warp: None,
            time_masks: vec![(100, 5)],
            freq_masks: vec![],
        };
        let y = d.apply(&x, MaskFill::ChunkMean);
        for t in 0..200 {
            let masked = (100..105).contains(&t);
            for k in 0..30 {
                if masked {
                    assert_eq!(y.row(t)[k], mean);
                } else {
                    assert_eq!(y.row(t)[k], x.row(t)[k]);
                }
            }
        }
    }

    #[test]
    fn warp_keeps_endpoints() {
        let x = frames();
        let y = time_warp(&x, 80, 7);
        assert_eq!(y.row(0), x.row(0));
        assert_eq!(y.row(199), x.row(199));
        assert_eq!(y.row(87), x.row(80));
    }
}
