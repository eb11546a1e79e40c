mod common;

use common::rng;
use proptest::prelude::*;
use rand::Rng;
use spkcon_core::frontend::{mean_normalize, sample_chunk, utterance_features, FrontendConfig, Mfcc, Waveform};
use spkcon_core::numerics::Tensor;

fn tone(freq: f32, amp: f32, seconds: f32) -> Waveform {
    let n = (seconds * 16000.0) as usize;
    Waveform::new(
        (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq as f64 * (i % 16000) as f64 / 16000.0).sin() as f32)
            .collect(),
    )
}

// 440 Hz completes exactly 22 periods in 5 hops, so frames 5 apart see the
// same phase.
#[test]
fn steady_tone_gives_steady_frames() {
    let mfcc = Mfcc::new(&FrontendConfig::default()).unwrap();
    let f = mfcc.compute(&tone(440.0, 0.5, 1.0)).unwrap();
    for t in 5..f.rows() {
        for (a, b) in f.row(t).iter().zip(f.row(t - 5)) {
            assert!((a - b).abs() < 1e-3, "frame {t}: {a} vs {b}");
        }
    }
}

#[test]
fn louder_input_shifts_only_c0() {
    let mfcc = Mfcc::new(&FrontendConfig::default()).unwrap();
    let quiet = mfcc.compute(&tone(300.0, 0.05, 0.5)).unwrap();
    let loud = mfcc.compute(&tone(300.0, 0.5, 0.5)).unwrap();
    let shift = loud.row(0)[0] - quiet.row(0)[0];
    assert!(shift > 0.0);
    for t in 0..quiet.rows() {
        assert!((loud.row(t)[0] - quiet.row(t)[0] - shift).abs() < 1e-3);
        for c in 1..quiet.cols() {
            assert!((loud.row(t)[c] - quiet.row(t)[c]).abs() < 1e-3);
        }
    }
}

#[test]
fn features_are_deterministic() {
    let mfcc = Mfcc::new(&FrontendConfig::default()).unwrap();
    let mut r = rng(3);
    let w = Waveform::new((0..24000).map(|_| r.random_range(-0.3..0.3f32)).collect());
    assert_eq!(utterance_features(&w, &mfcc).unwrap(), utterance_features(&w, &mfcc).unwrap());
}

#[test]
fn chunk_lengths_are_uniform() {
    let cfg = FrontendConfig::default();
    let feats = Tensor::new(vec![1000, 30], (0..30_000).map(|i| (i % 13) as f32).collect()).unwrap();
    let mut r = rng(8);
    let bins = 201;
    let mut counts = vec![0usize; bins];
    let draws = 10_000;
    for _ in 0..draws {
        let c = sample_chunk(&feats, &cfg, &mut r).unwrap();
        counts[c.rows() - 200] += 1;
    }
    let expected = draws as f64 / bins as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 200 degrees of freedom: mean 200, sd 20.
    assert!(chi2 < 300.0, "chi-square {chi2}");
}

proptest! {
    #[test]
    fn normalized_columns_have_zero_mean(rows in 1usize..300, cols in 1usize..40, seed in 0u64..1000, offset in -50.0f32..50.0) {
        let mut r = rng(seed);
        let data = (0..rows * cols).map(|_| offset + r.random_range(-20.0..20.0f32)).collect();
        let mut t = Tensor::new(vec![rows, cols], data).unwrap();
        mean_normalize(&mut t);
        for c in 0..cols {
            let mean = (0..rows).map(|i| t.row(i)[c] as f64).sum::<f64>() / rows as f64;
            prop_assert!(mean.abs() < 1e-4, "column {} mean {}", c, mean);
        }
    }
}
