mod common;

use common::criteria;
use proptest::prelude::*;
use spkcon_core::eval::{eer, min_dcf, DcfConfig};

#[test]
fn matches_exhaustive_sweep_and_monotone_maps() {
    criteria::metric_oracle().unwrap();
}

#[test]
fn hand_case() {
    criteria::hand_metric_case().unwrap();
}

#[test]
fn separation_extremes() {
    let targets = [true, true, false, false];
    assert_eq!(eer(&[0.9, 0.8, 0.1, 0.2], &targets).unwrap().0, 0.0);
    assert_eq!(eer(&[0.1, 0.2, 0.8, 0.9], &targets).unwrap().0, 1.0);
    assert_eq!(min_dcf(&[0.9, 0.8, 0.1, 0.2], &targets, &DcfConfig::default()).unwrap().0, 0.0);
}

proptest! {
    #[test]
    fn eer_is_symmetric(pairs in prop::collection::vec((-5.0f64..5.0, any::<bool>()), 2..200)) {
        let mut pairs = pairs;
        pairs[0].1 = true;
        pairs[1].1 = false;
        let (scores, targets): (Vec<f64>, Vec<bool>) = pairs.into_iter().unzip();
        let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
        let swapped: Vec<bool> = targets.iter().map(|t| !t).collect();
        let (a, _) = eer(&scores, &targets).unwrap();
        let (b, _) = eer(&flipped, &swapped).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        let (d, _) = min_dcf(&scores, &targets, &DcfConfig::default()).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
    }
}
