mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tabsynth::policy::{apply_temperature, top_p_filter};

fn random_dist(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>().powi(3) + 1e-6).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|x| x / s).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn nucleus_matches_exhaustive_search(seed in any::<u64>(), n in 1usize..=12, p in 0.01f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = random_dist(&mut rng, n);
        prop_assert_eq!(top_p_filter(&dist, p), common::brute_top_p(&dist, p, 1e-12));
    }

    #[test]
    fn temperature_matches_direct_formula(seed in any::<u64>(), n in 1usize..=12, tau in 0.2f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = random_dist(&mut rng, n);
        let got = apply_temperature(&dist, tau).unwrap();
        let z: f64 = dist.iter().map(|x| x.powf(1.0 / tau)).sum();
        for (g, x) in got.iter().zip(&dist) {
            prop_assert!((g - x.powf(1.0 / tau) / z).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_settings_are_identities(seed in any::<u64>(), n in 1usize..=12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = random_dist(&mut rng, n);
        prop_assert_eq!(top_p_filter(&dist, 1.0), dist.clone());
        for (a, b) in apply_temperature(&dist, 1.0).unwrap().iter().zip(&dist) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn nucleus_keeps_ties_deterministically() {
    let p = [0.25, 0.25, 0.25, 0.25];
    let a = top_p_filter(&p, 0.5);
    assert_eq!(a, top_p_filter(&p, 0.5));
    assert_eq!(a.iter().filter(|x| **x > 0.0).count(), 2);
}

#[test]
fn low_temperature_concentrates_mass() {
    let p = [0.5, 0.3, 0.2];
    let cold = apply_temperature(&p, 0.05).unwrap();
    assert!(cold[0] > 0.999);
    assert!(apply_temperature(&p, 0.0).is_err());
}
