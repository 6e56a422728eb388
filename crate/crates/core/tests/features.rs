use std::f64::consts::PI;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tempo_contrast::features::*;
use tempo_contrast::signal::Window;

fn noise(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn sine(f: f64, rate: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| (2.0 * PI * f * i as f64 / rate).sin()).collect()
}

fn window(channels: &[Vec<f64>]) -> Window {
    Window { data: channels.iter().flatten().map(|&v| v as f32).collect(), start_sample: 0, recording: 0, stage: None, degenerate: false }
}

fn names(c: usize) -> Vec<String> {
    (0..c).map(|i| format!("C{i}")).collect()
}

#[test]
fn length_is_34_per_channel_with_unique_names() {
    for c in 1..=3 {
        let chans: Vec<Vec<f64>> = (0..c).map(|i| noise(300, i as u64)).collect();
        let f = compute_feature_vector(&window(&chans), &names(c), 300, 100.0).unwrap();
        assert_eq!(f.values.len(), 34 * c);
        assert_eq!(f.names.len(), 34 * c);
        let mut n = f.names.clone();
        n.sort();
        n.dedup();
        assert_eq!(n.len(), 34 * c);
    }
}

#[test]
fn channel_order_is_preserved() {
    let a = noise(256, 1);
    let b = sine(7.0, 100.0, 256);
    let ab = compute_feature_vector(&window(&[a.clone(), b.clone()]), &names(2), 256, 100.0).unwrap();
    let ba = compute_feature_vector(&window(&[b, a]), &names(2), 256, 100.0).unwrap();
    assert_eq!(ab.values[..34], ba.values[34..]);
    assert!(ab.names[0].starts_with("C0_") && ab.names[34].starts_with("C1_"));
}

#[test]
fn short_window_is_rejected() {
    let err = compute_feature_vector(&window(&[vec![0.0; 63]]), &names(1), 63, 100.0).unwrap_err();
    assert_eq!(err, FeatureError::TooShort(63));
}

#[test]
fn normalized_window_moments() {
    let x = noise(3000, 2);
    let m = moments(&x);
    let z: Vec<f64> = x.iter().map(|v| (v - m[0]) / m[4]).collect();
    let mz = moments(&z);
    assert!(mz[0].abs() < 1e-12);
    assert!((mz[1] - 1.0).abs() < 1e-12 && (mz[4] - 1.0).abs() < 1e-12);
    assert!(mz[2].abs() < 0.1, "skewness {}", mz[2]);
    assert!(mz[3].abs() < 0.2, "kurtosis {}", mz[3]);
}

#[test]
fn white_noise_band_powers_follow_bandwidth() {
    let mut hi = 0.0;
    let mut lo = 0.0;
    for seed in 0..50 {
        let x = noise(3000, 100 + seed);
        hi += band_log_power(&x, 30.0, 49.0, 100.0).unwrap();
        lo += band_log_power(&x, 0.5, 4.0, 100.0).unwrap();
    }
    assert!(hi > lo);
}

#[test]
fn hurst_of_noise_and_random_walk() {
    let mean = (0..20).map(|s| hurst_exponent(&noise(3000, 200 + s))).sum::<f64>() / 20.0;
    assert!((0.4..=0.6).contains(&mean), "{mean}");
    let walk: Vec<f64> = noise(3000, 300)
        .iter()
        .scan(0.0, |acc, v| {
            *acc += v;
            Some(*acc)
        })
        .collect();
    let h = hurst_exponent(&walk);
    assert!(h > 0.85, "{h}");
}

#[test]
fn approximate_entropy_orders_sine_below_noise() {
    let s: Vec<f64> = sine(3.0, 100.0, 1000).iter().map(|v| v * 2f64.sqrt()).collect();
    let n = noise(1000, 400);
    assert!(approximate_entropy(&s, 2, 0.2) < approximate_entropy(&n, 2, 0.2));
    assert_eq!(approximate_entropy(&[1.5; 300], 2, 0.2), 0.0);
}

#[test]
fn hjorth_of_noise_exceeds_one() {
    for s in 0..20 {
        assert!(hjorth_complexity(&noise(3000, 500 + s)) > 1.0);
    }
    let h = hjorth_complexity(&sine(5.0, 100.0, 3000));
    assert!((h - 1.0).abs() <= 0.02, "{h}");
}

#[test]
fn fuzz_corpus_is_finite() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let t = 128;
    for i in 0..10_000 {
        let x: Vec<f64> = match i % 5 {
            0 => vec![0.0; t],
            1 => vec![rng.random_range(-1e3..1e3); t],
            2 => (0..t).map(|k| if k == rng.random_range(0..t) { 1e4 } else { 0.0 }).collect(),
            3 => (0..t).map(|_| rng.random_range(-1.0..1.0) * 10f64.powi(rng.random_range(-6..6))).collect(),
            _ => (0..t).map(|_| StandardNormal.sample(&mut rng)).collect(),
        };
        let f = compute_feature_vector(&window(&[x]), &names(1), t, 100.0).unwrap();
        assert!(f.values.iter().all(|v| v.is_finite()), "window {i}: {:?}", f.values);
    }
}

proptest! {
    #[test]
    fn apen_is_scale_invariant(seed in 0u64..1000, a in 0.1..50.0f64, b in -100.0..100.0f64) {
        let x = noise(200, seed);
        let y: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        prop_assert!((approximate_entropy(&x, 2, 0.2) - approximate_entropy(&y, 2, 0.2)).abs() < 1e-9);
    }

    #[test]
    fn ratios_are_exact_log_differences(seed in 0u64..1000) {
        let f = compute_feature_vector(&window(&[noise(256, seed)]), &names(1), 256, 100.0).unwrap();
        let bands = &f.values[5..10];
        let mut k = 10;
        for i in 0..5 {
            for j in 0..5 {
                if i != j {
                    prop_assert_eq!(f.values[k], bands[i] - bands[j]);
                    k += 1;
                }
            }
        }
    }
}
