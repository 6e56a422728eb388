//! Classical per-channel EEG features: moments, band log-powers and their
//! ratios, peak-to-peak amplitude, Hurst exponent, approximate entropy and
//! Hjorth complexity (34 values per channel).

use std::io::Write;

use rayon::prelude::*;
use rustfft::{num_complex::Complex, FftPlanner};
use thiserror::Error;

use crate::signal::{Window, WindowDataset};

pub const FEATURES_PER_CHANNEL: usize = 34;
pub const BAND_EDGES_HZ: [f64; 6] = [0.5, 4.0, 8.0, 13.0, 30.0, 49.0];
const BAND_NAMES: [&str; 5] = ["delta", "theta", "alpha", "beta", "gamma"];
const POWER_FLOOR: f64 = 1e-10;
pub const MIN_SAMPLES: usize = 64;

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("window of {0} samples is shorter than {MIN_SAMPLES}")]
    TooShort(usize),
    #[error("invalid band [{lo_hz}, {hi_hz}) Hz at rate {rate_hz} Hz")]
    InvalidBand { lo_hz: f64, hi_hz: f64, rate_hz: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub names: Vec<String>,
}

/// Names of the 34 features of one channel, in output order.
pub fn feature_names(channel: &str) -> Vec<String> {
    let mut names: Vec<String> = ["mean", "variance", "skewness", "kurtosis", "std"].iter().map(|s| s.to_string()).collect();
    names.extend(BAND_NAMES.iter().map(|b| format!("logpow_{b}")));
    for (i, a) in BAND_NAMES.iter().enumerate() {
        for (j, b) in BAND_NAMES.iter().enumerate() {
            if i != j {
                names.push(format!("ratio_{a}_{b}"));
            }
        }
    }
    names.extend(["peak_to_peak", "hurst", "apen", "hjorth_complexity"].iter().map(|s| s.to_string()));
    names.into_iter().map(|n| format!("{channel}_{n}")).collect()
}

/// Mean, variance, skewness, excess kurtosis and std (population moments).
/// Flat signals get zero skewness and kurtosis.
pub fn moments(x: &[f64]) -> [f64; 5] {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let m2 = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m3 = x.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
    let m4 = x.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    let (skew, kurt) = if m2 > 1e-20 { (m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0) } else { (0.0, 0.0) };
    [mean, m2, skew, kurt, m2.sqrt()]
}

/// Squared FFT magnitudes of bins `0..=n/2`.
pub fn periodogram(x: &[f64]) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(x.len()).process(&mut buf);
    buf[..x.len() / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
}

fn band_from_periodogram(p: &[f64], n: usize, lo: f64, hi: f64, rate: f64) -> f64 {
    let df = rate / n as f64;
    let power: f64 = p
        .iter()
        .enumerate()
        .filter(|(k, _)| {
            let f = *k as f64 * df;
            f >= lo && f < hi
        })
        .map(|(_, v)| v)
        .sum();
    (power + POWER_FLOOR).ln()
}

/// `ln(sum of periodogram bins in [lo, hi) + 1e-10)`; no taper.
pub fn band_log_power(x: &[f64], lo_hz: f64, hi_hz: f64, rate_hz: f64) -> Result<f64, FeatureError> {
    if !(0.0 <= lo_hz && lo_hz < hi_hz && hi_hz <= rate_hz / 2.0) {
        return Err(FeatureError::InvalidBand { lo_hz, hi_hz, rate_hz });
    }
    Ok(band_from_periodogram(&periodogram(x), x.len(), lo_hz, hi_hz, rate_hz))
}

/// Rescaled-range estimate: slope of `ln(R/S)` against `ln(n)` over chunk
/// sizes 16, 32, ..., T/2. Constant signals give 0.5.
pub fn hurst_exponent(x: &[f64]) -> f64 {
    let mut pts = Vec::new();
    let mut n = 16;
    while n <= x.len() / 2 {
        let mut rs_sum = 0.0;
        let mut count = 0;
        for chunk in x.chunks_exact(n) {
            let mean = chunk.iter().sum::<f64>() / n as f64;
            let mut acc = 0.0;
            let (mut lo, mut hi) = (0.0f64, 0.0f64);
            for v in chunk {
                acc += v - mean;
                lo = lo.min(acc);
                hi = hi.max(acc);
            }
            let s = (chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            if s > 1e-12 {
                rs_sum += (hi - lo) / s;
                count += 1;
            }
        }
        if count > 0 && rs_sum > 0.0 {
            pts.push(((n as f64).ln(), (rs_sum / count as f64).ln()));
        }
        n *= 2;
    }
    if pts.len() < 2 {
        return 0.5;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// `Φ_m(r)`: mean log fraction of length-`m` templates within Chebyshev
/// distance `r`, self-matches included.
fn phi(x: &[f64], m: usize, r: f64) -> f64 {
    let n = x.len() - m + 1;
    // Sort templates by first coordinate so candidates form a contiguous run.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let firsts: Vec<f64> = order.iter().map(|&i| x[i]).collect();
    let mut total = 0.0;
    for i in 0..n {
        let lo = firsts.partition_point(|&v| v < x[i] - r);
        let hi = firsts.partition_point(|&v| v <= x[i] + r);
        let count = order[lo..hi].iter().filter(|&&j| (1..m).all(|k| (x[i + k] - x[j + k]).abs() <= r)).count();
        total += (count as f64 / n as f64).ln();
    }
    total / n as f64
}

/// `ApEn(m, r) = Φ_m(r) − Φ_{m+1}(r)` with `r = r_factor·std`.
/// Constant signals give 0.
pub fn approximate_entropy(x: &[f64], m: usize, r_factor: f64) -> f64 {
    if x.len() < m + 2 {
        return 0.0;
    }
    let std = moments(x)[4];
    if std < 1e-12 {
        return 0.0;
    }
    let r = r_factor * std;
    phi(x, m, r) - phi(x, m + 1, r)
}

fn diff(x: &[f64]) -> Vec<f64> {
    x.windows(2).map(|w| w[1] - w[0]).collect()
}

fn variance(x: &[f64]) -> f64 {
    moments(x)[1]
}

/// `mobility(Δx) / mobility(x)` with `mobility(s) = sqrt(var(Δs)/var(s))`.
/// Degenerate variances give 1.
pub fn hjorth_complexity(x: &[f64]) -> f64 {
    if x.len() < 3 {
        return 1.0;
    }
    let d1 = diff(x);
    let d2 = diff(&d1);
    let (v0, v1, v2) = (variance(x), variance(&d1), variance(&d2));
    if v0 < 1e-20 || v1 < 1e-20 {
        return 1.0;
    }
    let mob = (v1 / v0).sqrt();
    let mob_d = (v2 / v1).sqrt();
    mob_d / mob
}

fn channel_features(x: &[f64], rate_hz: f64, out: &mut Vec<f64>) {
    out.extend_from_slice(&moments(x));
    let p = periodogram(x);
    let bands: Vec<f64> =
        BAND_EDGES_HZ.windows(2).map(|e| band_from_periodogram(&p, x.len(), e[0], e[1].min(rate_hz / 2.0), rate_hz)).collect();
    out.extend_from_slice(&bands);
    for i in 0..5 {
        for j in 0..5 {
            if i != j {
                out.push(bands[i] - bands[j]);
            }
        }
    }
    let (lo, hi) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    out.push(hi - lo);
    out.push(hurst_exponent(x));
    out.push(approximate_entropy(x, 2, 0.2));
    out.push(hjorth_complexity(x));
}

/// Bands above Nyquist are truncated at `rate/2` (and are empty, giving
/// `ln 1e-10`, when they start above it).
pub fn compute_feature_vector(
    window: &Window,
    channels: &[String],
    window_samples: usize,
    rate_hz: f64,
) -> Result<FeatureVector, FeatureError> {
    if window_samples < MIN_SAMPLES {
        return Err(FeatureError::TooShort(window_samples));
    }
    let mut values = Vec::with_capacity(FEATURES_PER_CHANNEL * channels.len());
    let mut names = Vec::with_capacity(values.capacity());
    for (c, name) in channels.iter().enumerate() {
        let x: Vec<f64> = window.data[c * window_samples..(c + 1) * window_samples].iter().map(|&v| f64::from(v)).collect();
        channel_features(&x, rate_hz, &mut values);
        names.extend(feature_names(name));
    }
    Ok(FeatureVector { values, names })
}

/// Feature matrix of the selected windows, `N × 34C` row-major.
pub fn feature_matrix(ds: &WindowDataset, idx: &[usize]) -> Result<(Vec<f64>, Vec<String>), FeatureError> {
    let names = channel_names(ds).iter().flat_map(|c| feature_names(c)).collect();
    let rows: Result<Vec<Vec<f64>>, FeatureError> = idx
        .par_iter()
        .map(|&i| compute_feature_vector(&ds.windows[i], &channel_names(ds), ds.window_samples, ds.rate_hz).map(|f| f.values))
        .collect();
    Ok((rows?.concat(), names))
}

fn channel_names(ds: &WindowDataset) -> Vec<String> {
    ds.recordings.first().map(|r| r.channel_names.clone()).unwrap_or_else(|| (0..ds.channels).map(|c| format!("CH{c}")).collect())
}

pub fn write_feature_csv<W: Write>(names: &[String], values: &[f64], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{}", names.join(","))?;
    for row in values.chunks(names.len().max(1)) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.9e}")).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn sine(f: f64, rate: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| (2.0 * PI * f * i as f64 / rate).sin()).collect()
    }

    #[test]
    fn names_are_unique_and_34() {
        let n = feature_names("Cz");
        assert_eq!(n.len(), FEATURES_PER_CHANNEL);
        let mut s = n.clone();
        s.sort();
        s.dedup();
        assert_eq!(s.len(), n.len());
    }

    #[test]
    fn band_argmax_for_ten_hertz() {
        let x = sine(10.0, 100.0, 3000);
        let p: Vec<f64> = BAND_EDGES_HZ.windows(2).map(|e| band_log_power(&x, e[0], e[1].min(50.0), 100.0).unwrap()).collect();
        let best = (0..5).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
        assert_eq!(best, 2);
    }

    #[test]
    fn zero_signal_hits_floor() {
        let x = vec![0.0; 256];
        assert_eq!(band_log_power(&x, 0.5, 4.0, 100.0).unwrap(), POWER_FLOOR.ln());
        assert!(band_log_power(&x, 4.0, 0.5, 100.0).is_err());
        assert!(band_log_power(&x, 4.0, 60.0, 100.0).is_err());
    }

    #[test]
    fn degenerate_sentinels() {
        let c = vec![3.0; 500];
        assert_eq!(hurst_exponent(&c), 0.5);
        assert_eq!(approximate_entropy(&c, 2, 0.2), 0.0);
        assert_eq!(hjorth_complexity(&c), 1.0);
    }

    #[test]
    fn hjorth_of_sine_is_one() {
        let h = hjorth_complexity(&sine(5.0, 100.0, 3000));
        assert!((h - 1.0).abs() < 0.02, "{h}");
    }

    #[test]
    fn apen_brute_force_agreement() {
        let x: Vec<f64> = (0..200).map(|i| ((i * 37 % 23) as f64).sin() + 0.01 * i as f64).collect();
        let r = 0.2 * moments(&x)[4];
        let brute = |m: usize| {
            let n = x.len() - m + 1;
            (0..n)
                .map(|i| {
                    let c = (0..n).filter(|&j| (0..m).all(|k| (x[i + k] - x[j + k]).abs() <= r)).count();
                    (c as f64 / n as f64).ln()
                })
                .sum::<f64>()
                / n as f64
        };
        let expected = brute(2) - brute(3);
        assert!((approximate_entropy(&x, 2, 0.2) - expected).abs() < 1e-12);
    }

    #[test]
    fn ratios_are_log_differences() {
        let w = Window {
            data: sine(6.0, 100.0, 256).into_iter().map(|v| v as f32).collect(),
            start_sample: 0,
            recording: 0,
            stage: None,
            degenerate: false,
        };
        let f = compute_feature_vector(&w, &["a".into()], 256, 100.0).unwrap();
        let bands = &f.values[5..10];
        let mut k = 10;
        for i in 0..5 {
            for j in 0..5 {
                if i != j {
                    assert_eq!(f.values[k], bands[i] - bands[j]);
                    k += 1;
                }
            }
        }
    }
}
