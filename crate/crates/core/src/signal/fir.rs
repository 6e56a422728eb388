use std::f64::consts::PI;

use super::SignalError;

/// Linear-phase lowpass FIR filter.
#[derive(Debug, Clone, PartialEq)]
pub struct FirFilter {
    pub coefficients: Vec<f64>,
    pub cutoff_hz: f64,
    pub design_order: usize,
}

/// Hamming-windowed sinc design with `order + 1` taps (bumped to an odd
/// count), normalized to unit DC gain.
pub fn design_lowpass_fir(cutoff_hz: f64, order: usize, rate_hz: f64) -> Result<FirFilter, SignalError> {
    let nyquist_hz = rate_hz / 2.0;
    if !(cutoff_hz > 0.0 && cutoff_hz < nyquist_hz) {
        return Err(SignalError::CutoffOutOfRange { cutoff_hz, nyquist_hz });
    }
    if order < 2 {
        return Err(SignalError::InvalidArgument(format!("filter order {order} must be at least 2")));
    }
    let mut taps = order + 1;
    if taps.is_multiple_of(2) {
        taps += 1;
    }
    let mid = (taps / 2) as isize;
    let fc = cutoff_hz / rate_hz;
    let mut h: Vec<f64> = (0..taps as isize)
        .map(|i| {
            let n = (i - mid) as f64;
            let sinc = if n == 0.0 { 2.0 * fc } else { (2.0 * PI * fc * n).sin() / (PI * n) };
            let w = 0.54 - 0.46 * (2.0 * PI * i as f64 / (taps - 1) as f64).cos();
            sinc * w
        })
        .collect();
    // Mirror explicitly so rounding cannot break symmetry.
    for i in 0..taps / 2 {
        h[taps - 1 - i] = h[i];
    }
    let sum: f64 = h.iter().sum();
    h.iter_mut().for_each(|c| *c /= sum);
    Ok(FirFilter { coefficients: h, cutoff_hz, design_order: order })
}

impl FirFilter {
    pub fn group_delay(&self) -> usize {
        self.coefficients.len() / 2
    }

    /// Magnitude of the frequency response at `freq_hz`.
    pub fn magnitude_at(&self, freq_hz: f64, rate_hz: f64) -> f64 {
        let w = 2.0 * PI * freq_hz / rate_hz;
        let (re, im) = self
            .coefficients
            .iter()
            .enumerate()
            .fold((0.0, 0.0), |(re, im), (n, &c)| (re + c * (w * n as f64).cos(), im - c * (w * n as f64).sin()));
        (re * re + im * im).sqrt()
    }

    /// Forward convolution cropped by the group delay, so the output is
    /// aligned with (and as long as) the input. Edges see zero padding.
    pub fn apply_zero_phase(&self, x: &[f64]) -> Vec<f64> {
        let h = &self.coefficients;
        let d = self.group_delay() as isize;
        let n = x.len() as isize;
        (0..n)
            .map(|i| {
                // y[i] = sum_k h[k] x[i + d - k]
                let lo = (i + d - (n - 1)).max(0) as usize;
                let hi = ((i + d) as usize).min(h.len() - 1);
                if lo > hi {
                    return 0.0;
                }
                (lo..=hi).map(|k| h[k] * x[(i + d) as usize - k]).sum()
            })
            .collect()
    }
}
