//! Regime-switching multichannel signals with a known state sequence.
//!
//! A Markov chain picks one hidden state per block. Each state contributes
//! narrowband oscillations (a sinusoid at the center frequency plus
//! band-limited noise around it); white noise is added on top. Optional
//! drift rhythms, each with a log-amplitude following a smooth Gaussian
//! process, add structure on time scales longer than a state visit (or, with
//! a short length scale, block-to-block variability unrelated to the state).

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Annotation, Recording, SignalError, SleepStage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSpectrum {
    pub center_hz: f64,
    pub bandwidth_hz: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftConfig {
    /// Length scale `l` of the log-amplitude process, in seconds: levels
    /// `d` seconds apart have correlation `exp(-d²/(2l²))`.
    pub timescale_s: f64,
    pub center_hz: f64,
    pub bandwidth_hz: f64,
    /// Amplitude at the process mean.
    pub amplitude: f64,
    /// Standard deviation of the log-amplitude.
    pub log_std: f64,
}

/// A slow hidden "depth" `z` (unit-variance Gaussian process) that pulls the
/// chain toward states whose center is near `z` and scales every state
/// component by `exp(gain_slope·z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthLatent {
    /// Length scale of `z`, in seconds.
    pub timescale_s: f64,
    /// One center per state.
    pub centers: Vec<f64>,
    /// Transition row `s` is reweighted by `exp(-sharpness·(z - c_j)²)`.
    pub sharpness: f64,
    pub gain_slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_states: usize,
    /// Row-stochastic `n_states × n_states` matrix.
    pub transition: Vec<Vec<f64>>,
    pub state_spectra: Vec<Vec<StateSpectrum>>,
    pub duration_s: f64,
    pub rate_hz: f64,
    pub channels: usize,
    pub noise_std: f64,
    pub seed: u64,
    /// Dwell unit: the state is constant over each block.
    #[serde(default = "default_block_s")]
    pub block_s: f64,
    #[serde(default)]
    pub drifts: Vec<DriftConfig>,
    #[serde(default)]
    pub depth: Option<DepthLatent>,
}

fn default_block_s() -> f64 {
    30.0
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), SignalError> {
        let bad = |m: String| Err(SignalError::InvalidArgument(m));
        if self.n_states < 2 {
            return bad(format!("n_states = {} must be at least 2", self.n_states));
        }
        if self.transition.len() != self.n_states || self.transition.iter().any(|r| r.len() != self.n_states) {
            return bad(format!("transition matrix must be {0}x{0}", self.n_states));
        }
        for (i, row) in self.transition.iter().enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 || row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return bad(format!("transition row {i} is not a probability vector (sum {s})"));
            }
        }
        if self.state_spectra.len() != self.n_states {
            return bad(format!("{} state spectra for {} states", self.state_spectra.len(), self.n_states));
        }
        let nyquist = self.rate_hz / 2.0;
        for comp in self.state_spectra.iter().flatten() {
            if comp.amplitude < 0.0 || comp.bandwidth_hz < 0.0 || comp.center_hz <= 0.0 || comp.center_hz >= nyquist {
                return bad(format!("invalid spectral component {comp:?}"));
            }
        }
        if !(self.rate_hz > 0.0) || self.channels == 0 || self.noise_std < 0.0 {
            return bad("rate, channels and noise_std must be positive".into());
        }
        let spb = self.block_s * self.rate_hz;
        if !(self.block_s > 0.0) || (spb - spb.round()).abs() > 1e-6 || spb < 1.0 {
            return bad(format!("block of {} s is not a whole number of samples", self.block_s));
        }
        if self.duration_s < self.block_s {
            return bad("duration shorter than one block".into());
        }
        for d in &self.drifts {
            if !(d.timescale_s > 0.0) || d.amplitude < 0.0 || d.log_std < 0.0 || d.center_hz <= 0.0 || d.center_hz >= nyquist {
                return bad(format!("invalid drift {d:?}"));
            }
        }
        if let Some(d) = &self.depth {
            if !(d.timescale_s > 0.0) || !(d.sharpness >= 0.0) || !d.gain_slope.is_finite() || d.centers.len() != self.n_states {
                return bad(format!("invalid depth latent {d:?}"));
            }
        }
        Ok(())
    }

    pub fn n_blocks(&self) -> usize {
        (self.duration_s / self.block_s + 1e-9).floor() as usize
    }

    /// Annotation label of state `s`: sleep stage names for the first five.
    pub fn state_label(s: usize) -> String {
        match SleepStage::from_index(s) {
            Some(stage) => format!("Sleep stage {stage}"),
            None => format!("State {s}"),
        }
    }
}

const NOISE_TONES: usize = 8;

fn add_narrowband<R: Rng>(out: &mut [f64], rng: &mut R, rate: f64, center: f64, bandwidth: f64, amplitude: f64) {
    if amplitude == 0.0 {
        return;
    }
    let mut tones = vec![(center, amplitude, rng.random::<f64>() * 2.0 * PI)];
    if bandwidth > 0.0 {
        let a = 0.5 * amplitude / (NOISE_TONES as f64).sqrt();
        for _ in 0..NOISE_TONES {
            let f = center + (rng.random::<f64>() - 0.5) * bandwidth;
            tones.push((f.max(0.0), a, rng.random::<f64>() * 2.0 * PI));
        }
    }
    for (f, a, phase) in tones {
        let w = 2.0 * PI * f / rate;
        for (i, x) in out.iter_mut().enumerate() {
            *x += a * (w * i as f64 + phase).sin();
        }
    }
}

/// Unit-variance sequence with correlation `exp(-k²/(2l²))` at lag `k`:
/// white noise convolved with a Gaussian kernel of width `l/√2`.
fn smooth_gaussian_process<R: Rng>(rng: &mut R, n: usize, length: f64) -> Vec<f64> {
    let s = length / 2f64.sqrt();
    let half = (4.0 * s).ceil() as usize;
    let mut kernel: Vec<f64> = (0..=2 * half)
        .map(|i| {
            let k = i as f64 - half as f64;
            (-k * k / (2.0 * s * s)).exp()
        })
        .collect();
    let norm = kernel.iter().map(|k| k * k).sum::<f64>().sqrt();
    kernel.iter_mut().for_each(|k| *k /= norm);
    let noise: Vec<f64> = (0..n + 2 * half).map(|_| StandardNormal.sample(&mut *rng)).collect();
    (0..n).map(|i| kernel.iter().zip(&noise[i..]).map(|(k, e)| k * e).sum()).collect()
}

/// Draws a recording; identical configs give bit-identical output.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Recording, SignalError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_blocks = cfg.n_blocks();
    let spb = (cfg.block_s * cfg.rate_hz).round() as usize;

    let depth: Option<Vec<f64>> = cfg.depth.as_ref().map(|d| smooth_gaussian_process(&mut rng, n_blocks, d.timescale_s / cfg.block_s));
    let mut states = Vec::with_capacity(n_blocks);
    let mut s = rng.random_range(0..cfg.n_states);
    let mut row = vec![0.0; cfg.n_states];
    for b in 0..n_blocks {
        states.push(s);
        row.copy_from_slice(&cfg.transition[s]);
        if let (Some(d), Some(z)) = (&cfg.depth, &depth) {
            // Bias toward the next block's depth.
            let zn = z[(b + 1).min(n_blocks - 1)];
            for (p, c) in row.iter_mut().zip(&d.centers) {
                *p *= (-d.sharpness * (zn - c).powi(2)).exp();
            }
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                row.iter_mut().for_each(|p| *p /= total);
            } else {
                row.copy_from_slice(&cfg.transition[s]);
            }
        }
        let u: f64 = rng.random();
        let mut acc = 0.0;
        s = row
            .iter()
            .position(|&p| {
                acc += p;
                u < acc
            })
            .unwrap_or(cfg.n_states - 1);
    }

    let drift_levels: Vec<Vec<f64>> = cfg
        .drifts
        .iter()
        .map(|d| {
            smooth_gaussian_process(&mut rng, n_blocks, d.timescale_s / cfg.block_s)
                .into_iter()
                .map(|z| d.amplitude * (d.log_std * z).exp())
                .collect()
        })
        .collect();
    let gains: Vec<f64> = match (&cfg.depth, &depth) {
        (Some(d), Some(z)) => z.iter().map(|z| (d.gain_slope * z).exp()).collect(),
        _ => vec![1.0; n_blocks],
    };

    let mut signals = vec![Vec::with_capacity(n_blocks * spb); cfg.channels];
    let mut block = vec![0.0; spb];
    for (b, &state) in states.iter().enumerate() {
        for ch in signals.iter_mut() {
            block.iter_mut().for_each(|x| *x = 0.0);
            for comp in &cfg.state_spectra[state] {
                add_narrowband(&mut block, &mut rng, cfg.rate_hz, comp.center_hz, comp.bandwidth_hz, gains[b] * comp.amplitude);
            }
            for (d, levels) in cfg.drifts.iter().zip(&drift_levels) {
                add_narrowband(&mut block, &mut rng, cfg.rate_hz, d.center_hz, d.bandwidth_hz, levels[b]);
            }
            if cfg.noise_std > 0.0 {
                for x in block.iter_mut() {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    *x += cfg.noise_std * e;
                }
            }
            ch.extend_from_slice(&block);
        }
    }

    let annotations = states
        .iter()
        .enumerate()
        .map(|(b, &s)| Annotation { start_s: b as f64 * cfg.block_s, duration_s: cfg.block_s, label: SyntheticConfig::state_label(s) })
        .collect();

    Ok(Recording {
        signals,
        rate_hz: cfg.rate_hz,
        channel_names: (0..cfg.channels).map(|c| format!("CH{c}")).collect(),
        subject_id: String::new(),
        age_years: None,
        annotations,
    })
}
