//! Signal ingestion: EDF parsing, filtering and decimation, windowing,
//! sleep-stage labels and the synthetic regime-switching generator.

pub mod edf;
mod fir;
mod preprocess;
mod stage;
mod synth;
mod window;

pub use fir::{design_lowpass_fir, FirFilter};
pub use preprocess::preprocess;
pub use stage::{map_stage, SleepStage, StageScheme};
pub use synth::{generate_synthetic, DepthLatent, DriftConfig, StateSpectrum, SyntheticConfig};
pub use window::{extract_windows, RecordingInfo, Window, WindowDataset};

use thiserror::Error;

/// One scored interval of a hypnogram, with its label as written in the source.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub start_s: f64,
    pub duration_s: f64,
    pub label: String,
}

/// A multichannel recording sharing one sampling rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    /// Channel-major samples, one row per channel, in physical units.
    pub signals: Vec<Vec<f64>>,
    pub rate_hz: f64,
    pub channel_names: Vec<String>,
    pub subject_id: String,
    pub age_years: Option<f64>,
    pub annotations: Vec<Annotation>,
}

impl Recording {
    pub fn new(signals: Vec<Vec<f64>>, rate_hz: f64, channel_names: Vec<String>) -> Result<Self, SignalError> {
        let rec = Self { signals, rate_hz, channel_names, subject_id: String::new(), age_years: None, annotations: Vec::new() };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<(), SignalError> {
        if !(self.rate_hz > 0.0 && self.rate_hz.is_finite()) {
            return Err(SignalError::InvalidArgument(format!("sampling rate {} must be positive", self.rate_hz)));
        }
        if self.signals.is_empty() || self.signals[0].is_empty() {
            return Err(SignalError::InvalidArgument("recording has no samples".into()));
        }
        if self.signals.len() != self.channel_names.len() {
            return Err(SignalError::InvalidArgument(format!(
                "{} signals but {} channel names",
                self.signals.len(),
                self.channel_names.len()
            )));
        }
        let m = self.signals[0].len();
        if let Some(i) = self.signals.iter().position(|s| s.len() != m) {
            return Err(SignalError::InvalidArgument(format!(
                "channel `{}` has {} samples, expected {m}",
                self.channel_names[i],
                self.signals[i].len()
            )));
        }
        Ok(())
    }

    pub fn n_channels(&self) -> usize {
        self.signals.len()
    }

    pub fn n_samples(&self) -> usize {
        self.signals.first().map_or(0, Vec::len)
    }

    pub fn duration_s(&self) -> f64 {
        self.n_samples() as f64 / self.rate_hz
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SignalError {
    #[error("{0}")]
    InvalidArgument(String),
    #[error("cutoff {cutoff_hz} Hz must lie strictly between 0 and Nyquist ({nyquist_hz} Hz)")]
    CutoffOutOfRange { cutoff_hz: f64, nyquist_hz: f64 },
    #[error("cannot decimate {from_hz} Hz to {to_hz} Hz: ratio is not a positive integer")]
    NonIntegerDecimation { from_hz: f64, to_hz: f64 },
    #[error("unknown channel `{name}`; available: {available:?}")]
    UnknownChannel { name: String, available: Vec<String> },
    #[error("window of {window} samples is longer than the recording ({samples} samples)")]
    WindowTooLong { window: usize, samples: usize },
    #[error("window of {window_s} s at {rate_hz} Hz is not a whole number of samples")]
    FractionalWindow { window_s: f64, rate_hz: f64 },
    #[error("hypnogram line {line}: {message}")]
    Hypnogram { line: usize, message: String },
}

/// Parses a hypnogram sidecar: one `start<TAB>duration<TAB>label` per line.
/// Blank lines and lines starting with `#` are skipped.
pub fn parse_hypnogram(text: &str) -> Result<Vec<Annotation>, SignalError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.splitn(3, '\t');
        let mut num = |what: &str| -> Result<f64, SignalError> {
            let raw = parts.next().ok_or_else(|| SignalError::Hypnogram { line: i + 1, message: format!("missing {what}") })?;
            raw.trim()
                .parse::<f64>()
                .map_err(|_| SignalError::Hypnogram { line: i + 1, message: format!("{what} `{raw}` is not a number") })
        };
        let start_s = num("start")?;
        let duration_s = num("duration")?;
        let label = parts.next().ok_or_else(|| SignalError::Hypnogram { line: i + 1, message: "missing label".into() })?;
        out.push(Annotation { start_s, duration_s, label: label.trim().to_string() });
    }
    Ok(out)
}

pub fn write_hypnogram(annotations: &[Annotation]) -> String {
    annotations.iter().map(|a| format!("{}\t{}\t{}\n", a.start_s, a.duration_s, a.label)).collect()
}
