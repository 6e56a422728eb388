//! Python bindings for the labeling rules, metrics, filters, features and
//! config-driven pipeline steps.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use tempo_contrast::config::parse_config;
use tempo_contrast::eval;
use tempo_contrast::features;
use tempo_contrast::sampling::{self, SamplerConfig};
use tempo_contrast::signal::{self, Window};

fn value_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// +1 within `tau_pos_s`, -1 beyond `tau_neg_s`, None in between.
#[pyfunction]
fn label_rp(t_s: f64, t2_s: f64, tau_pos_s: f64, tau_neg_s: f64) -> PyResult<Option<i8>> {
    let cfg = SamplerConfig::new(tau_pos_s, tau_neg_s, 0).map_err(value_err)?;
    Ok(sampling::label_rp(t_s, t2_s, &cfg))
}

/// +1 when `t2_s` lies strictly between the other two times.
#[pyfunction]
fn label_ts(t_s: f64, t2_s: f64, t3_s: f64) -> PyResult<i8> {
    sampling::label_ts(t_s, t2_s, t3_s).map_err(value_err)
}

#[pyfunction]
fn balanced_accuracy(predictions: Vec<i64>, labels: Vec<i64>) -> PyResult<f64> {
    eval::balanced_accuracy(&predictions, &labels).map_err(value_err)
}

/// Windowed-sinc lowpass taps.
#[pyfunction]
fn design_lowpass_fir(cutoff_hz: f64, order: usize, rate_hz: f64) -> PyResult<Vec<f64>> {
    Ok(signal::design_lowpass_fir(cutoff_hz, order, rate_hz).map_err(value_err)?.coefficients)
}

/// Handcrafted features of one window given as channel rows; returns
/// `(values, names)`.
#[pyfunction]
#[pyo3(signature = (channels, rate_hz, channel_names=None))]
fn handcrafted_features(channels: Vec<Vec<f64>>, rate_hz: f64, channel_names: Option<Vec<String>>) -> PyResult<(Vec<f64>, Vec<String>)> {
    let t = channels.first().map_or(0, Vec::len);
    if channels.iter().any(|c| c.len() != t) {
        return Err(PyValueError::new_err("channels differ in length"));
    }
    let names = channel_names.unwrap_or_else(|| (0..channels.len()).map(|c| format!("ch{c}")).collect());
    if names.len() != channels.len() {
        return Err(PyValueError::new_err("one name per channel expected"));
    }
    let window = Window {
        data: channels.iter().flatten().map(|&v| v as f32).collect(),
        start_sample: 0,
        recording: 0,
        stage: None,
        degenerate: false,
    };
    let f = features::compute_feature_vector(&window, &names, t, rate_hz).map_err(value_err)?;
    Ok((f.values, f.names))
}

/// Validated config with defaults applied, as a JSON string.
#[pyfunction]
#[pyo3(signature = (path, overrides=Vec::new()))]
fn load_config(path: PathBuf, overrides: Vec<String>) -> PyResult<String> {
    let (cfg, _) = parse_config(&path, &overrides).map_err(value_err)?;
    serde_json::to_string(&cfg).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Builds the configured windows; returns `(subject per window, stage name
/// or None per window)`.
#[pyfunction]
fn window_labels(py: Python<'_>, path: PathBuf) -> PyResult<(Vec<String>, Vec<Option<String>>)> {
    let (cfg, _) = parse_config(&path, &[]).map_err(value_err)?;
    let ds = py.detach(|| cfg.load_dataset()).map_err(value_err)?;
    let subjects = ds.windows.iter().map(|w| ds.recordings[w.recording].subject_id.clone()).collect();
    let stages = ds.windows.iter().map(|w| w.stage.map(|s| s.name().to_string())).collect();
    Ok((subjects, stages))
}

#[pymodule]
#[pyo3(name = "tempo_contrast")]
fn tempo_contrast_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(label_rp, m)?)?;
    m.add_function(wrap_pyfunction!(label_ts, m)?)?;
    m.add_function(wrap_pyfunction!(balanced_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(design_lowpass_fir, m)?)?;
    m.add_function(wrap_pyfunction!(handcrafted_features, m)?)?;
    m.add_function(wrap_pyfunction!(load_config, m)?)?;
    m.add_function(wrap_pyfunction!(window_labels, m)?)?;
    m.add("FEATURES_PER_CHANNEL", features::FEATURES_PER_CHANNEL)?;
    Ok(())
}
