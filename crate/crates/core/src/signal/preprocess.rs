use super::{design_lowpass_fir, Recording, SignalError};

/// Selects `keep_channels` (in that order), lowpass-filters each with a
/// delay-compensated FIR of the given order and decimates by the integer
/// factor `rate_hz / target_rate_hz`.
pub fn preprocess(
    rec: &Recording,
    cutoff_hz: f64,
    order: usize,
    target_rate_hz: f64,
    keep_channels: &[String],
) -> Result<Recording, SignalError> {
    rec.validate()?;
    let ratio = rec.rate_hz / target_rate_hz;
    let factor = ratio.round();
    if !(target_rate_hz > 0.0) || factor < 1.0 || (ratio - factor).abs() > 1e-9 {
        return Err(SignalError::NonIntegerDecimation { from_hz: rec.rate_hz, to_hz: target_rate_hz });
    }
    let factor = factor as usize;
    if keep_channels.is_empty() {
        return Err(SignalError::InvalidArgument("no channels selected".into()));
    }
    let indices = keep_channels
        .iter()
        .map(|name| {
            rec.channel_names
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| SignalError::UnknownChannel { name: name.clone(), available: rec.channel_names.clone() })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let fir = design_lowpass_fir(cutoff_hz, order, rec.rate_hz)?;

    let signals = indices
        .iter()
        .map(|&i| {
            let y = fir.apply_zero_phase(&rec.signals[i]);
            let n = y.len() / factor;
            (0..n).map(|j| y[j * factor]).collect::<Vec<_>>()
        })
        .collect::<Vec<_>>();
    if signals.first().is_none_or(|s| s.is_empty()) {
        return Err(SignalError::InvalidArgument("recording shorter than one decimated sample".into()));
    }
    Ok(Recording {
        signals,
        rate_hz: target_rate_hz,
        channel_names: keep_channels.to_vec(),
        subject_id: rec.subject_id.clone(),
        age_years: rec.age_years,
        annotations: rec.annotations.clone(),
    })
}
