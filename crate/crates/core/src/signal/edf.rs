//! Classic EDF (continuous records, 16-bit little-endian samples).
//!
//! [`EdfFile`] keeps the header text fields and raw digital samples so that a
//! written file parses back to an identical structure. [`parse_edf`] goes
//! straight to a physical-unit [`Recording`].

use thiserror::Error;

use super::{Annotation, Recording};

const MAIN_HEADER: usize = 256;
const SIGNAL_HEADER: usize = 256;
const ANNOTATION_LABEL: &str = "EDF Annotations";

#[derive(Debug, Error, PartialEq)]
pub enum EdfError {
    #[error("header length: expected at least {expected} bytes at offset {offset}, found {found}")]
    HeaderLength { offset: usize, expected: usize, found: usize },
    #[error("field `{field}` at byte offset {offset} is not numeric: {value:?}")]
    NonNumeric { field: &'static str, offset: usize, value: String },
    #[error("signal {signal}: digital max {digital_max} is not above digital min {digital_min} (byte offset {offset})")]
    DigitalRange { signal: usize, offset: usize, digital_min: i32, digital_max: i32 },
    #[error("data record {record} truncated at byte offset {offset}: needs {needed} bytes, {available} available")]
    TruncatedRecord { record: usize, offset: usize, needed: usize, available: usize },
    #[error("discontinuous EDF+ (EDF+D) recordings are not supported (reserved field at byte offset {offset})")]
    Discontinuous { offset: usize },
    #[error("signals have different sampling rates: {0:?} Hz")]
    MixedRates(Vec<f64>),
    #[error("{0}")]
    Unsupported(String),
}

/// Fixed-width main header. Text fields are stored without padding.
#[derive(Debug, Clone, PartialEq)]
pub struct EdfHeader {
    pub version: String,
    pub patient: String,
    pub recording: String,
    pub start_date: String,
    pub start_time: String,
    pub reserved: String,
    pub n_records: usize,
    pub record_duration_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdfSignalHeader {
    pub label: String,
    pub transducer: String,
    pub physical_dimension: String,
    pub physical_min: f64,
    pub physical_max: f64,
    pub digital_min: i32,
    pub digital_max: i32,
    pub prefiltering: String,
    pub samples_per_record: usize,
    pub reserved: String,
}

impl EdfSignalHeader {
    pub fn to_physical(&self, d: i16) -> f64 {
        (f64::from(d) - f64::from(self.digital_min)) * (self.physical_max - self.physical_min)
            / f64::from(self.digital_max - self.digital_min)
            + self.physical_min
    }

    pub fn to_digital(&self, x: f64) -> i16 {
        let d = (x - self.physical_min) * f64::from(self.digital_max - self.digital_min) / (self.physical_max - self.physical_min)
            + f64::from(self.digital_min);
        d.round().clamp(f64::from(self.digital_min), f64::from(self.digital_max)) as i16
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdfSignal {
    pub header: EdfSignalHeader,
    pub samples: Vec<i16>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdfFile {
    pub header: EdfHeader,
    pub signals: Vec<EdfSignal>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl Cursor<'_> {
    fn text(&mut self, width: usize) -> (String, usize) {
        let at = self.offset;
        let raw = &self.bytes[at..at + width];
        self.offset += width;
        (String::from_utf8_lossy(raw).trim().to_string(), at)
    }

    fn number<T: std::str::FromStr>(&mut self, width: usize, field: &'static str) -> Result<T, EdfError> {
        let (s, offset) = self.text(width);
        s.parse::<T>().map_err(|_| EdfError::NonNumeric { field, offset, value: s })
    }
}

impl EdfFile {
    pub fn parse(bytes: &[u8]) -> Result<Self, EdfError> {
        if bytes.len() < MAIN_HEADER {
            return Err(EdfError::HeaderLength { offset: 0, expected: MAIN_HEADER, found: bytes.len() });
        }
        let mut c = Cursor { bytes, offset: 0 };
        let version = c.text(8).0;
        let patient = c.text(80).0;
        let recording = c.text(80).0;
        let start_date = c.text(8).0;
        let start_time = c.text(8).0;
        let header_bytes: usize = c.number(8, "header bytes")?;
        let (reserved, reserved_at) = c.text(44);
        if reserved.starts_with("EDF+D") {
            return Err(EdfError::Discontinuous { offset: reserved_at });
        }
        let n_records_raw: i64 = c.number(8, "number of data records")?;
        let record_duration_s: f64 = c.number(8, "data record duration")?;
        let ns_at = c.offset;
        let ns: usize = c.number(4, "number of signals")?;
        if ns == 0 {
            return Err(EdfError::NonNumeric { field: "number of signals", offset: ns_at, value: "0".into() });
        }
        let expected = MAIN_HEADER + ns * SIGNAL_HEADER;
        if header_bytes != expected {
            return Err(EdfError::HeaderLength { offset: 184, expected, found: header_bytes });
        }
        if bytes.len() < expected {
            return Err(EdfError::HeaderLength { offset: MAIN_HEADER, expected, found: bytes.len() });
        }

        // Signal headers are stored field-by-field across all signals.
        let cols = |c: &mut Cursor, w: usize| (0..ns).map(|_| c.text(w).0).collect::<Vec<_>>();
        let labels = cols(&mut c, 16);
        let transducers = cols(&mut c, 80);
        let dims = cols(&mut c, 8);
        let nums =
            |c: &mut Cursor, field: &'static str| -> Result<Vec<f64>, EdfError> { (0..ns).map(|_| c.number::<f64>(8, field)).collect() };
        let pmin = nums(&mut c, "physical minimum")?;
        let pmax = nums(&mut c, "physical maximum")?;
        let dmin_at = c.offset;
        let dmin: Vec<i32> = (0..ns).map(|_| c.number(8, "digital minimum")).collect::<Result<_, _>>()?;
        let dmax: Vec<i32> = (0..ns).map(|_| c.number(8, "digital maximum")).collect::<Result<_, _>>()?;
        let prefilter = cols(&mut c, 80);
        let spr: Vec<usize> = (0..ns).map(|_| c.number(8, "samples per data record")).collect::<Result<_, _>>()?;
        let sig_reserved = cols(&mut c, 32);

        let mut headers = Vec::with_capacity(ns);
        for i in 0..ns {
            if dmax[i] <= dmin[i] {
                return Err(EdfError::DigitalRange { signal: i, offset: dmin_at + 8 * i, digital_min: dmin[i], digital_max: dmax[i] });
            }
            headers.push(EdfSignalHeader {
                label: labels[i].clone(),
                transducer: transducers[i].clone(),
                physical_dimension: dims[i].clone(),
                physical_min: pmin[i],
                physical_max: pmax[i],
                digital_min: dmin[i],
                digital_max: dmax[i],
                prefiltering: prefilter[i].clone(),
                samples_per_record: spr[i],
                reserved: sig_reserved[i].clone(),
            });
        }

        let record_bytes: usize = 2 * spr.iter().sum::<usize>();
        let data = &bytes[expected..];
        let n_records = if n_records_raw < 0 {
            // -1 means "unknown": infer from the data length.
            data.len().checked_div(record_bytes).unwrap_or(0)
        } else {
            n_records_raw as usize
        };

        let mut samples: Vec<Vec<i16>> = spr.iter().map(|&n| Vec::with_capacity(n * n_records)).collect();
        for r in 0..n_records {
            let start = r * record_bytes;
            if data.len() < start + record_bytes {
                return Err(EdfError::TruncatedRecord {
                    record: r,
                    offset: expected + start,
                    needed: record_bytes,
                    available: data.len().saturating_sub(start),
                });
            }
            let mut pos = start;
            for (i, &n) in spr.iter().enumerate() {
                samples[i].extend(data[pos..pos + 2 * n].chunks_exact(2).map(|b| i16::from_le_bytes([b[0], b[1]])));
                pos += 2 * n;
            }
        }

        Ok(Self {
            header: EdfHeader { version, patient, recording, start_date, start_time, reserved, n_records, record_duration_s },
            signals: headers.into_iter().zip(samples).map(|(header, samples)| EdfSignal { header, samples }).collect(),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, EdfError> {
        let ns = self.signals.len();
        let mut out = Vec::with_capacity(MAIN_HEADER + ns * SIGNAL_HEADER);
        let h = &self.header;
        put(&mut out, &h.version, 8)?;
        put(&mut out, &h.patient, 80)?;
        put(&mut out, &h.recording, 80)?;
        put(&mut out, &h.start_date, 8)?;
        put(&mut out, &h.start_time, 8)?;
        put(&mut out, &(MAIN_HEADER + ns * SIGNAL_HEADER).to_string(), 8)?;
        put(&mut out, &h.reserved, 44)?;
        put(&mut out, &h.n_records.to_string(), 8)?;
        put(&mut out, &format_number(h.record_duration_s)?, 8)?;
        put(&mut out, &ns.to_string(), 4)?;
        let sh: Vec<&EdfSignalHeader> = self.signals.iter().map(|s| &s.header).collect();
        for s in &sh {
            put(&mut out, &s.label, 16)?;
        }
        for s in &sh {
            put(&mut out, &s.transducer, 80)?;
        }
        for s in &sh {
            put(&mut out, &s.physical_dimension, 8)?;
        }
        for s in &sh {
            put(&mut out, &format_number(s.physical_min)?, 8)?;
        }
        for s in &sh {
            put(&mut out, &format_number(s.physical_max)?, 8)?;
        }
        for s in &sh {
            put(&mut out, &s.digital_min.to_string(), 8)?;
        }
        for s in &sh {
            put(&mut out, &s.digital_max.to_string(), 8)?;
        }
        for s in &sh {
            put(&mut out, &s.prefiltering, 80)?;
        }
        for s in &sh {
            put(&mut out, &s.samples_per_record.to_string(), 8)?;
        }
        for s in &sh {
            put(&mut out, &s.reserved, 32)?;
        }
        for (i, s) in self.signals.iter().enumerate() {
            if s.samples.len() != s.header.samples_per_record * h.n_records {
                return Err(EdfError::Unsupported(format!(
                    "signal {i} holds {} samples, header implies {}",
                    s.samples.len(),
                    s.header.samples_per_record * h.n_records
                )));
            }
        }
        for r in 0..h.n_records {
            for s in &self.signals {
                let n = s.header.samples_per_record;
                for d in &s.samples[r * n..(r + 1) * n] {
                    out.extend_from_slice(&d.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    /// Quantizes a recording to 16 bits using each channel's observed range.
    pub fn from_recording(rec: &Recording) -> Result<Self, EdfError> {
        let m = rec.n_samples();
        let per_second = rec.rate_hz.round() as usize;
        let (spr, n_records, duration) = if (rec.rate_hz - per_second as f64).abs() < 1e-9 && per_second > 0 && m.is_multiple_of(per_second)
        {
            (per_second, m / per_second, 1.0)
        } else {
            (m, 1, m as f64 / rec.rate_hz)
        };
        let mut signals = Vec::with_capacity(rec.n_channels());
        for (name, xs) in rec.channel_names.iter().zip(&rec.signals) {
            let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let (lo, hi) = if hi - lo < 1e-12 { (lo - 1.0, hi + 1.0) } else { (lo, hi) };
            // Round outward to what fits in eight characters.
            let pmin: f64 = format_bound(lo, false)?;
            let pmax: f64 = format_bound(hi, true)?;
            let header = EdfSignalHeader {
                label: name.clone(),
                transducer: String::new(),
                physical_dimension: "uV".into(),
                physical_min: pmin,
                physical_max: pmax,
                digital_min: -32768,
                digital_max: 32767,
                prefiltering: String::new(),
                samples_per_record: spr,
                reserved: String::new(),
            };
            let samples = xs.iter().map(|&x| header.to_digital(x)).collect();
            signals.push(EdfSignal { header, samples });
        }
        let patient = if rec.subject_id.is_empty() { "X".to_string() } else { rec.subject_id.clone() };
        Ok(Self {
            header: EdfHeader {
                version: "0".into(),
                patient,
                recording: "Startdate X".into(),
                start_date: "01.01.00".into(),
                start_time: "00.00.00".into(),
                reserved: String::new(),
                n_records,
                record_duration_s: duration,
            },
            signals,
        })
    }

    /// Converts to physical units, dropping EDF+ annotation channels.
    pub fn to_recording(&self) -> Result<Recording, EdfError> {
        let data: Vec<&EdfSignal> = self.signals.iter().filter(|s| s.header.label != ANNOTATION_LABEL).collect();
        if data.is_empty() {
            return Err(EdfError::Unsupported("file contains no data signals".into()));
        }
        if self.header.record_duration_s <= 0.0 {
            return Err(EdfError::Unsupported(format!("data record duration {} s must be positive", self.header.record_duration_s)));
        }
        let rates: Vec<f64> = data.iter().map(|s| s.header.samples_per_record as f64 / self.header.record_duration_s).collect();
        if rates.iter().any(|r| (r - rates[0]).abs() > 1e-9) {
            return Err(EdfError::MixedRates(rates));
        }
        if data[0].samples.is_empty() {
            return Err(EdfError::Unsupported("file contains no data records".into()));
        }
        let subject_id = self.header.patient.split_whitespace().next().unwrap_or("").to_string();
        Ok(Recording {
            signals: data.iter().map(|s| s.samples.iter().map(|&d| s.header.to_physical(d)).collect()).collect(),
            rate_hz: rates[0],
            channel_names: data.iter().map(|s| s.header.label.clone()).collect(),
            subject_id,
            age_years: None,
            annotations: Vec::<Annotation>::new(),
        })
    }
}

/// Parses an EDF byte stream into a physical-unit recording.
pub fn parse_edf(bytes: &[u8]) -> Result<Recording, EdfError> {
    EdfFile::parse(bytes)?.to_recording()
}

pub fn write_edf(rec: &Recording) -> Result<Vec<u8>, EdfError> {
    EdfFile::from_recording(rec)?.to_bytes()
}

fn put(out: &mut Vec<u8>, s: &str, width: usize) -> Result<(), EdfError> {
    if !s.is_ascii() || s.len() > width {
        return Err(EdfError::Unsupported(format!("header field {s:?} does not fit {width} ASCII bytes")));
    }
    out.extend_from_slice(s.as_bytes());
    out.extend(std::iter::repeat_n(b' ', width - s.len()));
    Ok(())
}

fn format_number(x: f64) -> Result<String, EdfError> {
    let s = format!("{x}");
    if s.len() <= 8 {
        return Ok(s);
    }
    for prec in (0..8).rev() {
        let t = format!("{x:.prec$}");
        if t.len() <= 8 {
            return Ok(t);
        }
    }
    Err(EdfError::Unsupported(format!("{x} does not fit an 8-character field")))
}

fn format_bound(x: f64, upper: bool) -> Result<f64, EdfError> {
    for decimals in (0..=6).rev() {
        let scale = 10f64.powi(decimals);
        let v = if upper { (x * scale).ceil() / scale } else { (x * scale).floor() / scale };
        let s = format!("{v:.prec$}", prec = decimals as usize);
        if s.len() <= 8 {
            return s.parse().map_err(|_| EdfError::Unsupported(s));
        }
    }
    Err(EdfError::Unsupported(format!("{x} does not fit an 8-character field")))
}
