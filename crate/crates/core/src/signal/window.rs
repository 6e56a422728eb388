use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{map_stage, Recording, SignalError, SleepStage, StageScheme};

/// A normalized `C × T` slice of a recording.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    /// Channel-major samples: channel `c` occupies `data[c*T..(c+1)*T]`.
    pub data: Vec<f32>,
    pub start_sample: usize,
    /// Index into [`WindowDataset::recordings`].
    pub recording: usize,
    pub stage: Option<SleepStage>,
    /// Set when some channel was flat and has been zeroed.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingInfo {
    pub id: String,
    pub subject_id: String,
    pub age_years: Option<f64>,
    pub channel_names: Vec<String>,
}

/// Windows of one or more recordings sharing `T`, `C` and rate.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowDataset {
    pub windows: Vec<Window>,
    pub window_samples: usize,
    pub channels: usize,
    pub rate_hz: f64,
    pub recordings: Vec<RecordingInfo>,
}

const FLAT_STD: f64 = 1e-8;

/// Cuts non-overlapping windows of `window_s` seconds, normalizes every
/// channel of every window to zero mean and unit variance, and attaches a
/// stage when the window lies entirely inside one annotated interval.
pub fn extract_windows(rec: &Recording, window_s: f64, scheme: StageScheme) -> Result<WindowDataset, SignalError> {
    rec.validate()?;
    let t_f = window_s * rec.rate_hz;
    let t = t_f.round();
    if t < 1.0 || (t_f - t).abs() > 1e-6 {
        return Err(SignalError::FractionalWindow { window_s, rate_hz: rec.rate_hz });
    }
    let t = t as usize;
    let m = rec.n_samples();
    if t > m {
        return Err(SignalError::WindowTooLong { window: t, samples: m });
    }

    let stages: Vec<(f64, f64, Option<SleepStage>)> =
        rec.annotations.iter().map(|a| (a.start_s, a.start_s + a.duration_s, map_stage(&a.label, scheme))).collect();

    let windows = (0..m / t)
        .map(|w| {
            let start = w * t;
            let mut data = Vec::with_capacity(t * rec.n_channels());
            let mut degenerate = false;
            for ch in &rec.signals {
                let seg = &ch[start..start + t];
                let (mean, std) = mean_std(seg);
                if std < FLAT_STD {
                    degenerate = true;
                    data.extend(std::iter::repeat_n(0.0f32, t));
                } else {
                    data.extend(seg.iter().map(|&x| ((x - mean) / std) as f32));
                }
            }
            let (s0, s1) = (start as f64 / rec.rate_hz, (start + t) as f64 / rec.rate_hz);
            let stage = stages.iter().find(|(a0, a1, _)| *a0 <= s0 + 1e-9 && s1 <= *a1 + 1e-9).and_then(|(_, _, s)| *s);
            Window { data, start_sample: start, recording: 0, stage, degenerate }
        })
        .collect();

    Ok(WindowDataset {
        windows,
        window_samples: t,
        channels: rec.n_channels(),
        rate_hz: rec.rate_hz,
        recordings: vec![RecordingInfo {
            id: rec.subject_id.clone(),
            subject_id: rec.subject_id.clone(),
            age_years: rec.age_years,
            channel_names: rec.channel_names.clone(),
        }],
    })
}

pub(crate) fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Serialize, Deserialize)]
struct CacheMeta {
    window_samples: usize,
    channels: usize,
    rate_hz: f64,
    recordings: Vec<RecordingInfo>,
    windows: Vec<WindowMeta>,
}

#[derive(Serialize, Deserialize)]
struct WindowMeta {
    recording: usize,
    start_sample: usize,
    stage: Option<SleepStage>,
    degenerate: bool,
}

const CACHE_MAGIC: &[u8; 4] = b"TCWD";
const CACHE_VERSION: u32 = 1;

impl WindowDataset {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Start time of window `i` in seconds from the start of its recording.
    pub fn start_s(&self, i: usize) -> f64 {
        self.windows[i].start_sample as f64 / self.rate_hz
    }

    /// Window indices grouped by recording, each group sorted by start.
    pub fn by_recording(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.recordings.len()];
        for (i, w) in self.windows.iter().enumerate() {
            groups[w.recording].push(i);
        }
        for g in &mut groups {
            g.sort_by_key(|&i| self.windows[i].start_sample);
        }
        groups
    }

    /// Copy of the given windows; the recording table is kept whole so
    /// recording indices stay valid.
    pub fn select(&self, idx: &[usize]) -> WindowDataset {
        WindowDataset {
            windows: idx.iter().map(|&i| self.windows[i].clone()).collect(),
            window_samples: self.window_samples,
            channels: self.channels,
            rate_hz: self.rate_hz,
            recordings: self.recordings.clone(),
        }
    }

    /// Concatenates datasets with identical geometry, renumbering recordings.
    pub fn concat(parts: Vec<WindowDataset>) -> Result<WindowDataset, SignalError> {
        let mut it = parts.into_iter();
        let Some(mut out) = it.next() else {
            return Err(SignalError::InvalidArgument("no datasets to concatenate".into()));
        };
        for mut p in it {
            if p.window_samples != out.window_samples || p.channels != out.channels || (p.rate_hz - out.rate_hz).abs() > 1e-9 {
                return Err(SignalError::InvalidArgument(format!(
                    "cannot merge windows of {}x{} @ {} Hz with {}x{} @ {} Hz",
                    p.channels, p.window_samples, p.rate_hz, out.channels, out.window_samples, out.rate_hz
                )));
            }
            let offset = out.recordings.len();
            for w in &mut p.windows {
                w.recording += offset;
            }
            out.recordings.append(&mut p.recordings);
            out.windows.append(&mut p.windows);
        }
        Ok(out)
    }

    /// Serializes as `TCWD`, u32 version, u64 window count, u32 channels,
    /// u32 window length, f32 LE samples, then a length-prefixed JSON block.
    pub fn write_cache<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(CACHE_MAGIC)?;
        w.write_all(&CACHE_VERSION.to_le_bytes())?;
        w.write_all(&(self.windows.len() as u64).to_le_bytes())?;
        w.write_all(&(self.channels as u32).to_le_bytes())?;
        w.write_all(&(self.window_samples as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.channels * self.window_samples * 4);
        for win in &self.windows {
            buf.clear();
            for x in &win.data {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        let meta = CacheMeta {
            window_samples: self.window_samples,
            channels: self.channels,
            rate_hz: self.rate_hz,
            recordings: self.recordings.clone(),
            windows: self
                .windows
                .iter()
                .map(|w| WindowMeta { recording: w.recording, start_sample: w.start_sample, stage: w.stage, degenerate: w.degenerate })
                .collect(),
        };
        let json = serde_json::to_vec(&meta).map_err(std::io::Error::other)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        Ok(())
    }

    pub fn read_cache<R: Read>(mut r: R) -> std::io::Result<WindowDataset> {
        use std::io::{Error, ErrorKind};
        let bad = |m: String| Error::new(ErrorKind::InvalidData, m);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CACHE_MAGIC {
            return Err(bad(format!("bad window cache magic {magic:?}")));
        }
        let mut u32b = [0u8; 4];
        let mut u64b = [0u8; 8];
        r.read_exact(&mut u32b)?;
        let version = u32::from_le_bytes(u32b);
        if version != CACHE_VERSION {
            return Err(bad(format!("window cache version {version}, expected {CACHE_VERSION}")));
        }
        r.read_exact(&mut u64b)?;
        let n = u64::from_le_bytes(u64b) as usize;
        r.read_exact(&mut u32b)?;
        let c = u32::from_le_bytes(u32b) as usize;
        r.read_exact(&mut u32b)?;
        let t = u32::from_le_bytes(u32b) as usize;
        let mut raw = vec![0u8; c * t * 4];
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut raw)?;
            data.push(raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect::<Vec<_>>());
        }
        r.read_exact(&mut u64b)?;
        let mut json = vec![0u8; u64::from_le_bytes(u64b) as usize];
        r.read_exact(&mut json)?;
        let meta: CacheMeta = serde_json::from_slice(&json).map_err(|e| bad(e.to_string()))?;
        if meta.windows.len() != n || meta.channels != c || meta.window_samples != t {
            return Err(bad("window cache metadata disagrees with its dimensions".into()));
        }
        Ok(WindowDataset {
            windows: data
                .into_iter()
                .zip(meta.windows)
                .map(|(data, m)| Window {
                    data,
                    start_sample: m.start_sample,
                    recording: m.recording,
                    stage: m.stage,
                    degenerate: m.degenerate,
                })
                .collect(),
            window_samples: t,
            channels: c,
            rate_hz: meta.rate_hz,
            recordings: meta.recordings,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::Annotation;

    fn noisy(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 10.0 - 3.0
            })
            .collect()
    }

    #[test]
    fn remainder_is_discarded() {
        let r = Recording::new(vec![noisy(2000 * 3 + 17, 1)], 100.0, vec!["a".into()]).unwrap();
        let ds = extract_windows(&r, 20.0, StageScheme::Aasm).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.window_samples, 2000);
        let starts: Vec<usize> = ds.windows.iter().map(|w| w.start_sample).collect();
        assert_eq!(starts, vec![0, 2000, 4000]);
    }

    #[test]
    fn count_is_floor_for_all_small_sizes() {
        for m in 1..=200usize {
            let r = Recording::new(vec![noisy(m, m as u64)], 1.0, vec!["a".into()]).unwrap();
            for t in 1..=20usize {
                match extract_windows(&r, t as f64, StageScheme::Aasm) {
                    Ok(ds) => assert_eq!(ds.len(), m / t),
                    Err(SignalError::WindowTooLong { .. }) => assert!(t > m),
                    Err(e) => panic!("{e}"),
                }
            }
        }
    }

    #[test]
    fn windows_are_normalized() {
        let r = Recording::new(vec![noisy(3000, 3), noisy(3000, 4)], 100.0, vec!["a".into(), "b".into()]).unwrap();
        let ds = extract_windows(&r, 10.0, StageScheme::Aasm).unwrap();
        for w in &ds.windows {
            assert!(!w.degenerate);
            for ch in w.data.chunks(1000) {
                let xs: Vec<f64> = ch.iter().map(|&x| f64::from(x)).collect();
                let (m, s) = mean_std(&xs);
                assert!(m.abs() < 1e-5);
                assert!((s - 1.0).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn flat_channel_is_zeroed_and_flagged() {
        let r = Recording::new(vec![vec![4.2; 200], noisy(200, 5)], 10.0, vec!["a".into(), "b".into()]).unwrap();
        let ds = extract_windows(&r, 10.0, StageScheme::Aasm).unwrap();
        assert!(ds.windows[0].degenerate);
        assert!(ds.windows[0].data[..100].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn stage_attached_only_when_contained() {
        let mut r = Recording::new(vec![noisy(900, 6)], 10.0, vec!["a".into()]).unwrap();
        r.annotations = vec![
            Annotation { start_s: 0.0, duration_s: 45.0, label: "Sleep stage 4".into() },
            Annotation { start_s: 45.0, duration_s: 45.0, label: "Sleep stage R".into() },
        ];
        let ds = extract_windows(&r, 30.0, StageScheme::Rk).unwrap();
        let stages: Vec<_> = ds.windows.iter().map(|w| w.stage).collect();
        assert_eq!(stages, vec![Some(SleepStage::N3), None, Some(SleepStage::R)]);
    }

    #[test]
    fn errors() {
        let r = Recording::new(vec![noisy(100, 7)], 10.0, vec!["a".into()]).unwrap();
        assert!(matches!(extract_windows(&r, 11.0, StageScheme::Aasm), Err(SignalError::WindowTooLong { .. })));
        assert!(matches!(extract_windows(&r, 0.25, StageScheme::Aasm), Err(SignalError::FractionalWindow { .. })));
    }

    #[test]
    fn cache_roundtrip() {
        let mut r = Recording::new(vec![noisy(600, 8), noisy(600, 9)], 10.0, vec!["a".into(), "b".into()]).unwrap();
        r.subject_id = "s1".into();
        r.age_years = Some(33.0);
        let a = extract_windows(&r, 10.0, StageScheme::Aasm).unwrap();
        r.subject_id = "s2".into();
        let b = extract_windows(&r, 10.0, StageScheme::Aasm).unwrap();
        let ds = WindowDataset::concat(vec![a, b]).unwrap();
        assert_eq!(ds.windows[7].recording, 1);
        let mut buf = Vec::new();
        ds.write_cache(&mut buf).unwrap();
        assert_eq!(WindowDataset::read_cache(buf.as_slice()).unwrap(), ds);
        buf[0] = b'X';
        assert!(WindowDataset::read_cache(buf.as_slice()).is_err());
    }
}
