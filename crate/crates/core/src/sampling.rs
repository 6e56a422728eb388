//! Relative-positioning (RP) and temporal-shuffling (TS) pretext samplers.

use std::fmt;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signal::WindowDataset;

#[derive(Debug, Error, PartialEq)]
pub enum SamplingError {
    #[error("invalid sampler config: {0}")]
    InvalidConfig(String),
    #[error("middle time {t2} coincides with an endpoint of ({t1}, {t3})")]
    EndpointTie { t1: f64, t2: f64, t3: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub tau_pos_s: f64,
    pub tau_neg_s: f64,
    pub n_anchors_per_recording: usize,
    pub n_pos_per_anchor: usize,
    pub n_neg_per_anchor: usize,
    pub seed: u64,
    /// TS negatives take their middle window from the anchor's negative
    /// context; when false, any window outside `[t, t″]` qualifies.
    pub ts_negatives_from_negative_context: bool,
}

impl SamplerConfig {
    pub fn new(tau_pos_s: f64, tau_neg_s: f64, seed: u64) -> Result<Self, SamplingError> {
        let cfg = SamplerConfig { tau_pos_s, tau_neg_s, seed, ..Default::default() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SamplingError> {
        if !(self.tau_pos_s > 0.0 && self.tau_neg_s > 0.0) {
            return Err(SamplingError::InvalidConfig(format!(
                "tau_pos_s = {} and tau_neg_s = {} must be positive",
                self.tau_pos_s, self.tau_neg_s
            )));
        }
        if self.tau_pos_s > self.tau_neg_s {
            return Err(SamplingError::InvalidConfig(format!("tau_pos_s = {} exceeds tau_neg_s = {}", self.tau_pos_s, self.tau_neg_s)));
        }
        Ok(())
    }
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            tau_pos_s: 240.0,
            tau_neg_s: 900.0,
            n_anchors_per_recording: 2000,
            n_pos_per_anchor: 3,
            n_neg_per_anchor: 3,
            seed: 0,
            ts_negatives_from_negative_context: true,
        }
    }
}

/// `+1` inside the positive context, `-1` beyond the negative one, `None`
/// in between.
pub fn label_rp(t_s: f64, t2_s: f64, cfg: &SamplerConfig) -> Option<i8> {
    let d = (t_s - t2_s).abs();
    if d <= cfg.tau_pos_s {
        Some(1)
    } else if d > cfg.tau_neg_s {
        Some(-1)
    } else {
        None
    }
}

/// `+1` when the middle time lies strictly between the endpoints.
pub fn label_ts(t_s: f64, t2_s: f64, t3_s: f64) -> Result<i8, SamplingError> {
    if t2_s == t_s || t2_s == t3_s {
        return Err(SamplingError::EndpointTie { t1: t_s, t2: t2_s, t3: t3_s });
    }
    let (lo, hi) = if t_s < t3_s { (t_s, t3_s) } else { (t3_s, t_s) };
    Ok(if lo < t2_s && t2_s < hi { 1 } else { -1 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PretextTask {
    #[serde(rename = "rp")]
    Rp,
    #[serde(rename = "ts")]
    Ts,
}

impl PretextTask {
    pub fn name(self) -> &'static str {
        match self {
            PretextTask::Rp => "rp",
            PretextTask::Ts => "ts",
        }
    }
}

impl fmt::Display for PretextTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RpExample {
    pub anchor_idx: usize,
    pub other_idx: usize,
    pub y: i8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TsExample {
    pub first_idx: usize,
    pub middle_idx: usize,
    pub last_idx: usize,
    pub y: i8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PretextExample {
    Rp(RpExample),
    Ts(TsExample),
}

impl PretextExample {
    pub fn y(&self) -> i8 {
        match self {
            PretextExample::Rp(e) => e.y,
            PretextExample::Ts(e) => e.y,
        }
    }

    /// Window indices in model input order.
    pub fn windows(&self) -> Vec<usize> {
        match self {
            PretextExample::Rp(e) => vec![e.anchor_idx, e.other_idx],
            PretextExample::Ts(e) => vec![e.first_idx, e.middle_idx, e.last_idx],
        }
    }
}

/// Pretext examples over the windows of one [`WindowDataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct PretextDataset {
    pub task: PretextTask,
    pub examples: Vec<PretextExample>,
    /// Anchors dropped for lack of candidates.
    pub skipped_anchors: usize,
}

impl PretextDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn count_label(&self, y: i8) -> usize {
        self.examples.iter().filter(|e| e.y() == y).count()
    }

    /// Writes `task,recording,first,middle,last,y`; RP leaves `middle` empty.
    pub fn write_csv<W: Write>(&self, ds: &WindowDataset, mut w: W) -> std::io::Result<()> {
        writeln!(w, "task,recording,first,middle,last,y")?;
        for e in &self.examples {
            match e {
                PretextExample::Rp(e) => {
                    let rec = &ds.recordings[ds.windows[e.anchor_idx].recording].id;
                    writeln!(w, "rp,{rec},{},,{},{}", e.anchor_idx, e.other_idx, e.y)?;
                }
                PretextExample::Ts(e) => {
                    let rec = &ds.recordings[ds.windows[e.first_idx].recording].id;
                    writeln!(w, "ts,{rec},{},{},{},{}", e.first_idx, e.middle_idx, e.last_idx, e.y)?;
                }
            }
        }
        Ok(())
    }
}

/// Independent child seed `r` of `seed` (splitmix64 finalizer).
pub fn derive_seed(seed: u64, r: usize) -> u64 {
    let mut z = seed ^ (r as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Start times of one recording's windows, sorted, with the global indices.
struct Timeline {
    idx: Vec<usize>,
    t: Vec<f64>,
}

impl Timeline {
    fn new(ds: &WindowDataset, group: &[usize]) -> Self {
        Timeline { idx: group.to_vec(), t: group.iter().map(|&i| ds.start_s(i)).collect() }
    }

    /// Local positions `j` with `lo < t[j] - t0 <= hi`.
    fn range(&self, t0: f64, lo: f64, hi: f64) -> std::ops::Range<usize> {
        let a = self.t.partition_point(|&t| t - t0 <= lo);
        let b = self.t.partition_point(|&t| t - t0 <= hi);
        a..b.max(a)
    }

    /// Positive context of local `j`, excluding `j`, as two ranges.
    fn positives(&self, j: usize, tau: f64) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let t0 = self.t[j];
        let left = self.t.partition_point(|&t| t0 - t > tau);
        let right = self.t.partition_point(|&t| t - t0 <= tau);
        (left..j, j + 1..right)
    }

    /// Negative context of local `j` as two ranges.
    fn negatives(&self, j: usize, tau: f64) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let t0 = self.t[j];
        let left = self.t.partition_point(|&t| t0 - t > tau);
        let right = self.t.partition_point(|&t| t - t0 <= tau);
        (0..left, right..self.t.len())
    }
}

fn pick2<R: Rng>(rng: &mut R, a: &std::ops::Range<usize>, b: &std::ops::Range<usize>) -> usize {
    let k = rng.random_range(0..a.len() + b.len());
    if k < a.len() {
        a.start + k
    } else {
        b.start + k - a.len()
    }
}

fn sample_recording_rp(tl: &Timeline, cfg: &SamplerConfig, seed: u64) -> (Vec<PretextExample>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut skipped = 0;
    if tl.t.is_empty() {
        return (out, 0);
    }
    for _ in 0..cfg.n_anchors_per_recording {
        let j = rng.random_range(0..tl.t.len());
        let (pl, pr) = tl.positives(j, cfg.tau_pos_s);
        let (nl, nr) = tl.negatives(j, cfg.tau_neg_s);
        if pl.len() + pr.len() == 0 || nl.len() + nr.len() == 0 {
            skipped += 1;
            continue;
        }
        for _ in 0..cfg.n_pos_per_anchor {
            let o = pick2(&mut rng, &pl, &pr);
            out.push(PretextExample::Rp(RpExample { anchor_idx: tl.idx[j], other_idx: tl.idx[o], y: 1 }));
        }
        for _ in 0..cfg.n_neg_per_anchor {
            let o = pick2(&mut rng, &nl, &nr);
            out.push(PretextExample::Rp(RpExample { anchor_idx: tl.idx[j], other_idx: tl.idx[o], y: -1 }));
        }
    }
    (out, skipped)
}

fn sample_recording_ts(tl: &Timeline, cfg: &SamplerConfig, seed: u64) -> (Vec<PretextExample>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut skipped = 0;
    if tl.t.is_empty() {
        return (out, 0);
    }
    for _ in 0..cfg.n_anchors_per_recording {
        let j = rng.random_range(0..tl.t.len());
        // Later endpoints within the positive context.
        let lasts = tl.range(tl.t[j], 0.0, cfg.tau_pos_s);
        // Positives need at least one window strictly between.
        let pos_lasts = (lasts.start + 1).min(lasts.end)..lasts.end;
        let (nl, nr) = tl.negatives(j, cfg.tau_neg_s);
        let has_neg = if cfg.ts_negatives_from_negative_context {
            nl.len() + nr.len() > 0
        } else {
            // Some window before the anchor, or after the earliest last.
            j > 0 || lasts.start + 1 < tl.t.len()
        };
        if pos_lasts.is_empty() || !has_neg {
            skipped += 1;
            continue;
        }
        for _ in 0..cfg.n_pos_per_anchor {
            let l = rng.random_range(pos_lasts.clone());
            let m = rng.random_range(j + 1..l);
            out.push(PretextExample::Ts(TsExample { first_idx: tl.idx[j], middle_idx: tl.idx[m], last_idx: tl.idx[l], y: 1 }));
        }
        for _ in 0..cfg.n_neg_per_anchor {
            let (l, m) = if cfg.ts_negatives_from_negative_context {
                (rng.random_range(lasts.clone()), pick2(&mut rng, &nl, &nr))
            } else {
                loop {
                    let l = rng.random_range(lasts.clone());
                    if j > 0 || l + 1 < tl.t.len() {
                        break (l, pick2(&mut rng, &(0..j), &(l + 1..tl.t.len())));
                    }
                }
            };
            out.push(PretextExample::Ts(TsExample { first_idx: tl.idx[j], middle_idx: tl.idx[m], last_idx: tl.idx[l], y: -1 }));
        }
    }
    (out, skipped)
}

fn sample_with(
    ds: &WindowDataset,
    cfg: &SamplerConfig,
    task: PretextTask,
    f: fn(&Timeline, &SamplerConfig, u64) -> (Vec<PretextExample>, usize),
) -> Result<PretextDataset, SamplingError> {
    cfg.validate()?;
    let groups = ds.by_recording();
    let parts: Vec<_> = groups.par_iter().enumerate().map(|(r, g)| f(&Timeline::new(ds, g), cfg, derive_seed(cfg.seed, r))).collect();
    let mut examples = Vec::new();
    let mut skipped_anchors = 0;
    for (r, (ex, skipped)) in parts.into_iter().enumerate() {
        if skipped > 0 {
            log::info!(
                "{task}: skipped {skipped} of {} anchors in recording {} (empty context)",
                cfg.n_anchors_per_recording,
                ds.recordings[r].id
            );
        }
        examples.extend(ex);
        skipped_anchors += skipped;
    }
    Ok(PretextDataset { task, examples, skipped_anchors })
}

/// Draws anchors uniformly with replacement per recording, then
/// `n_pos_per_anchor` partners from the positive context and
/// `n_neg_per_anchor` from the negative context.
pub fn sample_rp_dataset(ds: &WindowDataset, cfg: &SamplerConfig) -> Result<PretextDataset, SamplingError> {
    sample_with(ds, cfg, PretextTask::Rp, sample_recording_rp)
}

/// Anchors are the first window; the last is drawn from the later half of
/// the positive context. Positives draw the middle strictly between.
pub fn sample_ts_dataset(ds: &WindowDataset, cfg: &SamplerConfig) -> Result<PretextDataset, SamplingError> {
    sample_with(ds, cfg, PretextTask::Ts, sample_recording_ts)
}

pub fn sample_pretext(ds: &WindowDataset, cfg: &SamplerConfig, task: PretextTask) -> Result<PretextDataset, SamplingError> {
    match task {
        PretextTask::Rp => sample_rp_dataset(ds, cfg),
        PretextTask::Ts => sample_ts_dataset(ds, cfg),
    }
}
