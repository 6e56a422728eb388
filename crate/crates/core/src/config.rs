//! Run-level experiment configuration: one JSON document per run.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::eval::{Budget, CurveConfig, Method, Splits, SweepConfig};
use crate::models::FeatureExtractorConfig;
use crate::sampling::{derive_seed, PretextTask, SamplerConfig};
use crate::signal::{
    edf::parse_edf, extract_windows, generate_synthetic, parse_hypnogram, preprocess, StageScheme, SyntheticConfig, WindowDataset,
};
use crate::training::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("malformed config: {0}")]
    Json(#[from] serde_json::Error),
    #[error("subject `{subject}` appears in both the {first} and {second} splits")]
    OverlappingSplits { subject: String, first: &'static str, second: &'static str },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Load { path: PathBuf, message: String },
}

type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSpec {
    Edf(EdfSpec),
    Synthetic(SyntheticSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdfSpec {
    /// Directory holding `*.edf` files, relative to the config file.
    pub dir: PathBuf,
    /// Hypnogram sidecar name; `{stem}` expands to the EDF file stem.
    #[serde(default = "default_sidecar")]
    pub sidecar_pattern: String,
}

fn default_sidecar() -> String {
    "{stem}.hyp".into()
}

/// `recordings` draws of `generator`, recording `r` seeded `generator.seed + r`
/// and assigned subject `{subject_prefix}{r}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub recordings: usize,
    #[serde(default = "default_prefix")]
    pub subject_prefix: String,
    pub generator: SyntheticConfig,
}

impl SyntheticSpec {
    pub fn recording(&self, r: usize) -> std::result::Result<crate::signal::Recording, crate::signal::SignalError> {
        let g = SyntheticConfig { seed: self.generator.seed.wrapping_add(r as u64), ..self.generator.clone() };
        let mut rec = generate_synthetic(&g)?;
        rec.subject_id = format!("{}{r}", self.subject_prefix);
        Ok(rec)
    }
}

fn default_prefix() -> String {
    "s".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub cutoff_hz: f64,
    pub filter_order: usize,
    /// `None` keeps the native rate (the filter still runs).
    pub target_rate_hz: Option<f64>,
    /// Empty keeps every channel in file order.
    pub channels: Vec<String>,
    pub window_s: f64,
    pub scheme: StageScheme,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            cutoff_hz: 30.0,
            filter_order: 128,
            target_rate_hz: None,
            channels: Vec::new(),
            window_s: 30.0,
            scheme: StageScheme::Aasm,
        }
    }
}

/// Extractor hyperparameters; channel count and window length come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub conv_kernel: usize,
    pub pool_size: usize,
    pub embed_dim: usize,
    pub dropout_rate: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec { conv_kernel: 50, pool_size: 13, embed_dim: 100, dropout_rate: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurveSpec {
    pub methods: Vec<Method>,
    pub budgets: Vec<Budget>,
    pub n_seeds: usize,
}

impl Default for CurveSpec {
    fn default() -> Self {
        CurveSpec {
            methods: Method::ALL.to_vec(),
            budgets: vec![Budget::PerClass(1), Budget::PerClass(10), Budget::PerClass(100), Budget::PerClass(500), Budget::All],
            n_seeds: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSpec {
    pub task: PretextTask,
    /// `(tau_pos_s, tau_neg_s)` pairs.
    pub tau_pairs: Vec<(f64, f64)>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec { task: PretextTask::Rp, tau_pairs: vec![(120.0, 120.0), (240.0, 900.0), (7200.0, 7200.0)] }
    }
}

fn default_name() -> String {
    "run".into()
}

fn default_output() -> PathBuf {
    "runs".into()
}

fn default_probe() -> TrainConfig {
    TrainConfig { lr: 0.01, max_epochs: 300, patience_epochs: 20, ..TrainConfig::default() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Every component seed is derived from this one.
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_probe")]
    pub probe: TrainConfig,
    #[serde(default)]
    pub supervised: TrainConfig,
    pub splits: SplitSpec,
    #[serde(default)]
    pub curve: CurveSpec,
    #[serde(default)]
    pub sweep: SweepSpec,
    /// Directory relative paths are resolved against; set by `parse_config`.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

// Child seed slots.
const SAMPLER_SEED: usize = 0;
const TRAIN_SEED: usize = 1;
const MODEL_SEED: usize = 2;
const PROBE_SEED: usize = 3;
const CURVE_SEED: usize = 4;
const SUPERVISED_SEED: usize = 5;

/// Parses and validates a config document. Unknown keys are returned as
/// warnings (also logged) naming the nearest known key.
pub fn parse_config_str(text: &str) -> Result<(ExperimentConfig, Vec<String>)> {
    let mut ignored = Vec::new();
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_ignored::deserialize(de, |path| ignored.push(segments(&path)))?;
    let known = serde_json::to_value(&cfg)?;
    let warnings: Vec<String> = ignored.iter().map(|p| unknown_key_warning(&known, p)).collect();
    for w in &warnings {
        log::warn!("{w}");
    }
    cfg.validate()?;
    Ok((cfg, warnings))
}

/// `parse_config_str` on a file after applying `key=value` overrides;
/// relative dataset paths resolve against its directory, and referenced
/// inputs must exist.
pub fn parse_config(path: &Path, overrides: &[String]) -> Result<(ExperimentConfig, Vec<String>)> {
    let mut text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    if !overrides.is_empty() {
        let mut doc: Value = serde_json::from_str(&text)?;
        apply_overrides(&mut doc, overrides)?;
        text = doc.to_string();
    }
    let (mut cfg, warnings) = parse_config_str(&text)?;
    cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    if let DatasetSpec::Edf(edf) = &cfg.dataset {
        let dir = cfg.base_dir.join(&edf.dir);
        if !dir.is_dir() {
            return Err(ConfigError::MissingFile(dir));
        }
    }
    Ok((cfg, warnings))
}

fn segments(path: &serde_ignored::Path) -> Vec<String> {
    use serde_ignored::Path as P;
    match path {
        P::Root => Vec::new(),
        P::Seq { parent, index } => {
            let mut v = segments(parent);
            v.push(index.to_string());
            v
        }
        P::Map { parent, key } => {
            let mut v = segments(parent);
            v.push(key.clone());
            v
        }
        P::Some { parent } | P::NewtypeStruct { parent } | P::NewtypeVariant { parent } => segments(parent),
    }
}

fn unknown_key_warning(known: &Value, path: &[String]) -> String {
    let (key, parents) = path.split_last().expect("ignored key has a name");
    let mut node = known;
    for p in parents {
        node = match node {
            Value::Object(m) => m.get(p).unwrap_or(&Value::Null),
            Value::Array(a) => p.parse::<usize>().ok().and_then(|i| a.get(i)).unwrap_or(&Value::Null),
            _ => &Value::Null,
        };
    }
    let nearest = match node {
        Value::Object(m) => m.keys().map(|k| (strsim::levenshtein(k, key), k)).min().map(|(_, k)| k.clone()),
        _ => None,
    };
    let full = path.join(".");
    match nearest {
        Some(k) => format!("unknown config key `{full}` (did you mean `{k}`?)"),
        None => format!("unknown config key `{full}`"),
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let named = [("train", &self.splits.train), ("valid", &self.splits.valid), ("test", &self.splits.test)];
        for (i, (a, xs)) in named.iter().enumerate() {
            for (b, ys) in &named[i + 1..] {
                if let Some(s) = xs.iter().find(|s| ys.contains(s)) {
                    return Err(ConfigError::OverlappingSplits { subject: s.clone(), first: a, second: b });
                }
            }
        }
        if self.splits.train.is_empty() {
            return bad("splits.train lists no subjects".into());
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad(format!("run name `{}` must be a non-empty path component", self.name));
        }
        self.sampler.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for (label, t) in [("train", &self.train), ("probe", &self.probe), ("supervised", &self.supervised)] {
            t.validate().map_err(|e| ConfigError::Invalid(format!("{label}: {e}")))?;
        }
        let p = &self.preprocess;
        if !(p.cutoff_hz > 0.0) || !(p.window_s > 0.0) || p.target_rate_hz.is_some_and(|r| !(r > 0.0)) {
            return bad("preprocess cutoff_hz, window_s and target_rate_hz must be positive".into());
        }
        if self.curve.methods.is_empty() || self.curve.budgets.is_empty() || self.curve.n_seeds == 0 {
            return bad("curve needs at least one method, budget and seed".into());
        }
        if self.curve.budgets.contains(&Budget::PerClass(0)) {
            return bad("curve budget 0 selects nothing".into());
        }
        if self.sweep.tau_pairs.is_empty() {
            return bad("sweep.tau_pairs is empty".into());
        }
        match &self.dataset {
            DatasetSpec::Synthetic(s) => {
                if s.recordings == 0 {
                    return bad("synthetic dataset needs at least one recording".into());
                }
                s.generator.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
            }
            DatasetSpec::Edf(e) => {
                if !e.sidecar_pattern.contains("{stem}") {
                    return bad("edf.sidecar_pattern must contain `{stem}`".into());
                }
            }
        }
        Ok(())
    }

    /// `<output_dir>/<name>`.
    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.name)
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig { seed: derive_seed(self.seed, SAMPLER_SEED), ..self.sampler.clone() }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: derive_seed(self.seed, TRAIN_SEED), ..self.train.clone() }
    }

    pub fn probe_config(&self) -> TrainConfig {
        TrainConfig { seed: derive_seed(self.seed, PROBE_SEED), ..self.probe.clone() }
    }

    pub fn supervised_config(&self) -> TrainConfig {
        TrainConfig { seed: derive_seed(self.seed, SUPERVISED_SEED), ..self.supervised.clone() }
    }

    pub fn model_seed(&self) -> u64 {
        derive_seed(self.seed, MODEL_SEED)
    }

    pub fn model_config(&self, ds: &WindowDataset) -> FeatureExtractorConfig {
        FeatureExtractorConfig {
            channels: ds.channels,
            window_samples: ds.window_samples,
            conv_kernel: self.model.conv_kernel,
            pool_size: self.model.pool_size,
            embed_dim: self.model.embed_dim,
            dropout_rate: self.model.dropout_rate,
        }
    }

    pub fn curve_config(&self) -> CurveConfig {
        CurveConfig {
            budgets: self.curve.budgets.clone(),
            n_seeds: self.curve.n_seeds,
            seed: derive_seed(self.seed, CURVE_SEED),
            probe: self.probe_config(),
            supervised: self.supervised_config(),
        }
    }

    pub fn sweep_config(&self, ds: &WindowDataset) -> SweepConfig {
        SweepConfig {
            tau_pairs: self.sweep.tau_pairs.clone(),
            task: self.sweep.task,
            sampler: self.sampler_config(),
            model: self.model_config(ds),
            train: self.train_config(),
            probe: self.probe_config(),
            seed: self.model_seed(),
        }
    }

    pub fn splits(&self, ds: &WindowDataset) -> std::result::Result<Splits, crate::eval::EvalError> {
        Splits::by_subject(ds, &self.splits.train, &self.splits.valid, &self.splits.test)
    }

    /// Reads or generates every recording, preprocesses it and cuts windows.
    pub fn load_dataset(&self) -> Result<WindowDataset> {
        let recordings: Vec<(PathBuf, crate::signal::Recording)> = match &self.dataset {
            DatasetSpec::Synthetic(s) => (0..s.recordings)
                .into_par_iter()
                .map(|r| {
                    let rec = s.recording(r).map_err(|e| ConfigError::Invalid(e.to_string()))?;
                    Ok((PathBuf::from(format!("synthetic:{r}")), rec))
                })
                .collect::<Result<_>>()?,
            DatasetSpec::Edf(e) => {
                let dir = self.base_dir.join(&e.dir);
                let files = edf_files(&dir)?;
                files.par_iter().map(|f| read_edf_with_sidecar(f, &e.sidecar_pattern)).collect::<Result<_>>()?
            }
        };
        if recordings.is_empty() {
            return Err(ConfigError::Invalid("dataset contains no recordings".into()));
        }
        let p = &self.preprocess;
        let parts = recordings
            .into_par_iter()
            .map(|(path, rec)| {
                let channels = if p.channels.is_empty() { rec.channel_names.clone() } else { p.channels.clone() };
                let target = p.target_rate_hz.unwrap_or(rec.rate_hz);
                let load = |message: String| ConfigError::Load { path: path.clone(), message };
                let rec = preprocess(&rec, p.cutoff_hz, p.filter_order, target, &channels).map_err(|e| load(e.to_string()))?;
                let mut ds = extract_windows(&rec, p.window_s, p.scheme).map_err(|e| load(e.to_string()))?;
                // A subject may have several nights; the file names them apart.
                if let (DatasetSpec::Edf(_), Some(stem)) = (&self.dataset, path.file_stem()) {
                    ds.recordings[0].id = stem.to_string_lossy().into_owned();
                }
                Ok(ds)
            })
            .collect::<Result<Vec<_>>>()?;
        let subjects: BTreeSet<&str> = parts.iter().flat_map(|d| d.recordings.iter().map(|r| r.subject_id.as_str())).collect();
        for s in self.splits.train.iter().chain(&self.splits.valid).chain(&self.splits.test) {
            if !subjects.contains(s.as_str()) {
                log::warn!("split subject `{s}` has no recordings");
            }
        }
        WindowDataset::concat(parts).map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

fn edf_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let io = |source| ConfigError::Io { path: dir.to_path_buf(), source };
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(io)? {
        let p = entry.map_err(io)?.path();
        if p.extension().is_some_and(|x| x.eq_ignore_ascii_case("edf")) {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

fn read_edf_with_sidecar(path: &Path, pattern: &str) -> Result<(PathBuf, crate::signal::Recording)> {
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |source| ConfigError::Io { path: p, source }
    };
    let bytes = fs::read(path).map_err(io(path))?;
    let load = |message: String| ConfigError::Load { path: path.to_path_buf(), message };
    let mut rec = parse_edf(&bytes).map_err(|e| load(e.to_string()))?;
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if rec.subject_id.is_empty() || rec.subject_id == "X" {
        rec.subject_id = stem.clone();
    }
    let sidecar = path.with_file_name(pattern.replace("{stem}", &stem));
    if sidecar.is_file() {
        let text = fs::read_to_string(&sidecar).map_err(io(&sidecar))?;
        rec.annotations = parse_hypnogram(&text).map_err(|e| ConfigError::Load { path: sidecar.clone(), message: e.to_string() })?;
    } else {
        log::warn!("{}: no hypnogram at {}, windows stay unlabeled", path.display(), sidecar.display());
    }
    Ok((path.to_path_buf(), rec))
}

/// Applies `key=value` overrides to a config document before parsing. Keys
/// are dotted paths into existing or new objects; values parse as JSON and
/// fall back to plain strings.
pub fn apply_overrides(doc: &mut Value, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (key, raw) = o.split_once('=').ok_or_else(|| ConfigError::Invalid(format!("override `{o}` is not key=value")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut node = &mut *doc;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let obj = node
                .as_object_mut()
                .ok_or_else(|| ConfigError::Invalid(format!("override `{key}`: `{}` is not an object", parts[..i].join("."))))?;
            if i + 1 == parts.len() {
                obj.insert(part.to_string(), value.clone());
                break;
            }
            node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
        }
    }
    Ok(())
}
