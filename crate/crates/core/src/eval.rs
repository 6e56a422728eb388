//! Frozen-feature evaluation: embeddings, multinomial linear probes,
//! balanced accuracy, labeled-data budget curves and sampler-window sweeps.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureError;
use crate::models::{FeatureExtractorConfig, ModelBundle, ModelError, Task};
use crate::nn::{Adam, AdamConfig, NnError, ParamSet, Real, Tensor};
use crate::sampling::{derive_seed, sample_pretext, PretextDataset, PretextTask, SamplerConfig, SamplingError};
use crate::signal::{SleepStage, WindowDataset};
use crate::training::{
    compute_class_weights, fit_pretext, fit_supervised, pretext_scores, supervised_predict_logits, EarlyStopper, EpochRecord, StopDecision,
    TrainConfig, TrainError, TrainHistory,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("class {0} has a positive weight but no training examples")]
    EmptyClass(usize),
    #[error("subject {subject:?} appears in both the {first} and {second} splits")]
    OverlappingSplits { subject: String, first: &'static str, second: &'static str },
    #[error("non-finite probe loss at epoch {0}")]
    NonFinite(usize),
    #[error("invalid budget {0:?}: expected a positive integer or ALL")]
    Budget(String),
    #[error("unknown method {0:?}")]
    Method(String),
    #[error("malformed embedding file: {0}")]
    Parse(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, PartialEq)]
pub struct RowMeta {
    pub recording: String,
    pub start_s: f64,
    pub stage: Option<SleepStage>,
    pub age_years: Option<f64>,
}

/// `N × dim` row-major values with one metadata record per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub values: Vec<f64>,
    pub dim: usize,
    pub meta: Vec<RowMeta>,
}

impl EmbeddingMatrix {
    pub fn rows(&self) -> usize {
        self.meta.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }
}

pub fn window_metadata(ds: &WindowDataset) -> Vec<RowMeta> {
    (0..ds.len())
        .map(|i| {
            let w = &ds.windows[i];
            let rec = &ds.recordings[w.recording];
            RowMeta { recording: rec.id.clone(), start_s: ds.start_s(i), stage: w.stage, age_years: rec.age_years }
        })
        .collect()
}

const EMBED_CHUNK: usize = 64;

/// Eval-mode embeddings of every window.
pub fn embed_dataset<F: Real>(bundle: &ModelBundle<F>, ds: &WindowDataset) -> Result<EmbeddingMatrix> {
    if bundle.config.channels != ds.channels || bundle.config.window_samples != ds.window_samples {
        return Err(ModelError::ConfigMismatch(format!(
            "model expects {}x{} windows, dataset has {}x{}",
            bundle.config.channels, bundle.config.window_samples, ds.channels, ds.window_samples
        ))
        .into());
    }
    let refs: Vec<&[f32]> = ds.windows.iter().map(|w| w.data.as_slice()).collect();
    let values = bundle.embed(&refs, EMBED_CHUNK)?.into_iter().map(|v| v.as_f64()).collect();
    Ok(EmbeddingMatrix { values, dim: bundle.config.embed_dim, meta: window_metadata(ds) })
}

/// Header `e0..e{D-1},recording,start_s,stage,age`; values carry 9
/// significant digits.
pub fn export_embeddings<W: Write>(m: &EmbeddingMatrix, mut w: W) -> std::io::Result<()> {
    let mut header: Vec<String> = (0..m.dim).map(|d| format!("e{d}")).collect();
    header.extend(["recording", "start_s", "stage", "age"].map(String::from));
    writeln!(w, "{}", header.join(","))?;
    for (i, meta) in m.meta.iter().enumerate() {
        for v in m.row(i) {
            write!(w, "{v:.8e},")?;
        }
        let stage = meta.stage.map(|s| s.name()).unwrap_or("");
        let age = meta.age_years.map(|a| a.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{},{}", meta.recording, meta.start_s, stage, age)?;
    }
    Ok(())
}

pub fn read_embeddings<R: BufRead>(r: R) -> Result<EmbeddingMatrix> {
    let mut lines = r.lines();
    let header = lines.next().ok_or(EvalError::Empty("embedding file"))??;
    let cols = header.split(',').count();
    if cols < 4 {
        return Err(EvalError::Parse(format!("header has {cols} columns")));
    }
    let dim = cols - 4;
    let mut values = Vec::new();
    let mut meta = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != cols {
            return Err(EvalError::Parse(format!("line {} has {} columns, expected {cols}", n + 2, cells.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| EvalError::Parse(format!("line {}: {s:?}: {e}", n + 2)));
        for c in &cells[..dim] {
            values.push(num(c)?);
        }
        let stage = match cells[dim + 2] {
            "" => None,
            s => Some(SleepStage::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| EvalError::Parse(format!("stage {s:?}")))?),
        };
        meta.push(RowMeta {
            recording: cells[dim].to_string(),
            start_s: num(cells[dim + 1])?,
            stage,
            age_years: if cells[dim + 3].is_empty() { None } else { Some(num(cells[dim + 3])?) },
        });
    }
    Ok(EmbeddingMatrix { values, dim, meta })
}

/// Mean recall over the classes present in `labels`.
pub fn balanced_accuracy<T: Ord + Copy>(predictions: &[T], labels: &[T]) -> Result<f64> {
    if labels.is_empty() {
        return Err(EvalError::Empty("labels"));
    }
    if predictions.len() != labels.len() {
        return Err(EvalError::Length(format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    let mut per_class: BTreeMap<T, (usize, usize)> = BTreeMap::new();
    for (p, l) in predictions.iter().zip(labels) {
        let e = per_class.entry(*l).or_default();
        e.1 += 1;
        if p == l {
            e.0 += 1;
        }
    }
    let recall: f64 = per_class.values().map(|&(hit, total)| hit as f64 / total as f64).sum();
    Ok(recall / per_class.len() as f64)
}

/// Per-class labeled-example budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Budget {
    PerClass(usize),
    All,
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Budget::PerClass(n) => write!(f, "{n}"),
            Budget::All => f.write_str("ALL"),
        }
    }
}

impl FromStr for Budget {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(Budget::All);
        }
        match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(Budget::PerClass(n)),
            _ => Err(EvalError::Budget(s.to_string())),
        }
    }
}

impl Serialize for Budget {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Budget::PerClass(n) => s.serialize_u64(*n as u64),
            Budget::All => s.serialize_str("ALL"),
        }
    }
}

impl<'de> Deserialize<'de> for Budget {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u64),
            S(String),
        }
        let text = match Raw::deserialize(d)? {
            Raw::N(n) => n.to_string(),
            Raw::S(s) => s,
        };
        text.parse().map_err(serde::de::Error::custom)
    }
}

/// Positions into `labels`, sorted: `min(n, available)` drawn without
/// replacement from every class, or everything for [`Budget::All`].
pub fn subsample_per_class(labels: &[usize], budget: Budget, seed: u64) -> Vec<usize> {
    let Budget::PerClass(n) = budget else {
        return (0..labels.len()).collect();
    };
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (class, mut members) in by_class {
        if members.len() <= n {
            if members.len() < n {
                log::info!("class {class} has {} examples, fewer than the budget of {n}; using all", members.len());
            }
            out.extend(members);
        } else {
            let (picked, _) = members.partial_shuffle(&mut rng, n);
            out.extend_from_slice(picked);
        }
    }
    out.sort_unstable();
    out
}

/// Multinomial logistic regression on standardized inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    /// `dim × n_classes`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub dim: usize,
    pub n_classes: usize,
}

impl ProbeModel {
    /// `N × n_classes` logits of the `N × dim` matrix `x`.
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let z = standardize(x, &self.mean, &self.scale);
        linear_logits(&z, self.dim, &self.weights, &self.bias)
    }

    /// Predicted class per row; ties go to the lowest class index.
    pub fn predict(&self, x: &[f64]) -> Vec<usize> {
        self.logits(x).chunks(self.n_classes).map(argmax).collect()
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = k;
        }
    }
    best
}

fn standardize(x: &[f64], mean: &[f64], scale: &[f64]) -> Vec<f64> {
    let d = mean.len();
    x.iter().enumerate().map(|(i, v)| (v - mean[i % d]) / scale[i % d]).collect()
}

fn linear_logits(z: &[f64], dim: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let k = b.len();
    let mut out = Vec::with_capacity(z.len() / dim.max(1) * k);
    for row in z.chunks(dim) {
        let mut l = b.to_vec();
        for (j, xv) in row.iter().enumerate() {
            for (c, lc) in l.iter_mut().enumerate() {
                *lc += xv * w[j * k + c];
            }
        }
        out.extend(l);
    }
    out
}

/// Class-weighted cross-entropy and its gradient with respect to the logits.
fn weighted_softmax_loss(logits: &[f64], labels: &[usize], weights: &[f64], k: usize) -> (f64, Vec<f64>) {
    let mut den: f64 = labels.iter().map(|&y| weights[y]).sum();
    let uniform = den <= 0.0;
    if uniform {
        den = labels.len() as f64;
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (i, (row, &y)) in logits.chunks(k).zip(labels).enumerate() {
        let w = if uniform { 1.0 } else { weights[y] };
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        loss += w * (mx + sum.ln() - row[y]);
        for c in 0..k {
            let p = (row[c] - mx).exp() / sum;
            grad[i * k + c] = w * (p - f64::from(u8::from(c == y))) / den;
        }
    }
    (loss / den, grad)
}

/// Labeled feature rows: `x` is `labels.len() × dim` row-major.
#[derive(Debug, Clone, Copy)]
pub struct ProbeData<'a> {
    pub x: &'a [f64],
    pub labels: &'a [usize],
}

/// Fits weights and bias only, with Adam and early stopping on the
/// validation loss (or the training loss without validation data). The
/// inputs are only read.
pub fn fit_linear_probe(
    train: ProbeData<'_>,
    valid: Option<ProbeData<'_>>,
    dim: usize,
    n_classes: usize,
    class_weights: &[f64],
    cfg: &TrainConfig,
) -> Result<(ProbeModel, TrainHistory)> {
    let (mean, scale) = column_stats(train.x, dim);
    fit_linear_probe_scaled(train, valid, dim, n_classes, class_weights, cfg, mean, scale)
}

/// Per-column mean and standard deviation of a row-major matrix; constant
/// columns get scale 1.
pub fn column_stats(x: &[f64], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (x.len() / dim.max(1)).max(1) as f64;
    let mut mean = vec![0.0; dim];
    let mut scale = vec![0.0; dim];
    for row in x.chunks(dim) {
        row.iter().zip(&mut mean).for_each(|(v, m)| *m += v / n);
    }
    for row in x.chunks(dim) {
        for j in 0..dim {
            scale[j] += (row[j] - mean[j]).powi(2) / n;
        }
    }
    scale.iter_mut().for_each(|s| *s = if *s > 1e-24 { s.sqrt() } else { 1.0 });
    (mean, scale)
}

/// `fit_linear_probe` with standardization statistics supplied by the
/// caller, e.g. from unlabeled windows when labels are scarce.
#[allow(clippy::too_many_arguments)]
pub fn fit_linear_probe_scaled(
    train: ProbeData<'_>,
    valid: Option<ProbeData<'_>>,
    dim: usize,
    n_classes: usize,
    class_weights: &[f64],
    cfg: &TrainConfig,
    mean: Vec<f64>,
    scale: Vec<f64>,
) -> Result<(ProbeModel, TrainHistory)> {
    cfg.validate()?;
    let n = train.labels.len();
    if n == 0 {
        return Err(EvalError::Empty("probe training set"));
    }
    if mean.len() != dim || scale.len() != dim || scale.iter().any(|s| !(*s > 0.0)) {
        return Err(EvalError::Length(format!("standardization needs {dim} means and positive scales")));
    }
    for d in std::iter::once(&train).chain(valid.as_ref()) {
        if d.x.len() != d.labels.len() * dim {
            return Err(EvalError::Length(format!("{} values for {} rows of {dim}", d.x.len(), d.labels.len())));
        }
        if let Some(&bad) = d.labels.iter().find(|&&l| l >= n_classes) {
            return Err(EvalError::Length(format!("label {bad} outside {n_classes} classes")));
        }
    }
    if class_weights.len() != n_classes {
        return Err(EvalError::Length(format!("{} class weights for {n_classes} classes", class_weights.len())));
    }
    let mut counts = vec![0usize; n_classes];
    train.labels.iter().for_each(|&l| counts[l] += 1);
    if let Some(k) = (0..n_classes).find(|&k| class_weights[k] > 0.0 && counts[k] == 0) {
        return Err(EvalError::EmptyClass(k));
    }

    let z_train = standardize(train.x, &mean, &scale);
    let z_valid = valid.map(|v| standardize(v.x, &mean, &scale));

    let mut params = ParamSet::<f64>::new();
    params.insert("weight", Tensor::new(&[dim, n_classes], vec![0.0; dim * n_classes])?.requiring_grad());
    params.insert("bias", Tensor::new(&[n_classes], vec![0.0; n_classes])?.requiring_grad());
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, beta1: cfg.beta1, beta2: cfg.beta2, ..Default::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut stopper = EarlyStopper::new(cfg.patience_epochs);
    let mut best = params.clone();
    let mut history = TrainHistory::default();
    let loss_of = |p: &ParamSet<f64>, z: &[f64], labels: &[usize]| {
        let l = linear_logits(z, dim, p.get("weight").unwrap().data(), p.get("bias").unwrap().data());
        weighted_softmax_loss(&l, labels, class_weights, n_classes).0
    };

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let zb: Vec<f64> = batch.iter().flat_map(|&i| z_train[i * dim..(i + 1) * dim].iter().copied()).collect();
            let yb: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let logits = linear_logits(&zb, dim, params.get("weight").unwrap().data(), params.get("bias").unwrap().data());
            let (_, g) = weighted_softmax_loss(&logits, &yb, class_weights, n_classes);
            let mut gw = vec![0.0; dim * n_classes];
            let mut gb = vec![0.0; n_classes];
            for (row, gr) in zb.chunks(dim).zip(g.chunks(n_classes)) {
                for (j, xv) in row.iter().enumerate() {
                    for c in 0..n_classes {
                        gw[j * n_classes + c] += xv * gr[c];
                    }
                }
                gb.iter_mut().zip(gr).for_each(|(b, v)| *b += v);
            }
            params.get_mut("weight").unwrap().accumulate_grad(&gw)?;
            params.get_mut("bias").unwrap().accumulate_grad(&gb)?;
            adam.step(&mut params)?;
        }
        let train_loss = loss_of(&params, &z_train, train.labels);
        let valid_loss = z_valid.as_ref().zip(valid).map(|(z, v)| loss_of(&params, z, v.labels));
        let monitored = valid_loss.unwrap_or(train_loss);
        if !monitored.is_finite() {
            return Err(EvalError::NonFinite(epoch));
        }
        history.epochs.push(EpochRecord { epoch, train_loss, valid_loss, seconds: None });
        history.stopped_epoch = epoch;
        match stopper.observe(epoch, monitored) {
            StopDecision::Improved => best = params.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }
    history.best_epoch = stopper.best_epoch();
    let model = ProbeModel {
        weights: best.get("weight").unwrap().data().to_vec(),
        bias: best.get("bias").unwrap().data().to_vec(),
        mean,
        scale,
        dim,
        n_classes,
    };
    Ok((model, history))
}

/// Window indices of the train, validation and test subjects.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Splits {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Fails naming the first subject listed in two splits.
pub fn check_disjoint_subjects(train: &[String], valid: &[String], test: &[String]) -> Result<()> {
    let named = [("train", train), ("valid", valid), ("test", test)];
    for (a, (na, la)) in named.iter().enumerate() {
        let set: BTreeSet<&String> = la.iter().collect();
        for (nb, lb) in &named[a + 1..] {
            if let Some(s) = lb.iter().find(|s| set.contains(s)) {
                return Err(EvalError::OverlappingSplits { subject: s.clone(), first: na, second: nb });
            }
        }
    }
    Ok(())
}

impl Splits {
    /// Windows of recordings whose subject is in each list; other
    /// recordings are left out.
    pub fn by_subject(ds: &WindowDataset, train: &[String], valid: &[String], test: &[String]) -> Result<Self> {
        check_disjoint_subjects(train, valid, test)?;
        let mut out = Splits::default();
        for (i, w) in ds.windows.iter().enumerate() {
            let s = &ds.recordings[w.recording].subject_id;
            if train.contains(s) {
                out.train.push(i);
            } else if valid.contains(s) {
                out.valid.push(i);
            } else if test.contains(s) {
                out.test.push(i);
            }
        }
        out.check(ds)?;
        Ok(out)
    }

    /// No subject may own windows in two splits.
    pub fn check(&self, ds: &WindowDataset) -> Result<()> {
        let subjects = |idx: &[usize]| -> Vec<String> {
            let set: BTreeSet<&String> = idx.iter().map(|&i| &ds.recordings[ds.windows[i].recording].subject_id).collect();
            set.into_iter().cloned().collect()
        };
        check_disjoint_subjects(&subjects(&self.train), &subjects(&self.valid), &subjects(&self.test))
    }
}

/// Labeled windows among `idx` and their class indices.
pub fn labeled(ds: &WindowDataset, idx: &[usize]) -> (Vec<usize>, Vec<usize>) {
    idx.iter().filter_map(|&i| ds.windows[i].stage.map(|s| (i, s.index()))).unzip()
}

fn gather_rows(values: &[f64], dim: usize, idx: &[usize]) -> Vec<f64> {
    idx.iter().flat_map(|&i| values[i * dim..(i + 1) * dim].iter().copied()).collect()
}

/// Test balanced accuracy of a probe fit on `train_idx`, early-stopped on
/// the validation split. `values` holds one row per window of `ds`; features
/// are standardized with statistics of every training-split window, labeled
/// or not.
pub fn probe_balanced_accuracy(
    values: &[f64],
    dim: usize,
    ds: &WindowDataset,
    train_idx: &[usize],
    splits: &Splits,
    cfg: &TrainConfig,
) -> Result<f64> {
    let (train_idx, train_y) = labeled(ds, train_idx);
    let (valid_idx, valid_y) = labeled(ds, &splits.valid);
    let (test_idx, test_y) = labeled(ds, &splits.test);
    let xt = gather_rows(values, dim, &train_idx);
    let xv = gather_rows(values, dim, &valid_idx);
    let weights = compute_class_weights(&train_y, SleepStage::COUNT);
    let valid = (!valid_y.is_empty()).then_some(ProbeData { x: &xv, labels: &valid_y });
    let (mean, scale) = column_stats(&gather_rows(values, dim, &splits.train), dim);
    let (probe, _) =
        fit_linear_probe_scaled(ProbeData { x: &xt, labels: &train_y }, valid, dim, SleepStage::COUNT, &weights, cfg, mean, scale)?;
    let pred = probe.predict(&gather_rows(values, dim, &test_idx));
    balanced_accuracy(&pred, &test_y)
}

/// Balanced accuracy of sign predictions on ±1 pretext labels.
pub fn pretext_balanced_accuracy<F: Real>(bundle: &ModelBundle<F>, ds: &WindowDataset, data: &PretextDataset, batch: usize) -> Result<f64> {
    let scores = pretext_scores(bundle, ds, data, batch)?;
    let pred: Vec<i8> = scores.iter().map(|&s| if s >= 0.0 { 1 } else { -1 }).collect();
    let y: Vec<i8> = data.examples.iter().map(|e| e.y()).collect();
    balanced_accuracy(&pred, &y)
}

#[derive(Debug, Clone)]
pub struct PretextRun {
    pub bundle: ModelBundle<f32>,
    pub history: TrainHistory,
    pub test_balanced_accuracy: f64,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
}

/// Samples tuples inside each split, pretrains a fresh model on the train
/// tuples (early-stopped on the validation tuples) and scores the test tuples.
pub fn pretrain_pretext(
    ds: &WindowDataset,
    splits: &Splits,
    task: PretextTask,
    sampler: &SamplerConfig,
    model: &FeatureExtractorConfig,
    train: &TrainConfig,
    model_seed: u64,
) -> Result<PretextRun> {
    let sub = |idx: &[usize]| ds.select(idx);
    let (train_ds, valid_ds, test_ds) = (sub(&splits.train), sub(&splits.valid), sub(&splits.test));
    let train_data = sample_pretext(&train_ds, sampler, task)?;
    let valid_data = sample_pretext(&valid_ds, sampler, task)?;
    let test_data = sample_pretext(&test_ds, sampler, task)?;
    if train_data.is_empty() {
        return Err(EvalError::Empty("pretext training tuples"));
    }
    let model_task = match task {
        PretextTask::Rp => Task::Rp,
        PretextTask::Ts => Task::Ts,
    };
    let bundle = ModelBundle::<f32>::init(model.clone(), model_task, model_seed)?;
    let valid = (!valid_data.is_empty()).then_some((&valid_ds, &valid_data));
    let (bundle, history) = fit_pretext(bundle, &train_ds, &train_data, valid, train)?;
    let test_balanced_accuracy =
        if test_data.is_empty() { f64::NAN } else { pretext_balanced_accuracy(&bundle, &test_ds, &test_data, train.batch_size)? };
    Ok(PretextRun {
        bundle,
        history,
        test_balanced_accuracy,
        n_train: train_data.len(),
        n_valid: valid_data.len(),
        n_test: test_data.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Rp,
    Ts,
    Ae,
    #[serde(rename = "rand")]
    RandInit,
    Supervised,
    Handcrafted,
}

impl Method {
    pub const ALL: [Method; 6] = [Self::Rp, Self::Ts, Self::Ae, Self::RandInit, Self::Supervised, Self::Handcrafted];

    pub fn name(self) -> &'static str {
        match self {
            Self::Rp => "rp",
            Self::Ts => "ts",
            Self::Ae => "ae",
            Self::RandInit => "rand",
            Self::Supervised => "supervised",
            Self::Handcrafted => "handcrafted",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| EvalError::Method(s.to_string()))
    }
}

/// How a curve method obtains features.
#[derive(Debug, Clone)]
pub enum MethodFeatures {
    /// Frozen features, one row of `dim` per window of the dataset.
    Frozen { values: Vec<f64>, dim: usize },
    /// The whole network is trained on each budgeted subset.
    EndToEnd { config: FeatureExtractorConfig },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveConfig {
    pub budgets: Vec<Budget>,
    pub n_seeds: usize,
    pub seed: u64,
    pub probe: TrainConfig,
    pub supervised: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub method: Method,
    pub n_per_class: Budget,
    pub seed: usize,
    pub balanced_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CurveResult {
    pub rows: Vec<CurveRow>,
}

impl CurveResult {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "method,n_per_class,seed,balanced_accuracy")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{:.6}", r.method, r.n_per_class, r.seed, r.balanced_accuracy)?;
        }
        Ok(())
    }

    /// Mean over seeds of one (method, budget) cell.
    pub fn mean(&self, method: Method, budget: Budget) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.method == method && r.n_per_class == budget).map(|r| r.balanced_accuracy).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Every (method, budget, seed) cell: subsample the labeled train windows,
/// fit, and report test balanced accuracy. A given (budget, seed) draws the
/// same subset for every method.
pub fn run_lowdata_curve(
    ds: &WindowDataset,
    splits: &Splits,
    methods: &[(Method, MethodFeatures)],
    cfg: &CurveConfig,
) -> Result<CurveResult> {
    splits.check(ds)?;
    let (train_idx, train_y) = labeled(ds, &splits.train);
    if train_idx.is_empty() {
        return Err(EvalError::Empty("labeled training windows"));
    }
    let cells: Vec<(usize, Budget, usize)> =
        (0..methods.len()).flat_map(|m| cfg.budgets.iter().flat_map(move |&b| (0..cfg.n_seeds).map(move |s| (m, b, s)))).collect();
    let rows: Result<Vec<CurveRow>> = cells
        .par_iter()
        .map(|&(m, budget, s)| {
            let seed = derive_seed(cfg.seed, s);
            let subset: Vec<usize> = subsample_per_class(&train_y, budget, seed).into_iter().map(|p| train_idx[p]).collect();
            let (method, features) = &methods[m];
            let balanced_accuracy = match features {
                MethodFeatures::Frozen { values, dim } => {
                    let probe_cfg = TrainConfig { seed, ..cfg.probe.clone() };
                    probe_balanced_accuracy(values, *dim, ds, &subset, splits, &probe_cfg)?
                }
                MethodFeatures::EndToEnd { config } => {
                    let train_cfg = TrainConfig { seed, ..cfg.supervised.clone() };
                    let bundle = ModelBundle::<f32>::init(config.clone(), Task::Supervised, seed)?;
                    let (valid_idx, _) = labeled(ds, &splits.valid);
                    let valid = (!valid_idx.is_empty()).then_some((ds, valid_idx.as_slice()));
                    let (bundle, _) = fit_supervised(bundle, ds, &subset, valid, &[], &train_cfg)?;
                    let (test_idx, test_y) = labeled(ds, &splits.test);
                    let logits = supervised_predict_logits(&bundle, ds, &test_idx, train_cfg.batch_size)?;
                    let pred: Vec<usize> = logits.iter().map(|r| argmax(r)).collect();
                    balanced_accuracy(&pred, &test_y)?
                }
            };
            Ok(CurveRow { method: *method, n_per_class: budget, seed: s, balanced_accuracy })
        })
        .collect();
    Ok(CurveResult { rows: rows? })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub tau_pairs: Vec<(f64, f64)>,
    pub task: PretextTask,
    pub sampler: SamplerConfig,
    pub model: FeatureExtractorConfig,
    pub train: TrainConfig,
    pub probe: TrainConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub tau_pos_s: f64,
    pub tau_neg_s: f64,
    pub bal_acc_ssl: f64,
    pub bal_acc_staging: f64,
}

/// Pretrains once per `(τ_pos, τ_neg)` pair and reports the pretext test
/// balanced accuracy next to the staging accuracy of a probe on all labels.
pub fn run_tau_sweep(ds: &WindowDataset, splits: &Splits, cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    splits.check(ds)?;
    let mut rows = Vec::with_capacity(cfg.tau_pairs.len());
    for &(tau_pos_s, tau_neg_s) in &cfg.tau_pairs {
        let sampler = SamplerConfig { tau_pos_s, tau_neg_s, ..cfg.sampler.clone() };
        sampler.validate()?;
        let run = pretrain_pretext(ds, splits, cfg.task, &sampler, &cfg.model, &cfg.train, cfg.seed)?;
        let emb = embed_dataset(&run.bundle, ds)?;
        let staging = probe_balanced_accuracy(&emb.values, emb.dim, ds, &splits.train, splits, &cfg.probe)?;
        log::info!("tau_pos={tau_pos_s}s tau_neg={tau_neg_s}s: pretext {:.4}, staging {staging:.4}", run.test_balanced_accuracy);
        rows.push(SweepRow { tau_pos_s, tau_neg_s, bal_acc_ssl: run.test_balanced_accuracy, bal_acc_staging: staging });
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "tau_pos_s,tau_neg_s,bal_acc_ssl,bal_acc_staging")?;
    for r in rows {
        writeln!(w, "{},{},{:.6},{:.6}", r.tau_pos_s, r.tau_neg_s, r.bal_acc_ssl, r.bal_acc_staging)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_accuracy_cases() {
        assert_eq!(balanced_accuracy(&[0, 1, 1, 0], &[0, 1, 1, 0]).unwrap(), 1.0);
        assert_eq!(balanced_accuracy(&[0, 0, 1, 0], &[0, 0, 1, 1]).unwrap(), 0.75);
        let y: Vec<usize> = (0..50).map(|i| i % 5).collect();
        assert_eq!(balanced_accuracy(&vec![2; 50], &y).unwrap(), 0.2);
        assert!(balanced_accuracy::<usize>(&[], &[]).is_err());
    }

    #[test]
    fn budget_parsing() {
        assert_eq!("ALL".parse::<Budget>().unwrap(), Budget::All);
        assert_eq!("10".parse::<Budget>().unwrap(), Budget::PerClass(10));
        assert!("0".parse::<Budget>().is_err());
        let b: Vec<Budget> = serde_json::from_str(r#"[1, "ALL", 5]"#).unwrap();
        assert_eq!(b, vec![Budget::PerClass(1), Budget::All, Budget::PerClass(5)]);
        assert_eq!(serde_json::to_string(&b).unwrap(), r#"[1,"ALL",5]"#);
    }

    #[test]
    fn subsample_quota_and_clamp() {
        let labels = [0, 0, 0, 1, 1, 2, 3, 3, 3, 3, 4];
        let one = subsample_per_class(&labels, Budget::PerClass(1), 3);
        assert_eq!(one.len(), 5);
        let classes: BTreeSet<usize> = one.iter().map(|&i| labels[i]).collect();
        assert_eq!(classes.len(), 5);
        assert_eq!(one, subsample_per_class(&labels, Budget::PerClass(1), 3));
        assert_eq!(subsample_per_class(&labels, Budget::PerClass(3), 9).len(), 3 + 2 + 1 + 3 + 1);
        assert_eq!(subsample_per_class(&labels, Budget::All, 9).len(), labels.len());
    }

    #[test]
    fn overlapping_subjects_are_named() {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        let err = check_disjoint_subjects(&s(&["a", "b"]), &s(&["c"]), &s(&["d", "b"])).unwrap_err();
        assert!(err.to_string().contains("\"b\""), "{err}");
        assert!(check_disjoint_subjects(&s(&["a"]), &s(&["c"]), &s(&["d"])).is_ok());
    }

    #[test]
    fn probe_rejects_weighted_empty_class() {
        let x = [0.0, 1.0];
        let err = fit_linear_probe(ProbeData { x: &x, labels: &[0, 0] }, None, 1, 2, &[1.0, 1.0], &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, EvalError::EmptyClass(1)));
    }
}
