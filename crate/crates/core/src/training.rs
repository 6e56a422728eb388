//! Mini-batch Adam loops with early stopping on validation loss.

use std::collections::HashMap;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{
    decode_autoencoder, feature_extractor_forward, pretext_scores_from_embeddings, stack_windows, supervised_logits, ModelBundle,
    ModelError, Task,
};
use crate::nn::{Adam, AdamConfig, BoundParams, Mode, NnError, Real, Tape, Var};
use crate::sampling::{PretextDataset, PretextExample, PretextTask};
use crate::signal::{SleepStage, WindowDataset};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0} set is empty")]
    EmptyDataset(&'static str),
    #[error("model task {model} cannot train on {data} examples")]
    TaskMismatch { model: Task, data: PretextTask },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("window {index} has no stage label")]
    Unlabeled { index: usize },
    #[error("classes absent from the training split: {}", .0.iter().map(|s| s.name()).collect::<Vec<_>>().join(", "))]
    MissingClasses(Vec<SleepStage>),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience_epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    /// Fill the `seconds` column of the history; off by default so reruns
    /// produce identical artifacts.
    pub record_timings: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            max_epochs: 300,
            patience_epochs: 30,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
            record_timings: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if self.patience_epochs > self.max_epochs {
            return Err(TrainError::Config(format!("patience_epochs {} exceeds max_epochs {}", self.patience_epochs, self.max_epochs)));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(TrainError::Config("lr must be positive and betas in [0, 1)".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, ..AdamConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
    pub seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned (1-based).
    pub best_epoch: usize,
    pub stopped_epoch: usize,
}

impl TrainHistory {
    /// `epoch,train_loss,valid_loss,seconds`; missing values are empty.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch,train_loss,valid_loss,seconds")?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for e in &self.epochs {
            writeln!(w, "{},{:.6},{},{}", e.epoch, e.train_loss, opt(e.valid_loss), opt(e.seconds))?;
        }
        Ok(())
    }

    pub fn best_valid_loss(&self) -> Option<f64> {
        self.epochs.get(self.best_epoch.checked_sub(1)?)?.valid_loss
    }

    pub fn summary(&self) -> serde_json::Value {
        let best = self.best_epoch.checked_sub(1).and_then(|i| self.epochs.get(i));
        serde_json::json!({
            "best_epoch": self.best_epoch,
            "stopped_epoch": self.stopped_epoch,
            "best_train_loss": best.map(|e| e.train_loss),
            "best_valid_loss": best.and_then(|e| e.valid_loss),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Patience counter: any strictly lower loss counts as an improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper { patience, best: f64::INFINITY, best_epoch: 0, stale: 0 }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopDecision {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.stale = 0;
            return StopDecision::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// `N / (K·N_c)` for the `K` classes present; absent classes get 0.
pub fn compute_class_weights(labels: &[usize], n_classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_classes];
    for &l in labels {
        counts[l] += 1;
    }
    let k = counts.iter().filter(|&&c| c > 0).count() as f64;
    let n = labels.len() as f64;
    counts.iter().map(|&c| if c == 0 { 0.0 } else { n / (k * c as f64) }).collect()
}

/// `log(1 + exp(-y·s))` in overflow-free form.
pub fn logistic_loss(score: f64, y: f64) -> f64 {
    let z = y * score;
    (-z.abs()).exp().ln_1p() + (-z).max(0.0)
}

/// The generic loop. `step` records the loss of a batch of example
/// positions; `valid` evaluates the current model.
fn fit_loop<F, S, V>(
    mut bundle: ModelBundle<F>,
    n: usize,
    cfg: &TrainConfig,
    mut step: S,
    valid: V,
) -> Result<(ModelBundle<F>, TrainHistory), TrainError>
where
    F: Real,
    S: FnMut(&mut Tape<F>, &BoundParams, &ModelBundle<F>, &[usize], &mut ChaCha8Rng) -> Result<Var, TrainError>,
    V: Fn(&ModelBundle<F>) -> Result<Option<f64>, TrainError>,
{
    cfg.validate()?;
    bundle.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam_x = Adam::new(cfg.adam());
    let mut adam_h = Adam::new(cfg.adam());
    let mut stopper = EarlyStopper::new(cfg.patience_epochs);
    let mut best = bundle.clone();
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let bound = bundle.bind(&mut tape);
            let loss = step(&mut tape, &bound, &bundle, batch, &mut rng)?;
            let lv = tape.value(loss)[0].as_f64();
            if !lv.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: b });
            }
            total += lv * batch.len() as f64;
            let grads = tape.backward(loss)?;
            bundle.accumulate(&grads, &bound)?;
            adam_x.step(&mut bundle.extractor)?;
            adam_h.step(&mut bundle.head)?;
        }
        let train_loss = total / n as f64;
        let valid_loss = valid(&bundle)?;
        if let Some(v) = valid_loss {
            if !v.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: usize::MAX });
            }
        }
        let decision = stopper.observe(epoch, valid_loss.unwrap_or(train_loss));
        if decision == StopDecision::Improved {
            best = bundle.clone();
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            valid_loss,
            seconds: cfg.record_timings.then(|| start.elapsed().as_secs_f64()),
        });
        log::debug!("epoch {epoch}: train {train_loss:.5} valid {valid_loss:?}");
        history.stopped_epoch = epoch;
        if decision == StopDecision::Stop {
            break;
        }
    }
    history.best_epoch = stopper.best_epoch();
    Ok((best, history))
}

/// Distinct windows of a batch (first-appearance order) and, per branch,
/// the row of each example's window.
fn dedup_batch(examples: &[PretextExample]) -> (Vec<usize>, Vec<Vec<usize>>) {
    let arity = examples.first().map_or(0, |e| e.windows().len());
    let mut rows: HashMap<usize, usize> = HashMap::new();
    let mut unique = Vec::new();
    let mut branches = vec![Vec::with_capacity(examples.len()); arity];
    for e in examples {
        for (j, w) in e.windows().into_iter().enumerate() {
            let r = *rows.entry(w).or_insert_with(|| {
                unique.push(w);
                unique.len() - 1
            });
            branches[j].push(r);
        }
    }
    (unique, branches)
}

fn window_refs<'a>(ds: &'a WindowDataset, idx: &[usize]) -> Vec<&'a [f32]> {
    idx.iter().map(|&i| ds.windows[i].data.as_slice()).collect()
}

/// Scores of `examples` recorded on `tape`, each distinct window embedded once.
pub fn pretext_scores_on_tape<F: Real>(
    tape: &mut Tape<F>,
    bundle: &ModelBundle<F>,
    bound: &BoundParams,
    windows: &WindowDataset,
    examples: &[PretextExample],
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<Var, TrainError> {
    let (unique, branches) = dedup_batch(examples);
    let x = stack_windows(tape, &bundle.config, &window_refs(windows, &unique))?;
    let h = feature_extractor_forward(tape, &bundle.config, bound, x, mode, rng)?;
    Ok(pretext_scores_from_embeddings(tape, bundle.task, bound, h, &branches)?)
}

fn check_pretext<F: Real>(bundle: &ModelBundle<F>, data: &PretextDataset, which: &'static str) -> Result<(), TrainError> {
    let ok = matches!((bundle.task, data.task), (Task::Rp, PretextTask::Rp) | (Task::Ts, PretextTask::Ts));
    if !ok {
        return Err(TrainError::TaskMismatch { model: bundle.task, data: data.task });
    }
    if data.is_empty() {
        return Err(TrainError::EmptyDataset(which));
    }
    Ok(())
}

/// Eval-mode scores of every example, in order.
pub fn pretext_scores<F: Real>(
    bundle: &ModelBundle<F>,
    windows: &WindowDataset,
    data: &PretextDataset,
    batch: usize,
) -> Result<Vec<f64>, TrainError> {
    let parts: Result<Vec<Vec<f64>>, TrainError> = data
        .examples
        .par_chunks(batch.max(1))
        .map(|chunk| {
            let mut tape = Tape::new();
            let bound = bundle.bind(&mut tape);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let s = pretext_scores_on_tape(&mut tape, bundle, &bound, windows, chunk, Mode::Eval, &mut rng)?;
            Ok(tape.value(s).iter().map(|v| v.as_f64()).collect())
        })
        .collect();
    Ok(parts?.concat())
}

/// Mean logistic loss in eval mode.
pub fn evaluate_pretext_loss<F: Real>(
    bundle: &ModelBundle<F>,
    windows: &WindowDataset,
    data: &PretextDataset,
    batch: usize,
) -> Result<f64, TrainError> {
    check_pretext(bundle, data, "evaluation")?;
    let s = pretext_scores(bundle, windows, data, batch)?;
    Ok(s.iter().zip(&data.examples).map(|(&s, e)| logistic_loss(s, f64::from(e.y()))).sum::<f64>() / s.len() as f64)
}

/// Minimizes the logistic loss over extractor and head on fixed tuples.
pub fn fit_pretext<F: Real>(
    bundle: ModelBundle<F>,
    windows: &WindowDataset,
    train: &PretextDataset,
    valid: Option<(&WindowDataset, &PretextDataset)>,
    cfg: &TrainConfig,
) -> Result<(ModelBundle<F>, TrainHistory), TrainError> {
    check_pretext(&bundle, train, "training")?;
    if let Some((_, v)) = valid {
        check_pretext(&bundle, v, "validation")?;
    }
    let step = |tape: &mut Tape<F>, bound: &BoundParams, b: &ModelBundle<F>, idx: &[usize], rng: &mut ChaCha8Rng| {
        let ex: Vec<PretextExample> = idx.iter().map(|&i| train.examples[i]).collect();
        let s = pretext_scores_on_tape(tape, b, bound, windows, &ex, Mode::Train, rng)?;
        let y: Vec<F> = ex.iter().map(|e| F::of(f64::from(e.y()))).collect();
        Ok(tape.binary_logistic_loss(s, &y)?)
    };
    let eval = |b: &ModelBundle<F>| valid.map(|(w, v)| evaluate_pretext_loss(b, w, v, cfg.batch_size)).transpose();
    fit_loop(bundle, train.len(), cfg, step, eval)
}

fn stage_targets(windows: &WindowDataset, idx: &[usize]) -> Result<Vec<usize>, TrainError> {
    idx.iter().map(|&i| windows.windows[i].stage.map(SleepStage::index).ok_or(TrainError::Unlabeled { index: i })).collect()
}

/// Eval-mode stage logits, `N` rows of 5.
pub fn supervised_predict_logits<F: Real>(
    bundle: &ModelBundle<F>,
    windows: &WindowDataset,
    idx: &[usize],
    batch: usize,
) -> Result<Vec<[f64; 5]>, TrainError> {
    let parts: Result<Vec<Vec<[f64; 5]>>, TrainError> = idx
        .par_chunks(batch.max(1))
        .map(|chunk| {
            let mut tape = Tape::new();
            let bound = bundle.bind(&mut tape);
            let x = stack_windows(&mut tape, &bundle.config, &window_refs(windows, chunk))?;
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let h = feature_extractor_forward(&mut tape, &bundle.config, &bound, x, Mode::Eval, &mut rng)?;
            let z = supervised_logits(&mut tape, &bound, h)?;
            Ok(tape.value(z).chunks(SleepStage::COUNT).map(|r| std::array::from_fn(|k| r[k].as_f64())).collect())
        })
        .collect();
    Ok(parts?.concat())
}

fn weighted_ce(logits: &[[f64; 5]], targets: &[usize], weights: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (row, &t) in logits.iter().zip(targets) {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        num += weights[t] * (lse - row[t]);
        den += weights[t];
    }
    num / den
}

/// Trains extractor and softmax head jointly with class-weighted
/// cross-entropy. Every class in `required` must occur in `train`.
pub fn fit_supervised<F: Real>(
    bundle: ModelBundle<F>,
    windows: &WindowDataset,
    train: &[usize],
    valid: Option<(&WindowDataset, &[usize])>,
    required: &[SleepStage],
    cfg: &TrainConfig,
) -> Result<(ModelBundle<F>, TrainHistory), TrainError> {
    if bundle.task != Task::Supervised {
        return Err(TrainError::Config(format!("model head is {}, not supervised", bundle.task)));
    }
    if train.is_empty() {
        return Err(TrainError::EmptyDataset("training"));
    }
    let targets = stage_targets(windows, train)?;
    let mut weights = compute_class_weights(&targets, SleepStage::COUNT);
    let missing: Vec<SleepStage> = required.iter().copied().filter(|s| weights[s.index()] == 0.0).collect();
    if !missing.is_empty() {
        return Err(TrainError::MissingClasses(missing));
    }
    // Absent classes never occur as targets; any positive weight will do.
    weights.iter_mut().filter(|w| **w == 0.0).for_each(|w| *w = 1.0);
    let valid_targets = valid.map(|(w, idx)| stage_targets(w, idx)).transpose()?;
    let wf: Vec<F> = weights.iter().map(|&w| F::of(w)).collect();

    let step = |tape: &mut Tape<F>, bound: &BoundParams, b: &ModelBundle<F>, pos: &[usize], rng: &mut ChaCha8Rng| {
        let idx: Vec<usize> = pos.iter().map(|&p| train[p]).collect();
        let t: Vec<usize> = pos.iter().map(|&p| targets[p]).collect();
        let x = stack_windows(tape, &b.config, &window_refs(windows, &idx))?;
        let h = feature_extractor_forward(tape, &b.config, bound, x, Mode::Train, rng)?;
        let z = supervised_logits(tape, bound, h)?;
        Ok(tape.weighted_cross_entropy(z, &t, &wf)?)
    };
    let eval = |b: &ModelBundle<F>| -> Result<Option<f64>, TrainError> {
        let (Some((w, idx)), Some(t)) = (valid, valid_targets.as_ref()) else {
            return Ok(None);
        };
        let z = supervised_predict_logits(b, w, idx, cfg.batch_size)?;
        Ok(Some(weighted_ce(&z, t, &weights)))
    };
    fit_loop(bundle, train.len(), cfg, step, eval)
}

/// Mean squared reconstruction error in eval mode.
pub fn reconstruction_mse<F: Real>(
    bundle: &ModelBundle<F>,
    windows: &WindowDataset,
    idx: &[usize],
    batch: usize,
) -> Result<f64, TrainError> {
    if idx.is_empty() {
        return Err(TrainError::EmptyDataset("evaluation"));
    }
    let parts: Result<Vec<f64>, TrainError> = idx
        .par_chunks(batch.max(1))
        .map(|chunk| {
            let mut tape = Tape::new();
            let bound = bundle.bind(&mut tape);
            let refs = window_refs(windows, chunk);
            let x = stack_windows(&mut tape, &bundle.config, &refs)?;
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let h = feature_extractor_forward(&mut tape, &bundle.config, &bound, x, Mode::Eval, &mut rng)?;
            let y = decode_autoencoder(&mut tape, &bundle.config, &bound, h)?;
            let target: Vec<f64> = refs.iter().flat_map(|w| w.iter().map(|&v| f64::from(v))).collect();
            Ok(tape.value(y).iter().zip(&target).map(|(a, b)| (a.as_f64() - b).powi(2)).sum::<f64>())
        })
        .collect();
    let n = idx.len() * bundle.config.channels * bundle.config.window_samples;
    Ok(parts?.iter().sum::<f64>() / n as f64)
}

pub fn fit_autoencoder<F: Real>(
    bundle: ModelBundle<F>,
    windows: &WindowDataset,
    train: &[usize],
    valid: Option<(&WindowDataset, &[usize])>,
    cfg: &TrainConfig,
) -> Result<(ModelBundle<F>, TrainHistory), TrainError> {
    if bundle.task != Task::Ae {
        return Err(TrainError::Config(format!("model head is {}, not ae", bundle.task)));
    }
    if train.is_empty() {
        return Err(TrainError::EmptyDataset("training"));
    }
    let step = |tape: &mut Tape<F>, bound: &BoundParams, b: &ModelBundle<F>, pos: &[usize], rng: &mut ChaCha8Rng| {
        let idx: Vec<usize> = pos.iter().map(|&p| train[p]).collect();
        let refs = window_refs(windows, &idx);
        let x = stack_windows(tape, &b.config, &refs)?;
        let h = feature_extractor_forward(tape, &b.config, bound, x, Mode::Train, rng)?;
        let y = decode_autoencoder(tape, &b.config, bound, h)?;
        let target: Vec<F> = tape.value(x).to_vec();
        Ok(tape.mse(y, &target)?)
    };
    let eval = |b: &ModelBundle<F>| valid.map(|(w, idx)| reconstruction_mse(b, w, idx, cfg.batch_size)).transpose();
    fit_loop(bundle, train.len(), cfg, step, eval)
}
