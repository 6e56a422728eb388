//! Siamese convolutional feature extractor with pretext, reconstruction and
//! classification heads.

mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{BoundParams, Mode, NnError, Padding, ParamSet, Real, Tape, Tensor, Var};
use crate::signal::SleepStage;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};

/// Feature maps of both temporal convolutions.
pub const FEATURE_MAPS: usize = 8;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint: magic bytes {found:?}, expected \"TCKP\"")]
    BadMagic { found: Vec<u8> },
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint truncated at byte {offset}: needed {needed} more bytes for {what}")]
    Truncated { offset: usize, needed: usize, what: String },
    #[error("corrupt checkpoint metadata: {0}")]
    Metadata(String),
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    DimensionMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("extractor configs differ: {0}")]
    ConfigMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractorConfig {
    pub channels: usize,
    pub window_samples: usize,
    pub conv_kernel: usize,
    pub pool_size: usize,
    pub embed_dim: usize,
    pub dropout_rate: f64,
}

impl FeatureExtractorConfig {
    /// C=2, T=2000 (20 s at 100 Hz), k=50, m=13, D=100.
    pub fn sleep_edf() -> Self {
        FeatureExtractorConfig { channels: 2, window_samples: 2000, conv_kernel: 50, pool_size: 13, embed_dim: 100, dropout_rate: 0.5 }
    }

    /// C=3, T=3840 (30 s at 128 Hz), k=64, m=16, D=100.
    pub fn mass() -> Self {
        FeatureExtractorConfig { channels: 3, window_samples: 3840, conv_kernel: 64, pool_size: 16, embed_dim: 100, dropout_rate: 0.5 }
    }

    /// Time length after both pooling layers.
    pub fn pooled_len(&self) -> usize {
        if self.pool_size == 0 {
            return 0;
        }
        self.window_samples / self.pool_size / self.pool_size
    }

    pub fn flatten_size(&self) -> usize {
        self.channels * FEATURE_MAPS * self.pooled_len()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let c = self;
        let bad = |m: String| Err(ModelError::Config(m));
        if c.channels == 0 || c.window_samples == 0 || c.embed_dim == 0 {
            return bad("channels, window_samples and embed_dim must be at least 1".into());
        }
        if c.conv_kernel == 0 || c.conv_kernel > c.window_samples {
            return bad(format!("conv_kernel {} must lie in 1..={}", c.conv_kernel, c.window_samples));
        }
        if c.pool_size == 0 || c.pooled_len() == 0 {
            return bad(format!("pool_size {} leaves no samples after two poolings of {}", c.pool_size, c.window_samples));
        }
        if !(0.0..1.0).contains(&c.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", c.dropout_rate));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Rp,
    Ts,
    Ae,
    Supervised,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Rp => "rp",
            Task::Ts => "ts",
            Task::Ae => "ae",
            Task::Supervised => "supervised",
        }
    }

    /// Number of windows consumed per example.
    pub fn arity(self) -> usize {
        match self {
            Task::Rp => 2,
            Task::Ts => 3,
            Task::Ae | Task::Supervised => 1,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "rp" => Ok(Task::Rp),
            "ts" => Ok(Task::Ts),
            "ae" => Ok(Task::Ae),
            "supervised" => Ok(Task::Supervised),
            _ => Err(format!("unknown task `{s}` (expected rp, ts, ae or supervised)")),
        }
    }
}

/// Extractor parameters plus the task-specific head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle<F> {
    pub config: FeatureExtractorConfig,
    pub task: Task,
    pub extractor: ParamSet<F>,
    pub head: ParamSet<F>,
}

fn uniform<F: Real, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<F> {
    let bound = (1.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| F::of(rng.random_range(-bound..=bound))).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

/// Expected tensor shapes of the extractor.
pub fn extractor_shapes(cfg: &FeatureExtractorConfig) -> Vec<(&'static str, Vec<usize>, usize)> {
    let (c, k, d) = (cfg.channels, cfg.conv_kernel, cfg.embed_dim);
    let f = cfg.flatten_size();
    vec![
        ("spatial.weight", vec![c, 1, c, 1], c),
        ("spatial.bias", vec![c], c),
        ("conv1.weight", vec![FEATURE_MAPS, 1, 1, k], k),
        ("conv1.bias", vec![FEATURE_MAPS], k),
        ("conv2.weight", vec![FEATURE_MAPS, FEATURE_MAPS, 1, k], FEATURE_MAPS * k),
        ("conv2.bias", vec![FEATURE_MAPS], FEATURE_MAPS * k),
        ("fc.weight", vec![f, d], f),
        ("fc.bias", vec![d], f),
    ]
}

/// Expected tensor shapes of the head for `task`.
pub fn head_shapes(cfg: &FeatureExtractorConfig, task: Task) -> Vec<(&'static str, Vec<usize>, usize)> {
    let (k, d) = (cfg.conv_kernel, cfg.embed_dim);
    match task {
        Task::Rp => vec![("head.weight", vec![d, 1], d), ("head.bias", vec![1], d)],
        Task::Ts => vec![("head.weight", vec![2 * d, 1], 2 * d), ("head.bias", vec![1], 2 * d)],
        Task::Supervised => vec![("head.weight", vec![d, SleepStage::COUNT], d), ("head.bias", vec![SleepStage::COUNT], d)],
        Task::Ae => {
            let f = cfg.flatten_size();
            vec![
                ("dec.fc.weight", vec![d, f], d),
                ("dec.fc.bias", vec![f], d),
                ("dec.conv1.weight", vec![FEATURE_MAPS, FEATURE_MAPS, 1, k], FEATURE_MAPS * k),
                ("dec.conv1.bias", vec![FEATURE_MAPS], FEATURE_MAPS * k),
                ("dec.conv2.weight", vec![FEATURE_MAPS, FEATURE_MAPS, 1, k], FEATURE_MAPS * k),
                ("dec.conv2.bias", vec![FEATURE_MAPS], FEATURE_MAPS * k),
                ("dec.conv3.weight", vec![1, FEATURE_MAPS, 1, k], FEATURE_MAPS * k),
                ("dec.conv3.bias", vec![1], FEATURE_MAPS * k),
            ]
        }
    }
}

fn init_set<F: Real, R: Rng>(rng: &mut R, shapes: Vec<(&'static str, Vec<usize>, usize)>) -> ParamSet<F> {
    let mut set = ParamSet::new();
    for (name, shape, fan_in) in shapes {
        set.insert(name, uniform(rng, &shape, fan_in));
    }
    set
}

fn check_shapes<F: Real>(set: &ParamSet<F>, shapes: &[(&'static str, Vec<usize>, usize)]) -> Result<(), ModelError> {
    for (name, shape, _) in shapes {
        let t = set.get(name).ok_or_else(|| ModelError::MissingTensor(name.to_string()))?;
        if t.shape() != shape.as_slice() {
            return Err(ModelError::DimensionMismatch { name: name.to_string(), expected: shape.clone(), found: t.shape().to_vec() });
        }
    }
    Ok(())
}

impl<F: Real> ModelBundle<F> {
    /// Uniform `±sqrt(1/fan_in)` initialization, seeded.
    pub fn init(config: FeatureExtractorConfig, task: Task, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let extractor = init_set(&mut rng, extractor_shapes(&config));
        let head = init_set(&mut rng, head_shapes(&config, task));
        Ok(ModelBundle { config, task, extractor, head })
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.config.validate()?;
        check_shapes(&self.extractor, &extractor_shapes(&self.config))?;
        check_shapes(&self.head, &head_shapes(&self.config, self.task))?;
        if !self.extractor.all_finite() || !self.head.all_finite() {
            return Err(ModelError::Config("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.extractor.num_scalars() + self.head.num_scalars()
    }

    pub fn cast<G: Real>(&self) -> ModelBundle<G> {
        ModelBundle { config: self.config.clone(), task: self.task, extractor: self.extractor.cast(), head: self.head.cast() }
    }

    /// Replaces the extractor with the one of `other` (same config required).
    pub fn load_extractor_from(&mut self, other: &ModelBundle<F>) -> Result<(), ModelError> {
        if other.config != self.config {
            return Err(ModelError::ConfigMismatch(format!("{:?} vs {:?}", other.config, self.config)));
        }
        check_shapes(&other.extractor, &extractor_shapes(&self.config))?;
        self.extractor = other.extractor.clone();
        Ok(())
    }

    /// Copies the head of `other`; fails when its shapes do not fit this task.
    pub fn load_head_from(&mut self, other: &ModelBundle<F>) -> Result<(), ModelError> {
        check_shapes(&other.head, &head_shapes(&self.config, self.task))?;
        self.head = other.head.clone();
        Ok(())
    }

    /// Records both parameter sets on `tape`.
    pub fn bind(&self, tape: &mut Tape<F>) -> BoundParams {
        let mut b = self.extractor.bind(tape);
        b.extend(self.head.bind(tape));
        b
    }

    /// Adds tape gradients into both parameter sets.
    pub fn accumulate(&mut self, grads: &crate::nn::Gradients<F>, bound: &BoundParams) -> Result<(), NnError> {
        self.extractor.accumulate(grads, bound)?;
        self.head.accumulate(grads, bound)
    }

    /// Eval-mode embeddings of `windows` (each `C×T`, channel-major),
    /// computed on independent tapes per chunk. Returns `N×D` row-major.
    pub fn embed(&self, windows: &[&[f32]], chunk: usize) -> Result<Vec<F>, ModelError> {
        let ct = self.config.channels * self.config.window_samples;
        if let Some(w) = windows.iter().find(|w| w.len() != ct) {
            return Err(
                NnError::ShapeMismatch { op: "embed", expected: format!("{ct} samples per window"), found: w.len().to_string() }.into()
            );
        }
        let parts: Result<Vec<Vec<F>>, ModelError> = windows
            .par_chunks(chunk.max(1))
            .map(|ws| {
                let mut tape = Tape::new();
                let bound = self.extractor.bind(&mut tape);
                let x = stack_windows(&mut tape, &self.config, ws)?;
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let h = feature_extractor_forward(&mut tape, &self.config, &bound, x, Mode::Eval, &mut rng)?;
                Ok(tape.value(h).to_vec())
            })
            .collect();
        Ok(parts?.concat())
    }
}

/// Records windows as a constant `[B, C, T]` input.
pub fn stack_windows<F: Real>(tape: &mut Tape<F>, cfg: &FeatureExtractorConfig, windows: &[&[f32]]) -> Result<Var, NnError> {
    let data: Vec<F> = windows.iter().flat_map(|w| w.iter().map(|&x| F::of(f64::from(x)))).collect();
    tape.constant(&[windows.len(), cfg.channels, cfg.window_samples], data)
}

/// `[B,C,T]` → `[B,D]`.
///
/// The spatial convolution mixes channels into `C` virtual channels, which
/// are then transposed into the height axis so the temporal convolutions
/// treat each as an independent row.
pub fn feature_extractor_forward<F: Real, R: Rng + ?Sized>(
    tape: &mut Tape<F>,
    cfg: &FeatureExtractorConfig,
    p: &BoundParams,
    x: Var,
    mode: Mode,
    rng: &mut R,
) -> Result<Var, NnError> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[1] != cfg.channels || s[2] != cfg.window_samples {
        return Err(NnError::ShapeMismatch {
            op: "feature_extractor",
            expected: format!("[B, {}, {}]", cfg.channels, cfg.window_samples),
            found: format!("{s:?}"),
        });
    }
    let (b, c, t, m) = (s[0], cfg.channels, cfg.window_samples, cfg.pool_size);
    let x = tape.reshape(x, &[b, 1, c, t])?;
    let x = tape.conv2d(x, p.get("spatial.weight")?, Some(p.get("spatial.bias")?), Padding::Valid)?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    let x = tape.conv2d(x, p.get("conv1.weight")?, Some(p.get("conv1.bias")?), Padding::Same)?;
    let x = tape.relu(x);
    let x = tape.maxpool2d(x, 1, m)?;
    let x = tape.conv2d(x, p.get("conv2.weight")?, Some(p.get("conv2.bias")?), Padding::Same)?;
    let x = tape.relu(x);
    let x = tape.maxpool2d(x, 1, m)?;
    let x = tape.reshape(x, &[b, cfg.flatten_size()])?;
    let x = tape.dropout(x, cfg.dropout_rate, mode, rng)?;
    tape.linear(x, p.get("fc.weight")?, Some(p.get("fc.bias")?))
}

/// `|h1 - h2|`.
pub fn contrast_rp<F: Real>(tape: &mut Tape<F>, h1: Var, h2: Var) -> Result<Var, NnError> {
    let d = tape.sub(h1, h2)?;
    Ok(tape.abs(d))
}

/// `(|h1 - h2|, |h2 - h3|)` concatenated along features.
pub fn contrast_ts<F: Real>(tape: &mut Tape<F>, h1: Var, h2: Var, h3: Var) -> Result<Var, NnError> {
    let a = contrast_rp(tape, h1, h2)?;
    let b = contrast_rp(tape, h2, h3)?;
    tape.concat(a, b)
}

/// `w·g + w0` per row, shape `[B]`.
pub fn pretext_score<F: Real>(tape: &mut Tape<F>, g: Var, w: Var, w0: Var) -> Result<Var, NnError> {
    let z = tape.linear(g, w, Some(w0))?;
    let b = tape.shape(z)[0];
    tape.reshape(z, &[b])
}

/// Sign of a score, with 0 predicting `+1`.
pub fn predict_label<F: Real>(score: F) -> i8 {
    if score >= F::zero() {
        1
    } else {
        -1
    }
}

/// Scores of pretext tuples whose windows are rows of `embeddings`
/// (`[U, D]`); `branches[j][i]` is the row of branch `j` in tuple `i`.
pub fn pretext_scores_from_embeddings<F: Real>(
    tape: &mut Tape<F>,
    task: Task,
    p: &BoundParams,
    embeddings: Var,
    branches: &[Vec<usize>],
) -> Result<Var, NnError> {
    let hs = branches.iter().map(|rows| tape.gather_rows(embeddings, rows)).collect::<Result<Vec<_>, _>>()?;
    let g = match (task, hs.as_slice()) {
        (Task::Rp, [h1, h2]) => contrast_rp(tape, *h1, *h2)?,
        (Task::Ts, [h1, h2, h3]) => contrast_ts(tape, *h1, *h2, *h3)?,
        _ => return Err(NnError::InvalidArgument { op: "pretext_score", message: format!("task {task} with {} branches", hs.len()) }),
    };
    pretext_score(tape, g, p.get("head.weight")?, p.get("head.bias")?)
}

/// `[B,D]` → `[B,C,T]`: linear to the pooled map, then two rounds of
/// nearest upsampling by `m` with a ReLU convolution, a crop or zero-pad to
/// `T`, and a final linear convolution back to one map.
pub fn decode_autoencoder<F: Real>(tape: &mut Tape<F>, cfg: &FeatureExtractorConfig, p: &BoundParams, emb: Var) -> Result<Var, NnError> {
    let b = tape.shape(emb)[0];
    let (c, l, m, t) = (cfg.channels, cfg.pooled_len(), cfg.pool_size, cfg.window_samples);
    let x = tape.linear(emb, p.get("dec.fc.weight")?, Some(p.get("dec.fc.bias")?))?;
    let x = tape.reshape(x, &[b, FEATURE_MAPS, c, l])?;
    let x = tape.upsample_last(x, m)?;
    let x = tape.conv2d(x, p.get("dec.conv1.weight")?, Some(p.get("dec.conv1.bias")?), Padding::Same)?;
    let x = tape.relu(x);
    let x = tape.upsample_last(x, m)?;
    let x = tape.conv2d(x, p.get("dec.conv2.weight")?, Some(p.get("dec.conv2.bias")?), Padding::Same)?;
    let x = tape.relu(x);
    let x = tape.resize_last(x, t)?;
    let x = tape.conv2d(x, p.get("dec.conv3.weight")?, Some(p.get("dec.conv3.bias")?), Padding::Same)?;
    tape.reshape(x, &[b, c, t])
}

/// Affine map to the five stage logits.
pub fn supervised_logits<F: Real>(tape: &mut Tape<F>, p: &BoundParams, emb: Var) -> Result<Var, NnError> {
    tape.linear(emb, p.get("head.weight")?, Some(p.get("head.bias")?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(c: usize, t: usize) -> FeatureExtractorConfig {
        FeatureExtractorConfig { channels: c, window_samples: t, conv_kernel: 5, pool_size: 4, embed_dim: 6, dropout_rate: 0.5 }
    }

    #[test]
    fn flatten_sizes() {
        let s = FeatureExtractorConfig::sleep_edf();
        assert_eq!(s.pooled_len(), 11);
        assert_eq!(s.flatten_size(), 176);
        let m = FeatureExtractorConfig::mass();
        assert_eq!(m.flatten_size(), 360);
    }

    #[test]
    fn sleep_edf_parameter_count() {
        let b = ModelBundle::<f32>::init(FeatureExtractorConfig::sleep_edf(), Task::Rp, 0).unwrap();
        // 6 + 408 + 3208 + 17700 in the extractor, 101 in the head.
        assert_eq!(b.extractor.num_scalars(), 21_322);
        assert_eq!(b.head.num_scalars(), 101);
    }

    #[test]
    fn config_validation() {
        let mut c = tiny(2, 64);
        c.pool_size = 9;
        assert!(c.validate().is_err());
        let mut c = tiny(2, 64);
        c.conv_kernel = 65;
        assert!(c.validate().is_err());
        assert!(tiny(2, 64).validate().is_ok());
    }

    #[test]
    fn zero_params_give_zero_embedding() {
        let cfg = tiny(2, 64);
        let mut b = ModelBundle::<f64>::init(cfg.clone(), Task::Rp, 1).unwrap();
        for (name, t) in b.extractor.iter_mut() {
            if name.ends_with("bias") {
                t.data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let zero = vec![0.0f32; 128];
        let e = b.embed(&[&zero, &zero], 8).unwrap();
        assert!(e.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn contrast_examples() {
        let mut t = Tape::<f64>::new();
        let h1 = t.constant(&[1, 2], vec![1.0, 2.0]).unwrap();
        let h2 = t.constant(&[1, 2], vec![3.0, 0.0]).unwrap();
        let g = contrast_rp(&mut t, h1, h2).unwrap();
        assert_eq!(t.value(g), &[2.0, 2.0]);
        let h3 = t.constant(&[1, 2], vec![0.5, 0.5]).unwrap();
        let a = contrast_ts(&mut t, h1, h2, h3).unwrap();
        let b = contrast_ts(&mut t, h3, h2, h1).unwrap();
        let (va, vb) = (t.value(a).to_vec(), t.value(b).to_vec());
        assert_eq!(&va[..2], &vb[2..]);
        assert_eq!(&va[2..], &vb[..2]);
    }

    #[test]
    fn zero_head_predicts_positive() {
        let mut t = Tape::<f64>::new();
        let g = t.constant(&[3, 2], vec![1.0, -2.0, 0.0, 0.0, 5.0, 1.0]).unwrap();
        let w = t.constant(&[2, 1], vec![0.0, 0.0]).unwrap();
        let w0 = t.constant(&[1], vec![0.0]).unwrap();
        let s = pretext_score(&mut t, g, w, w0).unwrap();
        assert!(t.value(s).iter().all(|&v| predict_label(v) == 1));
    }

    #[test]
    fn decoder_output_shape() {
        for cfg in [tiny(2, 64), tiny(3, 70), FeatureExtractorConfig::sleep_edf()] {
            let b = ModelBundle::<f32>::init(cfg.clone(), Task::Ae, 2).unwrap();
            let mut t = Tape::new();
            let p = b.bind(&mut t);
            let e = t.constant(&[2, cfg.embed_dim], vec![0.1; 2 * cfg.embed_dim]).unwrap();
            let y = decode_autoencoder(&mut t, &cfg, &p, e).unwrap();
            assert_eq!(t.shape(y), &[2, cfg.channels, cfg.window_samples]);
        }
    }

    #[test]
    fn head_mismatch_is_rejected() {
        let cfg = tiny(2, 64);
        let rp = ModelBundle::<f32>::init(cfg.clone(), Task::Rp, 3).unwrap();
        let mut ts = ModelBundle::<f32>::init(cfg, Task::Ts, 4).unwrap();
        ts.load_extractor_from(&rp).unwrap();
        assert_eq!(ts.extractor, rp.extractor);
        assert!(matches!(ts.load_head_from(&rp), Err(ModelError::DimensionMismatch { .. })));
    }
}
