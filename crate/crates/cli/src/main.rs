use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::json;

use tempo_contrast::config::{parse_config, DatasetSpec, ExperimentConfig};
use tempo_contrast::eval::{
    embed_dataset, export_embeddings, labeled, pretrain_pretext, probe_balanced_accuracy, run_lowdata_curve, run_tau_sweep,
    write_sweep_csv, Method, MethodFeatures, Splits,
};
use tempo_contrast::features::{feature_matrix, write_feature_csv};
use tempo_contrast::models::{load_checkpoint, save_checkpoint, ModelBundle, Task};
use tempo_contrast::sampling::PretextTask;
use tempo_contrast::signal::{edf::write_edf, write_hypnogram, SleepStage, WindowDataset};
use tempo_contrast::training::{fit_autoencoder, fit_supervised, reconstruction_mse, supervised_predict_logits, TrainHistory};

#[derive(Parser)]
#[command(name = "tempo-contrast", version, about = "Temporal contrastive self-supervised learning for EEG")]
struct Cli {
    /// Experiment config (JSON).
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set sampler.tau_pos_s=120`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Worker threads; falls back to TEMPO_CONTRAST_THREADS, then all cores.
    #[arg(long, global = true, env = "TEMPO_CONTRAST_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load, preprocess and window the dataset into the run's window cache.
    Ingest,
    /// Pretrain a feature extractor on a self-supervised task.
    Pretrain {
        #[arg(long, value_enum)]
        task: PretrainTask,
    },
    /// Train the fully supervised baseline on all training labels.
    TrainSupervised,
    /// Fit a linear probe on frozen features and report test balanced accuracy.
    Probe {
        #[arg(long, value_enum)]
        features: FeatureSource,
    },
    /// Pretrain and probe once per (tau_pos, tau_neg) pair.
    Sweep,
    /// Balanced accuracy against the number of labels per class.
    Curve {
        /// Comma-separated subset of rp,ts,ae,rand,supervised,handcrafted.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<Method>,
    },
    /// Export embeddings with window metadata.
    Embed {
        #[arg(long, value_enum)]
        features: FeatureSource,
    },
    /// Write the configured synthetic recordings as EDF plus hypnogram files.
    Synth,
}

#[derive(Clone, Copy, ValueEnum)]
enum PretrainTask {
    Rp,
    Ts,
    Ae,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum FeatureSource {
    Rp,
    Ts,
    Ae,
    Rand,
    Handcrafted,
}

impl FeatureSource {
    fn method(self) -> Method {
        match self {
            Self::Rp => Method::Rp,
            Self::Ts => Method::Ts,
            Self::Ae => Method::Ae,
            Self::Rand => Method::RandInit,
            Self::Handcrafted => Method::Handcrafted,
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::try_parse().unwrap_or_else(|e| {
        if e.kind() == ErrorKind::InvalidSubcommand {
            let names: Vec<String> = Cli::command().get_subcommands().map(|c| c.get_name().to_string()).collect();
            eprintln!("{e}\nvalid commands: {}", names.join(", "));
            std::process::exit(2);
        }
        e.exit()
    });
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

struct Run {
    cfg: ExperimentConfig,
    dir: PathBuf,
}

impl Run {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn checkpoint(&self, method: Method) -> PathBuf {
        self.path(&format!("{method}.ckpt"))
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    let path = cli.config.context("--config is required")?;
    let (cfg, _) = parse_config(&path, &cli.overrides).with_context(|| format!("loading {}", path.display()))?;
    for o in &cli.overrides {
        info!("override {o}");
    }
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let run = Run { cfg, dir };
    match cli.command {
        Command::Ingest => ingest(&run).map(|_| ()),
        Command::Pretrain { task } => pretrain(&run, task),
        Command::TrainSupervised => train_supervised(&run),
        Command::Probe { features } => probe(&run, features),
        Command::Sweep => sweep(&run),
        Command::Curve { methods } => curve(&run, methods),
        Command::Embed { features } => embed(&run, features),
        Command::Synth => synth(&run),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

/// Identity of the inputs a window cache was built from.
fn cache_key(cfg: &ExperimentConfig) -> Result<String> {
    Ok(serde_json::to_string_pretty(&serde_json::json!({
        "dataset": cfg.dataset,
        "preprocess": cfg.preprocess,
    }))? + "\n")
}

fn ingest(run: &Run) -> Result<WindowDataset> {
    let ds = run.cfg.load_dataset()?;
    let cache = run.path("windows.tcwd");
    let mut w = create(&cache)?;
    ds.write_cache(&mut w)?;
    w.flush()?;
    fs::write(run.path("windows.json"), cache_key(&run.cfg)?)?;
    let n_labeled = ds.windows.iter().filter(|w| w.stage.is_some()).count();
    println!(
        "ingest: {} windows ({} labeled) from {} recordings, C={} T={} -> {}",
        ds.len(),
        n_labeled,
        ds.recordings.len(),
        ds.channels,
        ds.window_samples,
        cache.display()
    );
    Ok(ds)
}

/// The cached windows, rebuilt when missing or made from other inputs.
fn windows(run: &Run) -> Result<WindowDataset> {
    let cache = run.path("windows.tcwd");
    let fresh = fs::read_to_string(run.path("windows.json")).ok() == Some(cache_key(&run.cfg)?);
    if cache.is_file() && fresh {
        let f = File::open(&cache).with_context(|| format!("opening {}", cache.display()))?;
        return WindowDataset::read_cache(std::io::BufReader::new(f)).with_context(|| format!("reading {}", cache.display()));
    }
    info!("window cache missing or stale; ingesting");
    ingest(run)
}

fn splits(run: &Run, ds: &WindowDataset) -> Result<Splits> {
    Ok(run.cfg.splits(ds)?)
}

fn write_history(path: &Path, h: &TrainHistory) -> Result<()> {
    let mut w = create(path)?;
    h.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn pretrain(run: &Run, task: PretrainTask) -> Result<()> {
    let ds = windows(run)?;
    let s = splits(run, &ds)?;
    let model = run.cfg.model_config(&ds);
    let train = run.cfg.train_config();
    let (method, bundle, history, mut summary, line) = match task {
        PretrainTask::Rp | PretrainTask::Ts => {
            let (t, m) = match task {
                PretrainTask::Rp => (PretextTask::Rp, Method::Rp),
                _ => (PretextTask::Ts, Method::Ts),
            };
            let r = pretrain_pretext(&ds, &s, t, &run.cfg.sampler_config(), &model, &train, run.cfg.model_seed())?;
            let line = format!(
                "pretrain {m}: {} train / {} valid / {} test tuples, best epoch {} of {}, test pretext balanced accuracy {:.4}",
                r.n_train, r.n_valid, r.n_test, r.history.best_epoch, r.history.stopped_epoch, r.test_balanced_accuracy
            );
            let summary = json!({
                "n_train": r.n_train,
                "n_valid": r.n_valid,
                "n_test": r.n_test,
                "test_pretext_balanced_accuracy": finite(r.test_balanced_accuracy),
            });
            (m, r.bundle, r.history, summary, line)
        }
        PretrainTask::Ae => {
            let bundle = ModelBundle::<f32>::init(model, Task::Ae, run.cfg.model_seed())?;
            let valid = (!s.valid.is_empty()).then_some((&ds, s.valid.as_slice()));
            let (bundle, history) = fit_autoencoder(bundle, &ds, &s.train, valid, &train)?;
            let mse = if s.test.is_empty() { f64::NAN } else { reconstruction_mse(&bundle, &ds, &s.test, train.batch_size)? };
            let line =
                format!("pretrain ae: best epoch {} of {}, test reconstruction MSE {mse:.6}", history.best_epoch, history.stopped_epoch);
            (Method::Ae, bundle, history, json!({ "test_reconstruction_mse": finite(mse) }), line)
        }
    };
    let ckpt = run.checkpoint(method);
    save_checkpoint(&bundle, &history.summary(), &ckpt)?;
    write_history(&run.path(&format!("{method}_history.csv")), &history)?;
    if let (Some(dst), Some(src)) = (summary.as_object_mut(), history.summary().as_object()) {
        dst.extend(src.clone());
    }
    fs::write(run.path(&format!("{method}_summary.json")), serde_json::to_string_pretty(&summary)? + "\n")?;
    println!("{line} -> {}", ckpt.display());
    Ok(())
}

/// NaN has no JSON spelling.
fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

fn train_supervised(run: &Run) -> Result<()> {
    let ds = windows(run)?;
    let s = splits(run, &ds)?;
    let (train_idx, train_y) = labeled(&ds, &s.train);
    let (valid_idx, _) = labeled(&ds, &s.valid);
    let (test_idx, test_y) = labeled(&ds, &s.test);
    let mut required: Vec<SleepStage> = train_y.iter().filter_map(|&c| SleepStage::from_index(c)).collect();
    required.sort_by_key(|c| c.index());
    required.dedup();
    let cfg = run.cfg.supervised_config();
    let bundle = ModelBundle::<f32>::init(run.cfg.model_config(&ds), Task::Supervised, run.cfg.model_seed())?;
    let valid = (!valid_idx.is_empty()).then_some((&ds, valid_idx.as_slice()));
    let (bundle, history) = fit_supervised(bundle, &ds, &train_idx, valid, &required, &cfg)?;
    let ckpt = run.checkpoint(Method::Supervised);
    save_checkpoint(&bundle, &history.summary(), &ckpt)?;
    write_history(&run.path("supervised_history.csv"), &history)?;
    let acc = if test_idx.is_empty() {
        f64::NAN
    } else {
        let logits = supervised_predict_logits(&bundle, &ds, &test_idx, cfg.batch_size)?;
        let pred: Vec<usize> = logits.iter().map(|l| tempo_contrast::eval::argmax(l)).collect();
        tempo_contrast::eval::balanced_accuracy(&pred, &test_y)?
    };
    write_metrics(run, "supervised", acc)?;
    println!(
        "train-supervised: best epoch {} of {}, test balanced accuracy {acc:.4} -> {}",
        history.best_epoch,
        history.stopped_epoch,
        ckpt.display()
    );
    Ok(())
}

fn write_metrics(run: &Run, name: &str, acc: f64) -> Result<()> {
    let path = run.path(&format!("{name}_metrics.csv"));
    let mut w = create(&path)?;
    writeln!(w, "features,test_balanced_accuracy")?;
    writeln!(w, "{name},{acc:.6}")?;
    w.flush()?;
    Ok(())
}

/// Extractor for a frozen-feature method: a pretrained checkpoint, or a
/// fresh model for `rand`.
fn extractor(run: &Run, ds: &WindowDataset, method: Method) -> Result<ModelBundle<f32>> {
    if method == Method::RandInit {
        return Ok(ModelBundle::<f32>::init(run.cfg.model_config(ds), Task::Rp, run.cfg.model_seed())?);
    }
    let ckpt = run.checkpoint(method);
    if !ckpt.is_file() {
        bail!("missing checkpoint {}; run `pretrain --task {method}` first", ckpt.display());
    }
    let (bundle, _) = load_checkpoint(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    Ok(bundle)
}

fn frozen_features(run: &Run, ds: &WindowDataset, method: Method) -> Result<(Vec<f64>, usize)> {
    if method == Method::Handcrafted {
        let all: Vec<usize> = (0..ds.len()).collect();
        let (values, names) = feature_matrix(ds, &all)?;
        return Ok((values, names.len()));
    }
    let m = embed_dataset(&extractor(run, ds, method)?, ds)?;
    Ok((m.values, m.dim))
}

fn probe(run: &Run, features: FeatureSource) -> Result<()> {
    let method = features.method();
    let ds = windows(run)?;
    let s = splits(run, &ds)?;
    let (values, dim) = frozen_features(run, &ds, method)?;
    let acc = probe_balanced_accuracy(&values, dim, &ds, &s.train, &s, &run.cfg.probe_config())?;
    write_metrics(run, &format!("probe_{method}"), acc)?;
    println!("probe {method}: {dim}-dimensional features, test balanced accuracy {acc:.4}");
    Ok(())
}

fn sweep(run: &Run) -> Result<()> {
    let ds = windows(run)?;
    let s = splits(run, &ds)?;
    let rows = run_tau_sweep(&ds, &s, &run.cfg.sweep_config(&ds))?;
    let path = run.path("sweep.csv");
    let mut w = create(&path)?;
    write_sweep_csv(&rows, &mut w)?;
    w.flush()?;
    println!("sweep: {} tau pairs -> {}", rows.len(), path.display());
    Ok(())
}

fn curve(run: &Run, methods: Vec<Method>) -> Result<()> {
    let methods = if methods.is_empty() { run.cfg.curve.methods.clone() } else { methods };
    let ds = windows(run)?;
    let s = splits(run, &ds)?;
    let mut inputs = Vec::with_capacity(methods.len());
    for m in methods {
        let f = if m == Method::Supervised {
            MethodFeatures::EndToEnd { config: run.cfg.model_config(&ds) }
        } else {
            let (values, dim) = frozen_features(run, &ds, m)?;
            MethodFeatures::Frozen { values, dim }
        };
        inputs.push((m, f));
    }
    let result = run_lowdata_curve(&ds, &s, &inputs, &run.cfg.curve_config())?;
    let path = run.path("curve.csv");
    let mut w = create(&path)?;
    result.write_csv(&mut w)?;
    w.flush()?;
    println!("curve: {} rows -> {}", result.rows.len(), path.display());
    Ok(())
}

fn embed(run: &Run, features: FeatureSource) -> Result<()> {
    let method = features.method();
    let ds = windows(run)?;
    let path = run.path(&format!("{method}_embeddings.csv"));
    let mut w = create(&path)?;
    if method == Method::Handcrafted {
        let all: Vec<usize> = (0..ds.len()).collect();
        let (values, names) = feature_matrix(&ds, &all)?;
        write_feature_csv(&names, &values, &mut w)?;
    } else {
        let m = embed_dataset(&extractor(run, &ds, method)?, &ds)?;
        export_embeddings(&m, &mut w)?;
    }
    w.flush()?;
    println!("embed {method}: {} windows -> {}", ds.len(), path.display());
    Ok(())
}

fn synth(run: &Run) -> Result<()> {
    let DatasetSpec::Synthetic(spec) = &run.cfg.dataset else {
        bail!("`synth` needs a synthetic dataset in the config");
    };
    let dir = run.path("synthetic");
    fs::create_dir_all(&dir)?;
    for r in 0..spec.recordings {
        let rec = spec.recording(r)?;
        fs::write(dir.join(format!("{}.edf", rec.subject_id)), write_edf(&rec)?)?;
        fs::write(dir.join(format!("{}.hyp", rec.subject_id)), write_hypnogram(&rec.annotations))?;
    }
    println!("synth: {} recordings -> {}", spec.recordings, dir.display());
    Ok(())
}
