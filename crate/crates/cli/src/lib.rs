//! Implementations of the `phr3d` subcommands. Each returns a core error
//! whose class decides the exit code.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use phr_core::data::config::{hex, Precision, RunConfig};
use phr_core::data::manifest::{load_dataset, read_pairs, Dataset, PredictionFile};
use phr_core::data::synthetic::{write_synthetic, SyntheticFaceSpec};
use phr_core::geometry::Image;
use phr_core::landmarks::scheme_defaults;
use phr_core::metrics::{cumulative_curve, default_thresholds, evaluate, Axes, EvaluationReport, MetricConfig, Normalizer};
use phr_core::model::train::{train_stagewise, LogRow, TrainOptions, TrainRecord, TrainSummary, LOG_HEADER};
use phr_core::model::{CascadeConfig, CascadeModel, Census, CheckpointMeta, Preset};
use phr_core::{CoreError, Result};
use phr_tensor::Element;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Written to `<output_dir>/summary.json` after training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub config_hash: String,
    pub seed: u64,
    pub precision: Precision,
    pub summary: TrainSummary,
    pub log: Vec<LogRow>,
}

/// Files laid out under a run's output directory.
pub struct RunPaths {
    pub config: PathBuf,
    pub log: PathBuf,
    pub summary: PathBuf,
    pub checkpoints: PathBuf,
    /// Final model stem (`.phr` + `.json`).
    pub model: PathBuf,
}

impl RunPaths {
    pub fn new(dir: &Path) -> Self {
        RunPaths {
            config: dir.join("run.json"),
            log: dir.join("train_log.csv"),
            summary: dir.join("summary.json"),
            checkpoints: dir.join("checkpoints"),
            model: dir.join("model"),
        }
    }
}

fn load_records(ds: &Dataset) -> Result<Vec<TrainRecord>> {
    ds.records
        .iter()
        .map(|r| {
            Ok(TrainRecord {
                image: Image::load_png(&r.image_path)?,
                bbox: r.bbox,
                landmarks: r.landmarks.clone(),
            })
        })
        .collect()
}

/// `train --config <path> [--resume <stem>]`
pub fn train(config: &Path, resume: Option<&Path>, echo: &mut dyn Write) -> Result<TrainReport> {
    let cfg = RunConfig::load(config)?;
    let train_ds = load_dataset(&cfg.train_manifest, Some(cfg.n_points))?;
    let val_ds = load_dataset(&cfg.val_manifest, Some(cfg.n_points))?;
    for w in train_ds.warnings.iter().chain(&val_ds.warnings) {
        writeln!(echo, "warning: {w}")?;
    }
    let train = load_records(&train_ds)?;
    let val = load_records(&val_ds)?;
    match cfg.precision {
        Precision::F32 => train_with::<f32>(&cfg, &train, &val, resume, echo),
        Precision::F64 => train_with::<f64>(&cfg, &train, &val, resume, echo),
    }
}

fn train_with<T: Element>(
    cfg: &RunConfig,
    train: &[TrainRecord],
    val: &[TrainRecord],
    resume: Option<&Path>,
    echo: &mut dyn Write,
) -> Result<TrainReport> {
    let paths = RunPaths::new(&cfg.output_dir);
    std::fs::create_dir_all(&cfg.output_dir)?;
    let (mut model, resume_after) = match resume {
        Some(stem) => {
            let (m, _) = CascadeModel::<T>::load_checkpoint(&model_stem(stem))?;
            if m.cfg != cfg.cascade() {
                return Err(CoreError::Config("checkpoint topology differs from the run config".into()));
            }
            let stage = m.stage;
            (m, Some(stage))
        }
        None => (CascadeModel::<T>::new(cfg.cascade(), cfg.seed)?, None),
    };
    std::fs::write(&paths.config, serde_json::to_string_pretty(cfg)?)?;
    let mut log = BufWriter::new(File::create(&paths.log)?);
    writeln!(log, "{LOG_HEADER}")?;
    let mut io_err = None;
    let mut progress = |row: &LogRow| {
        let line = row.csv();
        let r = writeln!(log, "{line}").and_then(|_| log.flush()).and_then(|_| writeln!(echo, "{line}"));
        if let Err(e) = r {
            io_err.get_or_insert(e);
        }
    };
    let outcome = train_stagewise(
        &mut model,
        train,
        val,
        &cfg.schedule(),
        TrainOptions {
            seed: cfg.seed,
            metric: cfg.metric_config()?,
            augment: cfg.augment_config()?,
            checkpoint_dir: Some(paths.checkpoints.clone()),
            resume_after,
            progress: Some(&mut progress),
        },
    )?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    let meta = CheckpointMeta {
        epoch: cfg.schedule().z.epochs,
        seed: cfg.seed,
        rng_stream: 0,
    };
    model.save_checkpoint(&paths.model, &meta)?;
    let report = TrainReport {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        precision: cfg.precision,
        summary: outcome.summary,
        log: outcome.log,
    };
    std::fs::write(&paths.summary, serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

/// Accepts `run/model`, `run/model.phr` or `run/model.json`.
pub fn model_stem(p: &Path) -> PathBuf {
    match p.extension().and_then(|e| e.to_str()) {
        Some("phr" | "json") => p.with_extension(""),
        _ => p.to_path_buf(),
    }
}

fn checkpoint_precision(stem: &Path) -> Result<Precision> {
    let path = stem.with_extension("json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CoreError::Data(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    match v.get("dtype").and_then(|d| d.as_str()) {
        Some("f32") => Ok(Precision::F32),
        Some("f64") => Ok(Precision::F64),
        other => Err(CoreError::Data(format!("checkpoint {}: bad dtype {other:?}", path.display()))),
    }
}

/// `predict --model <ckpt> --images <manifest> --out <pred-file>`
pub fn predict(model: &Path, images: &Path, out: &Path) -> Result<PredictionFile> {
    let stem = model_stem(model);
    let file = match checkpoint_precision(&stem)? {
        Precision::F32 => predict_with::<f32>(&stem, images)?,
        Precision::F64 => predict_with::<f64>(&stem, images)?,
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    file.write(out)?;
    Ok(file)
}

fn predict_with<T: Element>(stem: &Path, images: &Path) -> Result<PredictionFile> {
    let (model, _) = CascadeModel::<T>::load_checkpoint(stem)?;
    let ds = load_dataset(images, Some(model.cfg.n_points))?;
    let mut entries = Vec::with_capacity(ds.records.len());
    for r in &ds.records {
        let img = Image::load_png(&r.image_path)?;
        entries.push((r.id.clone(), model.predict_landmarks_3d(&img, &r.bbox)?));
    }
    Ok(PredictionFile { entries })
}

/// Evaluation settings beyond the input files.
#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    /// Run config to take the metric settings, hash and seed from.
    pub config: Option<PathBuf>,
    pub eyes: Option<(usize, usize)>,
    pub normalizer: Option<Normalizer>,
    pub no_translation: bool,
    pub curve_samples: Option<usize>,
}

pub const DEFAULT_CURVE_SAMPLES: usize = 200;

/// Written to `<report>/report.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportFile {
    /// Run config hash, or the metric config's hash without one.
    pub config_hash: String,
    pub seed: Option<u64>,
    pub predictions: PathBuf,
    pub ground_truth: PathBuf,
    pub report: EvaluationReport,
}

/// `eval --pred <file> --gt <manifest> [--pairs <file>] --report <dir>`
pub fn eval(pred: &Path, gt: &Path, pairs: Option<&Path>, report_dir: &Path, opts: &EvalOptions) -> Result<ReportFile> {
    let run = opts.config.as_deref().map(RunConfig::load).transpose()?;
    let preds = PredictionFile::read(pred)?;
    let ds = load_dataset(gt, None)?;
    let n = ds.n_points().unwrap_or(0);
    let mut metric = match &run {
        Some(c) => c.metric_config()?,
        None => match (opts.eyes, scheme_defaults(n)) {
            (Some(e), _) => MetricConfig::new(e),
            (None, Some((_, e))) => MetricConfig::new(e),
            (None, None) => {
                return Err(CoreError::Config(format!("no default eye pair for {n} points; pass --eyes")))
            }
        },
    };
    if let Some(e) = opts.eyes {
        metric.eye_indices = e;
    }
    if let Some(nm) = opts.normalizer {
        metric.normalizer = nm;
    }
    if opts.no_translation {
        metric.cvgtce_translation = false;
    }
    if preds.entries.len() != ds.records.len() {
        return Err(CoreError::Data(format!(
            "{} predictions for {} ground-truth records",
            preds.entries.len(),
            ds.records.len()
        )));
    }
    let mut ordered = Vec::with_capacity(ds.records.len());
    for r in &ds.records {
        let p = preds
            .entries
            .iter()
            .find(|(id, _)| *id == r.id)
            .ok_or_else(|| CoreError::Data(format!("no prediction for `{}`", r.id)))?;
        ordered.push(p.1.clone());
    }
    let ids: Vec<String> = ds.records.iter().map(|r| r.id.clone()).collect();
    let gts: Vec<_> = ds.records.iter().map(|r| r.landmarks.clone()).collect();
    let pairs = match pairs {
        Some(p) => read_pairs(p, &ds)?,
        None => Vec::new(),
    };
    let samples = opts.curve_samples.unwrap_or(DEFAULT_CURVE_SAMPLES);
    let report = evaluate(&ids, &ordered, &gts, &pairs, &metric, samples)?;
    let (config_hash, seed) = match &run {
        Some(c) => (c.hash(), Some(c.seed)),
        None => (hex(&Sha256::digest(serde_json::to_string(&metric)?.as_bytes())), None),
    };
    let file = ReportFile {
        config_hash,
        seed,
        predictions: pred.to_path_buf(),
        ground_truth: gt.to_path_buf(),
        report,
    };
    std::fs::create_dir_all(report_dir)?;
    std::fs::write(report_dir.join("report.json"), serde_json::to_string_pretty(&file)?)?;
    write_curve(&report_dir.join("curve.csv"), &file.report.curve)?;
    Ok(file)
}

pub fn read_report(dir: &Path) -> Result<ReportFile> {
    let path = dir.join("report.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CoreError::Data(format!("cannot read report {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_curve(path: &Path, curve: &[(f64, f64)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "threshold,fraction")?;
    for (t, f) in curve {
        writeln!(w, "{t},{f}")?;
    }
    w.flush()?;
    Ok(())
}

/// `curve --report <dir>`: cumulative curve of per-image errors on `axes`,
/// written to `out` (default `<dir>/curve.csv`).
pub fn curve(report_dir: &Path, axes: Axes, samples: usize, out: Option<&Path>) -> Result<(PathBuf, Vec<(f64, f64)>)> {
    let file = read_report(report_dir)?;
    let errors: Vec<f64> = file
        .report
        .per_image
        .iter()
        .map(|e| match (axes.x, axes.y, axes.z) {
            (true, false, false) => Ok(e.x),
            (false, true, false) => Ok(e.y),
            (false, false, true) => Ok(e.z),
            (true, true, false) => Ok(e.xy),
            (true, true, true) => Ok(e.xyz),
            _ => Err(CoreError::Config("curve axes must be one of x, y, z, xy, xyz".into())),
        })
        .collect::<Result<_>>()?;
    let curve = cumulative_curve(&errors, &default_thresholds(&errors, samples))?;
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| report_dir.join("curve.csv"));
    write_curve(&path, &curve)?;
    Ok((path, curve))
}

/// Contents of a `synth --spec` file: the generator spec plus a record count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthFile {
    pub count: usize,
    #[serde(flatten)]
    pub spec: SyntheticFaceSpec,
}

/// `synth --spec <path> --out <dir>`
pub fn synth(spec: &Path, out: &Path) -> Result<phr_core::data::synthetic::SyntheticPaths> {
    let text = std::fs::read_to_string(spec)
        .map_err(|e| CoreError::Config(format!("cannot read spec {}: {e}", spec.display())))?;
    let file: SynthFile =
        serde_json::from_str(&text).map_err(|e| CoreError::Config(format!("invalid synthetic spec: {e}")))?;
    file.spec.validate()?;
    let set = file.spec.generate(file.count)?;
    write_synthetic(&file.spec, &set, out)
}

/// `audit --preset <p>`: build the model (f32, untrained) and describe it.
pub fn audit(preset: Preset, n_points: usize) -> Result<Census> {
    let model = CascadeModel::<f32>::new(CascadeConfig::preset(preset, n_points), 0)?;
    Ok(model.census())
}

pub fn format_census(preset: Preset, n_points: usize, c: &Census) -> String {
    let mut s = String::new();
    let name = match preset {
        Preset::Paper => "paper",
        Preset::Desk => "desk",
    };
    s.push_str(&format!("preset {name}, {n_points} landmarks\n"));
    for sub in &c.subnetworks {
        s.push_str(&format!(
            "subnetwork {:<10} params {:>11}  bottlenecks {}\n",
            sub.name, sub.params, sub.bottlenecks
        ));
    }
    s.push_str(&format!("z regressor input channels {}\n", c.z_input_channels));
    for b in &c.z_blocks {
        s.push_str(&format!("{:<3} {:<60} params {:>10}\n", b.name, b.description, b.params));
    }
    let inner: usize = c.z_blocks.iter().map(|b| b.bottlenecks).sum();
    s.push_str(&format!("z regressor bottlenecks {inner}\n"));
    s.push_str(&format!("z regressor outputs {}\n", c.z_outputs));
    s.push_str(&format!("total parameters {}\n", c.total_params));
    s
}
