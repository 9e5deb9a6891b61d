use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use mrcal::container::{write_container, Container};
use mrcal::dataset::{load_dataset, Dataset, Split};
use mrcal::fusion::{fuse as fuse_stack, fuse_soft, Fused, FusedTarget, FusionConfig, FusionMethod};
use mrcal::metrics::{bootstrap_eval, reliability_csv, EceMode, EvalConfig, MetricReport};
use mrcal::model::{predict, train_with, Checkpoint, TrainConfig, TrainLoss};
use mrcal::synth::{generate, true_consensus_probability, LatentField, SynthConfig};
use mrcal::ForegroundProbMap;

use crate::Failure;

fn emit(value: &serde_json::Value) {
    println!("{value}");
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    create_parent(path)?;
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::Data(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn create_parent(path: &Path) -> Result<(), Failure> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(())
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn load(data: &Path) -> Result<Dataset, Failure> {
    Ok(load_dataset(data)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Rs,
    Mc,
    Sc,
    Scg,
    Staple,
    Simple,
    Svls,
}

impl From<Method> for FusionMethod {
    fn from(m: Method) -> Self {
        match m {
            Method::Rs => FusionMethod::Rs,
            Method::Mc => FusionMethod::Mc,
            Method::Sc => FusionMethod::Sc,
            Method::Scg => FusionMethod::Scg,
            Method::Staple => FusionMethod::Staple,
            Method::Simple => FusionMethod::Simple,
            Method::Svls => FusionMethod::Svls,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Loss {
    /// Ordinal head with the hybrid BCE + RPS loss.
    Rps,
    Rs,
    Mc,
    Sc,
    Scg,
    Staple,
    Simple,
    Svls,
}

impl Loss {
    fn fusion_method(self) -> Option<FusionMethod> {
        Some(match self {
            Loss::Rps => return None,
            Loss::Rs => FusionMethod::Rs,
            Loss::Mc => FusionMethod::Mc,
            Loss::Sc => FusionMethod::Sc,
            Loss::Scg => FusionMethod::Scg,
            Loss::Staple => FusionMethod::Staple,
            Loss::Simple => FusionMethod::Simple,
            Loss::Svls => FusionMethod::Svls,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum EceModeArg {
    Frequency,
    #[value(alias = "paper-literal")]
    PaperLiteral,
}

impl From<EceModeArg> for EceMode {
    fn from(m: EceModeArg) -> Self {
        match m {
            EceModeArg::Frequency => EceMode::Frequency,
            EceModeArg::PaperLiteral => EceMode::PaperLiteral,
        }
    }
}

// ---------------------------------------------------------------- synth

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    n: usize,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 3)]
    raters: usize,
    #[arg(long, default_value_t = 0.5)]
    ambiguity: f64,
    #[arg(long, default_value_t = 0.1)]
    rater_bias_std: f64,
    #[arg(long, default_value_t = 0.15)]
    rater_noise_std: f64,
    #[arg(long, default_value_t = 0.05)]
    image_noise_std: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

pub fn synth(a: SynthArgs) -> Result<(), Failure> {
    let cfg = SynthConfig {
        num_samples: a.n,
        image_size: a.size,
        num_raters: a.raters,
        ambiguity: a.ambiguity,
        rater_bias_std: a.rater_bias_std,
        rater_noise_std: a.rater_noise_std,
        image_noise_std: a.image_noise_std,
        seed: a.seed,
    };
    cfg.validate()?;
    let manifest = generate(&cfg, &a.out)?;
    let [train, val, test] = manifest.split_counts();
    emit(&json!({
        "manifest": a.out.join("manifest.json"),
        "splits": {"train": train, "val": val, "test": test},
    }));
    Ok(())
}

// ---------------------------------------------------------------- fuse

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    method: Method,
    /// Gaussian width for scg and svls.
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// Required for random sampling.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct FuseSidecar<'a> {
    id: &'a str,
    split: Split,
    method: FusionMethod,
    kind: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    rater_performance: Option<mrcal::fusion::RaterPerformance>,
    #[serde(skip_serializing_if = "Option::is_none")]
    included_raters: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sampled_rater: Option<usize>,
}

pub fn fuse(a: FuseArgs) -> Result<(), Failure> {
    if a.method == Method::Rs && a.seed.is_none() {
        return Err(Failure::Usage("--method rs requires --seed".into()));
    }
    let cfg = FusionConfig {
        method: a.method.into(),
        sigma: a.sigma,
        rng_seed: a.seed.unwrap_or(0),
        ..FusionConfig::default()
    };
    cfg.validate()?;
    let ds = load(&a.data)?;
    fs::create_dir_all(&a.out)?;
    let mut count = 0;
    for entry in &ds.manifest.samples {
        let sample = ds
            .split(entry.split)
            .iter()
            .find(|s| s.id == entry.id)
            .expect("loaded with the manifest");
        let fused = match fuse_stack(&sample.annotations, &cfg, count as u64) {
            // Every rater marks every voxel the same way: the consensus is that constant.
            Err(mrcal::Error::DegenerateStack) => Fused {
                target: FusedTarget::Soft(fuse_soft(&sample.annotations)),
                rater_performance: None,
                included_raters: None,
                sampled_rater: None,
            },
            other => other?,
        };
        let (container, kind) = match &fused.target {
            FusedTarget::Hard(m) => (Container::from_mask(m), "hard"),
            FusedTarget::Soft(s) => (Container::from_real_grid(s.grid()), "soft"),
        };
        write_container(&container, a.out.join(format!("{}.mrc", entry.id)))?;
        write_json(
            &a.out.join(format!("{}.json", entry.id)),
            &FuseSidecar {
                id: &entry.id,
                split: entry.split,
                method: cfg.method,
                kind,
                rater_performance: fused.rater_performance,
                included_raters: fused.included_raters,
                sampled_rater: fused.sampled_rater,
            },
        )?;
        count += 1;
    }
    emit(&json!({"method": cfg.method, "samples": count, "out": a.out}));
    Ok(())
}

// ---------------------------------------------------------------- train

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = Loss::Rps)]
    loss: Loss,
    /// Weight of the RPS term.
    #[arg(long, default_value_t = 0.8)]
    alpha: f64,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    /// Gaussian width for scg and svls targets.
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint file; the sidecar is written next to it with a `.json` suffix.
    #[arg(long)]
    out: PathBuf,
}

fn train_config(loss: Loss, alpha: f64, lr: f64, epochs: usize, batch_size: usize, sigma: f64, seed: u64) -> TrainConfig {
    let fusion = FusionConfig {
        method: loss.fusion_method().unwrap_or(FusionMethod::Mc),
        sigma,
        rng_seed: seed,
        ..FusionConfig::default()
    };
    TrainConfig {
        loss: if loss == Loss::Rps {
            TrainLoss::HybridRps
        } else {
            TrainLoss::BceVsFused
        },
        alpha,
        lr,
        epochs,
        batch_size,
        seed,
        fusion,
        ..TrainConfig::default()
    }
}

pub fn train(a: TrainArgs) -> Result<(), Failure> {
    let cfg = train_config(a.loss, a.alpha, a.lr, a.epochs, a.batch_size, a.sigma, a.seed);
    cfg.validate()?;
    let ds = load(&a.data)?;
    let ckpt = train_with(ds.split(Split::Train), &cfg, |epoch, loss| {
        emit(&json!({"epoch": epoch, "loss": loss}));
    })?;
    create_parent(&a.out)?;
    ckpt.save(&a.out)?;
    emit(&json!({
        "checkpoint": a.out,
        "final_loss": ckpt.meta.final_loss,
        "num_params": ckpt.params.len(),
    }));
    Ok(())
}

// ---------------------------------------------------------------- eval

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint file, or `oracle` for the analytic consensus probability
    /// of a synthetic dataset.
    #[arg(long)]
    model: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[arg(long, default_value_t = 15)]
    bins: usize,
    #[arg(long, default_value_t = 10)]
    bootstrap: usize,
    #[arg(long, default_value_t = 0.6)]
    frac: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Decision threshold.
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    #[arg(long, value_enum, default_value_t = EceModeArg::Frequency)]
    ece_mode: EceModeArg,
    /// Full report JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Reliability diagram CSV.
    #[arg(long)]
    reliability: Option<PathBuf>,
}

/// Report file contents.
#[derive(Debug, Serialize, Deserialize)]
pub struct EvalRecord {
    pub model: String,
    pub split: Split,
    pub metrics: MetricReport,
}

pub const ORACLE: &str = "oracle";

fn predictions(model: &str, ds: &Dataset, split: Split) -> Result<Vec<ForegroundProbMap>, Failure> {
    if model == ORACLE {
        let cfg = ds
            .manifest
            .synth
            .ok_or_else(|| Failure::Data("the oracle model needs a synthetic dataset".into()))?;
        return Ok(ds
            .load_latents(split)?
            .into_iter()
            .map(|grid| true_consensus_probability(&LatentField { grid }, &cfg))
            .collect());
    }
    let ckpt = Checkpoint::load(model)?;
    ds.split(split)
        .iter()
        .map(|s| predict(&ckpt, &s.image).map_err(Failure::from))
        .collect()
}

fn evaluate(
    model: &str,
    ds: &Dataset,
    split: Split,
    cfg: &EvalConfig,
) -> Result<MetricReport, Failure> {
    let samples = ds.split(split);
    if samples.is_empty() {
        return Err(Failure::Data(format!("split {split} is empty")));
    }
    let preds = predictions(model, ds, split)?;
    let stacks: Vec<_> = samples.iter().map(|s| s.annotations.clone()).collect();
    Ok(bootstrap_eval(&preds, &stacks, cfg)?)
}

pub fn eval(a: EvalArgs) -> Result<(), Failure> {
    let cfg = EvalConfig {
        num_bins: a.bins,
        tau: a.tau,
        bootstrap_n: a.bootstrap,
        bootstrap_frac: a.frac,
        seed: a.seed,
        ece_mode: a.ece_mode.into(),
    };
    cfg.validate()?;
    let ds = load(&a.data)?;
    let split: Split = a.split.into();
    let mut metrics = evaluate(&a.model, &ds, split, &cfg)?;

    if let Some(path) = &a.reliability {
        create_parent(path)?;
        reliability_csv(metrics.bins.as_ref().expect("set by bootstrap_eval"), path)?;
        metrics.bins_csv_path = Some(file_name(path));
    }
    let model = if a.model == ORACLE {
        ORACLE.to_string()
    } else {
        file_name(Path::new(&a.model))
    };
    let auc_undefined = metrics.auc.point.is_none();
    emit(&json!({
        "model": model,
        "split": split,
        "mr_ece": metrics.mr_ece.point,
        "mr_ece_boot_mean": metrics.mr_ece.boot_mean,
        "mr_ece_boot_std": metrics.mr_ece.boot_std,
        "auc": metrics.auc.point,
        "auc_boot_mean": metrics.auc.boot_mean,
        "auc_boot_std": metrics.auc.boot_std,
    }));
    if let Some(path) = &a.report {
        write_json(path, &EvalRecord { model, split, metrics })?;
    }
    if auc_undefined {
        return Err(Failure::Undefined(format!(
            "split {split} has a single class under the majority reference; AUC is undefined"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------- sweep

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    Alpha,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum SweepMetric {
    /// Lower is better.
    #[value(alias = "mr-ece")]
    MrEce,
    /// Higher is better.
    Auc,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = SweepParam::Alpha)]
    param: SweepParam,
    /// Inclusive grid `start:stop:step`, or a single value.
    #[arg(long, value_parser = parse_grid)]
    values: Grid,
    #[arg(long, value_enum, default_value_t = SweepMetric::MrEce)]
    metric: SweepMetric,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    #[arg(long, default_value_t = 15)]
    bins: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid(pub Vec<f64>);

/// Parses `start:stop:step` (both ends inclusive) or a single number.
pub fn parse_grid(s: &str) -> Result<Grid, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let num = |p: &str| -> Result<f64, String> {
        let v: f64 = p.trim().parse().map_err(|_| format!("not a number: {p:?}"))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(format!("not finite: {p:?}"))
        }
    };
    match parts.as_slice() {
        [single] => Ok(Grid(vec![num(single)?])),
        [start, stop, step] => {
            let (start, stop, step) = (num(start)?, num(stop)?, num(step)?);
            if step <= 0.0 {
                return Err("step must be positive".into());
            }
            if stop < start {
                return Err("stop must not be below start".into());
            }
            let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
            // Round away accumulated binary error, e.g. 0.6000000000000001.
            Ok(Grid(
                (0..count)
                    .map(|i| ((start + i as f64 * step) * 1e10).round() / 1e10)
                    .collect(),
            ))
        }
        _ => Err(format!("expected start:stop:step or a single value, got {s:?}")),
    }
}

pub fn sweep(a: SweepArgs) -> Result<(), Failure> {
    let ds = load(&a.data)?;
    let eval_cfg = EvalConfig {
        num_bins: a.bins,
        seed: a.seed,
        ..EvalConfig::default()
    };
    eval_cfg.validate()?;
    let val = ds.split(Split::Val);
    if val.is_empty() {
        return Err(Failure::Data("validation split is empty".into()));
    }
    let stacks: Vec<_> = val.iter().map(|s| s.annotations.clone()).collect();

    let mut rows = Vec::new();
    for &value in &a.values.0 {
        let cfg = match a.param {
            SweepParam::Alpha => train_config(Loss::Rps, value, a.lr, a.epochs, a.batch_size, 1.0, a.seed),
        };
        cfg.validate()?;
        let ckpt = train_with(ds.split(Split::Train), &cfg, |_, _| {})?;
        let preds = val
            .iter()
            .map(|s| predict(&ckpt, &s.image))
            .collect::<mrcal::Result<Vec<_>>>()?;
        let report = bootstrap_eval(&preds, &stacks, &eval_cfg)?;
        let score = match a.metric {
            SweepMetric::MrEce => report.mr_ece.point,
            SweepMetric::Auc => report.auc.point,
        };
        emit(&json!({"param": "alpha", "value": value, "metric": a.metric, "score": score}));
        rows.push((value, score));
    }

    let defined = rows.iter().filter_map(|&(v, s)| s.map(|s| (v, s)));
    let best = match a.metric {
        SweepMetric::MrEce => defined.min_by(|x, y| x.1.total_cmp(&y.1)),
        SweepMetric::Auc => defined.max_by(|x, y| x.1.total_cmp(&y.1)),
    };
    let Some((value, score)) = best else {
        return Err(Failure::Undefined("the metric is undefined for every run".into()));
    };
    let key = match a.metric {
        SweepMetric::MrEce => "argmin",
        SweepMetric::Auc => "argmax",
    };
    emit(&json!({key: value, "metric": a.metric, "score": score, "runs": rows.len()}));
    Ok(())
}

// ---------------------------------------------------------------- report

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Report files written by `eval --report`.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Also write the summary to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn report(a: ReportArgs) -> Result<(), Failure> {
    let mut rows = Vec::new();
    for path in &a.inputs {
        let text = fs::read_to_string(path)?;
        let rec: EvalRecord =
            serde_json::from_str(&text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
        rows.push(json!({
            "report": file_name(path),
            "model": rec.model,
            "split": rec.split,
            "mr_ece_mean": rec.metrics.mr_ece.boot_mean,
            "mr_ece_std": rec.metrics.mr_ece.boot_std,
            "auc_mean": rec.metrics.auc.boot_mean,
            "auc_std": rec.metrics.auc.boot_std,
        }));
    }
    let best = rows
        .iter()
        .filter_map(|r| Some((r["report"].clone(), r["mr_ece_mean"].as_f64()?)))
        .min_by(|x, y| x.1.total_cmp(&y.1))
        .map(|(name, _)| name);
    let summary = json!({"rows": rows, "lowest_mr_ece": best});
    emit(&summary);
    if let Some(out) = &a.out {
        write_json(out, &summary)?;
    }
    Ok(())
}
