//! `fstmamba` subcommands.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use fstmamba_core::attribution::cohort_attribution;
use fstmamba_core::dfnc::{sliding_window_dfnc, ComponentTimeSeries, SyntheticCohortSpec};
use fstmamba_core::metrics::evaluate_indices;
use fstmamba_core::model::{FstMamba, ModelConfig};
use fstmamba_core::topology::ComponentAtlas;
use fstmamba_core::train::{train_with, Checkpoint, Dataset};
use fstmamba_core::Tensor;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checks::{self, Faults};
use crate::config::{env_seed, RunConfig};
use crate::container::{write_atomic, Container, Header, Kind};
use crate::error::{Error, Result};
use crate::manifest::RunManifest;
use crate::{atlas, bench, checkpoint, heatmap};

#[derive(Debug, Parser)]
#[command(name = "fstmamba", version, about = "Spatio-temporal state-space models over dynamic connectivity")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort from a TOML spec.
    Gen(GenArgs),
    /// Sliding-window correlation of a time-series container.
    Dfnc(DfncArgs),
    /// Write an untrained checkpoint.
    Init(InitArgs),
    /// Train a model on a dFNC container.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Integrated-gradients attribution maps.
    Attribute(AttributeArgs),
    /// Run the invariant suite.
    Check(CheckArgs),
    /// Time the recurrent scan against sequence length.
    BenchScan(BenchArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Cohort spec (TOML).
    #[arg(long)]
    pub spec: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the spec's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct DfncArgs {
    /// Time-series container.
    #[arg(long)]
    pub input: PathBuf,
    /// Output dFNC container; the manifest goes next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub window: usize,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    /// Label container replacing labels carried by the input.
    #[arg(long)]
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Run config (TOML); defaults apply when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// dFNC container.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Ablation flag, repeatable (no_cva, no_cvr, no_comp_scan, no_merge,
    /// no_pos_enc, abs_pos_enc, no_unrope, no_conn_branch, no_temp_branch).
    #[arg(long = "ablate", value_name = "FLAG")]
    pub ablate: Vec<String>,
    #[arg(long, env = crate::config::SEED_ENV)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Overrides `train.epochs`.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Split file written by `train`; evaluates its held-out samples.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// Exit 1 when the AUC is below this (or undefined).
    #[arg(long)]
    pub min_auc: Option<f64>,
}

#[derive(Debug, Args)]
pub struct AttributeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Riemann steps per sample.
    #[arg(long, default_value_t = 64)]
    pub steps: usize,
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Attribute at most this many samples.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Heatmap pixels per matrix cell.
    #[arg(long, default_value_t = 8)]
    pub cell: usize,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// Corrupt an operation to confirm the suite catches it (cva-stride).
    #[arg(long = "inject-fault", value_name = "FAULT")]
    pub inject_fault: Vec<String>,
    /// Only run checks whose name contains this.
    #[arg(long)]
    pub filter: Option<String>,
    /// Also verify the dFNC invariants of this container.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Directory for report.json and the manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Sequence length, repeatable; defaults to 256 through 16384.
    #[arg(long = "len")]
    pub len: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    pub state: usize,
    #[arg(long, default_value_t = 4)]
    pub channels: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for report.json and the manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Train/held-out indices of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => gen(&a),
        Command::Dfnc(a) => dfnc(&a),
        Command::Init(a) => init(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Attribute(a) => attribute(&a),
        Command::Check(a) => check(&a),
        Command::BenchScan(a) => bench_scan(&a),
    }
}

fn gen(a: &GenArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.spec).map_err(Error::io(&a.spec))?;
    let mut table: toml::Table =
        toml::from_str(&text).map_err(|source| Error::Toml { path: a.spec.clone(), source })?;
    let seed = match a.seed {
        Some(s) => s,
        None => match table.get("seed").and_then(toml::Value::as_integer) {
            Some(s) => u64::try_from(s).map_err(|_| Error::Config(format!("seed {s} is negative")))?,
            None => env_seed()?.unwrap_or(0),
        },
    };
    table.insert("seed".into(), toml::Value::Integer(seed as i64));
    let spec: SyntheticCohortSpec = table
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(format!("{}: {}", a.spec.display(), e.message())))?;
    // generation validates first; nothing is written on failure
    let cohort = fstmamba_core::dfnc::generate_synthetic_cohort(&spec)?;

    let labels: Vec<f64> = cohort.labels.iter().map(|&y| y as f64).collect();
    let provenance = format!("synthetic cohort, seed {seed}");
    let mut h = Header::new(Kind::TimeSeries, &[]);
    h.atlas = cohort.atlas.name.clone();
    h.labels = labels.clone();
    h.provenance = provenance.clone();
    h.tr_seconds = Some(cohort.series.tr_seconds);
    h.meta = json!({ "spec": spec });
    let series = Container::from_tensor(h, &cohort.series.data);
    let mut h = Header::new(Kind::Labels, &[]);
    h.atlas = cohort.atlas.name.clone();
    h.provenance = provenance;
    let label_c = Container::from_tensor(h, &Tensor::from_vec(&[labels.len()], labels)?);

    let ts_path = a.out.join("timeseries.fst");
    let labels_path = a.out.join("labels.fst");
    let mut m = RunManifest::start("gen", json!({ "spec": spec }), Some(seed));
    m.input(&a.spec);
    series.write(&ts_path)?;
    label_c.write(&labels_path)?;
    m.artifact("timeseries", &ts_path, Some(&series.header.dims));
    m.artifact("labels", &labels_path, Some(&label_c.header.dims));
    m.finish(&a.out.join("manifest.json"))?;
    println!(
        "wrote {} subjects x {} timepoints x {} components to {}",
        series.header.dims[0],
        series.header.dims[1],
        series.header.dims[2],
        a.out.display()
    );
    Ok(())
}

fn dfnc(a: &DfncArgs) -> Result<()> {
    let input = Container::read_kind(&a.input, Kind::TimeSeries)?;
    let ts = ComponentTimeSeries::new(input.tensor()?, input.header.tr_seconds.unwrap_or(1.0))?;
    let (s, t_total, _) = ts.dims();
    let labels = match &a.labels {
        Some(p) => Container::read_kind(p, Kind::Labels)?.values,
        None => input.header.labels.clone(),
    };
    if !labels.is_empty() && labels.len() != s {
        return Err(Error::Config(format!("{} labels for {s} subjects", labels.len())));
    }
    if a.window > t_total {
        return Err(Error::Config(format!("window {} exceeds the {t_total} timepoints", a.window)));
    }
    let out = sliding_window_dfnc(&ts, a.window, a.stride)?;
    let mut h = Header::new(Kind::Dfnc, &[]);
    h.atlas = input.header.atlas.clone();
    h.labels = labels;
    h.tr_seconds = input.header.tr_seconds;
    h.provenance = format!("dfnc of {} (window {}, stride {})", a.input.display(), a.window, a.stride);
    h.meta = json!({ "window": a.window, "stride": a.stride });
    let c = Container::from_tensor(h, &out);
    c.write(&a.out)?;

    let mut m = RunManifest::start("dfnc", json!({ "window": a.window, "stride": a.stride }), None);
    m.input(&a.input);
    if let Some(p) = &a.labels {
        m.input(p);
    }
    m.artifact("dfnc", &a.out, Some(&c.header.dims));
    m.finish(&manifest_beside(&a.out))?;
    println!("wrote {:?} windows to {}", c.header.dims, a.out.display());
    Ok(())
}

fn manifest_beside(path: &Path) -> PathBuf {
    path.with_extension("manifest.json")
}

/// Config, dataset and model config shared by `init` and `train`.
struct Prepared {
    cfg: RunConfig,
    seed: u64,
    data: Dataset,
    model_cfg: ModelConfig,
}

fn prepare(a: &ModelArgs) -> Result<Prepared> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for flag in &a.ablate {
        cfg.model.ablations.enable(flag)?;
    }
    let seed = cfg.resolve_seed(a.seed)?;
    let input = Container::read_kind(&a.data, Kind::Dfnc)?;
    let atlas = data_atlas(cfg.model.atlas.as_deref(), &input)?;
    let model_cfg = cfg.model_config(atlas)?;
    let data = dataset(&input, &model_cfg)?;
    Ok(Prepared { cfg, seed, data, model_cfg })
}

fn data_atlas(reference: Option<&str>, input: &Container) -> Result<ComponentAtlas> {
    let reference = match reference {
        Some(r) => r,
        None if !input.header.atlas.is_empty() => &input.header.atlas,
        None => return Err(Error::Config("data carries no atlas; set model.atlas in the config".into())),
    };
    let atlas = atlas::resolve(reference)?;
    let n = input.header.dims.get(1).copied().unwrap_or(0);
    if atlas.n_components != n {
        return Err(Error::Config(format!("atlas '{}' has {} components, data has {n}", atlas.name, atlas.n_components)));
    }
    Ok(atlas)
}

fn dataset(input: &Container, model_cfg: &ModelConfig) -> Result<Dataset> {
    if input.header.labels.is_empty() {
        return Err(Error::Config("data carries no labels".into()));
    }
    Ok(Dataset::from_dfnc(&input.tensor()?, &model_cfg.atlas, input.header.labels.clone(), model_cfg.task)?)
}

fn run_config_echo(p: &Prepared, a: &ModelArgs) -> serde_json::Value {
    json!({ "run": p.cfg, "ablate": a.ablate, "model": p.model_cfg })
}

fn init(a: &InitArgs) -> Result<()> {
    let p = prepare(&a.model)?;
    let model = FstMamba::new(p.model_cfg.clone())?;
    let path = a.model.out.join("checkpoint.fst");
    checkpoint::save(&path, &Checkpoint::from_model(&model, 0))?;
    let mut m = RunManifest::start("init", run_config_echo(&p, &a.model), Some(p.seed));
    m.input(&a.model.data);
    m.artifact("checkpoint", &path, None);
    m.finish(&a.model.out.join("manifest.json"))?;
    println!("wrote untrained checkpoint to {}", path.display());
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut p = prepare(&a.model)?;
    if let Some(e) = a.epochs {
        p.cfg.train.epochs = e;
    }
    let mut lines = String::new();
    let mut on_epoch = |r: &fstmamba_core::train::EpochRecord| {
        let line = serde_json::to_string(r).unwrap_or_default();
        lines.push_str(&line);
        lines.push('\n');
        let val = r
            .val
            .as_ref()
            .map(|v| format!(" val loss {:.4} acc {} auc {}", v.loss, fmt_opt(v.acc), fmt_opt(v.auc)))
            .unwrap_or_default();
        eprintln!("epoch {} loss {:.4} lr {:.2e}{val}", r.epoch, r.train_loss, r.lr);
    };
    let outcome = train_with(&p.model_cfg, &p.cfg.train, &p.data, &mut on_epoch)?;

    let out = &a.model.out;
    let ck_path = out.join("checkpoint.fst");
    let metrics_path = out.join("metrics.jsonl");
    let split_path = out.join("split.json");
    checkpoint::save(&ck_path, &outcome.checkpoint())?;
    write_atomic(&metrics_path, lines.as_bytes())?;
    let split = Split { train: outcome.train_indices.clone(), val: outcome.val_indices.clone() };
    write_atomic(&split_path, serde_json::to_string(&split)?.as_bytes())?;

    let mut m = RunManifest::start("train", run_config_echo(&p, &a.model), Some(p.seed));
    m.input(&a.model.data);
    if let Some(c) = &a.model.config {
        m.input(c);
    }
    m.artifact("checkpoint", &ck_path, None);
    m.artifact("metrics", &metrics_path, None);
    m.artifact("split", &split_path, None);
    m.finish(&out.join("manifest.json"))?;
    if let Some(step) = outcome.diverged_at {
        return Err(Error::Failed(format!(
            "training diverged at step {step}; kept the last finite parameters in {}",
            ck_path.display()
        )));
    }
    println!("trained {} steps, checkpoint {}", outcome.steps, ck_path.display());
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}

/// Checkpoint plus dataset and evaluation indices.
fn load_for_inference(ck: &Path, data: &Path, split: Option<&Path>) -> Result<(FstMamba, Dataset, Vec<usize>)> {
    let model = checkpoint::load_model(ck)?;
    let input = Container::read_kind(data, Kind::Dfnc)?;
    let n = input.header.dims.get(1).copied().unwrap_or(0);
    if model.cfg.atlas.n_components != n {
        return Err(Error::Config(format!(
            "checkpoint expects {} components, data has {n}",
            model.cfg.atlas.n_components
        )));
    }
    let data = dataset(&input, &model.cfg)?;
    let idx = match split {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(Error::io(p))?;
            let s: Split = serde_json::from_str(&text)?;
            if let Some(&bad) = s.val.iter().find(|&&i| i >= data.len()) {
                return Err(Error::Config(format!("split index {bad} beyond {} samples", data.len())));
            }
            s.val
        }
        None => (0..data.len()).collect(),
    };
    Ok((model, data, idx))
}

fn eval(a: &EvalArgs) -> Result<()> {
    let (model, data, idx) = load_for_inference(&a.checkpoint, &a.data, a.split.as_deref())?;
    let report = evaluate_indices(&model, &data, &idx, a.batch_size)?;
    let path = a.out.join("metrics.json");
    write_atomic(&path, serde_json::to_string_pretty(&report)?.as_bytes())?;
    let mut m = RunManifest::start(
        "eval",
        json!({ "batch_size": a.batch_size, "min_auc": a.min_auc, "split": a.split }),
        Some(model.cfg.seed),
    );
    m.input(&a.checkpoint);
    m.input(&a.data);
    m.artifact("metrics", &path, None);
    m.finish(&a.out.join("manifest.json"))?;
    println!("{}", serde_json::to_string(&report)?);
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    if let Some(min) = a.min_auc {
        match report.auc {
            Some(auc) if auc >= min => {}
            other => return Err(Error::Failed(format!("AUC {} below the required {min}", fmt_opt(other)))),
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct SampleAttribution {
    index: usize,
    target: usize,
    f_input: f64,
    f_baseline: f64,
    completeness_residual: f64,
}

fn attribute(a: &AttributeArgs) -> Result<()> {
    let (model, data, mut idx) = load_for_inference(&a.checkpoint, &a.data, a.split.as_deref())?;
    if let Some(k) = a.limit {
        idx.truncate(k);
    }
    let cohort = cohort_attribution(&model, &data, &idx, a.steps)?;
    let n = model.cfg.atlas.n_components;
    let t = data.x.shape()[3];
    let atlas_name = model.cfg.atlas.name.clone();

    let mut values = Vec::with_capacity(cohort.maps.len() * n * n * t);
    for map in &cohort.maps {
        values.extend_from_slice(map.values.data());
    }
    let mut h = Header::new(Kind::Attribution, &[]);
    h.atlas = atlas_name.clone();
    h.labels = cohort.used.iter().map(|&i| data.targets[i]).collect();
    h.provenance = format!("integrated gradients, {} steps, zero baseline", a.steps);
    h.meta = json!({ "samples": cohort.used });
    let per_sample = Container::from_tensor(h, &Tensor::from_vec(&[cohort.maps.len(), n, n, t], values)?);
    let mut h = Header::new(Kind::Attribution, &[]);
    h.atlas = atlas_name;
    h.provenance = "cohort mean of temporal-mean attributions over correctly classified samples".into();
    h.meta = json!({ "samples": cohort.used });
    let mean = Container::from_tensor(h, &cohort.mean.clone().reshape(&[1, n, n, 1])?);

    let samples: Vec<SampleAttribution> = cohort
        .used
        .iter()
        .zip(&cohort.maps)
        .map(|(&index, m)| SampleAttribution {
            index,
            target: m.target,
            f_input: m.f_input,
            f_baseline: m.f_baseline,
            completeness_residual: m.completeness_residual,
        })
        .collect();
    let residuals: Vec<f64> = samples.iter().map(|s| s.completeness_residual).collect();
    let max_residual = residuals.iter().copied().fold(None, |m: Option<f64>, r| Some(m.map_or(r, |m| m.max(r))));
    let mean_residual = (!residuals.is_empty()).then(|| residuals.iter().sum::<f64>() / residuals.len() as f64);
    let report = json!({
        "steps": a.steps,
        "candidates": idx.len(),
        "attributed": samples.len(),
        "max_completeness_residual": max_residual,
        "mean_completeness_residual": mean_residual,
        "samples": samples,
    });

    let out = &a.out;
    let per_path = out.join("attributions.fst");
    let mean_path = out.join("cohort_mean.fst");
    let png_path = out.join("cohort_mean.png");
    let report_path = out.join("report.json");
    per_sample.write(&per_path)?;
    mean.write(&mean_path)?;
    heatmap::write_png(&png_path, &cohort.mean, a.cell)?;
    write_atomic(&report_path, serde_json::to_string_pretty(&report)?.as_bytes())?;

    let mut m = RunManifest::start(
        "attribute",
        json!({ "steps": a.steps, "split": a.split, "limit": a.limit, "cell": a.cell }),
        Some(model.cfg.seed),
    );
    m.input(&a.checkpoint);
    m.input(&a.data);
    m.artifact("attributions", &per_path, Some(&per_sample.header.dims));
    m.artifact("cohort_mean", &mean_path, Some(&mean.header.dims));
    m.artifact("heatmap", &png_path, None);
    m.artifact("report", &report_path, None);
    m.finish(&out.join("manifest.json"))?;
    if samples.is_empty() {
        eprintln!("warning: no correctly classified samples to attribute");
    }
    println!(
        "attributed {} of {} samples; completeness residual max {} mean {}",
        samples.len(),
        idx.len(),
        fmt_opt(max_residual),
        fmt_opt(mean_residual)
    );
    Ok(())
}

fn check(a: &CheckArgs) -> Result<()> {
    let mut faults = Faults::default();
    for f in &a.inject_fault {
        faults.enable(f).ok_or_else(|| {
            Error::Config(format!("unknown fault '{f}' (known: {})", Faults::NAMES.join(", ")))
        })?;
    }
    let mut results = checks::run(&faults, a.filter.as_deref());
    if let Some(p) = &a.data {
        let t0 = std::time::Instant::now();
        let c = Container::read_kind(p, Kind::Dfnc)?;
        let violation = checks::dfnc_invariants(&c.tensor()?);
        results.push(checks::CheckResult {
            name: "dfnc-data-invariants".into(),
            passed: violation.is_none(),
            measured: f64::from(u8::from(violation.is_some())),
            tolerance: "symmetric, unit diagonal, in [-1, 1]".into(),
            detail: violation.unwrap_or_else(|| format!("{}", p.display())),
            seconds: t0.elapsed().as_secs_f64(),
        });
    }
    if results.is_empty() {
        return Err(Error::Config(format!(
            "no check matches '{}' (known: {})",
            a.filter.as_deref().unwrap_or(""),
            checks::names().join(", ")
        )));
    }
    let mut text = String::new();
    for r in &results {
        let _ = writeln!(
            text,
            "{} {:<28} measured {:<10.3e} tolerance {:<26} {:>7.2}s  {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.measured,
            r.tolerance,
            r.seconds,
            r.detail
        );
    }
    print!("{text}");
    if let Some(out) = &a.out {
        let path = out.join("report.json");
        write_atomic(&path, serde_json::to_string_pretty(&results)?.as_bytes())?;
        let mut m = RunManifest::start("check", json!({ "inject_fault": a.inject_fault, "filter": a.filter }), None);
        if let Some(p) = &a.data {
            m.input(p);
        }
        m.artifact("report", &path, None);
        m.finish(&out.join("manifest.json"))?;
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} checks passed", results.len());
        Ok(())
    } else {
        Err(Error::Failed(format!("failed checks: {}", failed.join(", "))))
    }
}

fn bench_scan(a: &BenchArgs) -> Result<()> {
    let lengths = if a.len.is_empty() { bench::DEFAULT_LENGTHS.to_vec() } else { a.len.clone() };
    if lengths.contains(&0) || a.state == 0 || a.channels == 0 {
        return Err(Error::Config("lengths, state and channels must be positive".into()));
    }
    let report = bench::bench_scan(&lengths, a.state, a.channels, a.seed)?;
    println!("{:>8} {:>14} {:>8} {:>14}", "L", "seconds", "repeats", "oracle rel");
    for r in &report.rows {
        let oracle = r.oracle_rel_err.map_or_else(|| "skipped".into(), |e| format!("{e:.2e}"));
        println!("{:>8} {:>14.6e} {:>8} {:>14}", r.len, r.seconds, r.repeats, oracle);
    }
    match report.slope {
        Some(s) => println!("log-log slope {s:.3}"),
        None => println!("log-log slope n/a (needs two lengths)"),
    }
    if let Some(out) = &a.out {
        let path = out.join("report.json");
        write_atomic(&path, serde_json::to_string_pretty(&report)?.as_bytes())?;
        let mut m = RunManifest::start(
            "bench-scan",
            json!({ "len": lengths, "state": a.state, "channels": a.channels }),
            Some(a.seed),
        );
        m.artifact("report", &path, None);
        m.finish(&out.join("manifest.json"))?;
    }
    if let Some(bad) = report.rows.iter().find(|r| r.oracle_rel_err.is_some_and(|e| !(e < 1e-5))) {
        return Err(Error::Failed(format!("scan disagrees with the convolution oracle at L = {}", bad.len)));
    }
    Ok(())
}
