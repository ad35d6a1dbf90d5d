use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use weatherfusion::checkpoint::{Checkpoint, PHYDNET, SAT2RAD};
use weatherfusion::container::Container;
use weatherfusion::data::{read_archive, write_archive, EventArchive, FRAME_MINUTES};
use weatherfusion::evaluate::{eval_windows, sample};
use weatherfusion::metrics::{LeadTimeAccumulator, Mask, MetricsReport};
use weatherfusion::model::{binarize, forward, persistence_probabilities, ModelConfig, WeatherFusionNet};
use weatherfusion::params::Mode;
use weatherfusion::synthetic::{generate as synth, SyntheticConfig};
use weatherfusion::train::{model_from_checkpoint, read_log, save_outcome, train_fusion, train_phydnet, train_sat2rad, Stage, TrainOutcome};
use wfn_tensor::Tensor;

use crate::config::RunConfig;
use crate::{plot, usage, Common};

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(bytes)))
}

fn check_device(common: &Common) -> Result<()> {
    if common.device != "cpu" {
        return Err(usage(format!("device `{}` is not available; only `cpu` is supported", common.device)));
    }
    Ok(())
}

fn hashes(paths: &[&Path]) -> Result<BTreeMap<String, String>> {
    paths.iter().map(|p| Ok((p.display().to_string(), sha256_file(p)?))).collect()
}

fn write_manifest(path: &Path, command: &str, seed: Option<u64>, config: Value, inputs: &[&Path], outputs: &[&Path]) -> Result<()> {
    let manifest = json!({
        "command": command,
        "args": std::env::args().skip(1).collect::<Vec<_>>(),
        "version": env!("CARGO_PKG_VERSION"),
        "device": "cpu",
        "seed": seed,
        "config": config,
        "inputs": hashes(inputs)?,
        "outputs": hashes(outputs)?,
    });
    std::fs::write(path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

fn read_archives(paths: &[PathBuf]) -> Result<Vec<EventArchive>> {
    paths
        .iter()
        .map(|p| {
            if !p.exists() {
                return Err(usage(format!("archive {} does not exist", p.display())));
            }
            read_archive(p).with_context(|| format!("reading archive {}", p.display()))
        })
        .collect()
}

fn load_checkpoint(path: &Path, flag: &str) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(usage(format!("{flag} {} does not exist", path.display())));
    }
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum GeometryPreset {
    Full,
    Reduced,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub frames: usize,
    #[arg(long, default_value_t = 60)]
    pub cells: usize,
    #[arg(long, value_enum, default_value = "full")]
    pub geometry: GeometryPreset,
    /// JSON file whose `synthetic` section overrides generator settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

pub fn generate(a: &GenerateArgs) -> Result<()> {
    check_device(&a.common)?;
    let geometry = match a.geometry {
        GeometryPreset::Full => ModelConfig::default().geometry,
        GeometryPreset::Reduced => ModelConfig::reduced().geometry,
    };
    let base = SyntheticConfig {
        seed: a.seed,
        num_frames: a.frames,
        n_cells: a.cells,
        geometry,
        ..Default::default()
    };
    let cfg = RunConfig::load(a.config.as_deref())?.synthetic(base)?;
    let archive = synth(&cfg)?;
    let out = &a.common.out;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_archive(&archive, out)?;
    let radar = archive.radar.data();
    let wet = radar.iter().filter(|&&v| v as f64 >= weatherfusion::data::RAIN_THRESHOLD_MM_H).count() as f64 / radar.len() as f64;
    println!(
        "frames {}  satellite {:?}  radar {:?}  wet fraction {:.4}",
        archive.num_frames(),
        archive.satellite.shape(),
        archive.radar.shape(),
        wet
    );
    let mut manifest = out.clone().into_os_string();
    manifest.push(".manifest.json");
    let inputs: Vec<&Path> = a.config.iter().map(PathBuf::as_path).collect();
    write_manifest(Path::new(&manifest), "generate", Some(cfg.seed), json!({ "synthetic": cfg, "wet_fraction": wet }), &inputs, &[out])
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_parser = parse_stage)]
    pub stage: Stage,
    /// One or more archives; samples are split into train/validation in order.
    #[arg(long, num_args = 1.., required = true)]
    pub data: Vec<PathBuf>,
    /// JSON file with optional `model` and `train` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Absolute step count to stop at.
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub sat2rad_ckpt: Option<PathBuf>,
    #[arg(long)]
    pub phydnet_ckpt: Option<PathBuf>,
    /// Checkpoint of the same stage to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

fn parse_stage(s: &str) -> std::result::Result<Stage, String> {
    s.parse().map_err(|e: weatherfusion::Error| e.to_string())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    check_device(&a.common)?;
    let run = RunConfig::load(a.config.as_deref())?;
    let mut tcfg = run.train(a.stage)?;
    if let Some(seed) = a.seed {
        tcfg.seed = seed;
    }
    if let Some(steps) = a.steps {
        tcfg.max_steps = steps;
    }
    let out = &a.common.out;
    let ck_path = out.join("checkpoint.wfn");
    let resume = match &a.resume {
        Some(p) => {
            if p.exists() && ck_path.exists() && std::fs::canonicalize(p)? == std::fs::canonicalize(&ck_path)? {
                return Err(usage("--resume must not point at the checkpoint this run writes; pick a new --out"));
            }
            Some(load_checkpoint(p, "--resume")?)
        }
        None => None,
    };
    let model = match (&resume, run.has_model()) {
        (Some(ck), false) => serde_json::from_value(ck.config.get("model").cloned().unwrap_or(Value::Null)).map_err(|e| usage(format!("resume checkpoint lacks a usable model config: {e}")))?,
        _ => run.model()?,
    };
    let archives = read_archives(&a.data)?;

    let outcome: TrainOutcome = match a.stage {
        Stage::Sat2rad => train_sat2rad(&tcfg, &model, &archives, resume.as_ref())?,
        Stage::Phydnet => train_phydnet(&tcfg, &model, &archives, resume.as_ref())?,
        Stage::Fusion => {
            let upstream = |flag: &str, path: &Option<PathBuf>, needed: bool, module: &str, stage: &str| -> Result<Option<_>> {
                match path {
                    Some(p) => Ok(Some(load_checkpoint(p, flag)?.module(module)?.clone())),
                    None if needed => Err(usage(format!(
                        "fusion training needs {flag}: train it first with `wfn train --stage {stage}` and pass its checkpoint.wfn"
                    ))),
                    None => Ok(None),
                }
            };
            let s2r = upstream("--sat2rad-ckpt", &a.sat2rad_ckpt, model.sources.sat2rad, SAT2RAD, "sat2rad")?;
            let phy = upstream("--phydnet-ckpt", &a.phydnet_ckpt, model.sources.phydnet, PHYDNET, "phydnet")?;
            train_fusion(&tcfg, &model, &archives, s2r.as_ref(), phy.as_ref(), resume.as_ref())?
        }
    };

    std::fs::create_dir_all(out)?;
    let log_path = out.join("log.csv");
    if log_path.exists() {
        std::fs::remove_file(&log_path)?;
    }
    let mut outcome = outcome;
    if let Some(prev) = a.resume.as_ref().and_then(|p| p.parent()).map(|d| d.join("log.csv")).filter(|p| p.exists()) {
        let mut rows = read_log(&prev)?;
        let start = resume.as_ref().map_or(0, |ck| ck.step);
        rows.retain(|r| r.step <= start);
        rows.append(&mut outcome.log);
        outcome.log = rows;
    }
    save_outcome(&outcome, out)?;
    if let Some(last) = outcome.log.iter().rev().find(|r| r.split == "train") {
        println!("stage {:?}  step {}  train loss {:.5}", a.stage, last.step, last.loss);
    }
    if let Some(val) = outcome.log.iter().rev().find(|r| r.split == "val") {
        println!("validation loss {:.5}  iou {:?}", val.loss, val.iou);
    }

    let mut inputs: Vec<&Path> = a.data.iter().map(PathBuf::as_path).collect();
    inputs.extend([&a.config, &a.sat2rad_ckpt, &a.phydnet_ckpt, &a.resume].into_iter().flatten().map(PathBuf::as_path));
    let outputs = [ck_path.as_path(), &out.join("config.json"), &log_path];
    write_manifest(&out.join("manifest.json"), "train", Some(tcfg.seed), json!({ "model": model, "train": tcfg }), &inputs, &outputs)
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    /// Composite checkpoint written by `wfn train --stage fusion`.
    #[arg(long)]
    pub model: PathBuf,
    /// Decision threshold on probabilities.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Rain rate (mm/h) at or above which a radar pixel counts as wet.
    #[arg(long, default_value_t = weatherfusion::data::RAIN_THRESHOLD_MM_H)]
    pub rain_threshold: f64,
}

fn load_model(m: &ModelArgs) -> Result<WeatherFusionNet<f32>> {
    if !(0.0..=1.0).contains(&m.threshold) {
        return Err(usage("--threshold must lie in [0, 1]"));
    }
    Ok(model_from_checkpoint(&load_checkpoint(&m.model, "--model")?)?)
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub data: PathBuf,
    /// Index of the input/target window within the archive.
    #[arg(long, default_value_t = 0)]
    pub sample: usize,
}

fn lead_minutes(leads: usize) -> Vec<u64> {
    (1..=leads as u64).map(|l| l * FRAME_MINUTES as u64).collect()
}

pub fn predict(a: &PredictArgs) -> Result<()> {
    check_device(&a.common)?;
    let model = load_model(&a.model)?;
    let archives = read_archives(std::slice::from_ref(&a.data))?;
    let windows = eval_windows(&model, &archives, 1)?;
    let Some(&(_, w)) = windows.get(a.sample) else {
        return Err(usage(format!("--sample {} out of range: the archive holds {} windows", a.sample, windows.len())));
    };
    let (x, target) = sample(&archives[0], w, a.model.rain_threshold)?;
    let probs = forward(&model, &x, Mode::Eval)?;
    let (leads, r) = (model.config.output_len(), model.config.geometry.radar_size());
    let probs = probs.reshape([leads, r, r])?;
    let binary = binarize(&probs, a.model.threshold).to_tensor::<f32>();
    let target = target.to_tensor::<f32>();

    let out = &a.common.out;
    std::fs::create_dir_all(out)?;
    let mut c = Container::new();
    c.insert("probability", "prediction", probs.clone());
    c.insert("binary", "prediction", binary.clone());
    c.insert("target", "target", target.clone());
    c.metadata = json!({
        "kind": "prediction",
        "sample": { "index": a.sample, "start": w.start, "input_len": w.in_len, "output_len": w.out_len },
        "threshold": a.model.threshold,
        "rain_threshold": a.model.rain_threshold,
        "lead_minutes": lead_minutes(leads),
    });
    let stack = out.join("prediction.wfn");
    c.write(&stack)?;
    let panel = out.join("panel.png");
    plot::panel(&[target.data(), probs.data(), binary.data()], leads, r, &panel)?;
    let mean = probs.data().iter().map(|&v| v as f64).sum::<f64>() / probs.len() as f64;
    println!("sample {} (frames {}..{})  mean probability {:.4}  wet predicted {}", a.sample, w.start, w.start + w.in_len + w.out_len, mean, binary.data().iter().filter(|&&v| v > 0.5).count());
    write_manifest(
        &out.join("manifest.json"),
        "predict",
        None,
        json!({ "sample": a.sample, "threshold": a.model.threshold, "rain_threshold": a.model.rain_threshold, "model": model.config }),
        &[&a.model.model, &a.data],
        &[&stack, &panel],
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Predictor {
    /// The trained network.
    Model,
    /// The targets themselves; an upper bound for sanity checks.
    Oracle,
    /// No rain anywhere.
    Empty,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, num_args = 1.., required = true)]
    pub data: Vec<PathBuf>,
    /// Frames between consecutive evaluation windows.
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    #[arg(long, value_enum, default_value = "model")]
    pub predictor: Predictor,
}

fn lead_stack(probs: &Tensor<f32>, threshold: f64) -> Result<Mask> {
    Ok(Mask::new(probs.shape()[1..].to_vec(), binarize(probs, threshold).data().to_vec())?)
}

fn metrics_row(w: &mut csv::Writer<std::fs::File>, name: &str, r: &MetricsReport) -> Result<()> {
    let c = &r.confusion;
    w.write_record([
        name.to_string(),
        r.iou.to_string(),
        r.csi.to_string(),
        r.f1.to_string(),
        c.tp.to_string(),
        c.fp.to_string(),
        c.fn_.to_string(),
        c.tn.to_string(),
        r.samples.to_string(),
        r.degenerate_samples.to_string(),
        r.sample_mean_iou.to_string(),
        r.sample_mean_f1.to_string(),
    ])?;
    Ok(())
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    check_device(&a.common)?;
    if a.stride == 0 {
        return Err(usage("--stride must be positive"));
    }
    let model = load_model(&a.model)?;
    let archives = read_archives(&a.data)?;
    let windows = eval_windows(&model, &archives, a.stride)?;
    if windows.is_empty() {
        return Err(usage("archives are too short for a single evaluation window"));
    }
    let leads = model.config.output_len();
    let mut main = LeadTimeAccumulator::new(leads);
    let mut base = LeadTimeAccumulator::new(leads);
    for &(i, w) in &windows {
        let (x, y) = sample(&archives[i], w, a.model.rain_threshold)?;
        let pred = match a.predictor {
            Predictor::Model => lead_stack(&forward(&model, &x, Mode::Eval)?, a.model.threshold)?,
            Predictor::Oracle => y.clone(),
            Predictor::Empty => Mask::new(y.shape().to_vec(), vec![false; y.len()])?,
        };
        main.add(&pred, &y)?;
        base.add(&lead_stack(&persistence_probabilities(&model, &x)?, a.model.threshold)?, &y)?;
    }
    let (main, base) = (main.report(), base.report());
    let name = format!("{:?}", a.predictor).to_lowercase();

    let out = &a.common.out;
    std::fs::create_dir_all(out)?;
    let metrics = out.join("metrics.csv");
    let mut w = csv::Writer::from_path(&metrics)?;
    w.write_record(["predictor", "iou", "csi", "f1", "tp", "fp", "fn", "tn", "samples", "degenerate_samples", "sample_mean_iou", "sample_mean_f1"])?;
    metrics_row(&mut w, &name, &main)?;
    metrics_row(&mut w, "persistence", &base)?;
    w.flush()?;

    let curve = out.join("iou_over_time.csv");
    let mut w = csv::Writer::from_path(&curve)?;
    w.write_record(["lead", "minutes", &name, "persistence"])?;
    for (l, m) in lead_minutes(leads).iter().enumerate() {
        w.write_record([(l + 1).to_string(), m.to_string(), main.iou_per_lead[l].to_string(), base.iou_per_lead[l].to_string()])?;
    }
    w.flush()?;
    let png = out.join("iou_over_time.png");
    plot::curves(&[(&main.iou_per_lead, [31, 119, 180]), (&base.iou_per_lead, [255, 127, 14])], &png)?;

    println!("{name}: iou {:.4}  f1 {:.4}  ({} samples)", main.iou, main.f1, main.samples);
    println!("persistence: iou {:.4}  f1 {:.4}", base.iou, base.f1);
    let mut inputs: Vec<&Path> = vec![&a.model.model];
    inputs.extend(a.data.iter().map(PathBuf::as_path));
    write_manifest(
        &out.join("manifest.json"),
        "evaluate",
        None,
        json!({
            "predictor": name,
            "stride": a.stride,
            "threshold": a.model.threshold,
            "rain_threshold": a.model.rain_threshold,
            "model": model.config,
            "reports": { "main": main, "persistence": base },
        }),
        &inputs,
        &[&metrics, &curve, &png],
    )
}
