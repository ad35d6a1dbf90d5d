//! Staged training: sat2rad, PhyDNet, then the fusion U-Net on top of the
//! two frozen upstream modules.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use wfn_tensor::{ops, Float, Tensor, Var};

use crate::checkpoint::{Checkpoint, FUSION, PHYDNET, SAT2RAD};
use crate::data::{binarize_target, sliding_window, split_train_val, EventArchive, SampleIndex};
use crate::error::{invalid, Error, Result};
use crate::metrics::{confusion, csi, f1, iou, ConfusionCounts, Mask};
use crate::model::{fusion_head, sat2rad_frames, sigmoid, upstream_features, ModelConfig, WeatherFusionNet};
use crate::optim::{AdamConfig, AdamState, OptimizerKind};
use crate::params::{Mode, ParameterTree, Session};
use crate::phydnet::{moment_loss_var, phydnet_forward, phydnet_init, tf_probability, TeacherForcingSchedule};
use crate::unet::{unet_apply_padded, unet_init};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Sat2rad,
    Phydnet,
    Fusion,
}

impl Stage {
    pub fn module(self) -> &'static str {
        match self {
            Stage::Sat2rad => SAT2RAD,
            Stage::Phydnet => PHYDNET,
            Stage::Fusion => FUSION,
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sat2rad" => Ok(Stage::Sat2rad),
            "phydnet" => Ok(Stage::Phydnet),
            "fusion" => Ok(Stage::Fusion),
            _ => Err(invalid(format!("unknown stage `{s}` (sat2rad, phydnet, fusion)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub pos_weight: f64,
    /// Absolute step count at which training stops.
    pub max_steps: u64,
    pub seed: u64,
    pub rain_threshold: f64,
    /// Share of the ordered sample list used for training.
    pub train_fraction: f64,
    /// Stride applied to the held-out windows.
    pub val_stride: usize,
    pub max_val_samples: usize,
    /// Validate every this many steps; 0 validates only at the end.
    pub val_every: u64,
    /// Weight of the PhyCell moment penalty; 0 disables it.
    pub moment_weight: f64,
    pub teacher_forcing: TeacherForcingSchedule,
    /// Decision threshold on probabilities for validation metrics.
    pub decision_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_stage(Stage::Fusion)
    }
}

impl TrainConfig {
    pub fn for_stage(stage: Stage) -> Self {
        let (optimizer, weight_decay, batch_size) = match stage {
            Stage::Sat2rad => (OptimizerKind::AdamW, 1e-2, 32),
            Stage::Phydnet => (OptimizerKind::Adam, 0.0, 16),
            Stage::Fusion => (OptimizerKind::AdamW, 1e-2, 16),
        };
        Self {
            stage,
            optimizer,
            learning_rate: 1e-3,
            weight_decay,
            batch_size,
            pos_weight: 2.58,
            max_steps: 1000,
            seed: 0,
            rain_threshold: crate::data::RAIN_THRESHOLD_MM_H,
            train_fraction: 0.8,
            val_stride: 32,
            max_val_samples: 64,
            val_every: 0,
            moment_weight: 1.0,
            teacher_forcing: TeacherForcingSchedule::default(),
            decision_threshold: 0.5,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::new(self.optimizer, self.learning_rate, self.weight_decay)
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        if self.batch_size == 0 || self.val_stride == 0 {
            return Err(invalid("batch size and validation stride must be positive"));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return Err(invalid("train fraction must lie in [0, 1]"));
        }
        if !(self.pos_weight > 0.0) || !(self.moment_weight >= 0.0) {
            return Err(invalid("pos weight must be positive and moment weight non-negative"));
        }
        Ok(())
    }
}

/// Mean binary cross-entropy on logits with a positive-class weight.
pub fn bce_logits<T: Float>(logits: &Var<T>, targets: &Tensor<T>, pos_weight: f64) -> Result<Var<T>> {
    if targets.data().iter().any(|y| y.as_f64() != 0.0 && y.as_f64() != 1.0) {
        return Err(invalid("targets must be binary"));
    }
    Ok(ops::bce_with_logits(logits, targets, pos_weight)?)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub split: String,
    pub loss: f64,
    pub iou: Option<f64>,
    pub csi: Option<f64>,
    pub f1: Option<f64>,
}

/// Appends rows to a CSV log, writing the header for a new file.
pub fn append_log(path: impl AsRef<Path>, rows: &[LogRow]) -> Result<()> {
    let path = path.as_ref();
    let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
    let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
}

/// Positions of the shuffled sample stream: epoch `e` is a seeded
/// permutation, batch `k` takes stream items `[k*B, (k+1)*B)`.
fn batch_at(n: usize, batch: usize, seed: u64, step: u64) -> Vec<usize> {
    let mut perms: HashMap<u64, Vec<usize>> = HashMap::new();
    (0..batch as u64)
        .map(|j| {
            let i = step * batch as u64 + j;
            let epoch = i / n as u64;
            let perm = perms.entry(epoch).or_insert_with(|| {
                let mut p: Vec<usize> = (0..n).collect();
                p.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15)));
                p
            });
            perm[(i % n as u64) as usize]
        })
        .collect()
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0xD1B5_4A32_D192_ED03) ^ step)
}

/// `(archive, window)` pairs in archive-major order, split and thinned.
fn windows(archives: &[EventArchive], in_len: usize, out_len: usize, cfg: &TrainConfig) -> Result<(Vec<(usize, SampleIndex)>, Vec<(usize, SampleIndex)>)> {
    let mut all = Vec::new();
    for (a, arch) in archives.iter().enumerate() {
        for w in sliding_window(arch.num_frames(), in_len, out_len, 1)? {
            all.push((a, w));
        }
    }
    if all.is_empty() {
        return Err(invalid(format!("archives too short for {}-frame windows", in_len + out_len)));
    }
    let n_train = (cfg.train_fraction * all.len() as f64).floor() as usize;
    let (train, held) = split_train_val(&all, n_train)?;
    let val = held.into_iter().step_by(cfg.val_stride).take(cfg.max_val_samples).collect();
    if train.is_empty() {
        return Err(invalid("no training samples after the split"));
    }
    Ok((train, val))
}

fn check_geometry(model: &ModelConfig, archives: &[EventArchive]) -> Result<()> {
    model.validate()?;
    for a in archives {
        if a.sat_size() != model.geometry.sat_size || a.radar_size() != model.geometry.radar_size() {
            return Err(invalid(format!(
                "archive grids {}/{} do not match model geometry {}/{}",
                a.sat_size(),
                a.radar_size(),
                model.geometry.sat_size,
                model.geometry.radar_size()
            )));
        }
    }
    Ok(())
}

fn stack(parts: Vec<Tensor<f32>>) -> Result<Tensor<f32>> {
    let refs: Vec<&Tensor<f32>> = parts.iter().collect();
    Ok(Tensor::concat(&refs, 0)?)
}

fn with_batch_axis(t: Tensor<f32>) -> Result<Tensor<f32>> {
    let mut shape = t.shape().to_vec();
    shape.insert(0, 1);
    Ok(t.reshape(shape)?)
}

fn binary_targets(radar: &Tensor<f32>, threshold: f64) -> Tensor<f32> {
    binarize_target(radar, threshold).to_tensor()
}

/// Scores thresholded probabilities against binary targets.
fn score(probs: &Tensor<f32>, targets: &Tensor<f32>, threshold: f64) -> Result<ConfusionCounts> {
    confusion(&Mask::threshold(probs, threshold), &Mask::threshold(targets, 0.5))
}

struct Loop<'a> {
    cfg: &'a TrainConfig,
    tree: ParameterTree<f32>,
    optim: AdamState<f32>,
    step: u64,
    log: Vec<LogRow>,
}

impl<'a> Loop<'a> {
    fn new(cfg: &'a TrainConfig, init: ParameterTree<f32>, resume: Option<&Checkpoint>) -> Result<Self> {
        cfg.validate()?;
        let module = cfg.stage.module();
        let (tree, optim, step) = match resume {
            Some(ck) => {
                let optim = match &ck.optimizer {
                    Some((ns, st)) if ns == module => st.clone(),
                    _ => AdamState::default(),
                };
                (ck.module(module)?.clone(), optim, ck.step)
            }
            None => (init, AdamState::default(), 0),
        };
        Ok(Self {
            cfg,
            tree,
            optim,
            step,
            log: Vec::new(),
        })
    }

    /// Runs `loss` for each step until `max_steps`, validating per config.
    fn run(
        &mut self,
        n_train: usize,
        mut loss: impl FnMut(&Session<f32>, &[usize], u64) -> Result<Var<f32>>,
        mut validate: impl FnMut(&ParameterTree<f32>) -> Result<Option<LogRow>>,
    ) -> Result<()> {
        let adam = self.cfg.adam();
        while self.step < self.cfg.max_steps {
            let batch = batch_at(n_train, self.cfg.batch_size, self.cfg.seed, self.step);
            let (value, grads, updates) = {
                let s = Session::new(&self.tree, Mode::Train, true);
                let l = loss(&s, &batch, self.step)?;
                let grads = s.gradients(&l.backward());
                (l.value().item() as f64, grads, s.take_buffer_updates())
            };
            if !value.is_finite() {
                return Err(invalid(format!("loss diverged at step {}", self.step)));
            }
            self.optim.step(&adam, &mut self.tree, &grads)?;
            self.tree.apply_buffer_updates(updates)?;
            self.step += 1;
            self.log.push(LogRow {
                step: self.step,
                split: "train".into(),
                loss: value,
                iou: None,
                csi: None,
                f1: None,
            });
            let due = self.cfg.val_every > 0 && self.step % self.cfg.val_every == 0;
            if due || self.step == self.cfg.max_steps {
                if let Some(mut row) = validate(&self.tree)? {
                    row.step = self.step;
                    self.log.push(row);
                }
            }
        }
        Ok(())
    }
}

fn outcome(l: Loop, modules: Vec<(&str, ParameterTree<f32>)>, cfg: &TrainConfig, model: &ModelConfig) -> TrainOutcome {
    let mut ck = Checkpoint {
        step: l.step,
        config: json!({ "train": cfg, "model": model }),
        optimizer: Some((cfg.stage.module().to_string(), l.optim)),
        ..Default::default()
    };
    for (name, tree) in modules {
        ck.modules.insert(name.to_string(), tree);
    }
    ck.modules.insert(cfg.stage.module().to_string(), l.tree);
    TrainOutcome { checkpoint: ck, log: l.log }
}

fn require_stage(cfg: &TrainConfig, stage: Stage) -> Result<()> {
    if cfg.stage != stage {
        return Err(invalid(format!("config is for stage {:?}, not {stage:?}", cfg.stage)));
    }
    Ok(())
}

/// Framewise pairs (satellite frame t, radar frame t); loss on the radar window only.
pub fn train_sat2rad(cfg: &TrainConfig, model: &ModelConfig, archives: &[EventArchive], resume: Option<&Checkpoint>) -> Result<TrainOutcome> {
    require_stage(cfg, Stage::Sat2rad)?;
    check_geometry(model, archives)?;
    let (train, val) = windows(archives, 1, 0, cfg)?;
    let geom = model.geometry;
    let mut l = Loop::new(cfg, unet_init(&model.sat2rad, cfg.seed)?, resume)?;

    let batch_tensors = |idx: &[(usize, SampleIndex)]| -> Result<(Tensor<f32>, Tensor<f32>)> {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for &(a, w) in idx {
            xs.push(archives[a].satellite_frames(w.start, 1)?);
            ys.push(with_batch_axis(binary_targets(&archives[a].radar_frames(w.start, 1)?, cfg.rain_threshold))?);
        }
        Ok((stack(xs)?, stack(ys)?))
    };
    let logits = |s: &Session<f32>, x: &Tensor<f32>| -> Result<Var<f32>> {
        let y = unet_apply_padded(s, &model.sat2rad, &Var::constant(x.clone()), geom.unet_pad)?;
        geom.crop_and_upscale_var(&y)
    };
    let train_ref = &train;
    l.run(
        train.len(),
        |s, batch, _| {
            let idx: Vec<_> = batch.iter().map(|&i| train_ref[i]).collect();
            let (x, y) = batch_tensors(&idx)?;
            bce_logits(&logits(s, &x)?, &y, cfg.pos_weight)
        },
        |tree| {
            validate_classifier(&val, cfg, |chunk| {
                let (x, y) = batch_tensors(chunk)?;
                Ok((logits(&Session::new(tree, Mode::Eval, false), &x)?.value().clone(), y))
            })
        },
    )?;
    Ok(outcome(l, vec![], cfg, model))
}

fn validate_classifier(
    val: &[(usize, SampleIndex)],
    cfg: &TrainConfig,
    mut eval: impl FnMut(&[(usize, SampleIndex)]) -> Result<(Tensor<f32>, Tensor<f32>)>,
) -> Result<Option<LogRow>> {
    if val.is_empty() {
        return Ok(None);
    }
    let mut total = ConfusionCounts::default();
    let mut loss = 0.0;
    for chunk in val.chunks(cfg.batch_size) {
        let (logits, y) = eval(chunk)?;
        loss += bce_logits(&Var::constant(logits.clone()), &y, cfg.pos_weight)?.value().item() as f64 * chunk.len() as f64;
        total.accumulate(&score(&sigmoid(&logits), &y, cfg.decision_threshold)?);
    }
    Ok(Some(LogRow {
        step: 0,
        split: "val".into(),
        loss: loss / val.len() as f64,
        iou: Some(iou(&total)),
        csi: Some(csi(&total)),
        f1: Some(f1(&total)),
    }))
}

/// Satellite-only sequences of `input_len + output_len` frames; L1+L2 on the
/// predicted frames plus the weighted moment penalty.
pub fn train_phydnet(cfg: &TrainConfig, model: &ModelConfig, archives: &[EventArchive], resume: Option<&Checkpoint>) -> Result<TrainOutcome> {
    require_stage(cfg, Stage::Phydnet)?;
    check_geometry(model, archives)?;
    let pc = &model.phydnet;
    let (train, val) = windows(archives, pc.input_len, pc.output_len, cfg)?;
    let mut l = Loop::new(cfg, phydnet_init(pc, cfg.seed)?, resume)?;

    let batch_tensors = |idx: &[(usize, SampleIndex)]| -> Result<(Tensor<f32>, Tensor<f32>)> {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for &(a, w) in idx {
            xs.push(with_batch_axis(archives[a].satellite_frames(w.start, w.in_len)?)?);
            ys.push(with_batch_axis(archives[a].satellite_frames(w.start + w.in_len, w.out_len)?)?);
        }
        Ok((stack(xs)?, stack(ys)?))
    };
    let train_ref = &train;
    l.run(
        train.len(),
        |s, batch, step| {
            let idx: Vec<_> = batch.iter().map(|&i| train_ref[i]).collect();
            let (x, y) = batch_tensors(&idx)?;
            let p = tf_probability(&cfg.teacher_forcing, step);
            let mut rng = step_rng(cfg.seed, step);
            let out = phydnet_forward(s, pc, &x, pc.output_len, Some(&y), p, &mut rng)?;
            let mut loss = ops::l1_l2_loss(&out, &y)?;
            if cfg.moment_weight > 0.0 {
                let m = moment_loss_var(&s.param("phycell.bank.weight")?)?;
                loss = ops::add(&loss, &ops::scale(&m, cfg.moment_weight as f32))?;
            }
            Ok(loss)
        },
        |tree| {
            if val.is_empty() {
                return Ok(None);
            }
            let s = Session::new(tree, Mode::Eval, false);
            let mut total = 0.0;
            for chunk in val.chunks(cfg.batch_size) {
                let (x, y) = batch_tensors(chunk)?;
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let out = phydnet_forward(&s, pc, &x, pc.output_len, None, 0.0, &mut rng)?;
                total += ops::l1_l2_loss(&out, &y)?.value().item() as f64 * chunk.len() as f64;
            }
            Ok(Some(LogRow {
                step: 0,
                split: "val".into(),
                loss: total / val.len() as f64,
                iou: None,
                csi: None,
                f1: None,
            }))
        },
    )?;
    Ok(outcome(l, vec![], cfg, model))
}

/// Fusion U-Net on the outputs of frozen sat2rad and PhyDNet modules,
/// against binarized radar targets for every lead time.
pub fn train_fusion(
    cfg: &TrainConfig,
    model: &ModelConfig,
    archives: &[EventArchive],
    sat2rad: Option<&ParameterTree<f32>>,
    phydnet: Option<&ParameterTree<f32>>,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    require_stage(cfg, Stage::Fusion)?;
    check_geometry(model, archives)?;
    let need = |tree: Option<&ParameterTree<f32>>, used: bool, name: &str, init: &dyn Fn() -> Result<ParameterTree<f32>>| -> Result<ParameterTree<f32>> {
        match (tree, used) {
            (Some(t), _) => Ok(t.clone()),
            (None, true) => Err(Error::MissingCheckpoint(format!("fusion training needs a trained {name} checkpoint"))),
            // unused by the fusion sources; kept only so the composite checkpoint is complete
            (None, false) => init(),
        }
    };
    let frozen = WeatherFusionNet {
        config: model.clone(),
        sat2rad: need(sat2rad, model.sources.sat2rad, SAT2RAD, &|| unet_init(&model.sat2rad, cfg.seed))?,
        phydnet: need(phydnet, model.sources.phydnet, PHYDNET, &|| phydnet_init(&model.phydnet, cfg.seed))?,
        fusion: ParameterTree::new(),
        freeze_sat2rad: true,
        freeze_phydnet: true,
    };
    let (train, val) = windows(archives, model.input_len(), model.output_len(), cfg)?;
    let mut l = Loop::new(cfg, unet_init(&model.fusion, cfg.seed)?, resume)?;

    let mut cache: HashMap<(usize, usize), Tensor<f32>> = HashMap::new();
    let mut batch_tensors = |idx: &[(usize, SampleIndex)]| -> Result<(Tensor<f32>, Tensor<f32>)> {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for &(a, w) in idx {
            let feat = match cache.get(&(a, w.start)) {
                Some(f) => f.clone(),
                None => {
                    let seq = with_batch_axis(archives[a].satellite_frames(w.start, w.in_len)?)?;
                    let f = upstream_features(&frozen, &seq)?;
                    cache.insert((a, w.start), f.clone());
                    f
                }
            };
            xs.push(feat);
            ys.push(with_batch_axis(binary_targets(&archives[a].radar_frames(w.start + w.in_len, w.out_len)?, cfg.rain_threshold))?);
        }
        Ok((stack(xs)?, stack(ys)?))
    };

    let train_ref = &train;
    let mut pending_val: Vec<(Tensor<f32>, Tensor<f32>)> = Vec::new();
    for chunk in val.chunks(cfg.batch_size) {
        pending_val.push(batch_tensors(chunk)?);
    }
    l.run(
        train.len(),
        |s, batch, _| {
            let idx: Vec<_> = batch.iter().map(|&i| train_ref[i]).collect();
            let (x, y) = batch_tensors(&idx)?;
            bce_logits(&fusion_head(s, model, &x)?, &y, cfg.pos_weight)
        },
        |tree| {
            let mut it = pending_val.iter();
            validate_classifier(&val, cfg, |_| {
                let (x, y) = it.next().expect("one cached batch per chunk");
                Ok((fusion_head(&Session::new(tree, Mode::Eval, false), model, x)?.value().clone(), y.clone()))
            })
        },
    )?;
    Ok(outcome(l, vec![(SAT2RAD, frozen.sat2rad), (PHYDNET, frozen.phydnet)], cfg, model))
}

/// Rebuilds the full model from a composite checkpoint.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<WeatherFusionNet<f32>> {
    let config: ModelConfig = serde_json::from_value(
        ck.config
            .get("model")
            .cloned()
            .ok_or_else(|| invalid("checkpoint lacks a model config echo"))?,
    )?;
    config.validate()?;
    Ok(WeatherFusionNet {
        sat2rad: ck.module(SAT2RAD)?.clone(),
        phydnet: ck.module(PHYDNET)?.clone(),
        fusion: ck.module(FUSION)?.clone(),
        config,
        freeze_sat2rad: true,
        freeze_phydnet: true,
    })
}

/// Writes `checkpoint.wfn`, `config.json` and appends `log.csv` in `dir`.
pub fn save_outcome(outcome: &TrainOutcome, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    outcome.checkpoint.save(dir.join("checkpoint.wfn"))?;
    let mut f = std::fs::File::create(dir.join("config.json"))?;
    f.write_all(serde_json::to_string_pretty(&outcome.checkpoint.config)?.as_bytes())?;
    append_log(dir.join("log.csv"), &outcome.log)
}

/// Sat2rad logits for a frame stack, exposed for evaluation tooling.
pub fn sat2rad_logits(model: &WeatherFusionNet<f32>, frames: &Tensor<f32>) -> Result<Tensor<f32>> {
    Ok(sat2rad_frames(&Session::frozen(&model.sat2rad), &model.config, frames)?.value().clone())
}
