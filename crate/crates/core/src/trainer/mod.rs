//! Optimization of the student on cached pseudo-labels.
//!
//! AdamW with decoupled weight decay on decoder weight matrices only, a
//! cosine learning-rate schedule, global gradient-norm clipping, EMA weights
//! used for validation and inference, warm-up gating of label correction,
//! per-step JSON-lines logging and best/last checkpoints.

pub mod data;
pub mod predict;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::model::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::model::params::ParamRole;
use crate::model::{batch, ModelConfig, StudentModel};
use crate::objectives::{total_loss, CorrectionStats, LossConfig};
use crate::util::{derive_seed, short_hash, write_atomic};

pub use data::{
    epoch_batches, label_counts, prepare, InMemory, LabelSource, ManifestSplit, Prepared, Sample,
    SampleSource,
};
pub use predict::{evaluate_model, predict_image, predict_source, Prediction};

pub const CKPT_BEST: &str = "ckpt_best.safetensors";
pub const CKPT_LAST: &str = "ckpt_last.safetensors";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const NONFINITE_DUMP: &str = "nonfinite_dump.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Final learning rate as a fraction of `lr`.
    pub min_lr_factor: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            min_lr_factor: 0.01,
        }
    }
}

/// Validation metric used to pick the best checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    #[default]
    MiouAnom,
    Miou,
    F1Anom,
    IouBin,
    RecallBin,
}

impl SelectionMetric {
    pub fn name(&self) -> &'static str {
        match self {
            SelectionMetric::MiouAnom => "miou_anom",
            SelectionMetric::Miou => "miou",
            SelectionMetric::F1Anom => "f1_anom",
            SelectionMetric::IouBin => "iou_bin",
            SelectionMetric::RecallBin => "recall_bin",
        }
    }

    pub fn read(&self, r: &MetricReport) -> Option<f64> {
        match self {
            SelectionMetric::MiouAnom => r.miou_anom,
            SelectionMetric::Miou => r.miou,
            SelectionMetric::F1Anom => r.f1_anom,
            SelectionMetric::IouBin => r.iou_bin,
            SelectionMetric::RecallBin => r.recall_bin,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub ema_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub selection_metric: SelectionMetric,
    /// Random horizontal flips of training images.
    pub hflip: bool,
    /// Images with defect pixels guaranteed per batch; 0 disables.
    pub min_defect_images_per_batch: usize,
    /// Validate and predict with the EMA weights.
    pub use_ema: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lr: 5e-4,
            weight_decay: 1e-2,
            clip_norm: 1.0,
            ema_decay: 0.999,
            epochs: 50,
            batch_size: 8,
            seed: 0,
            loss: LossConfig::default(),
            model: ModelConfig::default(),
            schedule: ScheduleConfig::default(),
            selection_metric: SelectionMetric::default(),
            hflip: true,
            min_defect_images_per_batch: 0,
            use_ema: true,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("clip_norm must be positive"));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::config("ema_decay must lie in (0, 1)"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.schedule.min_lr_factor) {
            return Err(Error::config("schedule.min_lr_factor must lie in [0, 1]"));
        }
        self.loss.validate()?;
        self.model.validate()
    }

    /// Stable digest of the configuration.
    pub fn hash(&self) -> String {
        short_hash(&serde_json::to_string(self).unwrap_or_default())
    }
}

/// Cosine decay from `base_lr` at step 0 to `base_lr * min_lr_factor` at
/// `total_steps`.
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64, min_lr_factor: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::config("cosine schedule needs at least one step"));
    }
    if step > total_steps {
        return Err(Error::invalid(format!(
            "step {step} beyond schedule end {total_steps}"
        )));
    }
    let min = base_lr * min_lr_factor;
    let t = step as f64 / total_steps as f64;
    Ok(min + (base_lr - min) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0)
}

/// Global L2 norm of the gradients of `vars`; errors on the first
/// non-finite gradient.
pub fn gradient_norm(grads: &GradStore, vars: &[(String, Var)]) -> Result<f64> {
    let mut sq = 0.0;
    for (name, v) in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            let s: f64 = g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar()?;
            if !s.is_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
            sq += s;
        }
    }
    Ok(sq.sqrt())
}

/// Rescales all gradients by `max_norm / norm` when their global norm
/// exceeds `max_norm`. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut GradStore, vars: &[(String, Var)], max_norm: f64) -> Result<f64> {
    let norm = gradient_norm(grads, vars)?;
    if norm > max_norm {
        let scale = max_norm / norm;
        for (_, v) in vars {
            if let Some(g) = grads.get(v.as_tensor()) {
                let scaled = (g.to_dtype(DType::F64)? * scale)?.to_dtype(g.dtype())?;
                grads.insert(v.as_tensor(), scaled);
            }
        }
    }
    Ok(norm)
}

/// Exponential moving average of the model's parameters.
#[derive(Debug, Clone)]
pub struct EmaState {
    shadow: StudentModel,
    decay: f64,
    steps: u64,
}

impl EmaState {
    /// Starts as an independent copy of `model`.
    pub fn new(model: &StudentModel, decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::config("EMA decay must lie in [0, 1)"));
        }
        Ok(EmaState {
            shadow: model.deep_clone()?,
            decay,
            steps: 0,
        })
    }

    pub fn model(&self) -> &StudentModel {
        &self.shadow
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// `shadow <- decay * shadow + (1 - decay) * param` for every parameter
    /// and running statistic. Frozen weights never change, so their shadow
    /// stays equal to them without being touched.
    pub fn update(&mut self, model: &StudentModel) -> Result<()> {
        let d = self.decay;
        for p in model.params().iter() {
            if !(p.is_tracked() || p.role == ParamRole::RunningStat) {
                continue;
            }
            let s = self
                .shadow
                .params()
                .get(&p.name)
                .ok_or_else(|| Error::shape(format!("EMA lacks parameter `{}`", p.name)))?;
            let cur = p.var().as_tensor();
            if cur.dims() != s.var().dims() {
                return Err(Error::shape(format!("EMA shape mismatch for `{}`", p.name)));
            }
            let next = (s.var().as_tensor().affine(d, 0.0)? + cur.affine(1.0 - d, 0.0)?)?;
            s.assign(&next)?;
        }
        self.steps += 1;
        Ok(())
    }
}

/// One optimizer step as logged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_bin: f64,
    pub loss_fine: f64,
    pub grad_norm: f64,
    pub grad_norm_clipped: f64,
    pub warmup: bool,
    pub pixels_eligible: u64,
    pub pixels_corrected: u64,
    /// Relabeled pixels per defect class.
    pub corrected_per_class: Vec<u64>,
    /// Validation report, on the last step of each epoch.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_metrics: Option<MetricReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selection: Option<f64>,
}

/// Model, EMA and optimizer state.
pub struct Trainer {
    cfg: TrainingConfig,
    model: StudentModel,
    ema: EmaState,
    vars: Vec<(String, Var)>,
    decayed: AdamW,
    plain: AdamW,
    class_weights: Vec<f64>,
    step: u64,
    total_steps: u64,
    warmup_steps: u64,
}

impl Trainer {
    /// Fresh model from `cfg.model` and `cfg.seed`.
    pub fn new(
        cfg: &TrainingConfig,
        total_steps: u64,
        warmup_steps: u64,
        class_weights: Vec<f64>,
    ) -> Result<Self> {
        cfg.validate()?;
        let model = StudentModel::new(&cfg.model, cfg.seed)?;
        Trainer::with_model(cfg, model, total_steps, warmup_steps, class_weights)
    }

    pub fn with_model(
        cfg: &TrainingConfig,
        model: StudentModel,
        total_steps: u64,
        warmup_steps: u64,
        class_weights: Vec<f64>,
    ) -> Result<Self> {
        if class_weights.len() != cfg.model.num_classes + 1 {
            return Err(Error::config(format!(
                "{} class weights for {} labels",
                class_weights.len(),
                cfg.model.num_classes + 1
            )));
        }
        let trainable = model.trainable_vars();
        let group = |decay: bool| -> Vec<Var> {
            trainable
                .iter()
                .filter(|(_, r, _)| r.is_decayed() == decay)
                .map(|(_, _, v)| v.clone())
                .collect()
        };
        let params = |wd: f64| ParamsAdamW {
            lr: cfg.lr,
            weight_decay: wd,
            ..ParamsAdamW::default()
        };
        let decayed = AdamW::new(group(true), params(cfg.weight_decay))?;
        let plain = AdamW::new(group(false), params(0.0))?;
        let vars = trainable.into_iter().map(|(n, _, v)| (n, v)).collect();
        let ema = EmaState::new(&model, cfg.ema_decay)?;
        Ok(Trainer {
            cfg: cfg.clone(),
            model,
            ema,
            vars,
            decayed,
            plain,
            class_weights,
            step: 0,
            total_steps: total_steps.max(1),
            warmup_steps,
        })
    }

    pub fn model(&self) -> &StudentModel {
        &self.model
    }

    pub fn ema(&self) -> &EmaState {
        &self.ema
    }

    /// Weights used for validation and inference.
    pub fn inference_model(&self) -> &StudentModel {
        if self.cfg.use_ema {
            self.ema.model()
        } else {
            &self.model
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn warmup_active(&self) -> bool {
        self.step < self.warmup_steps
    }

    /// Forward, loss, backward, clipping, AdamW and EMA update on one batch.
    pub fn train_step(&mut self, batch_items: &[Prepared], epoch: usize) -> Result<StepLog> {
        let images: Vec<Tensor> = batch_items.iter().map(|p| p.image.clone()).collect();
        let labels: Vec<u8> = batch_items
            .iter()
            .flat_map(|p| p.labels.iter().copied())
            .collect();
        let x = batch(&images)?;
        let out = self.model.forward(&x, true)?;
        let warmup = self.warmup_active();
        let loss = total_loss(
            &out.binary_logits,
            &out.fine_logits,
            &labels,
            &self.cfg.loss,
            &self.class_weights,
            warmup,
        )?;
        let total: f64 = loss.total.to_dtype(DType::F64)?.to_scalar()?;
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step as usize,
                epoch,
            });
        }
        let lr = cosine_lr(
            self.step.min(self.total_steps),
            self.total_steps,
            self.cfg.lr,
            self.cfg.schedule.min_lr_factor,
        )?;
        let mut grads = loss.total.backward()?;
        let grad_norm = clip_gradients(&mut grads, &self.vars, self.cfg.clip_norm)?;
        let grad_norm_clipped = gradient_norm(&grads, &self.vars)?;
        self.decayed.set_learning_rate(lr);
        self.plain.set_learning_rate(lr);
        self.decayed.step(&grads)?;
        self.plain.step(&grads)?;
        self.ema.update(&self.model)?;
        let log = StepLog {
            step: self.step,
            epoch,
            lr,
            loss_total: total,
            loss_bin: loss.binary,
            loss_fine: loss.fine,
            grad_norm,
            grad_norm_clipped,
            warmup,
            pixels_eligible: loss.stats.pixels_eligible,
            pixels_corrected: loss.stats.pixels_corrected,
            corrected_per_class: loss.stats.corrected_per_class.clone(),
            val_metrics: None,
            selection: None,
        };
        self.step += 1;
        Ok(log)
    }
}

/// Per-epoch summary of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub correction: CorrectionStats,
    pub val: Option<MetricReport>,
    pub selection: Option<f64>,
}

/// Where a run writes its artifacts; `None` keeps everything in memory.
#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    pub out_dir: Option<PathBuf>,
    pub teacher_fingerprint: String,
}

pub struct FitOutcome {
    pub trainer: Trainer,
    /// Copy of the inference weights at the best epoch.
    pub best_model: StudentModel,
    pub best_epoch: usize,
    pub best_metric: Option<f64>,
    pub epochs: Vec<EpochSummary>,
    pub steps: Vec<StepLog>,
    pub correction: CorrectionStats,
    pub class_weights: Vec<f64>,
}

/// Trains on `train`, validating the inference weights on `val` after every
/// epoch. The best epoch by the selection metric (undefined ranks lowest,
/// earliest wins ties) is kept.
pub fn fit(
    cfg: &TrainingConfig,
    train: &dyn SampleSource,
    val: Option<&dyn SampleSource>,
    opts: &FitOptions,
) -> Result<FitOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    let num_labels = cfg.model.num_classes + 1;
    let counts = label_counts(train, num_labels)?;
    if let Some(v) = val {
        label_counts(v, num_labels)?;
    }
    let class_weights = cfg.loss.class_weights.resolve(num_labels, &counts)?;
    let has_defect: Vec<bool> = (0..train.len())
        .map(|i| Ok(train.load_labels(i)?.count_nonzero() > 0))
        .collect::<Result<_>>()?;
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size) as u64;
    let total_steps = steps_per_epoch * cfg.epochs as u64;
    let warmup_steps = cfg.loss.warmup_steps.unwrap_or(steps_per_epoch);
    let mut trainer = Trainer::new(cfg, total_steps, warmup_steps, class_weights.clone())?;

    let mut log = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(BufWriter::new(File::create(dir.join(TRAIN_LOG))?))
        }
        None => None,
    };
    let meta = |trainer: &Trainer, epoch: usize, metric: Option<f64>| CheckpointMeta {
        step: trainer.step(),
        epoch,
        metric_name: cfg.selection_metric.name().to_string(),
        metric,
        config_hash: cfg.hash(),
        teacher_fingerprint: opts.teacher_fingerprint.clone(),
    };

    let size = cfg.model.input_size;
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut correction = CorrectionStats::new(cfg.model.num_classes);
    let mut best: Option<(usize, Option<f64>, StudentModel)> = None;
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "epoch", epoch as u64));
        let batches = epoch_batches(
            train.len(),
            cfg.batch_size,
            &has_defect,
            cfg.min_defect_images_per_batch,
            &mut rng,
        );
        let mut epoch_corr = CorrectionStats::new(cfg.model.num_classes);
        let mut loss_sum = 0.0;
        let n_batches = batches.len();
        for (bi, idx) in batches.into_iter().enumerate() {
            let picks: Vec<(usize, bool)> = idx
                .iter()
                .map(|&i| (i, cfg.hflip && rng.gen_bool(0.5)))
                .collect();
            let items = data::load_batch(train, &picks, size)?;
            let mut rec = match trainer.train_step(&items, epoch) {
                Ok(r) => r,
                Err(e @ (Error::NonFiniteLoss { .. } | Error::NonFiniteGradient(_))) => {
                    if let Some(dir) = &opts.out_dir {
                        dump_nonfinite(
                            dir,
                            &trainer,
                            &items,
                            epoch,
                            &e,
                            &meta(&trainer, epoch, None),
                        )?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            loss_sum += rec.loss_total;
            epoch_corr.merge(&CorrectionStats {
                pixels_eligible: rec.pixels_eligible,
                pixels_corrected: rec.pixels_corrected,
                corrected_per_class: rec.corrected_per_class.clone(),
            });
            if bi + 1 == n_batches {
                let report = match val {
                    Some(v) if !v.is_empty() => {
                        Some(evaluate_model(trainer.inference_model(), v, None)?.report)
                    }
                    _ => None,
                };
                rec.selection = report.as_ref().and_then(|r| cfg.selection_metric.read(r));
                rec.val_metrics = report;
            }
            if let Some(w) = log.as_mut() {
                serde_json::to_writer(&mut *w, &rec)?;
                w.write_all(b"\n")?;
                w.flush()?;
            }
            steps.push(rec);
        }
        let last = steps.last().expect("every epoch has a step");
        let summary = EpochSummary {
            epoch,
            mean_loss: loss_sum / n_batches as f64,
            correction: epoch_corr.clone(),
            val: last.val_metrics.clone(),
            selection: last.selection,
        };
        correction.merge(&epoch_corr);
        let improved = match &best {
            None => true,
            Some((_, b, _)) => summary.selection > *b,
        };
        if improved {
            best = Some((
                epoch,
                summary.selection,
                trainer.inference_model().deep_clone()?,
            ));
            if let Some(dir) = &opts.out_dir {
                save_checkpoint(
                    &dir.join(CKPT_BEST),
                    trainer.model(),
                    Some(trainer.ema().model()),
                    &meta(&trainer, epoch, summary.selection),
                )?;
            }
        }
        if let Some(dir) = &opts.out_dir {
            save_checkpoint(
                &dir.join(CKPT_LAST),
                trainer.model(),
                Some(trainer.ema().model()),
                &meta(&trainer, epoch, summary.selection),
            )?;
        }
        log::info!(
            "epoch {epoch}: loss {:.4}, corrected {} px, {} {:?}",
            summary.mean_loss,
            epoch_corr.pixels_corrected,
            cfg.selection_metric.name(),
            summary.selection
        );
        epochs.push(summary);
    }
    let (best_epoch, best_metric, best_model) = best.expect("at least one epoch");
    Ok(FitOutcome {
        trainer,
        best_model,
        best_epoch,
        best_metric,
        epochs,
        steps,
        correction,
        class_weights,
    })
}

#[derive(Serialize)]
struct NonFiniteDump<'a> {
    error: String,
    step: u64,
    epoch: usize,
    image_ids: Vec<&'a str>,
    label_pixels: Vec<usize>,
}

fn dump_nonfinite(
    dir: &Path,
    trainer: &Trainer,
    items: &[Prepared],
    epoch: usize,
    err: &Error,
    meta: &CheckpointMeta,
) -> Result<()> {
    let dump = NonFiniteDump {
        error: err.to_string(),
        step: trainer.step(),
        epoch,
        image_ids: items.iter().map(|p| p.image_id.as_str()).collect(),
        label_pixels: items
            .iter()
            .map(|p| p.labels.iter().filter(|&&v| v > 0).count())
            .collect(),
    };
    write_atomic(
        &dir.join(NONFINITE_DUMP),
        serde_json::to_string_pretty(&dump)?.as_bytes(),
    )?;
    save_checkpoint(
        &dir.join("ckpt_nonfinite.safetensors"),
        trainer.model(),
        Some(trainer.ema().model()),
        meta,
    )
}
