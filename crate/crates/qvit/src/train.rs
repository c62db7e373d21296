//! Training and evaluation loops.
//!
//! The student initializes from a float teacher, then trains with quantizers
//! in the forward pass, the straight-through rule in the backward pass, and
//! the combined logit + similarity-matrix distillation loss. Runs are fully
//! deterministic for a fixed seed: batch order, augmentation draws and
//! parameter updates all derive from it, and the per-epoch log carries no
//! wall-clock data.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, TapeOptions};
use crate::data::{self, BatchIterator, Dataset, Normalizer};
use crate::diagnostics;
use crate::distill::{self, DistillationConfig, TeacherOutputs};
use crate::error::{Error, Result};
use crate::model::{ForwardMode, QVit};
use crate::optim::{clip_gradients, cosine_lr, OptimizerKind, OptimizerState};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_base_lr")]
    pub base_lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

fn default_batch_size() -> usize {
    128
}
fn default_base_lr() -> f64 {
    2e-4
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Lamb
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: default_batch_size(),
            base_lr: default_base_lr(),
            weight_decay: 0.0,
            optimizer: default_optimizer(),
            seed: 0,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::config("batch_size must be at least 1".to_string()));
        }
        if self.base_lr <= 0.0 {
            return Err(Error::config(format!(
                "base_lr must be positive, got {}",
                self.base_lr
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Metrics {
    pub top1: f64,
    pub top5: f64,
}

/// One training-log line; serialized as JSON-lines, one record per epoch.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_dist: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_dgd: Option<f64>,
    pub top1: f64,
    pub top5: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub entropy_q_nats: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub entropy_k_nats: Option<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn final_top1(&self) -> Option<f64> {
        self.records.last().map(|r| r.top1)
    }

    pub fn best_top1(&self) -> Option<f64> {
        self.records
            .iter()
            .map(|r| r.top1)
            .fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.max(v))))
    }
}

/// Top-1 / top-5 accuracy (top-5 clamps to the class count).
pub fn evaluate(
    model: &mut QVit,
    ds: &Dataset,
    norm: &Normalizer,
    batch_size: usize,
) -> Result<Metrics> {
    let mut rng = ChaCha8Rng::seed_from_u64(0); // eval applies no randomness
    let mut top1_hits = 0usize;
    let mut top5_hits = 0usize;
    let k = 5usize.min(ds.class_count);
    for batch in BatchIterator::sequential(ds.n, batch_size) {
        let (images, labels) = data::normalize_and_augment(ds, &batch, norm, false, &mut rng);
        let mut tape = Tape::with_options(TapeOptions { nan_check: false });
        let out = model.forward(&mut tape, &images, ForwardMode::Quantized, false)?;
        let logits = tape.value(out.logits);
        let c = ds.class_count;
        for (row, &label) in logits.data().chunks(c).zip(&labels) {
            let mut idx: Vec<usize> = (0..c).collect();
            idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
            if idx[0] == label {
                top1_hits += 1;
            }
            if idx[..k].contains(&label) {
                top5_hits += 1;
            }
        }
    }
    Ok(Metrics {
        top1: top1_hits as f64 / ds.n as f64,
        top5: top5_hits as f64 / ds.n as f64,
    })
}

fn check_same_architecture(student: &QVit, teacher: &QVit) -> Result<()> {
    let (s, t) = (&student.cfg, &teacher.cfg);
    let same = s.image_size == t.image_size
        && s.patch_size == t.patch_size
        && s.channels == t.channels
        && s.depth == t.depth
        && s.heads == t.heads
        && s.embed_dim == t.embed_dim
        && s.mlp_ratio == t.mlp_ratio
        && s.classes == t.classes;
    if !same {
        return Err(Error::config(
            "student and teacher architectures do not match".to_string(),
        ));
    }
    Ok(())
}

/// Run the teacher's float forward on a batch and detach everything the
/// distillation losses need.
pub fn teacher_outputs(teacher: &mut QVit, images: &crate::tensor::Tensor) -> Result<TeacherOutputs> {
    let mut tape = Tape::with_options(TapeOptions { nan_check: false });
    let out = teacher.forward(&mut tape, images, ForwardMode::Quantized, false)?;
    let snap = teacher.snapshot_telemetry(&tape, &out.telemetry, false)?;
    Ok(TeacherOutputs {
        logits: tape.value(out.logits).clone(),
        qk: snap
            .layers
            .into_iter()
            .map(|l| (l.q_tilde, l.k_tilde))
            .collect(),
    })
}

struct EpochLosses {
    total: f64,
    dist: f64,
    dgd: Option<f64>,
    steps: usize,
}

/// Train a student against an optional teacher. With `teacher = None` the
/// loop is plain cross-entropy training (used for the float teacher itself).
pub fn train_model(
    model: &mut QVit,
    mut teacher: Option<&mut QVit>,
    train_ds: &Dataset,
    eval_ds: &Dataset,
    cfg: &TrainConfig,
    dcfg: &DistillationConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    dcfg.validate()?;
    if let Some(t) = teacher.as_deref() {
        check_same_architecture(model, t)?;
    }
    if train_ds.class_count != model.cfg.classes {
        return Err(Error::config(format!(
            "dataset has {} classes, model {}",
            train_ds.class_count, model.cfg.classes
        )));
    }

    let norm = train_ds.normalizer();
    let mut log = TrainLog::default();
    let steps_per_epoch = train_ds.n / cfg.batch_size;
    let total_steps = (cfg.epochs * steps_per_epoch) as u64;
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.weight_decay, model.params.len());
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));

    // scales initialize from a float pass over the first training batch
    if !model.cfg.is_fully_float() {
        let first: Vec<usize> = (0..cfg.batch_size.min(train_ds.n)).collect();
        let (images, _) = data::normalize_and_augment(train_ds, &first, &norm, false, &mut aug_rng.clone());
        let mut tape = Tape::with_options(TapeOptions { nan_check: false });
        model.calibrate(&mut tape, &images)?;
    }

    if cfg.epochs == 0 {
        let metrics = evaluate(model, eval_ds, &norm, cfg.batch_size)?;
        let (eq, ek) = entropy_summary(model, eval_ds, &norm, cfg.batch_size)?;
        log.records.push(EpochRecord {
            epoch: 0,
            lr: 0.0,
            loss_total: 0.0,
            loss_dist: 0.0,
            loss_dgd: None,
            top1: metrics.top1,
            top5: metrics.top5,
            entropy_q_nats: eq,
            entropy_k_nats: ek,
        });
        return Ok(log);
    }

    let mut step: u64 = 0;
    for epoch in 0..cfg.epochs {
        let order = data::epoch_order(cfg.seed, epoch as u64, train_ds.n);
        let mut losses = EpochLosses { total: 0.0, dist: 0.0, dgd: None, steps: 0 };
        let mut last_lr = 0.0;
        for batch in BatchIterator::new(order, cfg.batch_size, true) {
            let (images, labels) =
                data::normalize_and_augment(train_ds, &batch, &norm, true, &mut aug_rng);

            let mut tape = Tape::with_options(TapeOptions { nan_check: false });
            let out = model.forward(&mut tape, &images, ForwardMode::Quantized, true)?;

            let (loss, dist_val, dgd_val) = match teacher.as_deref_mut() {
                Some(t) => {
                    let teacher_out = teacher_outputs(t, &images)?;
                    let breakdown = distill::total_loss(
                        &mut tape,
                        out.logits,
                        &labels,
                        &out.telemetry,
                        &teacher_out,
                        dcfg,
                    )?;
                    let dist_val = tape.value(breakdown.dist).item();
                    let dgd_val = breakdown.dgd.map(|d| tape.value(d).item());
                    (breakdown.total, dist_val, dgd_val)
                }
                None => {
                    let ce = tape.cross_entropy(out.logits, &labels)?;
                    (ce, tape.value(ce).item(), None)
                }
            };

            let loss_val = tape.value(loss).item();
            if !loss_val.is_finite() {
                return Err(Error::Internal(format!(
                    "non-finite loss at epoch {epoch} step {step}"
                )));
            }

            let mut grads = tape.backward(loss)?;
            if let Some(max_norm) = cfg.grad_clip {
                clip_gradients(&mut grads, max_norm);
            }
            last_lr = cosine_lr(cfg.base_lr, step, total_steps);
            opt.step(&mut model.params, &grads, last_lr)?;
            model.apply_constraints();
            step += 1;

            losses.total += loss_val;
            losses.dist += dist_val;
            if let Some(d) = dgd_val {
                *losses.dgd.get_or_insert(0.0) += d;
            }
            losses.steps += 1;
        }

        let metrics = evaluate(model, eval_ds, &norm, cfg.batch_size)?;
        let (eq, ek) = entropy_summary(model, eval_ds, &norm, cfg.batch_size)?;
        let n = losses.steps.max(1) as f64;
        log.records.push(EpochRecord {
            epoch,
            lr: last_lr,
            loss_total: losses.total / n,
            loss_dist: losses.dist / n,
            loss_dgd: losses.dgd.map(|d| d / n),
            top1: metrics.top1,
            top5: metrics.top5,
            entropy_q_nats: eq,
            entropy_k_nats: ek,
        });
    }
    Ok(log)
}

/// Plain cross-entropy training of a float model.
pub fn train_teacher(
    model: &mut QVit,
    train_ds: &Dataset,
    eval_ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    if !model.cfg.is_fully_float() {
        return Err(Error::config(
            "teacher training expects a full-precision model (w_bits = a_bits = 32)".to_string(),
        ));
    }
    train_model(model, None, train_ds, eval_ds, cfg, &DistillationConfig::default())
}

/// Initialize the student from the teacher's weights, then run quantized
/// training with the distillation objective.
pub fn train_student(
    student: &mut QVit,
    teacher: &mut QVit,
    train_ds: &Dataset,
    eval_ds: &Dataset,
    cfg: &TrainConfig,
    dcfg: &DistillationConfig,
) -> Result<TrainLog> {
    check_same_architecture(student, teacher)?;
    student.init_from(teacher)?;
    train_model(student, Some(teacher), train_ds, eval_ds, cfg, dcfg)
}

/// Mean discrete entropy of q and k codes over layers and heads on the first
/// evaluation batch; `None` entries when the model has no such quantizers.
fn entropy_summary(
    model: &mut QVit,
    eval_ds: &Dataset,
    norm: &Normalizer,
    batch_size: usize,
) -> Result<(Option<f64>, Option<f64>)> {
    let idx: Vec<usize> = (0..batch_size.min(eval_ds.n)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (images, _) = data::normalize_and_augment(eval_ds, &idx, norm, false, &mut rng);
    let mut tape = Tape::with_options(TapeOptions { nan_check: false });
    let out = model.forward(&mut tape, &images, ForwardMode::Quantized, false)?;
    let snap = model.snapshot_telemetry(&tape, &out.telemetry, true)?;
    let report = diagnostics::entropy_report(model, &snap)?;
    Ok((
        report.mean_discrete_nats("q"),
        report.mean_discrete_nats("k"),
    ))
}
