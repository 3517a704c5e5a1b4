//! The combined objective, the triplet retrieval loss, Adam with two
//! learning-rate groups, and the training loop.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{Binder, Tape, Var};
use crate::config::{MalmConfig, ObjectiveConfig};
use crate::data::{BatchPlan, Dataset, PairedBatch, RecipeBatch};
use crate::distillation::ema_update_prefix;
use crate::encoders::{STUDENT, TEACHER};
use crate::error::{invalid, MalmError, Result};
use crate::evaluation::{evaluate, Direction, RetrievalReport};
use crate::matching::{clamp_logit_scale, MatchOutputs, LOGIT_SCALE};
use crate::model::{LossBundle, Malm};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

/// Bidirectional batch-hard triplet loss on cosine similarity between
/// `[B, D]` image and recipe vectors.
pub fn loss_itc<'t>(image: Var<'t>, recipe: Var<'t>, margin: f64) -> Result<Var<'t>> {
    let (si, sr) = (image.shape(), recipe.shape());
    if si.len() != 2 || si != sr {
        return Err(MalmError::Shape(format!("loss_itc: {si:?} vs {sr:?}")));
    }
    let bsz = si[0];
    if bsz < 2 {
        return invalid(format!("loss_itc needs at least 2 samples, got {bsz}"));
    }
    let tape = image.tape();
    let sim = image
        .l2_normalize(1e-12)
        .matmul(recipe.l2_normalize(1e-12).transpose_last());
    let eye = Tensor::eye(bsz);
    let pos_rows = sim.mul(tape.constant(eye.clone())).sum_axis(1);
    let pos_cols = sim
        .mul(tape.constant(eye.clone()))
        .sum_axis(0)
        .transpose_last();
    let off = tape.constant(eye.map(|v| -1e9 * v));
    let masked = sim.add(off);
    let hard_i2r = masked.max_axis(1);
    let hard_r2i = masked.max_axis(0).transpose_last();
    let m = tape.scalar(margin);
    let h1 = m.sub(pos_rows).add(hard_i2r).relu().mean();
    let h2 = m.sub(pos_cols).add(hard_r2i).relu().mean();
    Ok(h1.add(h2).scale(0.5))
}

/// `L = L_itc + λ_itm (L_GC + L_LC) + λ_dist L_dist`. A non-finite
/// component aborts with its name.
pub fn total_loss<'t>(losses: &LossBundle<'t>, cfg: &ObjectiveConfig) -> Result<Var<'t>> {
    for (name, v) in [
        ("L_itc", losses.itc),
        ("L_GC", losses.gc),
        ("L_LC", losses.lc),
        ("L_dist", losses.dist),
    ] {
        if !v.item().is_finite() {
            return Err(MalmError::NonFinite {
                component: name.into(),
            });
        }
    }
    Ok(losses
        .itc
        .add(losses.gc.add(losses.lc).scale(cfg.lambda_itm))
        .add(losses.dist.scale(cfg.lambda_dist)))
}

/// Adam (no weight decay) over a named parameter store.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    t: BTreeMap<String, u64>,
}

impl Adam {
    pub fn new() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            ..Self::default()
        }
    }

    /// Applies one update to `name`. Moment counters are per parameter, so a
    /// parameter group that joins late starts with fresh bias correction.
    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &Tensor, lr: f64) {
        let m = self
            .m
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(grad.shape()));
        let v = self
            .v
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(grad.shape()));
        let t = self.t.entry(name.to_string()).or_insert(0);
        *t += 1;
        let c1 = 1.0 - self.beta1.powi(*t as i32);
        let c2 = 1.0 - self.beta2.powi(*t as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((p, &g), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.scale_in_place(s);
        }
    }
    norm
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub epoch: usize,
    #[serde(rename = "L")]
    pub total: f64,
    #[serde(rename = "L_itc")]
    pub itc: f64,
    #[serde(rename = "L_GC")]
    pub gc: f64,
    #[serde(rename = "L_LC")]
    pub lc: f64,
    #[serde(rename = "L_dist")]
    pub dist: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub epoch: usize,
    pub step: usize,
    pub report: RetrievalReport,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters after the last step.
    pub last: Malm,
    /// Parameters with the best validation R@1, or the last ones when no
    /// validation set was given.
    pub best: Malm,
    pub best_epoch: Option<usize>,
    pub metrics: Vec<MetricRecord>,
    pub validation: Vec<ValidationRecord>,
    pub steps: usize,
}

/// Rows of every attention map must sum to 1.
pub fn check_attention_rows(out: &MatchOutputs<'_>) -> Result<()> {
    check_distribution_rows("A_I", &out.a_i.value())?;
    check_distribution_rows("A_R", &out.a_r.value())
}

/// Every last-axis row of `t` is nonnegative and sums to 1.
pub fn check_distribution_rows(name: &str, t: &Tensor) -> Result<()> {
    let n = *t.shape().last().expect("non-scalar map");
    for (r, row) in t.data().chunks(n).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-9 || row.iter().any(|v| !(0.0..=1.0 + 1e-12).contains(v)) {
            return invalid(format!("{name} row {r} is not a distribution (sum {s})"));
        }
    }
    Ok(())
}

fn is_image_encoder(name: &str) -> bool {
    name.starts_with(STUDENT) && name.as_bytes().get(STUDENT.len()) == Some(&b'.')
}

fn is_teacher(name: &str) -> bool {
    name.starts_with(TEACHER) && name.as_bytes().get(TEACHER.len()) == Some(&b'.')
}

/// Seed of the mask drawn at `step`.
pub fn step_seed(seed: u64, step: usize) -> u64 {
    seed ^ (step as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Result of one optimizer step, before parameters change.
pub struct StepLosses {
    pub total: f64,
    pub itc: f64,
    pub gc: f64,
    pub lc: f64,
    pub dist: f64,
}

/// Forward and backward for one batch. Returns the losses and the gradient
/// of every trainable parameter that took part.
pub fn compute_gradients(
    model: &Malm,
    batch: &PairedBatch<'_>,
    seed: u64,
) -> Result<(StepLosses, BTreeMap<String, Tensor>)> {
    let recipes = RecipeBatch::new(&batch.recipes, model.caps());
    let masks = model.sample_masks(&recipes, seed)?;
    let tape = Tape::new();
    let b = Binder::trainable(&tape, &model.params);
    let frozen = Binder::frozen(&tape, &model.params);
    let out = model.forward_train(&b, &frozen, batch, &recipes, &masks)?;
    if let Some(m) = &out.matching {
        check_attention_rows(m)?;
    }
    let total = total_loss(&out.losses, &model.cfg.objective)?;
    let l = out.losses;
    let losses = StepLosses {
        total: total.item(),
        itc: l.itc.item(),
        gc: l.gc.item(),
        lc: l.lc.item(),
        dist: l.dist.item(),
    };
    if !losses.total.is_finite() {
        return Err(MalmError::NonFinite {
            component: "L".into(),
        });
    }
    let grads = tape.backward(total);
    Ok((losses, b.collect(&grads)))
}

/// Applies clipped Adam updates to every parameter outside the teacher,
/// skipping the image encoder while it is frozen, then clamps the
/// temperature.
fn apply_step(
    params: &mut ParamStore,
    opt: &mut Adam,
    mut grads: BTreeMap<String, Tensor>,
    cfg: &MalmConfig,
    freeze_image: bool,
) -> Result<()> {
    grads.retain(|name, _| !is_teacher(name) && !(freeze_image && is_image_encoder(name)));
    clip_grad_norm(&mut grads, cfg.train.grad_clip);
    for (name, g) in &grads {
        let lr = if is_image_encoder(name) {
            cfg.train.lr_image_encoder
        } else {
            cfg.train.lr_main
        };
        let p = params
            .get_mut(name)
            .ok_or_else(|| MalmError::Invalid(format!("gradient for unknown `{name}`")))?;
        opt.update(name, p, g, lr);
    }
    if let Some(s) = params.get_mut(LOGIT_SCALE) {
        for v in s.data_mut() {
            *v = clamp_logit_scale(*v);
        }
    }
    Ok(())
}

/// Trains `model` on `train`. Each step: forward student and teacher, all
/// losses, one backward, Adam, then the teacher EMA. After every epoch the
/// model is scored on `val` (one bag) and the best state is kept. A
/// non-finite loss aborts with [`MalmError::Diverged`] carrying the last
/// good parameters.
pub fn train(
    model: Malm,
    train: &Dataset,
    val: Option<&Dataset>,
    on_step: &mut dyn FnMut(&MetricRecord),
) -> Result<TrainOutcome> {
    let cfg = model.cfg.clone();
    cfg.validate()?;
    if train.is_empty() {
        return invalid("training set is empty");
    }
    if train.len() < 2 {
        return invalid("training needs at least 2 pairs");
    }
    let plan = BatchPlan::new(train.len(), cfg.train.batch_size, cfg.seed, false)?;
    let mut model = model;
    let mut opt = Adam::new();
    let mut metrics = Vec::new();
    let mut validation = Vec::new();
    let mut best = model.clone();
    let mut best_r1 = f64::NEG_INFINITY;
    let mut best_epoch = None;
    let mut step = 0usize;
    let cap = if cfg.train.max_steps == 0 {
        usize::MAX
    } else {
        cfg.train.max_steps
    };

    'epochs: for epoch in 0..cfg.train.epochs {
        if step >= cap {
            break;
        }
        let freeze = epoch < cfg.train.freeze_image_encoder_epochs;
        for idx in plan.epoch(epoch) {
            if step >= cap {
                break 'epochs;
            }
            let batch = PairedBatch::gather(&train.pairs, &idx);
            let (losses, grads) = match compute_gradients(&model, &batch, step_seed(cfg.seed, step))
            {
                Ok(x) => x,
                Err(MalmError::NonFinite { component }) => {
                    log::error!("step {step}: {component} is not finite; aborting");
                    return Err(MalmError::Diverged {
                        step,
                        component,
                        last_good: Box::new(model),
                    });
                }
                Err(e) => return Err(e),
            };
            apply_step(&mut model.params, &mut opt, grads, &cfg, freeze)?;
            ema_update_prefix(
                &mut model.params,
                STUDENT,
                TEACHER,
                cfg.distill.ema_momentum,
            )?;
            let rec = MetricRecord {
                step,
                epoch,
                total: losses.total,
                itc: losses.itc,
                gc: losses.gc,
                lc: losses.lc,
                dist: losses.dist,
                lr: cfg.train.lr_main,
            };
            on_step(&rec);
            metrics.push(rec);
            step += 1;
        }
        if let Some(v) = val {
            let report = validate_epoch(&model, v)?;
            log::info!(
                "epoch {epoch} step {step}: val R@1 {:.1} medR {:.1}",
                report.r1,
                report.medr
            );
            if report.r1 > best_r1 {
                best_r1 = report.r1;
                best = model.clone();
                best_epoch = Some(epoch);
            }
            validation.push(ValidationRecord {
                epoch,
                step,
                report,
            });
        }
    }
    if val.is_none() {
        best = model.clone();
    }
    Ok(TrainOutcome {
        last: model,
        best,
        best_epoch,
        metrics,
        validation,
        steps: step,
    })
}

/// Single-bag image→recipe validation over the whole held-out set.
fn validate_epoch(model: &Malm, val: &Dataset) -> Result<RetrievalReport> {
    let mut m = model.clone();
    m.cfg.eval.bag_size = m.cfg.eval.bag_size.min(val.len());
    m.cfg.eval.n_bags = 1;
    evaluate(&m, val, Direction::ImageToRecipe)
}
