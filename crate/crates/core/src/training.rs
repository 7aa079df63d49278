//! Joint text + mask objective, Adam training loop and finite-difference
//! gradient checking.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{cross_entropy, mask_loss_value, Grads, ParamId, Tape, Var};
use crate::checkpoint::{self, TrainMeta};
use crate::dataset::append_jsonl;
use crate::error::{Error, Result};
use crate::grid::MaskGrid;
use crate::metrics::dsc;
use crate::model::{flatten_conversation, MedSegModel};
use crate::pg::seg_positions;
use crate::protocol::{count_seg_slots, Sample};
use crate::tokenizer::Vocab;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_t: f64,
    pub lambda_m: f64,
    pub w_bce: f64,
    pub w_dice: f64,
    pub dice_eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_t: 1.0,
            lambda_m: 1.0,
            w_bce: 2.0,
            w_dice: 0.5,
            dice_eps: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_t, self.lambda_m, self.w_bce, self.w_dice, self.dice_eps];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(format!("loss weights must be non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Mean next-token cross-entropy: logits row `i` predicts `ids[i + 1]`, which
/// counts iff `supervised[i + 1]`. No supervised position gives 0.
pub fn text_loss(logits: &Array2<f64>, ids: &[u32], supervised: &[bool]) -> Result<f64> {
    if ids.len() != supervised.len() || logits.nrows() != ids.len() {
        return Err(Error::shape(format!(
            "text_loss: {} logit rows, {} ids, {} flags",
            logits.nrows(),
            ids.len(),
            supervised.len()
        )));
    }
    let v = logits.ncols();
    let mut targets = vec![None; ids.len()];
    for i in 0..ids.len().saturating_sub(1) {
        if supervised[i + 1] {
            let t = ids[i + 1] as usize;
            if t >= v {
                return Err(Error::IdOutOfRange { id: t, size: v });
            }
            targets[i] = Some(t);
        }
    }
    Ok(cross_entropy(logits, &targets).0)
}

/// `(mean BCE with logits, soft dice loss)` for one slot.
pub fn bce_dice(logits: &MaskGrid, gt: &MaskGrid, dice_eps: f64) -> Result<(f64, f64)> {
    if logits.dims() != gt.dims() {
        return Err(Error::shape(format!(
            "mask_loss: logits {:?} vs target {:?}",
            logits.dims(),
            gt.dims()
        )));
    }
    let bce = mask_loss_value(logits.values(), gt.values(), 1.0, 0.0, dice_eps).0;
    let dice = mask_loss_value(logits.values(), gt.values(), 0.0, 1.0, dice_eps).0;
    Ok((bce, dice))
}

/// Mean over slots of `w_bce·BCE + w_dice·Dice`; 0 for no slots.
pub fn mask_loss(pred_logits: &[MaskGrid], gt: &[MaskGrid], w: &LossWeights) -> Result<f64> {
    if pred_logits.len() != gt.len() {
        return Err(Error::shape(format!(
            "mask_loss: {} predictions for {} targets",
            pred_logits.len(),
            gt.len()
        )));
    }
    if gt.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (p, g) in pred_logits.iter().zip(gt) {
        let (bce, dice) = bce_dice(p, g, w.dice_eps)?;
        total += w.w_bce * bce + w.w_dice * dice;
    }
    Ok(total / gt.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub text: f64,
    pub mask: f64,
}

pub fn combine(text: f64, mask: f64, w: &LossWeights) -> LossBreakdown {
    LossBreakdown {
        total: w.lambda_t * text + w.lambda_m * mask,
        text,
        mask,
    }
}

/// Deliberate gradient faults for negative controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradFault {
    #[default]
    None,
    /// Cut the gradient between the mask decoder and the language model.
    DetachSegStates,
}

struct SampleGraph {
    total: Var,
    loss: LossBreakdown,
    mask_logits: Vec<Array2<f64>>,
}

fn build_sample(
    model: &MedSegModel,
    t: &mut Tape,
    sample: &Sample,
    w: &LossWeights,
    fault: GradFault,
) -> Result<SampleGraph> {
    let flat = flatten_conversation(model.vocab(), &sample.conversation);
    let seg = seg_positions(&flat.ids);
    if seg.len() != sample.masks.len() {
        return Err(Error::Dataset(format!(
            "{}: {} slots but {} masks",
            sample.image_id,
            seg.len(),
            sample.masks.len()
        )));
    }
    let g = model.gcu_graph();
    let s_v = g.encode_image(t, &sample.image)?;
    let alpha = g.project_visual(t, s_v)?;
    let num_patches = t.value(alpha).nrows();
    let (states, logits) = g.llm_forward(t, alpha, &flat.ids)?;
    let mut targets = vec![None; num_patches];
    targets.extend(flat.targets());
    let text = t.cross_entropy(logits, &targets);
    let mut terms = vec![(text, w.lambda_t)];
    let mut mask_logits = Vec::new();
    let mut mask_value = 0.0;
    if !seg.is_empty() {
        let rows: Vec<usize> = seg.iter().map(|p| p + num_patches).collect();
        let mut seg_states = t.select_rows(states, &rows);
        if fault == GradFault::DetachSegStates {
            seg_states = t.detach(seg_states);
        }
        let prompts = model.pg_graph().project_prompt(t, seg_states);
        let (feats, fh, fw) = model.pg_graph().ground_encode(t, &sample.image)?;
        let ground = model.ground_graph(t, feats, (fh, fw), &sample.image);
        let per = 1.0 / seg.len() as f64;
        for (k, gt) in sample.masks.iter().enumerate() {
            if gt.dims() != sample.image.dims() {
                return Err(Error::shape(format!("{}: mask {k} does not match the image", sample.image_id)));
            }
            let q = t.select_rows(prompts, &[k]);
            let m = model.decode_on(t, &ground, q);
            let l = t.mask_loss(m, gt.values(), w.w_bce, w.w_dice, w.dice_eps);
            mask_value += per * t.scalar(l);
            terms.push((l, w.lambda_m * per));
            mask_logits.push(t.value(m).clone());
        }
    }
    let total = t.weighted_sum(&terms);
    let mut loss = combine(t.scalar(text), mask_value, w);
    loss.total = t.scalar(total);
    Ok(SampleGraph {
        total,
        loss,
        mask_logits,
    })
}

/// Loss of one sample without gradients.
pub fn sample_loss(model: &MedSegModel, sample: &Sample, w: &LossWeights) -> Result<LossBreakdown> {
    let mut t = Tape::new(model.params());
    Ok(build_sample(model, &mut t, sample, w, GradFault::None)?.loss)
}

/// Mean loss over a batch: `λ_t·L_t + λ_m·L_m` with its components.
pub fn total_loss(model: &MedSegModel, batch: &[Sample], w: &LossWeights) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let mut acc = LossBreakdown::default();
    for s in batch {
        let l = sample_loss(model, s, w)?;
        acc.total += l.total;
        acc.text += l.text;
        acc.mask += l.mask;
    }
    let n = batch.len() as f64;
    Ok(LossBreakdown {
        total: acc.total / n,
        text: acc.text / n,
        mask: acc.mask / n,
    })
}

/// Loss, gradients and teacher-forced DSC per slot for one sample.
pub fn sample_gradients(
    model: &MedSegModel,
    sample: &Sample,
    w: &LossWeights,
    fault: GradFault,
) -> Result<(LossBreakdown, Grads, Vec<f64>)> {
    let mut t = Tape::new(model.params());
    let g = build_sample(model, &mut t, sample, w, fault)?;
    let grads = t.backward(g.total);
    let dscs = g
        .mask_logits
        .into_iter()
        .zip(&sample.masks)
        .map(|(m, gt)| dsc(&MaskGrid::logits(m).binarized(), gt))
        .collect::<Result<Vec<_>>>()?;
    Ok((g.loss, grads, dscs))
}

/// Teacher-forced DSC of every slot in `samples`, in order.
pub fn teacher_forced_dsc(model: &MedSegModel, samples: &[Sample]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for s in samples {
        let masks = model.teacher_forced_masks(&s.image, &s.conversation)?;
        for (p, g) in masks.iter().zip(&s.masks) {
            out.push(dsc(p, g)?);
        }
    }
    Ok(out)
}

/// Vocabulary covering every class name and conversation word in `samples`.
pub fn dataset_vocab(samples: &[Sample]) -> Vocab {
    let words: Vec<String> = samples
        .iter()
        .flat_map(|s| {
            s.class_names
                .iter()
                .cloned()
                .chain(s.conversation.turns().iter().map(|t| t.text()))
        })
        .collect();
    Vocab::build(&words)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Full-set DSC and a checkpoint every this many steps (0 disables).
    pub eval_every: usize,
    /// Receives `metrics.jsonl` and `model.ckpt`.
    pub checkpoint_dir: Option<PathBuf>,
    pub weights: LossWeights,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub warmup_steps: usize,
    /// Cosine decay from `learning_rate` down to this fraction of it.
    pub final_lr_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 4,
            learning_rate: 1e-3,
            grad_clip: 1.0,
            seed: 0,
            eval_every: 0,
            checkpoint_dir: None,
            weights: LossWeights::default(),
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            warmup_steps: 20,
            final_lr_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let ok = self.batch_size > 0
            && self.learning_rate > 0.0
            && self.grad_clip > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.adam_eps > 0.0
            && (0.0..=1.0).contains(&self.final_lr_fraction);
        if !ok {
            return Err(Error::InvalidArgument(format!("invalid training config: {self:?}")));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.learning_rate * (self.final_lr_fraction + (1.0 - self.final_lr_fraction) * cos)
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss_total: f64,
    pub loss_text: f64,
    pub loss_mask: f64,
    /// Mean teacher-forced DSC over the batch's slots; `None` without slots.
    pub dsc_train: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<StepRecord>,
    /// Mean teacher-forced DSC over all training slots after the last step.
    pub final_dsc: Option<f64>,
}

/// Adam with decoupled state per parameter tensor.
pub struct Adam {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(model: &MedSegModel, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Array2<f64>> = model.params().iter().map(|(_, v)| Array2::zeros(v.dim())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn step(&mut self, model: &mut MedSegModel, grads: &Grads, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (id, g) in grads.iter() {
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = model.params_mut().get_mut(id);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

fn dump_nonfinite(dir: &Path, step: usize, ids: &[&str], loss: &LossBreakdown, model: &MedSegModel) -> Result<PathBuf> {
    let bad: Vec<&str> = model
        .params()
        .iter()
        .filter(|(_, v)| v.iter().any(|x| !x.is_finite()))
        .map(|(n, _)| n)
        .collect();
    let dump = serde_json::json!({
        "step": step,
        "samples": ids,
        "loss_total": format!("{}", loss.total),
        "loss_text": format!("{}", loss.text),
        "loss_mask": format!("{}", loss.mask),
        "non_finite_params": bad,
    });
    let path = dir.join("nonfinite_dump.json");
    crate::dataset::write_file(&path, serde_json::to_string_pretty(&dump)?.as_bytes())?;
    Ok(path)
}

/// Trains `model` in place. Batches are drawn from per-epoch shuffles seeded
/// by `cfg.seed`, so a serial run is bit-reproducible.
pub fn train(model: &mut MedSegModel, samples: &[Sample], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let metrics_path = match &cfg.checkpoint_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("metrics.jsonl");
            std::fs::write(&p, b"").map_err(|e| Error::io(&p, e))?;
            Some(p)
        }
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut order: Vec<usize> = Vec::new();
    let mut history = Vec::with_capacity(cfg.steps);
    let batch = cfg.batch_size.min(samples.len());
    for step in 0..cfg.steps {
        let mut picked = Vec::with_capacity(batch);
        while picked.len() < batch {
            if order.is_empty() {
                order = (0..samples.len()).collect();
                order.shuffle(&mut rng);
            }
            picked.push(order.pop().expect("non-empty"));
        }
        let mut grads = Grads::zeros_like(model.params());
        let mut loss = LossBreakdown::default();
        let mut dscs = Vec::new();
        for &i in &picked {
            let (l, g, d) = sample_gradients(model, &samples[i], &cfg.weights, GradFault::None)?;
            grads.add_assign(&g);
            loss.total += l.total / batch as f64;
            loss.text += l.text / batch as f64;
            loss.mask += l.mask / batch as f64;
            dscs.extend(d);
        }
        if !loss.total.is_finite() {
            let ids: Vec<&str> = picked.iter().map(|&i| samples[i].image_id.as_str()).collect();
            let detail = match &cfg.checkpoint_dir {
                Some(dir) => format!("dump written to {}", dump_nonfinite(dir, step, &ids, &loss, model)?.display()),
                None => format!("samples {ids:?}, loss {loss:?}"),
            };
            return Err(Error::NonFiniteLoss { step, detail });
        }
        grads.scale(1.0 / batch as f64);
        let norm = grads.global_norm();
        if norm > cfg.grad_clip {
            grads.scale(cfg.grad_clip / norm);
        }
        adam.step(model, &grads, cfg.lr_at(step));
        let record = StepRecord {
            step,
            loss_total: loss.total,
            loss_text: loss.text,
            loss_mask: loss.mask,
            dsc_train: crate::metrics::mean_std(&dscs).map(|v| v.0),
        };
        if let Some(p) = &metrics_path {
            append_jsonl(p, &record)?;
        }
        log::debug!("step {step}: {record:?}");
        history.push(record);
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
            if let Some(dir) = &cfg.checkpoint_dir {
                let meta = TrainMeta { step: step + 1, seed: cfg.seed };
                checkpoint::save(model, &meta, &dir.join("model.ckpt"))?;
            }
            let d = crate::metrics::mean_std(&teacher_forced_dsc(model, samples)?).map(|v| v.0);
            log::info!("step {}: loss {:.4}, train dsc {:?}", step + 1, loss.total, d);
        }
    }
    let final_dsc = crate::metrics::mean_std(&teacher_forced_dsc(model, samples)?).map(|v| v.0);
    if let Some(dir) = &cfg.checkpoint_dir {
        let meta = TrainMeta { step: cfg.steps, seed: cfg.seed };
        checkpoint::save(model, &meta, &dir.join("model.ckpt"))?;
    }
    Ok(TrainReport { history, final_dsc })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub epsilon: f64,
    pub coordinates: usize,
    pub seed: u64,
    pub fault: GradFault,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            coordinates: 200,
            seed: 0,
            fault: GradFault::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordCheck {
    pub param: String,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checks: Vec<CoordCheck>,
}

/// Floor on the relative-error denominator so that coordinates whose true
/// gradient is ~0 are judged by absolute error instead.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(GRAD_CHECK_FLOOR)
}

/// Compares the analytic gradient of the total loss with central differences
/// at randomly drawn coordinates, at least one in every parameter tensor.
pub fn grad_check(model: &MedSegModel, sample: &Sample, w: &LossWeights, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if !(cfg.epsilon > 0.0) || !cfg.epsilon.is_finite() {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {}", cfg.epsilon)));
    }
    let (_, grads, _) = sample_gradients(model, sample, w, cfg.fault)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ids: Vec<ParamId> = model.params().ids().collect();
    let mut coords: Vec<(ParamId, usize)> = ids
        .iter()
        .map(|&id| (id, rng.random_range(0..model.params().get(id).len())))
        .collect();
    let total = model.params().num_scalars();
    while coords.len() < cfg.coordinates {
        let mut k = rng.random_range(0..total);
        for &id in &ids {
            let n = model.params().get(id).len();
            if k < n {
                coords.push((id, k));
                break;
            }
            k -= n;
        }
    }
    let mut probe = model.clone();
    let mut checks = Vec::with_capacity(coords.len());
    for (id, flat) in coords {
        let cols = probe.params().get(id).ncols();
        let (row, col) = (flat / cols, flat % cols);
        let orig = probe.params().get(id)[[row, col]];
        probe.params_mut().get_mut(id)[[row, col]] = orig + cfg.epsilon;
        let plus = sample_loss(&probe, sample, w)?.total;
        probe.params_mut().get_mut(id)[[row, col]] = orig - cfg.epsilon;
        let minus = sample_loss(&probe, sample, w)?.total;
        probe.params_mut().get_mut(id)[[row, col]] = orig;
        let numeric = (plus - minus) / (2.0 * cfg.epsilon);
        let analytic = grads.at(id, row, col);
        checks.push(CoordCheck {
            param: model.params().name(id).to_string(),
            row,
            col,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    let max_rel_error = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_error, checks })
}

/// Slot count of every sample equals its mask count.
pub fn check_slot_counts(samples: &[Sample]) -> Result<()> {
    for s in samples {
        let slots = count_seg_slots(&s.conversation);
        if slots != s.masks.len() {
            return Err(Error::Dataset(format!("{}: {slots} slots, {} masks", s.image_id, s.masks.len())));
        }
    }
    Ok(())
}
