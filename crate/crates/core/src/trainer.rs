//! Base-model pre-training and defect-concept fine-tuning.
//!
//! Each optimizer step draws its randomness from a stream derived from
//! `(seed, phase, step)`, so a run resumed from a checkpoint continues with
//! exactly the values an uninterrupted run would have produced.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{diffuse, sample_timestep, NoiseSchedule};
use crate::error::{ensure, Error, Result};
use crate::image::{Image, Mask};
use crate::losses::{
    adjusted_mask, attention_loss, combined_loss, defect_loss, head_average_backward, object_loss, plain_mse,
    random_box_mask, BoxMaskParams, LossLayout, LossTerms, LossWeights,
};
use crate::model::{attention_stack, Checkpoint, DenoiserModel, LossRecord, PromptTemplate, TrainingScope};
use crate::nn::{Adam, Graph, ParamGroup, ParamId, Tensor};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    PretrainBase,
    FinetuneDefect,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub warmup_steps: usize,
    pub lr_unet: f32,
    pub lr_conditioner: f32,
    pub pretrain_steps: usize,
    pub pretrain_batch_size: usize,
    pub pretrain_warmup_steps: usize,
    pub pretrain_lr: f32,
    pub weights: LossWeights,
    pub boxes: BoxMaskParams,
    pub resize_jitter: [f64; 2],
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            steps: 500,
            warmup_steps: 100,
            lr_unet: 2e-4,
            lr_conditioner: 4e-5,
            pretrain_steps: 3000,
            pretrain_batch_size: 8,
            pretrain_warmup_steps: 100,
            pretrain_lr: 1e-3,
            weights: LossWeights::default(),
            boxes: BoxMaskParams::default(),
            resize_jitter: [1.0, 1.125],
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Full-length fine-tuning schedule (2000 steps).
    pub fn full_length() -> Self {
        Self {
            steps: 2000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size >= 1 && self.pretrain_batch_size >= 1, Config, "train batch sizes must be >= 1");
        ensure!(self.lr_unet > 0.0 && self.lr_conditioner > 0.0 && self.pretrain_lr > 0.0, Config, "learning rates must be > 0");
        let [lo, hi] = self.resize_jitter;
        ensure!(1.0 <= lo && lo <= hi && hi <= 2.0, Config, "train.resize_jitter must satisfy 1 <= lo <= hi <= 2");
        self.weights.validate()?;
        self.boxes.validate()?;
        Ok(())
    }

    /// Warmup length, capped at the run length so short runs still reach
    /// the full rate.
    fn warmup(&self, mode: TrainMode) -> usize {
        let w = match mode {
            TrainMode::PretrainBase => self.pretrain_warmup_steps,
            TrainMode::FinetuneDefect => self.warmup_steps,
        };
        w.min(self.total_steps(mode))
    }

    pub fn total_steps(&self, mode: TrainMode) -> usize {
        match mode {
            TrainMode::PretrainBase => self.pretrain_steps,
            TrainMode::FinetuneDefect => self.steps,
        }
    }

    /// Learning rate of `group` at 1-based `step`, including linear warmup.
    pub fn learning_rate(&self, mode: TrainMode, group: ParamGroup, step: u64) -> f32 {
        let base = match (mode, group) {
            (TrainMode::PretrainBase, ParamGroup::Backbone | ParamGroup::Conditioner) => self.pretrain_lr,
            (TrainMode::FinetuneDefect, ParamGroup::UnetAdapter) => self.lr_unet,
            (TrainMode::FinetuneDefect, ParamGroup::ConditionerAdapter) => self.lr_conditioner,
            _ => 0.0,
        };
        base * warmup_factor(step, self.warmup(mode))
    }
}

/// `min(1, step / warmup)` for 1-based steps.
pub fn warmup_factor(step: u64, warmup: usize) -> f32 {
    if warmup == 0 {
        1.0
    } else {
        (step as f32 / warmup as f32).min(1.0)
    }
}

/// One training image; fine-tuning requires the defect mask.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub image: Image,
    pub mask: Option<Mask>,
    pub object: String,
}

/// Configuration echo stored inside checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainEcho {
    pub mode: TrainMode,
    pub category: Option<String>,
    pub config: TrainConfig,
}

/// Resizes image and mask by a common factor drawn from `jitter`, then crops
/// a random window of the original size.
pub fn augment<R: Rng + ?Sized>(image: &Image, mask: &Mask, rng: &mut R, jitter: [f64; 2]) -> (Image, Mask) {
    image.check_mask(mask);
    let [lo, hi] = jitter;
    let f = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let (h, w) = (image.height, image.width);
    let nh = ((h as f64 * f).round() as usize).max(h);
    let nw = ((w as f64 * f).round() as usize).max(w);
    if nh == h && nw == w {
        return (image.clone(), mask.clone());
    }
    let big = image.resize(nh, nw);
    let bm = mask.resize(nh, nw);
    let top = rng.gen_range(0..=nh - h);
    let left = rng.gen_range(0..=nw - w);
    (big.crop(top, left, h, w), bm.crop(top, left, h, w))
}

fn mask_batch(masks: &[Mask]) -> Tensor {
    let (h, w) = (masks[0].height, masks[0].width);
    let mut data = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        data.extend_from_slice(&m.data);
    }
    Tensor::new(&[masks.len(), 1, h, w], data)
}

fn cat_batch(parts: &[&Tensor]) -> Tensor {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|p| p.dim(0)).sum();
    let mut data = Vec::with_capacity(parts.iter().map(|p| p.numel()).sum());
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::new(&shape, data)
}

fn backgrounds(model: &DenoiserModel, images: &[Image], masks: &[Mask]) -> Result<Tensor> {
    let bg: Vec<Image> = images.iter().zip(masks).map(|(i, m)| i.masked_background(m)).collect();
    model.codec.encode(&Image::batch(&bg.iter().collect::<Vec<_>>()))
}

fn noisy_latents(x0: &Tensor, ts: &[usize], eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    let per = x0.numel() / x0.dim(0);
    let mut out = Vec::with_capacity(x0.numel());
    for (i, &t) in ts.iter().enumerate() {
        out.extend(diffuse(&x0.data()[i * per..(i + 1) * per], t, &eps.data()[i * per..(i + 1) * per], schedule)?);
    }
    Ok(Tensor::new(x0.shape(), out))
}

/// Gradients summed per parameter.
pub type ParamGrads = BTreeMap<ParamId, Tensor>;

fn collect(grads: &crate::nn::Gradients) -> ParamGrads {
    let mut out: ParamGrads = BTreeMap::new();
    for (id, g) in grads.params() {
        match out.get_mut(&id) {
            Some(acc) => acc.add_assign(g),
            None => {
                out.insert(id, g.clone());
            }
        }
    }
    out
}

fn check_finite(record: &LossRecord) -> Result<()> {
    for (name, v) in [
        ("L_def", record.defect),
        ("L_obj", record.object),
        ("L_attn", record.attention),
        ("total", record.total),
    ] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name} is {v} at step {}", record.step)));
        }
    }
    Ok(())
}

fn draw_batch<'a>(rng: &mut ChaCha8Rng, data: &'a [TrainExample], n: usize) -> Vec<&'a TrainExample> {
    (0..n).map(|_| &data[rng.gen_range(0..data.len())]).collect()
}

/// Loss values and parameter gradients of one dual-pipeline fine-tuning
/// step (defect prompt with the defect mask, object prompt with a random
/// box mask), sharing `t`, `eps` and `x_t` between the pipelines.
pub fn finetune_gradients(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    data: &[TrainExample],
    config: &TrainConfig,
    step: u64,
) -> Result<(LossRecord, ParamGrads)> {
    ensure!(!data.is_empty(), Data, "no reference pairs to fine-tune on");
    let mut r = rng::stream(config.seed, &[rng::label("finetune"), step]);
    let b = config.batch_size;
    let batch = draw_batch(&mut r, data, b);
    let mut images = Vec::with_capacity(b);
    let mut masks = Vec::with_capacity(b);
    for ex in &batch {
        let m = ex
            .mask
            .as_ref()
            .ok_or_else(|| Error::Data("fine-tuning example without a defect mask".into()))?;
        let (i, m) = augment(&ex.image, m, &mut r, config.resize_jitter);
        images.push(i);
        masks.push(m);
    }
    let (h, w) = (images[0].height, images[0].width);
    let rand_masks: Vec<Mask> = (0..b).map(|_| random_box_mask(&mut r, &config.boxes, h, w)).collect();
    let x0 = model.codec.encode(&Image::batch(&images.iter().collect::<Vec<_>>()))?;
    let ts: Vec<usize> = (0..b).map(|_| sample_timestep(&mut r, schedule)).collect();
    let eps = Tensor::randn(&mut r, x0.shape(), 1.0);
    let x_t = noisy_latents(&x0, &ts, &eps, schedule)?;

    let m_def = model.latent_mask(&mask_batch(&masks))?;
    let m_rand = model.latent_mask(&mask_batch(&rand_masks))?;
    let in_def = model.build_inpaint_input(&x_t, &backgrounds(model, &images, &masks)?, &m_def)?;
    let in_obj = model.build_inpaint_input(&x_t, &backgrounds(model, &images, &rand_masks)?, &m_rand)?;
    let input = cat_batch(&[&in_def, &in_obj]);
    let mut prompts = Vec::with_capacity(2 * b);
    for _ in &batch {
        prompts.push(model.prompt(PromptTemplate::Defect, "")?);
    }
    for ex in &batch {
        prompts.push(model.prompt(PromptTemplate::Object, &ex.object)?);
    }
    let token = prompts[b]
        .concept_position
        .ok_or_else(|| Error::InvalidArgument("object prompt lacks the concept token".into()))?;
    let all_ts: Vec<usize> = ts.iter().chain(ts.iter()).copied().collect();

    let mut g = Graph::new();
    let xv = g.input(input, false);
    let (pred, caps) = model.forward(&mut g, xv, &all_ts, &prompts, true, Some(&mut r));
    let pv = g.value(pred);
    let half = pv.numel() / 2;
    let (lc, lh, lw) = (x0.dim(1), x0.dim(2), x0.dim(3));
    let layout = LossLayout {
        batch: b,
        channels: lc,
        pixels: lh * lw,
    };
    let wts = &config.weights;
    let (l_def, g_def) = defect_loss(eps.data(), &pv.data()[..half], m_def.data(), layout)?;
    let m_adj = adjusted_mask(m_def.data(), wts.alpha)?;
    let (l_obj, g_obj) = object_loss(eps.data(), &pv.data()[half..], &m_adj, layout)?;
    let stack = attention_stack(&g, &caps, b..2 * b);
    let (l_attn, g_attn) = attention_loss(&stack, token, m_def.data(), lh, lw)?;

    let terms = LossTerms {
        defect: l_def as f64,
        object: l_obj as f64,
        attention: l_attn as f64,
    };
    let record = LossRecord {
        step,
        defect: terms.defect,
        object: terms.object,
        attention: terms.attention,
        total: combined_loss(terms, wts).unwrap_or(f64::NAN),
    };
    check_finite(&record)?;

    let mut seed_pred: Vec<f32> = g_def.iter().map(|v| v * wts.lambda_def as f32).collect();
    seed_pred.extend(g_obj.iter().map(|v| v * wts.lambda_obj as f32));
    let mut seeds = vec![(pred, Tensor::new(g.value(pred).shape(), seed_pred))];
    for (cap, gl) in caps.iter().zip(&g_attn) {
        let q = cap.height * cap.width;
        let scaled: Vec<f32> = gl.iter().map(|v| v * wts.lambda_attn as f32).collect();
        let back = head_average_backward(&scaled, b, cap.heads, q, cap.tokens);
        let mut full = vec![0.0f32; back.len()];
        full.extend(back);
        seeds.push((cap.probs, Tensor::new(g.value(cap.probs).shape(), full)));
    }
    let grads = g.backward(seeds);
    Ok((record, collect(&grads)))
}

/// Loss and gradients of one base pre-training step: random-box inpainting
/// of normal images with the plain object prompt and the unweighted
/// denoising objective.
pub fn pretrain_gradients(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    data: &[TrainExample],
    config: &TrainConfig,
    step: u64,
) -> Result<(LossRecord, ParamGrads)> {
    ensure!(!data.is_empty(), Data, "no normal images to pre-train on");
    let mut r = rng::stream(config.seed, &[rng::label("pretrain"), step]);
    let b = config.pretrain_batch_size;
    let batch = draw_batch(&mut r, data, b);
    let mut images = Vec::with_capacity(b);
    let mut masks = Vec::with_capacity(b);
    for ex in &batch {
        let (h, w) = (ex.image.height, ex.image.width);
        let (i, _) = augment(&ex.image, &Mask::zeros(h, w), &mut r, config.resize_jitter);
        masks.push(random_box_mask(&mut r, &config.boxes, h, w));
        images.push(i);
    }
    let x0 = model.codec.encode(&Image::batch(&images.iter().collect::<Vec<_>>()))?;
    let ts: Vec<usize> = (0..b).map(|_| sample_timestep(&mut r, schedule)).collect();
    let eps = Tensor::randn(&mut r, x0.shape(), 1.0);
    let x_t = noisy_latents(&x0, &ts, &eps, schedule)?;
    let m = model.latent_mask(&mask_batch(&masks))?;
    let input = model.build_inpaint_input(&x_t, &backgrounds(model, &images, &masks)?, &m)?;
    let prompts = batch
        .iter()
        .map(|ex| model.prompt(PromptTemplate::Plain, &ex.object))
        .collect::<Result<Vec<_>>>()?;
    let mut g = Graph::new();
    let xv = g.input(input, false);
    let (pred, _) = model.forward(&mut g, xv, &ts, &prompts, true, Some(&mut r));
    let layout = LossLayout {
        batch: b,
        channels: x0.dim(1),
        pixels: x0.dim(2) * x0.dim(3),
    };
    let (loss, grad) = plain_mse(eps.data(), g.value(pred).data(), layout)?;
    let record = LossRecord {
        step,
        defect: loss as f64,
        total: loss as f64,
        ..Default::default()
    };
    check_finite(&record)?;
    let grads = g.backward(vec![(pred, Tensor::new(g.value(pred).shape(), grad))]);
    Ok((record, collect(&grads)))
}

/// A resumable training run.
#[derive(Clone, Debug)]
pub struct Session {
    pub mode: TrainMode,
    pub category: Option<String>,
    pub config: TrainConfig,
    pub model: DenoiserModel,
    pub schedule: NoiseSchedule,
    pub optimizer: Adam,
    pub step: u64,
    pub history: Vec<LossRecord>,
}

impl Session {
    /// Starts pre-training a freshly initialised model with adapters off.
    pub fn pretrain(mut model: DenoiserModel, schedule: NoiseSchedule, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        model.set_adapters_enabled(false);
        model.set_training_scope(TrainingScope::Pretrain);
        Ok(Self {
            mode: TrainMode::PretrainBase,
            category: None,
            config: config.clone(),
            model,
            schedule,
            optimizer: Adam::default(),
            step: 0,
            history: Vec::new(),
        })
    }

    /// Starts fine-tuning adapters on top of a base checkpoint.
    pub fn finetune(base: &Checkpoint, category: Option<String>, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        ensure!(!base.model.is_merged(), InvalidArgument, "base checkpoint has merged adapters");
        let mut model = base.model.clone();
        model.set_adapters_enabled(true);
        model.set_training_scope(TrainingScope::Finetune);
        Ok(Self {
            mode: TrainMode::FinetuneDefect,
            category,
            config: config.clone(),
            model,
            schedule: base.schedule.clone(),
            optimizer: Adam::default(),
            step: 0,
            history: Vec::new(),
        })
    }

    /// Continues a run from one of its own checkpoints.
    pub fn resume(ckpt: Checkpoint) -> Result<Self> {
        let echo: TrainEcho = serde_json::from_value(ckpt.train_config.clone())
            .map_err(|e| Error::Data(format!("checkpoint has no usable training echo: {e}")))?;
        let mut model = ckpt.model;
        model.set_training_scope(match echo.mode {
            TrainMode::PretrainBase => TrainingScope::Pretrain,
            TrainMode::FinetuneDefect => TrainingScope::Finetune,
        });
        Ok(Self {
            mode: echo.mode,
            category: echo.category,
            config: echo.config,
            model,
            schedule: ckpt.schedule,
            optimizer: ckpt.optimizer.unwrap_or_default(),
            step: ckpt.step,
            history: ckpt.loss_history,
        })
    }

    pub fn total_steps(&self) -> u64 {
        self.config.total_steps(self.mode) as u64
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    /// Runs one optimizer step.
    pub fn step(&mut self, data: &[TrainExample]) -> Result<LossRecord> {
        let s = self.step + 1;
        let (record, grads) = match self.mode {
            TrainMode::PretrainBase => pretrain_gradients(&self.model, &self.schedule, data, &self.config, s)?,
            TrainMode::FinetuneDefect => finetune_gradients(&self.model, &self.schedule, data, &self.config, s)?,
        };
        let (config, mode) = (&self.config, self.mode);
        self.optimizer
            .step(&mut self.model.store, grads.iter().map(|(id, g)| (*id, g)), |group| {
                config.learning_rate(mode, group, s)
            });
        self.step = s;
        self.history.push(record);
        Ok(record)
    }

    /// Steps until `until` (capped at the configured total).
    pub fn run_until(&mut self, data: &[TrainExample], until: u64, mut progress: impl FnMut(&LossRecord)) -> Result<()> {
        let end = until.min(self.total_steps());
        while self.step < end {
            let rec = self.step(data)?;
            progress(&rec);
        }
        Ok(())
    }

    pub fn echo(&self) -> TrainEcho {
        TrainEcho {
            mode: self.mode,
            category: self.category.clone(),
            config: self.config.clone(),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            schedule: self.schedule.clone(),
            step: self.step,
            train_config: serde_json::to_value(self.echo()).expect("train echo serializes"),
            loss_history: self.history.clone(),
            optimizer: Some(self.optimizer.clone()),
        }
    }
}

/// Pre-trains the base inpainting model on normal images.
pub fn pretrain_base(
    model: DenoiserModel,
    normals: &[TrainExample],
    schedule: NoiseSchedule,
    config: &TrainConfig,
) -> Result<Checkpoint> {
    let mut s = Session::pretrain(model, schedule, config)?;
    s.run_until(normals, u64::MAX, |_| {})?;
    Ok(s.checkpoint())
}

/// Fine-tunes adapters on the reference pairs of one defect category.
pub fn train_defect_concept(
    base: &Checkpoint,
    references: &[TrainExample],
    category: Option<String>,
    config: &TrainConfig,
) -> Result<Checkpoint> {
    ensure!(!references.is_empty(), Data, "empty reference set");
    let mut s = Session::finetune(base, category, config)?;
    s.run_until(references, u64::MAX, |_| {})?;
    Ok(s.checkpoint())
}

pub fn loss_csv(history: &[LossRecord]) -> String {
    let mut out = String::from("step,L_def,L_obj,L_attn,total\n");
    for r in history {
        let _ = writeln!(out, "{},{},{},{},{}", r.step, r.defect, r.object, r.attention, r.total);
    }
    out
}

pub fn write_loss_csv(history: &[LossRecord], path: &Path) -> Result<()> {
    std::fs::write(path, loss_csv(history)).map_err(|e| Error::io(path, e))
}

/// Mean of `f` over the first and last `n` records.
pub fn head_tail_means(history: &[LossRecord], n: usize, f: impl Fn(&LossRecord) -> f64) -> (f64, f64) {
    let n = n.clamp(1, history.len().max(1));
    let mean = |s: &[LossRecord]| s.iter().map(&f).sum::<f64>() / s.len().max(1) as f64;
    (mean(&history[..n.min(history.len())]), mean(&history[history.len().saturating_sub(n)..]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn warmup_is_linear_then_flat() {
        let c = TrainConfig::default();
        for s in 1..=100u64 {
            let lr = c.learning_rate(TrainMode::FinetuneDefect, ParamGroup::UnetAdapter, s);
            assert!((lr - s as f32 / 100.0 * 2e-4).abs() <= 1e-12);
        }
        assert_eq!(c.learning_rate(TrainMode::FinetuneDefect, ParamGroup::UnetAdapter, 400), 2e-4);
        assert_eq!(c.learning_rate(TrainMode::FinetuneDefect, ParamGroup::Backbone, 400), 0.0);
        assert_eq!(c.learning_rate(TrainMode::FinetuneDefect, ParamGroup::ConditionerAdapter, 50), 2e-5);
    }

    #[test]
    fn unit_jitter_is_identity() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let img = Image::new(3, 4, 4, (0..48).map(|v| v as f32 / 48.0).collect());
        let mut m = Mask::zeros(4, 4);
        m.set(1, 2, 1.0);
        let (i2, m2) = augment(&img, &m, &mut r, [1.0, 1.0]);
        assert_eq!(i2, img);
        assert_eq!(m2, m);
    }

    #[test]
    fn jitter_keeps_size_and_mask_range() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let img = Image::filled(3, 32, 32, 0.2);
        let mut m = Mask::zeros(32, 32);
        for y in 10..20 {
            for x in 12..18 {
                m.set(y, x, 1.0);
            }
        }
        for _ in 0..20 {
            let (i2, m2) = augment(&img, &m, &mut r, [1.125, 1.125]);
            assert_eq!((i2.height, i2.width, m2.height, m2.width), (32, 32, 32, 32));
            assert!(m2.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn short_runs_reach_full_rate() {
        let c = TrainConfig {
            steps: 10,
            warmup_steps: 20,
            ..Default::default()
        };
        c.validate().unwrap();
        let lr = c.learning_rate(TrainMode::FinetuneDefect, ParamGroup::UnetAdapter, 10);
        assert!((lr - 2e-4).abs() <= 1e-12);
    }

    #[test]
    fn csv_has_one_row_per_step() {
        let h: Vec<LossRecord> = (1..=3).map(|s| LossRecord { step: s, ..Default::default() }).collect();
        let csv = loss_csv(&h);
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with("step,L_def,L_obj,L_attn,total"));
    }
}
