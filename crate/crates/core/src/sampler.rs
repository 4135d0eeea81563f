//! Mask-guided DDIM inpainting with per-step background replacement,
//! fidelity scoring inside the mask and low-fidelity candidate selection.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, DatasetRecord, Role, Split};
use crate::diffusion::{ddim_step, diffuse, NoiseSchedule};
use crate::error::{ensure, Error, Result};
use crate::eval::{FeatureExtractor, PATCH_SIZE};
use crate::image::{Image, Mask};
use crate::model::{DenoiserModel, PromptTemplate, TokenizedPrompt};
use crate::nn::Tensor;
use crate::rng;

/// Reported PSNR for identical masked regions.
pub const PSNR_CAP: f64 = 99.0;
/// Peak-to-peak range of model-space pixels.
pub const SIGNAL_RANGE: f64 = 2.0;
pub const SSIM_WINDOW: usize = 7;
pub const GENERATION_RECORDS_FILE: &str = "generation_records.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMetric {
    Psnr,
    Ssim,
    Perceptual,
}

impl SelectionMetric {
    /// Whether larger scores mean a more faithful reconstruction.
    pub fn higher_is_faithful(self) -> bool {
        !matches!(self, SelectionMetric::Perceptual)
    }
}

impl std::str::FromStr for SelectionMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "psnr" => Ok(Self::Psnr),
            "ssim" => Ok(Self::Ssim),
            "perceptual" => Ok(Self::Perceptual),
            _ => Err(Error::InvalidArgument(format!("unknown selection metric {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    pub steps: usize,
    pub candidates: usize,
    pub metric: SelectionMetric,
    /// Generated pairs per category.
    pub count: usize,
    /// Independent selections per pair; groups of these feed the diversity
    /// metric.
    pub repeats: usize,
    pub prompt: PromptTemplate,
    /// Pairs denoised together in one batch.
    pub pairs_per_batch: usize,
    pub save_candidates: bool,
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            candidates: 8,
            metric: SelectionMetric::Perceptual,
            count: 32,
            repeats: 1,
            prompt: PromptTemplate::Object,
            pairs_per_batch: 2,
            save_candidates: true,
            seed: 0,
        }
    }
}

impl GenerateConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.steps >= 1, Config, "generate.steps must be at least 1");
        ensure!(self.candidates >= 1, Config, "generate.candidates must be at least 1");
        ensure!(self.count >= 1, Config, "generate.count must be at least 1");
        ensure!(self.repeats >= 1, Config, "generate.repeats must be at least 1");
        ensure!(self.pairs_per_batch >= 1, Config, "generate.pairs_per_batch must be at least 1");
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub category: String,
    pub normal_id: String,
    pub mask_id: String,
    pub object: String,
    pub steps: usize,
    pub candidates: usize,
    pub seed: u64,
    pub metric: SelectionMetric,
}

impl GenerationRequest {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.candidates >= 1, InvalidArgument, "a request needs at least one candidate");
        ensure!(self.steps >= 1, InvalidArgument, "a request needs at least one denoising step");
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub seed_offset: u64,
    pub seed: u64,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub request: GenerationRequest,
    pub candidates: Vec<CandidateRecord>,
    pub selected: usize,
    /// Id of the emitted dataset record.
    pub output_id: String,
    pub repeat: usize,
}

/// Seed of candidate `k` of a request; independent of the candidate count.
pub fn candidate_seed(request_seed: u64, k: u64) -> u64 {
    rng::derive_seed(request_seed, &[rng::label("candidate"), k])
}

/// One inpainting trajectory.
#[derive(Clone, Debug)]
pub struct InpaintJob<'a> {
    pub image: &'a Image,
    pub mask: &'a Mask,
    pub prompt: TokenizedPrompt,
    pub seed: u64,
}

fn blend(x: &mut [f32], bg: &[f32], mask: &[f32], channels: usize) {
    let plane = mask.len();
    for (c, chunk) in x.chunks_mut(plane).enumerate().take(channels) {
        let b = &bg[c * plane..(c + 1) * plane];
        for ((v, &bv), &m) in chunk.iter_mut().zip(b).zip(mask) {
            *v = m * *v + (1.0 - m) * bv;
        }
    }
}

/// Runs every job's reverse trajectory in one batch. Each job draws its
/// initial and background noise from its own seed, so results do not depend
/// on what else shares the batch.
pub fn inpaint_batch(model: &DenoiserModel, sched: &NoiseSchedule, jobs: &[InpaintJob<'_>], steps: usize) -> Result<Vec<Image>> {
    ensure!(!jobs.is_empty(), InvalidArgument, "no inpainting jobs");
    let (h, w) = (jobs[0].image.height, jobs[0].image.width);
    for j in jobs {
        ensure!(j.image.channels == 3, Shape, "inpainting expects RGB images");
        ensure!((j.image.height, j.image.width) == (h, w), Shape, "images in one batch must share a size");
        ensure!((j.mask.height, j.mask.width) == (h, w), Shape, "mask {}x{} does not match image {h}x{w}", j.mask.height, j.mask.width);
        ensure!(j.mask.is_binary(), InvalidArgument, "inpainting mask must be binary");
        if j.mask.is_empty() {
            log::warn!("empty inpainting mask; the output reproduces the input");
        }
    }
    let n = jobs.len();
    let ts = sched.inference_timesteps(steps)?;
    let images: Vec<&Image> = jobs.iter().map(|j| j.image).collect();
    let x0_bg = model.codec.encode(&Image::batch(&images))?;
    let backgrounds: Vec<Image> = jobs.iter().map(|j| j.image.masked_background(j.mask)).collect();
    let b = model.codec.encode(&Image::batch(&backgrounds.iter().collect::<Vec<_>>()))?;
    let masks = Tensor::new(&[n, 1, h, w], jobs.iter().flat_map(|j| j.mask.data.iter().copied()).collect());
    let m_lat = model.latent_mask(&masks)?;
    let (c, lh, lw) = (x0_bg.dim(1), x0_bg.dim(2), x0_bg.dim(3));
    let per = c * lh * lw;
    let mut rngs: Vec<_> = jobs.iter().map(|j| rng::stream(j.seed, &[rng::label("inpaint")])).collect();
    let mut x: Vec<f32> = rngs
        .iter_mut()
        .flat_map(|r| Tensor::randn(r, &[per], 1.0).into_data())
        .collect();
    let prompts: Vec<TokenizedPrompt> = jobs.iter().map(|j| j.prompt.clone()).collect();
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let x_t = Tensor::new(&[n, c, lh, lw], x);
        let input = model.build_inpaint_input(&x_t, &b, &m_lat)?;
        let eps = model.predict_noise(&input, &vec![t; n], &prompts, false)?.eps;
        let mut next = ddim_step(x_t.data(), eps.data(), t, t_prev, sched, 0.0)?;
        for (s, r) in rngs.iter_mut().enumerate() {
            let clean = &x0_bg.data()[s * per..(s + 1) * per];
            let bg = if t_prev > 0 {
                let noise = Tensor::randn(r, &[per], 1.0);
                diffuse(clean, t_prev, noise.data(), sched)?
            } else {
                clean.to_vec()
            };
            let m = &m_lat.data()[s * lh * lw..(s + 1) * lh * lw];
            blend(&mut next[s * per..(s + 1) * per], &bg, m, c);
        }
        x = next;
    }
    let decoded = model.codec.decode(&Tensor::new(&[n, c, lh, lw], x))?;
    ensure!(decoded.data().iter().all(|v| v.is_finite()), Numeric, "non-finite values in generated image");
    Ok((0..n)
        .map(|s| {
            let mut im = Image::from_tensor(&decoded, s);
            im.data.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
            im
        })
        .collect())
}

/// Single-trajectory inpainting of `mask` on `normal`.
pub fn inpaint(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    normal: &Image,
    mask: &Mask,
    prompt: &TokenizedPrompt,
    steps: usize,
    seed: u64,
) -> Result<Image> {
    let job = InpaintJob {
        image: normal,
        mask,
        prompt: prompt.clone(),
        seed,
    };
    Ok(inpaint_batch(model, sched, &[job], steps)?.remove(0))
}

fn check_pair(generated: &Image, original: &Image, mask: &Mask) -> Result<(usize, usize, usize, usize)> {
    ensure!(
        (generated.channels, generated.height, generated.width) == (original.channels, original.height, original.width),
        Shape,
        "generated and original images differ in shape"
    );
    ensure!((mask.height, mask.width) == (original.height, original.width), Shape, "mask does not match the image");
    mask.binarize().bbox().ok_or_else(|| Error::InvalidArgument("fidelity needs a non-empty mask".into()))
}

/// `generated` inside the mask, `original` elsewhere.
fn neutralize(generated: &Image, original: &Image, mask: &Mask) -> Image {
    let mut out = original.clone();
    let p = mask.data.len();
    for (i, v) in out.data.iter_mut().enumerate() {
        if mask.data[i % p] > 0.5 {
            *v = generated.data[i];
        }
    }
    out
}

fn psnr(generated: &Image, original: &Image, mask: &Mask) -> f64 {
    let p = mask.data.len();
    let mut se = 0.0;
    let mut count = 0usize;
    for (i, (&a, &b)) in generated.data.iter().zip(&original.data).enumerate() {
        if mask.data[i % p] > 0.5 {
            se += (a as f64 - b as f64).powi(2);
            count += 1;
        }
    }
    let mse = se / count as f64;
    if mse == 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (SIGNAL_RANGE * SIGNAL_RANGE / mse).log10()).min(PSNR_CAP)
}

/// Mean SSIM over all valid uniform windows and channels.
fn ssim(a: &Image, b: &Image) -> f64 {
    let c1 = (0.01 * SIGNAL_RANGE).powi(2);
    let c2 = (0.03 * SIGNAL_RANGE).powi(2);
    let k = SSIM_WINDOW;
    let n = (k * k) as f64;
    let (h, w) = (a.height, a.width);
    let mut total = 0.0;
    let mut windows = 0usize;
    for ch in 0..a.channels {
        for y in 0..=h - k {
            for x in 0..=w - k {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..k {
                    for dx in 0..k {
                        let va = a.get(ch, y + dy, x + dx) as f64;
                        let vb = b.get(ch, y + dy, x + dx) as f64;
                        sa += va;
                        sb += vb;
                        saa += va * va;
                        sbb += vb * vb;
                        sab += va * vb;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = saa / n - ma * ma;
                let vb = sbb / n - mb * mb;
                let cov = sab / n - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                windows += 1;
            }
        }
    }
    total / windows as f64
}

/// Fidelity of `generated` to `original` measured inside `mask` only.
/// Higher PSNR/SSIM means more faithful; higher perceptual distance means
/// less faithful. SSIM falls back to PSNR when the mask's bounding box is
/// smaller than the window.
pub fn reconstruction_score(
    generated: &Image,
    original: &Image,
    mask: &Mask,
    metric: SelectionMetric,
    extractor: &FeatureExtractor,
) -> Result<f64> {
    let (top, left, bottom, right) = check_pair(generated, original, mask)?;
    let (ch, cw) = (bottom - top, right - left);
    Ok(match metric {
        SelectionMetric::Psnr => psnr(generated, original, mask),
        SelectionMetric::Ssim if ch < SSIM_WINDOW || cw < SSIM_WINDOW => {
            log::info!("mask box {ch}x{cw} is smaller than the SSIM window; scoring with PSNR");
            psnr(generated, original, mask)
        }
        SelectionMetric::Ssim => {
            let g = neutralize(generated, original, mask).crop(top, left, ch, cw);
            ssim(&g, &original.crop(top, left, ch, cw))
        }
        SelectionMetric::Perceptual => {
            let g = neutralize(generated, original, mask).crop(top, left, ch, cw).resize(PATCH_SIZE, PATCH_SIZE);
            let o = original.crop(top, left, ch, cw).resize(PATCH_SIZE, PATCH_SIZE);
            extractor.perceptual_distance(&g, &o)
        }
    })
}

/// Index of the least faithful score; ties resolve to the lowest index.
pub fn select_lowest_fidelity(scores: &[f64], metric: SelectionMetric) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        let better = if metric.higher_is_faithful() { s < scores[best] } else { s > scores[best] };
        if better {
            best = i;
        }
    }
    best
}

/// Scores every candidate and returns the selected index with the scores.
pub fn low_fidelity_select(
    candidates: &[Image],
    original: &Image,
    mask: &Mask,
    metric: SelectionMetric,
    extractor: &FeatureExtractor,
) -> Result<(usize, Vec<f64>)> {
    ensure!(!candidates.is_empty(), InvalidArgument, "no candidates to select from");
    let scores = candidates
        .iter()
        .map(|c| reconstruction_score(c, original, mask, metric, extractor))
        .collect::<Result<Vec<_>>>()?;
    Ok((select_lowest_fidelity(&scores, metric), scores))
}

/// A normal image paired with a defect mask to inpaint.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairPlan {
    pub category: String,
    pub normal_id: String,
    pub mask_id: String,
    pub object: String,
}

/// Pairs heldout masks of `category` with reference normals of the same
/// object, cycling through both lists.
pub fn plan_pairs(dataset: &Dataset, category: &str, count: usize) -> Result<Vec<PairPlan>> {
    let masks = dataset.defects(Some(category), Some(Split::Heldout));
    ensure!(!masks.is_empty(), Data, "category {category} has no heldout masks to generate with");
    let mut normals_by_object: BTreeMap<&str, Vec<&DatasetRecord>> = BTreeMap::new();
    for r in dataset.normals(Some(Split::Reference)) {
        normals_by_object.entry(r.object.as_str()).or_default().push(r);
    }
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let m = masks[k % masks.len()];
        let normals = normals_by_object
            .get(m.object.as_str())
            .ok_or_else(|| Error::Data(format!("no reference normals of object {}", m.object)))?;
        let n = normals[k % normals.len()];
        out.push(PairPlan {
            category: category.to_string(),
            normal_id: n.id.clone(),
            mask_id: m.id.clone(),
            object: m.object.clone(),
        });
    }
    ensure!(!out.is_empty(), Data, "empty pair list");
    Ok(out)
}

/// Generated defect images with their provenance.
#[derive(Clone, Debug)]
pub struct GeneratedSet {
    pub dataset: Dataset,
    pub records: Vec<GenerationRecord>,
    /// Every candidate image by output id, in candidate order.
    pub candidates: BTreeMap<String, Vec<Image>>,
}

impl GeneratedSet {
    pub fn new(image_size: usize) -> Self {
        Self {
            dataset: Dataset::empty(image_size),
            records: Vec::new(),
            candidates: BTreeMap::new(),
        }
    }

    /// Selected images grouped by generating condition (normal, mask).
    pub fn condition_groups(&self) -> Vec<Vec<&Image>> {
        let mut groups: BTreeMap<(&str, &str), Vec<&Image>> = BTreeMap::new();
        for r in &self.records {
            if let Ok(im) = self.dataset.image(&r.output_id) {
                groups.entry((&r.request.normal_id, &r.request.mask_id)).or_default().push(im);
            }
        }
        groups.into_values().collect()
    }

    /// Writes the manifest, images, masks, candidates and
    /// `generation_records.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.dataset.save(dir)?;
        let mut records = self.records.clone();
        for r in &mut records {
            if let Some(images) = self.candidates.get(&r.output_id) {
                let sub = dir.join("candidates");
                std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
                for (k, im) in images.iter().enumerate() {
                    let rel = format!("candidates/{}-{k}.png", r.output_id);
                    im.save_png(&dir.join(&rel))?;
                    r.candidates[k].image_path = Some(rel);
                }
            }
        }
        let path = dir.join(GENERATION_RECORDS_FILE);
        let json = serde_json::to_string_pretty(&records)?;
        std::fs::write(&path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let dataset = Dataset::load(dir)?;
        let path = dir.join(GENERATION_RECORDS_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let records: Vec<GenerationRecord> = serde_json::from_str(&text)?;
        let mut candidates = BTreeMap::new();
        for r in &records {
            let mut imgs = Vec::new();
            for c in &r.candidates {
                if let Some(p) = &c.image_path {
                    imgs.push(Image::load_png(&dir.join(p))?);
                }
            }
            if !imgs.is_empty() {
                candidates.insert(r.output_id.clone(), imgs);
            }
        }
        Ok(Self {
            dataset,
            records,
            candidates,
        })
    }
}

/// Seed of one (pair, repeat) request.
pub fn request_seed(base: u64, category: &str, pair: usize, repeat: usize) -> u64 {
    rng::derive_seed(base, &[rng::label("request"), rng::label(category), pair as u64, repeat as u64])
}

/// Generates `pairs` for one category with `model` and appends the
/// selected images to `out`.
pub fn generate_category(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    source: &Dataset,
    pairs: &[PairPlan],
    config: &GenerateConfig,
    extractor: &FeatureExtractor,
    out: &mut GeneratedSet,
) -> Result<()> {
    config.validate()?;
    ensure!(!pairs.is_empty(), InvalidArgument, "empty pair list");
    let mut requests = Vec::new();
    for (p, pair) in pairs.iter().enumerate() {
        for repeat in 0..config.repeats {
            requests.push((p, repeat, pair));
        }
    }
    for chunk in requests.chunks(config.pairs_per_batch) {
        let mut jobs = Vec::new();
        let mut metas = Vec::new();
        for &(p, repeat, pair) in chunk {
            let normal = source.image(&pair.normal_id)?;
            let mask = source.mask(&pair.mask_id)?;
            let prompt = model.prompt(config.prompt, &pair.object)?;
            let seed = request_seed(config.seed, &pair.category, p, repeat);
            for k in 0..config.candidates as u64 {
                jobs.push(InpaintJob {
                    image: normal,
                    mask,
                    prompt: prompt.clone(),
                    seed: candidate_seed(seed, k),
                });
            }
            metas.push((p, repeat, pair, seed, normal, mask));
        }
        let images = inpaint_batch(model, sched, &jobs, config.steps)?;
        for (block, (p, repeat, pair, seed, normal, mask)) in images.chunks(config.candidates).zip(metas) {
            let mut cands: Vec<Image> = block.to_vec();
            cands.iter_mut().for_each(Image::quantize);
            let (selected, scores) = low_fidelity_select(&cands, normal, mask, config.metric, extractor)?;
            let output_id = format!("gen-{}-{p:04}-{repeat}", pair.category);
            let request = GenerationRequest {
                category: pair.category.clone(),
                normal_id: pair.normal_id.clone(),
                mask_id: pair.mask_id.clone(),
                object: pair.object.clone(),
                steps: config.steps,
                candidates: config.candidates,
                seed,
                metric: config.metric,
            };
            out.dataset.push(
                DatasetRecord {
                    id: output_id.clone(),
                    role: Role::Defect,
                    category: Some(pair.category.clone()),
                    image_path: String::new(),
                    mask_path: None,
                    split: Split::Reference,
                    object: pair.object.clone(),
                    source: Some(pair.normal_id.clone()),
                },
                cands[selected].clone(),
                Some(mask.binarize()),
            );
            out.records.push(GenerationRecord {
                request,
                candidates: scores
                    .iter()
                    .enumerate()
                    .map(|(k, &score)| CandidateRecord {
                        seed_offset: k as u64,
                        seed: candidate_seed(seed, k as u64),
                        score,
                        image_path: None,
                    })
                    .collect(),
                selected,
                output_id: output_id.clone(),
                repeat,
            });
            if config.save_candidates {
                out.candidates.insert(output_id, cands);
            }
        }
    }
    Ok(())
}

/// Generates every category that has a model in `models`.
pub fn generate_dataset(
    models: &BTreeMap<String, DenoiserModel>,
    sched: &NoiseSchedule,
    source: &Dataset,
    categories: &[String],
    config: &GenerateConfig,
    extractor: &FeatureExtractor,
) -> Result<GeneratedSet> {
    let mut out = GeneratedSet::new(source.manifest.image_size);
    for cat in categories {
        let model = models
            .get(cat)
            .ok_or_else(|| Error::Data(format!("no fine-tuned checkpoint for category {cat}")))?;
        let pairs = plan_pairs(source, cat, config.count)?;
        generate_category(model, sched, source, &pairs, config, extractor, &mut out)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ScheduleConfig;
    use crate::model::{ModelConfig, UnetConfig};

    fn small_model() -> DenoiserModel {
        DenoiserModel::new(&ModelConfig {
            unet: UnetConfig {
                widths: [8, 16],
                heads: 2,
                groups: 4,
            },
            ..Default::default()
        })
        .unwrap()
    }

    fn sched() -> NoiseSchedule {
        NoiseSchedule::new(&ScheduleConfig::default()).unwrap()
    }

    fn gradient_image() -> Image {
        let mut im = Image::filled(3, 16, 16, 0.0);
        for c in 0..3 {
            for y in 0..16 {
                for x in 0..16 {
                    im.set(c, y, x, crate::image::from_u8((y * 16 + x + c * 7) as u8 % 255));
                }
            }
        }
        im
    }

    fn block_mask(t: usize, l: usize, s: usize) -> Mask {
        let mut m = Mask::zeros(16, 16);
        for y in t..t + s {
            for x in l..l + s {
                m.set(y, x, 1.0);
            }
        }
        m
    }

    #[test]
    fn background_is_exact_and_empty_mask_copies() {
        let model = small_model();
        let im = gradient_image();
        let prompt = model.prompt(PromptTemplate::Object, "disc").unwrap();
        let m = block_mask(4, 4, 6);
        let out = inpaint(&model, &sched(), &im, &m, &prompt, 5, 3).unwrap();
        for c in 0..3 {
            for y in 0..16 {
                for x in 0..16 {
                    if m.get(y, x) == 0.0 {
                        assert_eq!(out.get(c, y, x), im.get(c, y, x));
                    }
                }
            }
        }
        let copy = inpaint(&model, &sched(), &im, &Mask::zeros(16, 16), &prompt, 5, 3).unwrap();
        assert_eq!(copy, im);
        let again = inpaint(&model, &sched(), &im, &m, &prompt, 5, 3).unwrap();
        assert_eq!(again, out);
    }

    #[test]
    fn candidates_do_not_depend_on_batch_mates() {
        let model = small_model();
        let im = gradient_image();
        let m = block_mask(2, 3, 7);
        let prompt = model.prompt(PromptTemplate::Object, "disc").unwrap();
        let jobs: Vec<InpaintJob> = (0..3)
            .map(|k| InpaintJob {
                image: &im,
                mask: &m,
                prompt: prompt.clone(),
                seed: candidate_seed(11, k),
            })
            .collect();
        let batch = inpaint_batch(&model, &sched(), &jobs, 4).unwrap();
        let solo = inpaint_batch(&model, &sched(), &jobs[2..], 4).unwrap();
        let diff = batch[2].data.iter().zip(&solo[0].data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(diff <= 1e-5, "{diff}");
        assert_ne!(batch[0], batch[1]);
    }

    #[test]
    fn rejects_soft_or_mismatched_masks() {
        let model = small_model();
        let im = gradient_image();
        let prompt = model.prompt(PromptTemplate::Object, "disc").unwrap();
        let mut soft = Mask::zeros(16, 16);
        soft.set(3, 3, 0.5);
        assert!(inpaint(&model, &sched(), &im, &soft, &prompt, 2, 0).is_err());
        assert!(inpaint(&model, &sched(), &im, &Mask::zeros(8, 8), &prompt, 2, 0).is_err());
    }

    #[test]
    fn scores_of_identical_images() {
        let f = FeatureExtractor::random(0);
        let im = gradient_image();
        let m = block_mask(3, 3, 8);
        assert_eq!(reconstruction_score(&im, &im, &m, SelectionMetric::Psnr, &f).unwrap(), PSNR_CAP);
        assert!((reconstruction_score(&im, &im, &m, SelectionMetric::Ssim, &f).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(reconstruction_score(&im, &im, &m, SelectionMetric::Perceptual, &f).unwrap(), 0.0);
        assert!(reconstruction_score(&im, &im, &Mask::zeros(16, 16), SelectionMetric::Psnr, &f).is_err());
    }

    #[test]
    fn offset_inside_mask_gives_closed_form_psnr() {
        let f = FeatureExtractor::random(0);
        let im = Image::filled(3, 16, 16, 0.0);
        let m = block_mask(5, 5, 4);
        let mut g = im.clone();
        for c in 0..3 {
            for y in 5..9 {
                for x in 5..9 {
                    g.set(c, y, x, 0.1);
                }
            }
        }
        let expected = 20.0 * (2.0f64 / 0.1).log10();
        let got = reconstruction_score(&g, &im, &m, SelectionMetric::Psnr, &f).unwrap();
        assert!((got - expected).abs() < 1e-5, "{got} vs {expected}");
    }

    #[test]
    fn small_boxes_fall_back_to_psnr_for_ssim() {
        let f = FeatureExtractor::random(0);
        let im = gradient_image();
        let m = block_mask(5, 5, 3);
        let mut g = im.clone();
        g.set(0, 6, 6, 0.9);
        let a = reconstruction_score(&g, &im, &m, SelectionMetric::Ssim, &f).unwrap();
        let b = reconstruction_score(&g, &im, &m, SelectionMetric::Psnr, &f).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn selection_direction_and_ties() {
        assert_eq!(select_lowest_fidelity(&[3.0, 1.0, 1.0], SelectionMetric::Psnr), 1);
        assert_eq!(select_lowest_fidelity(&[0.2, 0.5, 0.5], SelectionMetric::Perceptual), 1);
        assert_eq!(select_lowest_fidelity(&[0.7], SelectionMetric::Ssim), 0);
    }
}
