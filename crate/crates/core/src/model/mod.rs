//! The trainable denoising stack: codec, prompt conditioner and UNet, with
//! low-rank adapters and decoder cross-attention capture.

mod checkpoint;
mod codec;
mod conditioner;
mod lora;
mod unet;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_checkpoint, read_header, save_checkpoint, AdamState, Checkpoint, CheckpointHeader, LossRecord, TensorEntry,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use codec::{Codec, CodecConfig, CodecMode};
pub use conditioner::{tokenize, Conditioner, PromptTemplate, TokenizedPrompt, Vocab, CONCEPT_WORD, PAD_WORD};
pub use lora::{randomize_adapters, AdaptedLinear, AdapterMode, LoraConfig};
pub use unet::{timestep_features, CapturedAttention, Unet, UnetConfig};

use crate::error::{ensure, Error, Result};
use crate::image::Mask;
use crate::losses::{head_average, AttentionLayer, AttentionStack};
use crate::nn::{Graph, ParamGroup, ParamStore, Tensor, Var};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub codec: CodecConfig,
    pub unet: UnetConfig,
    pub lora: LoraConfig,
    pub context_dim: usize,
    pub seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            codec: CodecConfig::default(),
            unet: UnetConfig::default(),
            lora: LoraConfig::default(),
            context_dim: 32,
            seq_len: 6,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        self.unet.validate()?;
        self.lora.validate()?;
        ensure!(self.context_dim >= 2, Config, "model.context_dim must be >= 2");
        ensure!(self.seq_len >= 4, Config, "model.seq_len must be >= 4 to hold the prompt templates");
        Ok(())
    }
}

/// Which parameters an optimizer may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainingScope {
    /// Backbone and conditioner, adapters off.
    Pretrain,
    /// Attention and conditioner adapters only.
    Finetune,
}

impl TrainingScope {
    pub fn groups(self) -> &'static [ParamGroup] {
        match self {
            TrainingScope::Pretrain => &[ParamGroup::Backbone, ParamGroup::Conditioner],
            TrainingScope::Finetune => &[ParamGroup::UnetAdapter, ParamGroup::ConditionerAdapter],
        }
    }
}

/// Output of a noise prediction.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub eps: Tensor,
    pub attention: Option<AttentionStack<f32>>,
}

#[derive(Clone, Debug)]
pub struct DenoiserModel {
    pub config: ModelConfig,
    pub codec: Codec,
    pub store: ParamStore,
    pub conditioner: Conditioner,
    pub unet: Unet,
    adapters_enabled: bool,
    merged: bool,
}

impl DenoiserModel {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let codec = Codec::new(&config.codec, config.seed);
        let mut store = ParamStore::new();
        let mut r = rng::stream(config.seed, &[rng::label("denoiser-init")]);
        let rank = config.lora.rank;
        let conditioner = Conditioner::new(&mut store, config.seq_len, config.context_dim, rank, &mut r);
        let lc = codec.latent_channels();
        let unet = Unet::new(&mut store, &config.unet, 2 * lc + 1, lc, config.context_dim, rank, &mut r);
        Ok(Self {
            config: config.clone(),
            codec,
            store,
            conditioner,
            unet,
            adapters_enabled: true,
            merged: false,
        })
    }

    pub fn latent_channels(&self) -> usize {
        self.codec.latent_channels()
    }

    pub fn input_channels(&self) -> usize {
        self.unet.in_channels
    }

    pub fn adapters_enabled(&self) -> bool {
        self.adapters_enabled
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    pub fn set_adapters_enabled(&mut self, enabled: bool) {
        self.adapters_enabled = enabled;
    }

    pub(crate) fn set_state(&mut self, enabled: bool, merged: bool) {
        self.adapters_enabled = enabled;
        self.merged = merged;
    }

    pub fn set_training_scope(&mut self, scope: TrainingScope) {
        self.store.set_trainable_groups(scope.groups());
    }

    pub fn adapter_mode(&self, training: bool) -> AdapterMode {
        AdapterMode {
            active: self.adapters_enabled && !self.merged,
            scale: self.config.lora.scale(),
            dropout: if training { self.config.lora.dropout } else { 0.0 },
        }
    }

    pub fn adapted_linears(&self) -> Vec<&AdaptedLinear> {
        let mut v = self.unet.adapted_linears();
        v.extend(self.conditioner.adapted_linears());
        v
    }

    /// `sum r * (d_in + d_out)` over every adapted projection.
    pub fn adapter_param_count(&self) -> usize {
        self.adapted_linears()
            .iter()
            .map(|l| self.store.value(l.down).dim(0) * (l.in_features + l.out_features))
            .sum()
    }

    /// Folds the scaled low-rank products (and the concept-token delta) into
    /// the base weights. Afterwards the adapter branch is never evaluated.
    pub fn merge_adapters(&mut self) -> Result<()> {
        ensure!(self.adapters_enabled, InvalidArgument, "cannot merge disabled adapters");
        ensure!(!self.merged, InvalidArgument, "adapters are already merged");
        let scale = self.config.lora.scale();
        let linears: Vec<AdaptedLinear> = self.adapted_linears().into_iter().cloned().collect();
        for l in &linears {
            l.merge(&mut self.store, scale);
        }
        self.conditioner.merge_concept_delta(&mut self.store);
        self.merged = true;
        Ok(())
    }

    pub fn prompt(&self, template: PromptTemplate, object: &str) -> Result<TokenizedPrompt> {
        self.conditioner.tokenize(template, object)
    }

    /// Condition vectors `[N, seq_len, context_dim]` without gradients.
    pub fn embed_prompts(&self, prompts: &[TokenizedPrompt]) -> Tensor {
        let mut g = Graph::inference();
        let c = self.conditioner.forward(&mut g, &self.store, prompts, self.adapter_mode(false), None);
        g.value(c).clone()
    }

    /// Resizes a pixel-resolution mask batch `[N, 1, H, W]` to latent size by
    /// area averaging.
    pub fn latent_mask(&self, mask: &Tensor) -> Result<Tensor> {
        downsample_masks(mask, self.codec.factor())
    }

    /// Concatenates `(x_t, b, M)` along channels. `M` is area-averaged down
    /// to the latent size when it is given at a larger integer multiple.
    pub fn build_inpaint_input(&self, x_t: &Tensor, b: &Tensor, mask: &Tensor) -> Result<Tensor> {
        ensure!(x_t.shape() == b.shape(), Shape, "x_t {:?} and background {:?} differ", x_t.shape(), b.shape());
        ensure!(x_t.dim(1) == self.latent_channels(), Shape, "expected {} latent channels, got {}", self.latent_channels(), x_t.dim(1));
        ensure!(mask.shape().len() == 4 && mask.dim(1) == 1 && mask.dim(0) == x_t.dim(0), Shape, "mask must be [N, 1, H, W], got {:?}", mask.shape());
        let (lh, lw) = (x_t.dim(2), x_t.dim(3));
        let m = if (mask.dim(2), mask.dim(3)) == (lh, lw) {
            mask.clone()
        } else {
            ensure!(
                mask.dim(2) % lh == 0 && mask.dim(3) % lw == 0 && mask.dim(2) / lh == mask.dim(3) / lw,
                Shape,
                "mask {}x{} cannot be resized to latent {}x{}",
                mask.dim(2),
                mask.dim(3),
                lh,
                lw
            );
            downsample_masks(mask, mask.dim(2) / lh)?
        };
        Ok(Tensor::concat_channels(&[x_t, b, &m]))
    }

    /// Records a differentiable forward pass on `g`.
    pub fn forward(
        &self,
        g: &mut Graph,
        x_inpaint: Var,
        ts: &[usize],
        prompts: &[TokenizedPrompt],
        training: bool,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (Var, Vec<CapturedAttention>) {
        let mode = self.adapter_mode(training);
        let ctx = self.conditioner.forward(g, &self.store, prompts, mode, rng.as_deref_mut());
        self.unet.forward(g, &self.store, x_inpaint, ts, ctx, mode, rng)
    }

    /// Noise prediction for a batch; with `capture` the decoder
    /// cross-attention maps come back head-averaged.
    pub fn predict_noise(
        &self,
        x_inpaint: &Tensor,
        ts: &[usize],
        prompts: &[TokenizedPrompt],
        capture: bool,
    ) -> Result<Prediction> {
        ensure!(x_inpaint.shape().len() == 4, Shape, "input must be [N, C, H, W]");
        ensure!(
            x_inpaint.dim(1) == self.input_channels(),
            Shape,
            "input has {} channels, model expects {}",
            x_inpaint.dim(1),
            self.input_channels()
        );
        let n = x_inpaint.dim(0);
        ensure!(ts.len() == n && prompts.len() == n, Shape, "batch of {n} needs {n} timesteps and prompts");
        ensure!(x_inpaint.dim(2) % 2 == 0 && x_inpaint.dim(3) % 2 == 0, Shape, "latent size must be even");
        let mut g = Graph::inference();
        let x = g.input(x_inpaint.clone(), false);
        let (eps, caps) = self.forward(&mut g, x, ts, prompts, false, None);
        let eps_t = g.value(eps).clone();
        if !eps_t.data().iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite noise prediction".into()));
        }
        Ok(Prediction {
            eps: eps_t,
            attention: capture.then(|| attention_stack(&g, &caps, 0..n)),
        })
    }
}

fn downsample_masks(mask: &Tensor, f: usize) -> Result<Tensor> {
    if f == 1 {
        return Ok(mask.clone());
    }
    let (n, h, w) = (mask.dim(0), mask.dim(2), mask.dim(3));
    let mut out = Vec::with_capacity(mask.numel() / (f * f));
    for i in 0..n {
        let m = Mask::new(h, w, mask.data()[i * h * w..(i + 1) * h * w].to_vec());
        out.extend(m.downsample(f)?.data);
    }
    Ok(Tensor::new(&[n, 1, h / f, w / f], out))
}

/// Head-averaged maps of the captured layers for samples in `range`.
pub fn attention_stack(g: &Graph, caps: &[CapturedAttention], range: std::ops::Range<usize>) -> AttentionStack<f32> {
    let batch = range.len();
    let layers = caps
        .iter()
        .map(|c| {
            let q = c.height * c.width;
            let per = c.heads * q * c.tokens;
            let probs = &g.value(c.probs).data()[range.start * per..range.end * per];
            AttentionLayer {
                height: c.height,
                width: c.width,
                tokens: c.tokens,
                maps: head_average(probs, batch, c.heads, q, c.tokens),
            }
        })
        .collect();
    AttentionStack { batch, layers }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;
    use rand::SeedableRng;

    fn small() -> ModelConfig {
        ModelConfig {
            unet: UnetConfig {
                widths: [8, 16],
                heads: 2,
                groups: 4,
            },
            ..Default::default()
        }
    }

    fn inputs(model: &DenoiserModel, n: usize, seed: u64) -> (Tensor, Vec<usize>, Vec<TokenizedPrompt>) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&mut r, &[n, model.input_channels(), 8, 8], 1.0);
        let ts = (0..n).map(|i| 100 + 300 * i).collect();
        let p = (0..n)
            .map(|i| {
                let t = if i % 2 == 0 { PromptTemplate::Defect } else { PromptTemplate::Object };
                model.prompt(t, "disc").unwrap()
            })
            .collect();
        (x, ts, p)
    }

    #[test]
    fn inpaint_input_has_seven_channels() {
        let m = DenoiserModel::new(&small()).unwrap();
        let x = Tensor::zeros(&[1, 3, 8, 8]);
        let b = Tensor::full(&[1, 3, 8, 8], 0.5);
        let mask = Tensor::full(&[1, 1, 16, 16], 1.0);
        let inp = m.build_inpaint_input(&x, &b, &mask).unwrap();
        assert_eq!(inp.shape(), &[1, 7, 8, 8]);
        assert!(m.build_inpaint_input(&x, &b, &Tensor::zeros(&[1, 1, 12, 12])).is_err());
    }

    #[test]
    fn fresh_adapters_are_exact_noops() {
        let mut m = DenoiserModel::new(&small()).unwrap();
        let (x, ts, p) = inputs(&m, 2, 3);
        let on = m.predict_noise(&x, &ts, &p, false).unwrap().eps;
        m.set_adapters_enabled(false);
        let off = m.predict_noise(&x, &ts, &p, false).unwrap().eps;
        assert_eq!(on, off);
    }

    #[test]
    fn merge_matches_unmerged_output() {
        let mut m = DenoiserModel::new(&small()).unwrap();
        randomize_adapters(&mut m.store, &mut ChaCha8Rng::seed_from_u64(9), 0.05);
        let (x, ts, p) = inputs(&m, 2, 4);
        let before = m.predict_noise(&x, &ts, &p, false).unwrap().eps;
        m.set_adapters_enabled(false);
        assert!(m.merge_adapters().is_err());
        let base = m.predict_noise(&x, &ts, &p, false).unwrap().eps;
        assert!(base.max_abs_diff(&before) > 1e-4);
        m.set_adapters_enabled(true);
        m.merge_adapters().unwrap();
        m.set_adapters_enabled(false);
        let after = m.predict_noise(&x, &ts, &p, false).unwrap().eps;
        assert!(after.max_abs_diff(&before) <= 1e-5, "{}", after.max_abs_diff(&before));
    }

    #[test]
    fn attention_rows_are_distributions() {
        let m = DenoiserModel::new(&small()).unwrap();
        let (x, ts, p) = inputs(&m, 2, 5);
        let stack = m.predict_noise(&x, &ts, &p, true).unwrap().attention.unwrap();
        assert_eq!(stack.layers.len(), 2);
        assert_eq!((stack.layers[0].height, stack.layers[1].height), (4, 8));
        for layer in &stack.layers {
            let q = layer.height * layer.width;
            for n in 0..2 {
                for qi in 0..q {
                    let s: f32 = (0..layer.tokens).map(|l| layer.maps[(n * layer.tokens + l) * q + qi]).sum();
                    assert!((s - 1.0).abs() <= 1e-6);
                }
            }
            assert!(layer.maps.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn batch_matches_per_sample() {
        let m = DenoiserModel::new(&small()).unwrap();
        let (x, ts, p) = inputs(&m, 2, 6);
        let both = m.predict_noise(&x, &ts, &p, false).unwrap().eps;
        let per = both.numel() / 2;
        for i in 0..2 {
            let xi = x.sample(i);
            let one = m.predict_noise(&xi, &ts[i..i + 1], &p[i..i + 1], false).unwrap().eps;
            let d = one
                .data()
                .iter()
                .zip(&both.data()[i * per..(i + 1) * per])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(d <= 1e-5, "sample {i} differs by {d}");
        }
    }

    #[test]
    fn adapter_count_matches_construction() {
        let m = DenoiserModel::new(&small()).unwrap();
        let (c0, c1, ctx, r) = (8, 16, 32, 8);
        let attn = |c: usize| r * (c + c) * 2 + r * (ctx + c) * 2;
        let cond = 2 * (r * (ctx + 2 * ctx) + r * (2 * ctx + ctx));
        assert_eq!(m.adapter_param_count(), 2 * attn(c0) + 2 * attn(c1) + cond);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let m = DenoiserModel::new(&small()).unwrap();
        let p = vec![m.prompt(PromptTemplate::Defect, "").unwrap()];
        let x = Tensor::zeros(&[1, 6, 8, 8]);
        assert!(matches!(m.predict_noise(&x, &[10], &p, false), Err(Error::Shape(_))));
    }
}
