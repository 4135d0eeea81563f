//! Two-resolution UNet with timestep embedding and cross-attention blocks in
//! both halves.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lora::{AdaptedLinear, AdapterMode};
use crate::error::{ensure, Result};
use crate::nn::{Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnetConfig {
    /// Channel widths at full and half resolution.
    pub widths: [usize; 2],
    pub heads: usize,
    pub groups: usize,
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self {
            widths: [32, 64],
            heads: 2,
            groups: 8,
        }
    }
}

impl UnetConfig {
    pub fn validate(&self) -> Result<()> {
        for &w in &self.widths {
            ensure!(w > 0 && w % self.groups == 0, Config, "unet width {w} must be a positive multiple of groups {}", self.groups);
            ensure!(w % self.heads == 0, Config, "unet width {w} must be divisible by heads {}", self.heads);
        }
        ensure!(self.heads >= 1 && self.groups >= 1, Config, "unet heads and groups must be >= 1");
        Ok(())
    }
}

/// Softmax probabilities of one captured cross-attention block.
#[derive(Clone, Copy, Debug)]
pub struct CapturedAttention {
    /// `[N * heads, H * W, tokens]`
    pub probs: Var,
    pub height: usize,
    pub width: usize,
    pub heads: usize,
    pub tokens: usize,
}

#[derive(Clone, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, stride: usize, gain: f32, rng: &mut ChaCha8Rng) -> Self {
        let bound = gain / ((cin * k * k) as f32).sqrt();
        Self {
            w: store.add(format!("{name}.weight"), Tensor::uniform(rng, &[cout, cin, k, k], bound), ParamGroup::Backbone),
            b: store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), ParamGroup::Backbone),
            stride,
            pad: k / 2,
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
struct GroupNorm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

impl GroupNorm {
    fn new(store: &mut ParamStore, name: &str, c: usize, groups: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[c], 1.0), ParamGroup::Backbone),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[c]), ParamGroup::Backbone),
            groups,
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let ga = g.param(store, self.gamma);
        let be = g.param(store, self.beta);
        g.group_norm(x, ga, be, self.groups)
    }
}

#[derive(Clone, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (din as f32).sqrt();
        Self {
            w: store.add(format!("{name}.weight"), Tensor::uniform(rng, &[dout, din], bound), ParamGroup::Backbone),
            b: store.add(format!("{name}.bias"), Tensor::zeros(&[dout]), ParamGroup::Backbone),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv,
    time: Dense,
    norm2: GroupNorm,
    conv2: Conv,
    skip: Option<Conv>,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, tdim: usize, groups: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), cin, groups),
            conv1: Conv::new(store, &format!("{name}.conv1"), cin, cout, 3, 1, 1.0, rng),
            time: Dense::new(store, &format!("{name}.time"), tdim, cout, rng),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), cout, groups),
            conv2: Conv::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, 1.0, rng),
            skip: (cin != cout).then(|| Conv::new(store, &format!("{name}.skip"), cin, cout, 1, 1, 1.0, rng)),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, temb: Var) -> Var {
        let h = self.norm1.forward(g, store, x);
        let h = g.silu(h);
        let h = self.conv1.forward(g, store, h);
        let tb = self.time.forward(g, store, temb);
        let h = g.bias(h, tb);
        let h = self.norm2.forward(g, store, h);
        let h = g.silu(h);
        let h = self.conv2.forward(g, store, h);
        let s = match &self.skip {
            Some(c) => c.forward(g, store, x),
            None => x,
        };
        g.add(h, s)
    }
}

#[derive(Clone, Debug)]
struct CrossAttention {
    norm: GroupNorm,
    q: AdaptedLinear,
    k: AdaptedLinear,
    v: AdaptedLinear,
    out: AdaptedLinear,
    heads: usize,
}

impl CrossAttention {
    #[allow(clippy::too_many_arguments)]
    fn new(store: &mut ParamStore, name: &str, c: usize, ctx: usize, heads: usize, groups: usize, rank: usize, rng: &mut ChaCha8Rng) -> Self {
        let lin = |store: &mut ParamStore, rng: &mut ChaCha8Rng, n: &str, din: usize, dout: usize, bias: bool| {
            AdaptedLinear::new(store, &format!("{name}.{n}"), din, dout, bias, rank, ParamGroup::Backbone, ParamGroup::UnetAdapter, rng)
        };
        Self {
            norm: GroupNorm::new(store, &format!("{name}.norm"), c, groups),
            q: lin(store, rng, "to_q", c, c, false),
            k: lin(store, rng, "to_k", ctx, c, false),
            v: lin(store, rng, "to_v", ctx, c, false),
            out: lin(store, rng, "to_out", c, c, true),
            heads,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        ctx: Var,
        mode: AdapterMode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (Var, CapturedAttention) {
        let s = g.value(x).shape().to_vec();
        let (h, w) = (s[2], s[3]);
        let tokens = g.value(ctx).dim(1);
        let n = self.norm.forward(g, store, x);
        let n = g.to_tokens(n);
        let q = self.q.forward(g, store, n, mode, rng.as_deref_mut());
        let k = self.k.forward(g, store, ctx, mode, rng.as_deref_mut());
        let v = self.v.forward(g, store, ctx, mode, rng.as_deref_mut());
        let scores = g.head_scores(q, k, self.heads);
        let probs = g.softmax(scores);
        let a = g.head_apply(probs, v, self.heads);
        let o = self.out.forward(g, store, a, mode, rng.as_deref_mut());
        let o = g.from_tokens(o, h, w);
        (
            g.add(x, o),
            CapturedAttention {
                probs,
                height: h,
                width: w,
                heads: self.heads,
                tokens,
            },
        )
    }

    fn adapted(&self) -> [&AdaptedLinear; 4] {
        [&self.q, &self.k, &self.v, &self.out]
    }
}

#[derive(Clone, Debug)]
pub struct Unet {
    pub config: UnetConfig,
    pub in_channels: usize,
    pub out_channels: usize,
    time_dim: usize,
    time1: Dense,
    time2: Dense,
    conv_in: Conv,
    enc0: ResBlock,
    enc_attn0: CrossAttention,
    down: Conv,
    enc1: ResBlock,
    enc_attn1: CrossAttention,
    mid: ResBlock,
    dec1: ResBlock,
    dec_attn1: CrossAttention,
    reduce: Conv,
    dec0: ResBlock,
    dec_attn0: CrossAttention,
    norm_out: GroupNorm,
    conv_out: Conv,
}

/// Sinusoidal features of the timesteps, `[N, dim]`.
pub fn timestep_features(ts: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0f32; ts.len() * dim];
    for (i, &t) in ts.iter().enumerate() {
        for k in 0..half {
            let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
            let a = t as f64 * freq;
            out[i * dim + k] = a.sin() as f32;
            out[i * dim + half + k] = a.cos() as f32;
        }
    }
    Tensor::new(&[ts.len(), dim], out)
}

impl Unet {
    pub fn new(
        store: &mut ParamStore,
        config: &UnetConfig,
        in_channels: usize,
        out_channels: usize,
        ctx_dim: usize,
        rank: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let [c0, c1] = config.widths;
        let (heads, groups) = (config.heads, config.groups);
        let tdim = 4 * c0;
        Self {
            config: config.clone(),
            in_channels,
            out_channels,
            time_dim: c0,
            time1: Dense::new(store, "unet.time1", c0, tdim, rng),
            time2: Dense::new(store, "unet.time2", tdim, tdim, rng),
            conv_in: Conv::new(store, "unet.conv_in", in_channels, c0, 3, 1, 1.0, rng),
            enc0: ResBlock::new(store, "unet.enc0", c0, c0, tdim, groups, rng),
            enc_attn0: CrossAttention::new(store, "unet.enc_attn0", c0, ctx_dim, heads, groups, rank, rng),
            down: Conv::new(store, "unet.down", c0, c0, 3, 2, 1.0, rng),
            enc1: ResBlock::new(store, "unet.enc1", c0, c1, tdim, groups, rng),
            enc_attn1: CrossAttention::new(store, "unet.enc_attn1", c1, ctx_dim, heads, groups, rank, rng),
            mid: ResBlock::new(store, "unet.mid", c1, c1, tdim, groups, rng),
            dec1: ResBlock::new(store, "unet.dec1", 2 * c1, c1, tdim, groups, rng),
            dec_attn1: CrossAttention::new(store, "unet.dec_attn1", c1, ctx_dim, heads, groups, rank, rng),
            reduce: Conv::new(store, "unet.reduce", c1, c0, 1, 1, 1.0, rng),
            dec0: ResBlock::new(store, "unet.dec0", 2 * c0, c0, tdim, groups, rng),
            dec_attn0: CrossAttention::new(store, "unet.dec_attn0", c0, ctx_dim, heads, groups, rank, rng),
            norm_out: GroupNorm::new(store, "unet.norm_out", c0, groups),
            conv_out: Conv::new(store, "unet.conv_out", c0, out_channels, 3, 1, 0.1, rng),
        }
    }

    pub fn adapted_linears(&self) -> Vec<&AdaptedLinear> {
        [&self.enc_attn0, &self.enc_attn1, &self.dec_attn1, &self.dec_attn0]
            .into_iter()
            .flat_map(|a| a.adapted())
            .collect()
    }

    /// Returns the noise prediction and the decoder cross-attention captures
    /// (coarse layer first).
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        ts: &[usize],
        ctx: Var,
        mode: AdapterMode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (Var, Vec<CapturedAttention>) {
        let tf = g.input(timestep_features(ts, self.time_dim), false);
        let temb = self.time1.forward(g, store, tf);
        let temb = g.silu(temb);
        let temb = self.time2.forward(g, store, temb);
        let temb = g.silu(temb);

        let h0 = self.conv_in.forward(g, store, x);
        let h0 = self.enc0.forward(g, store, h0, temb);
        let (s0, _) = self.enc_attn0.forward(g, store, h0, ctx, mode, rng.as_deref_mut());
        let h1 = self.down.forward(g, store, s0);
        let h1 = self.enc1.forward(g, store, h1, temb);
        let (s1, _) = self.enc_attn1.forward(g, store, h1, ctx, mode, rng.as_deref_mut());

        let m = self.mid.forward(g, store, s1, temb);
        let d1 = g.concat(m, s1);
        let d1 = self.dec1.forward(g, store, d1, temb);
        let (d1, cap1) = self.dec_attn1.forward(g, store, d1, ctx, mode, rng.as_deref_mut());
        let d0 = self.reduce.forward(g, store, d1);
        let d0 = g.upsample2x(d0);
        let d0 = g.concat(d0, s0);
        let d0 = self.dec0.forward(g, store, d0, temb);
        let (d0, cap0) = self.dec_attn0.forward(g, store, d0, ctx, mode, rng.as_deref_mut());

        let o = self.norm_out.forward(g, store, d0);
        let o = g.silu(o);
        (self.conv_out.forward(g, store, o), vec![cap1, cap0])
    }
}
