//! Linear projections with optional low-rank adapters.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::nn::{gemm, Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    /// Adapter scaling numerator; the low-rank product is scaled by
    /// `alpha / rank`.
    pub alpha: f32,
    pub dropout: f32,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            dropout: 0.1,
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f32 {
        self.alpha / self.rank as f32
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.rank >= 1, Config, "lora.rank must be >= 1");
        ensure!(self.alpha > 0.0, Config, "lora.alpha must be > 0");
        ensure!((0.0..1.0).contains(&self.dropout), Config, "lora.dropout must be in [0, 1)");
        Ok(())
    }
}

/// How adapters participate in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdapterMode {
    /// Adapter branch is evaluated (false once merged or when disabled).
    pub active: bool,
    pub scale: f32,
    pub dropout: f32,
}

/// `y = x W^T + b + scale * dropout(x) A^T B^T` with `A: [r, in]`,
/// `B: [out, r]`, `B` zero-initialised.
#[derive(Clone, Debug)]
pub struct AdaptedLinear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub down: ParamId,
    pub up: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl AdaptedLinear {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
        rank: usize,
        base_group: ParamGroup,
        adapter_group: ParamGroup,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = 1.0 / (in_features as f32).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::uniform(rng, &[out_features, in_features], bound),
            base_group,
        );
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                Tensor::zeros(&[out_features]),
                base_group,
            )
        });
        let down = store.add(
            format!("{name}.lora_down"),
            Tensor::uniform(rng, &[rank, in_features], bound),
            adapter_group,
        );
        let up = store.add(
            format!("{name}.lora_up"),
            Tensor::zeros(&[out_features, rank]),
            adapter_group,
        );
        Self {
            weight,
            bias,
            down,
            up,
            in_features,
            out_features,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mode: AdapterMode,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Var {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        let base = g.linear(x, w, b);
        if !mode.active {
            return base;
        }
        let xin = match rng {
            Some(r) if mode.dropout > 0.0 => g.dropout(x, mode.dropout, r),
            _ => x,
        };
        let down = g.param(store, self.down);
        let up = g.param(store, self.up);
        let h = g.linear(xin, down, None);
        let h = g.linear(h, up, None);
        let h = g.scale(h, mode.scale);
        g.add(base, h)
    }

    /// Folds `scale * B A` into the base weight.
    pub fn merge(&self, store: &mut ParamStore, scale: f32) {
        let rank = store.value(self.down).dim(0);
        let mut delta = vec![0.0f32; self.out_features * self.in_features];
        gemm(
            self.out_features,
            rank,
            self.in_features,
            scale,
            store.value(self.up).data(),
            false,
            store.value(self.down).data(),
            false,
            0.0,
            &mut delta,
        );
        let w = store.value_mut(self.weight).data_mut();
        for (a, d) in w.iter_mut().zip(delta) {
            *a += d;
        }
    }
}

/// Draws a deterministic perturbation for adapter tests.
pub fn randomize_adapters(store: &mut ParamStore, rng: &mut ChaCha8Rng, std: f32) {
    let ids: Vec<ParamId> = store
        .iter()
        .filter(|(_, p)| matches!(p.group, ParamGroup::UnetAdapter | ParamGroup::ConditionerAdapter))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v += rng.gen_range(-std..std);
        }
    }
}
