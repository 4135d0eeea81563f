use serde::{Deserialize, Serialize};

use super::params::{ParamGroup, ParamId, ParamStore};
use super::Tensor;

/// Adam with decoupled weight decay. Moment buffers are keyed by parameter
/// index so optimizer state can be checkpointed alongside the store.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub step: u64,
    #[serde(skip)]
    pub(crate) moments: Vec<Option<(Vec<f32>, Vec<f32>)>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            moments: Vec::new(),
        }
    }
}

impl Adam {
    /// Applies one update. `lr` maps a parameter group to its (already
    /// warmed-up) learning rate; parameters without a gradient are untouched.
    pub fn step<'a>(
        &mut self,
        store: &mut ParamStore,
        grads: impl IntoIterator<Item = (ParamId, &'a Tensor)>,
        lr: impl Fn(ParamGroup) -> f32,
    ) {
        self.step += 1;
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads {
            let param = store.get(id);
            if !param.trainable {
                continue;
            }
            let rate = lr(param.group);
            let n = g.numel();
            let (m, v) = self.moments[id.0].get_or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let value = store.value_mut(id).data_mut();
            for i in 0..n {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                value[i] -= rate * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * value[i]);
            }
        }
    }

    pub fn moments(&self) -> &[Option<(Vec<f32>, Vec<f32>)>] {
        &self.moments
    }

    pub fn set_moments(&mut self, moments: Vec<Option<(Vec<f32>, Vec<f32>)>>) {
        self.moments = moments;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(&[2], vec![3.0, -2.0]), ParamGroup::Aux);
        let mut opt = Adam::default();
        for _ in 0..2000 {
            let w = store.value(id).clone();
            let g = w.map(|v| 2.0 * (v - 1.0));
            opt.step(&mut store, [(id, &g)], |_| 0.01);
        }
        for v in store.value(id).data() {
            assert!((v - 1.0).abs() < 1e-2, "{v}");
        }
    }

    #[test]
    fn frozen_parameters_are_untouched() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(&[1], vec![0.5]), ParamGroup::Backbone);
        store.set_trainable_groups(&[ParamGroup::UnetAdapter]);
        let mut opt = Adam::default();
        let g = Tensor::new(&[1], vec![1.0]);
        opt.step(&mut store, [(id, &g)], |_| 1.0);
        assert_eq!(store.value(id).data()[0].to_bits(), 0.5f32.to_bits());
    }
}
