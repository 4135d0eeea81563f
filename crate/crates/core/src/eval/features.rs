//! Small convolutional feature extractor shared by the kernel distance, the
//! perceptual distance and low-fidelity selection.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::image::Image;
use crate::nn::{Adam, Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    FixedSeededRandom,
    TrainedOnCorpus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorConfig {
    /// Train with a reconstruction objective on the corpus before use.
    pub train: bool,
    pub train_steps: usize,
    pub seed: u64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            train: false,
            train_steps: 300,
            seed: 0,
        }
    }
}

const WIDTHS: [usize; 3] = [16, 32, 64];
const STRIDES: [usize; 3] = [1, 2, 2];
/// Side length patches are resized to before perceptual comparison.
pub const PATCH_SIZE: usize = 32;

#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub provenance: Provenance,
    store: ParamStore,
    convs: Vec<(ParamId, ParamId)>,
}

pub(crate) fn conv_params(store: &mut ParamStore, r: &mut rand_chacha::ChaCha8Rng, name: &str, cin: usize, cout: usize) -> (ParamId, ParamId) {
    let bound = (6.0 / (cin * 9) as f32).sqrt();
    (
        store.add(format!("{name}.weight"), Tensor::uniform(r, &[cout, cin, 3, 3], bound), ParamGroup::Aux),
        store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), ParamGroup::Aux),
    )
}

impl FeatureExtractor {
    /// Deterministic random weights (He-uniform) from `seed`.
    pub fn random(seed: u64) -> Self {
        let mut r = rng::stream(seed, &[rng::label("feature-extractor")]);
        let mut store = ParamStore::new();
        let mut cin = 3;
        let mut convs = Vec::new();
        for (i, &w) in WIDTHS.iter().enumerate() {
            convs.push(conv_params(&mut store, &mut r, &format!("features.conv{i}"), cin, w));
            cin = w;
        }
        Self {
            provenance: Provenance::FixedSeededRandom,
            store,
            convs,
        }
    }

    pub fn from_config(config: &ExtractorConfig, images: &[&Image]) -> Result<Self> {
        let mut f = Self::random(config.seed);
        if config.train {
            f.train(images, config.train_steps, config.seed)?;
        }
        Ok(f)
    }

    fn layers(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Vec<Var> {
        let mut h = x;
        let mut out = Vec::with_capacity(3);
        for (&(w, b), &s) in self.convs.iter().zip(&STRIDES) {
            let wv = g.param(store, w);
            let bv = g.param(store, b);
            h = g.conv2d(h, wv, Some(bv), s, 1);
            h = g.relu(h);
            out.push(h);
        }
        out
    }

    /// Self-supervised reconstruction training through a throwaway decoder.
    pub fn train(&mut self, images: &[&Image], steps: usize, seed: u64) -> Result<()> {
        ensure!(!images.is_empty(), Data, "no images to train the feature extractor on");
        let mut r = rng::stream(seed, &[rng::label("feature-train")]);
        // The throwaway decoder shares the store so parameter ids stay unique.
        let mut store = self.store.clone();
        let d1 = conv_params(&mut store, &mut r, "decoder.conv0", 64, 32);
        let d2 = conv_params(&mut store, &mut r, "decoder.conv1", 32, 3);
        let mut opt = Adam::default();
        let mut order: Vec<usize> = (0..images.len()).collect();
        let mut cursor = order.len();
        for _ in 0..steps {
            let mut batch = Vec::new();
            while batch.len() < 16 {
                if cursor == order.len() {
                    order.shuffle(&mut r);
                    cursor = 0;
                }
                batch.push(images[order[cursor]]);
                cursor += 1;
            }
            let x = Image::batch(&batch);
            let mut g = Graph::new();
            let xv = g.input(x.clone(), false);
            let feats = self.layers(&mut g, &store, xv);
            let mut h = g.upsample2x(feats[2]);
            let (w, b) = (g.param(&store, d1.0), g.param(&store, d1.1));
            h = g.conv2d(h, w, Some(b), 1, 1);
            h = g.relu(h);
            h = g.upsample2x(h);
            let (w, b) = (g.param(&store, d2.0), g.param(&store, d2.1));
            let y = g.conv2d(h, w, Some(b), 1, 1);
            let n = x.numel() as f32;
            let grad = g.value(y).zip_map(&x, |a, b| 2.0 * (a - b) / n);
            let grads = g.backward(vec![(y, grad)]);
            opt.step(&mut store, grads.params(), |_| 2e-3);
        }
        for (id, _) in self.store.clone().iter() {
            *self.store.value_mut(id) = store.value(id).clone();
        }
        self.provenance = Provenance::TrainedOnCorpus;
        Ok(())
    }

    /// Per-layer feature maps for a `[N, 3, H, W]` batch.
    pub fn feature_maps(&self, x: &Tensor) -> Vec<Tensor> {
        let mut g = Graph::inference();
        let xv = g.input(x.clone(), false);
        self.layers(&mut g, &self.store, xv).into_iter().map(|v| g.value(v).clone()).collect()
    }

    /// Unit-normalised concatenation of spatially pooled layer features.
    pub fn embed(&self, images: &[&Image]) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            let maps = self.feature_maps(&Image::batch(chunk));
            for i in 0..chunk.len() {
                let mut v = Vec::with_capacity(WIDTHS.iter().sum());
                for m in &maps {
                    let (c, p) = (m.dim(1), m.dim(2) * m.dim(3));
                    for ch in 0..c {
                        let s = &m.data()[(i * c + ch) * p..(i * c + ch + 1) * p];
                        v.push(s.iter().map(|&x| x as f64).sum::<f64>() / p as f64);
                    }
                }
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.iter_mut().for_each(|x| *x /= norm);
                out.push(v);
            }
        }
        out
    }

    /// Mean over layers of the spatially averaged squared distance between
    /// channel-normalised feature maps.
    pub fn perceptual_distance(&self, a: &Image, b: &Image) -> f64 {
        self.perceptual_distances(a, &[b])[0]
    }

    /// Distances from `reference` to each image in `others` in one batch.
    pub fn perceptual_distances(&self, reference: &Image, others: &[&Image]) -> Vec<f64> {
        let mut all: Vec<&Image> = vec![reference];
        all.extend_from_slice(others);
        let maps = self.feature_maps(&Image::batch(&all));
        let normed: Vec<Vec<f64>> = maps.iter().map(normalize_channels).collect();
        (1..all.len())
            .map(|j| {
                let mut total = 0.0;
                for (m, nm) in maps.iter().zip(&normed) {
                    let per = m.numel() / m.dim(0);
                    let p = m.dim(2) * m.dim(3);
                    let d: f64 = nm[..per].iter().zip(&nm[j * per..(j + 1) * per]).map(|(x, y)| (x - y).powi(2)).sum();
                    total += d / p as f64;
                }
                total / maps.len() as f64
            })
            .collect()
    }
}

/// Scales every spatial feature vector to unit length across channels.
fn normalize_channels(m: &Tensor) -> Vec<f64> {
    let (n, c, p) = (m.dim(0), m.dim(1), m.dim(2) * m.dim(3));
    let mut out: Vec<f64> = m.data().iter().map(|&v| v as f64).collect();
    for s in 0..n {
        for q in 0..p {
            let norm = (0..c).map(|ch| out[(s * c + ch) * p + q].powi(2)).sum::<f64>().sqrt() + 1e-10;
            for ch in 0..c {
                out[(s * c + ch) * p + q] /= norm;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise_image(r: &mut ChaCha8Rng) -> Image {
        Image::new(3, 16, 16, (0..768).map(|_| r.gen_range(-0.8..0.8)).collect())
    }

    #[test]
    fn embeddings_are_unit_and_deterministic() {
        let f = FeatureExtractor::random(3);
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let a = noise_image(&mut r);
        let e1 = f.embed(&[&a]);
        let e2 = FeatureExtractor::random(3).embed(&[&a]);
        assert_eq!(e1, e2);
        let n: f64 = e1[0].iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-9);
    }

    #[test]
    fn perceptual_distance_is_zero_on_self_and_symmetric() {
        let f = FeatureExtractor::random(1);
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let a = noise_image(&mut r);
        let b = noise_image(&mut r);
        assert_eq!(f.perceptual_distance(&a, &a), 0.0);
        let (ab, ba) = (f.perceptual_distance(&a, &b), f.perceptual_distance(&b, &a));
        assert!((ab - ba).abs() < 1e-12);
        assert!(ab > 0.0);
    }
}
