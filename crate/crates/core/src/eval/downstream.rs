//! Downstream inspection models: a defect-category classifier trained with
//! cross-entropy and a pixel segmenter trained with focal loss.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::conv_params;
use super::focal::{focal_loss, FocalParams};
use super::metrics::ScoreMap;
use crate::error::{ensure, Result};
use crate::image::{Image, Mask};
use crate::nn::{Adam, Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DownstreamConfig {
    pub classifier_steps: usize,
    pub segmenter_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub focal: FocalParams,
    /// Random horizontal and vertical flips during training.
    pub flips: bool,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        Self {
            classifier_steps: 300,
            segmenter_steps: 600,
            batch_size: 16,
            lr: 2e-3,
            focal: FocalParams::default(),
            flips: true,
        }
    }
}

impl DownstreamConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size >= 1, Config, "eval.downstream.batch_size must be at least 1");
        ensure!(self.lr > 0.0 && self.lr.is_finite(), Config, "eval.downstream.lr must be positive");
        ensure!(self.focal.gamma >= 0.0, Config, "eval.downstream.focal.gamma must be non-negative");
        if let Some(a) = self.focal.alpha {
            ensure!((0.0..=1.0).contains(&a), Config, "eval.downstream.focal.alpha must lie in [0, 1]");
        }
        Ok(())
    }
}

fn flip_plane(data: &mut [f32], h: usize, w: usize, horizontal: bool, vertical: bool) {
    let src = data.to_vec();
    for y in 0..h {
        for x in 0..w {
            let sy = if vertical { h - 1 - y } else { y };
            let sx = if horizontal { w - 1 - x } else { x };
            data[y * w + x] = src[sy * w + sx];
        }
    }
}

fn flipped(image: &Image, mask: Option<&Mask>, r: &mut ChaCha8Rng) -> (Image, Option<Mask>) {
    let (hf, vf) = (r.gen_bool(0.5), r.gen_bool(0.5));
    let mut im = image.clone();
    let (h, w) = (im.height, im.width);
    for plane in im.data.chunks_mut(h * w) {
        flip_plane(plane, h, w, hf, vf);
    }
    let mask = mask.map(|m| {
        let mut m = m.clone();
        flip_plane(&mut m.data, h, w, hf, vf);
        m
    });
    (im, mask)
}

/// Endless shuffled index stream.
struct Batcher {
    order: Vec<usize>,
    cursor: usize,
}

impl Batcher {
    fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            cursor: n,
        }
    }

    fn next(&mut self, size: usize, r: &mut ChaCha8Rng) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.order.shuffle(r);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

fn conv_relu(g: &mut Graph, store: &ParamStore, x: Var, p: (ParamId, ParamId), stride: usize) -> Var {
    let w = g.param(store, p.0);
    let b = g.param(store, p.1);
    let y = g.conv2d(x, w, Some(b), stride, 1);
    g.relu(y)
}

/// Small conv classifier over defect categories.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub classes: Vec<String>,
    store: ParamStore,
    convs: Vec<(ParamId, ParamId)>,
    head: (ParamId, ParamId),
}

impl Classifier {
    pub fn untrained(classes: Vec<String>, seed: u64) -> Result<Self> {
        ensure!(classes.len() >= 2, InvalidArgument, "classification needs at least two categories");
        let mut r = rng::stream(seed, &[rng::label("classifier-init")]);
        let mut store = ParamStore::new();
        let convs = vec![
            conv_params(&mut store, &mut r, "cls.conv0", 3, 16),
            conv_params(&mut store, &mut r, "cls.conv1", 16, 32),
            conv_params(&mut store, &mut r, "cls.conv2", 32, 32),
        ];
        let k = classes.len();
        let bound = (1.0 / 32.0f32).sqrt();
        let head = (
            store.add("cls.head.weight", Tensor::uniform(&mut r, &[k, 32], bound), ParamGroup::Aux),
            store.add("cls.head.bias", Tensor::zeros(&[k]), ParamGroup::Aux),
        );
        Ok(Self {
            classes,
            store,
            convs,
            head,
        })
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let mut h = x;
        for (&p, s) in self.convs.iter().zip([1, 2, 2]) {
            h = conv_relu(g, &self.store, h, p, s);
        }
        let pooled = g.mean_spatial(h);
        let w = g.param(&self.store, self.head.0);
        let b = g.param(&self.store, self.head.1);
        g.linear(pooled, w, Some(b))
    }

    /// Trains on `(image, class index)` pairs with cross-entropy.
    pub fn train(classes: Vec<String>, examples: &[(&Image, usize)], config: &DownstreamConfig, seed: u64) -> Result<Self> {
        let mut model = Self::untrained(classes, seed)?;
        ensure!(!examples.is_empty(), Data, "empty classifier training set");
        let k = model.classes.len();
        ensure!(examples.iter().all(|e| e.1 < k), InvalidArgument, "class index out of range");
        let mut r = rng::stream(seed, &[rng::label("classifier-train")]);
        let mut batcher = Batcher::new(examples.len());
        let mut opt = Adam::default();
        for _ in 0..config.classifier_steps {
            let idx = batcher.next(config.batch_size, &mut r);
            let imgs: Vec<Image> = idx
                .iter()
                .map(|&i| if config.flips { flipped(examples[i].0, None, &mut r).0 } else { examples[i].0.clone() })
                .collect();
            let refs: Vec<&Image> = imgs.iter().collect();
            let mut g = Graph::new();
            let x = g.input(Image::batch(&refs), false);
            let logits = model.forward(&mut g, x);
            let n = idx.len();
            let mut grad = vec![0.0f32; n * k];
            for (row, &i) in idx.iter().enumerate() {
                let z = &g.value(logits).data()[row * k..(row + 1) * k];
                let m = z.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
                let e: Vec<f32> = z.iter().map(|v| (v - m).exp()).collect();
                let s: f32 = e.iter().sum();
                for c in 0..k {
                    let target = if c == examples[i].1 { 1.0 } else { 0.0 };
                    grad[row * k + c] = (e[c] / s - target) / n as f32;
                }
            }
            let grads = g.backward(vec![(logits, Tensor::new(&[n, k], grad))]);
            let lr = config.lr as f32;
            opt.step(&mut model.store, grads.params(), |_| lr);
        }
        Ok(model)
    }

    pub fn predict(&self, images: &[&Image]) -> Vec<usize> {
        let mut out = Vec::with_capacity(images.len());
        let k = self.classes.len();
        for chunk in images.chunks(64) {
            let mut g = Graph::inference();
            let x = g.input(Image::batch(chunk), false);
            let logits = self.forward(&mut g, x);
            for row in g.value(logits).data().chunks(k) {
                let best = row
                    .iter()
                    .enumerate()
                    .fold((0, f32::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
                out.push(best.0);
            }
        }
        out
    }

    pub fn accuracy(&self, examples: &[(&Image, usize)]) -> f64 {
        if examples.is_empty() {
            return 0.0;
        }
        let images: Vec<&Image> = examples.iter().map(|e| e.0).collect();
        let correct = self
            .predict(&images)
            .iter()
            .zip(examples)
            .filter(|(p, e)| **p == e.1)
            .count();
        correct as f64 / examples.len() as f64
    }
}

/// Encoder-decoder with one skip connection producing per-pixel logits.
#[derive(Clone, Debug)]
pub struct Segmenter {
    store: ParamStore,
    enc0: (ParamId, ParamId),
    enc1: (ParamId, ParamId),
    mid: (ParamId, ParamId),
    dec: (ParamId, ParamId),
    out: (ParamId, ParamId),
}

impl Segmenter {
    pub fn untrained(seed: u64) -> Self {
        let mut r = rng::stream(seed, &[rng::label("segmenter-init")]);
        let mut store = ParamStore::new();
        Self {
            enc0: conv_params(&mut store, &mut r, "seg.enc0", 3, 16),
            enc1: conv_params(&mut store, &mut r, "seg.enc1", 16, 32),
            mid: conv_params(&mut store, &mut r, "seg.mid", 32, 32),
            dec: conv_params(&mut store, &mut r, "seg.dec", 48, 16),
            out: conv_params(&mut store, &mut r, "seg.out", 16, 1),
            store,
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let s = &self.store;
        let e0 = conv_relu(g, s, x, self.enc0, 1);
        let e1 = conv_relu(g, s, e0, self.enc1, 2);
        let m = conv_relu(g, s, e1, self.mid, 1);
        let u = g.upsample2x(m);
        let c = g.concat(u, e0);
        let d = conv_relu(g, s, c, self.dec, 1);
        let w = g.param(s, self.out.0);
        let b = g.param(s, self.out.1);
        g.conv2d(d, w, Some(b), 1, 1)
    }

    /// Trains on images with aligned masks (all-zero for normals).
    pub fn train(examples: &[(&Image, &Mask)], config: &DownstreamConfig, seed: u64) -> Result<Self> {
        ensure!(!examples.is_empty(), Data, "empty segmenter training set");
        for (im, m) in examples {
            ensure!((im.height, im.width) == (m.height, m.width), Shape, "mask does not match its image");
        }
        let mut model = Self::untrained(seed);
        let mut r = rng::stream(seed, &[rng::label("segmenter-train")]);
        let mut batcher = Batcher::new(examples.len());
        let mut opt = Adam::default();
        for _ in 0..config.segmenter_steps {
            let idx = batcher.next(config.batch_size, &mut r);
            let (imgs, masks): (Vec<Image>, Vec<Mask>) = idx
                .iter()
                .map(|&i| {
                    let (im, m) = examples[i];
                    if config.flips {
                        let (a, b) = flipped(im, Some(m), &mut r);
                        (a, b.unwrap())
                    } else {
                        (im.clone(), m.clone())
                    }
                })
                .unzip();
            let refs: Vec<&Image> = imgs.iter().collect();
            let mut g = Graph::new();
            let x = g.input(Image::batch(&refs), false);
            let logits = model.forward(&mut g, x);
            let z: Vec<f64> = g.value(logits).data().iter().map(|&v| v as f64).collect();
            let y: Vec<f64> = masks.iter().flat_map(|m| m.data.iter().map(|&v| v as f64)).collect();
            let (_, grad) = focal_loss(&z, &y, config.focal);
            let shape = g.value(logits).shape().to_vec();
            let seed_grad = Tensor::new(&shape, grad.into_iter().map(|v| v as f32).collect());
            let grads = g.backward(vec![(logits, seed_grad)]);
            let lr = config.lr as f32;
            opt.step(&mut model.store, grads.params(), |_| lr);
        }
        Ok(model)
    }

    /// Per-pixel defect probabilities.
    pub fn score_maps(&self, images: &[&Image]) -> Vec<ScoreMap> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let mut g = Graph::inference();
            let x = g.input(Image::batch(chunk), false);
            let logits = self.forward(&mut g, x);
            let v = g.value(logits);
            let (h, w) = (v.dim(2), v.dim(3));
            for plane in v.data().chunks(h * w) {
                let p = plane.iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect();
                out.push(ScoreMap::new(h, w, p));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny_set() -> Vec<Image> {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        (0..4)
            .map(|i| {
                let base = if i % 2 == 0 { -0.5 } else { 0.5 };
                Image::new(3, 16, 16, (0..768).map(|_| base + r.gen_range(-0.1..0.1)).collect())
            })
            .collect()
    }

    #[test]
    fn classifier_memorises_a_tiny_set() {
        let set = tiny_set();
        let ex: Vec<(&Image, usize)> = set.iter().enumerate().map(|(i, im)| (im, i % 2)).collect();
        let cfg = DownstreamConfig {
            classifier_steps: 60,
            batch_size: 4,
            ..Default::default()
        };
        let c = Classifier::train(vec!["a".into(), "b".into()], &ex, &cfg, 0).unwrap();
        assert_eq!(c.accuracy(&ex), 1.0);
        assert!(Classifier::untrained(vec!["a".into()], 0).is_err());
    }

    #[test]
    fn segmenter_outputs_probabilities() {
        let set = tiny_set();
        let m = Mask::zeros(16, 16);
        let ex: Vec<(&Image, &Mask)> = set.iter().map(|im| (im, &m)).collect();
        let cfg = DownstreamConfig {
            segmenter_steps: 3,
            ..Default::default()
        };
        let s = Segmenter::train(&ex, &cfg, 1).unwrap();
        let maps = s.score_maps(&[&set[0]]);
        assert_eq!((maps[0].height, maps[0].width), (16, 16));
        assert!(maps[0].data.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn flips_move_mask_with_image() {
        let mut im = Image::filled(3, 4, 4, 0.0);
        let mut m = Mask::zeros(4, 4);
        im.set(0, 0, 1, 1.0);
        m.set(0, 1, 1.0);
        let mut r = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..8 {
            let (a, b) = flipped(&im, Some(&m), &mut r);
            let b = b.unwrap();
            for y in 0..4 {
                for x in 0..4 {
                    assert_eq!(a.get(0, y, x), b.get(y, x));
                }
            }
        }
    }
}
