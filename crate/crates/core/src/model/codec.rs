//! Image codec: identity pass-through or a small convolutional autoencoder
//! with a 2x spatial downscale.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::image::Image;
use crate::nn::{Adam, Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CodecMode {
    Identity,
    TinyAutoencoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub mode: CodecMode,
    pub latent_channels: usize,
    pub hidden: usize,
    pub train_steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Reconstruction MSE the trained autoencoder must reach.
    pub mse_bound: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            mode: CodecMode::Identity,
            latent_channels: 4,
            hidden: 32,
            train_steps: 600,
            batch_size: 8,
            lr: 2e-3,
            mse_bound: 0.01,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.latent_channels >= 1 && self.hidden >= 1, Config, "codec channel counts must be >= 1");
        ensure!(self.batch_size >= 1, Config, "codec.batch_size must be >= 1");
        ensure!(self.lr > 0.0 && self.mse_bound > 0.0, Config, "codec.lr and codec.mse_bound must be > 0");
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Layer {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
pub struct Codec {
    pub config: CodecConfig,
    pub store: ParamStore,
    layers: Vec<Layer>,
}

impl Codec {
    pub fn new(config: &CodecConfig, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut layers = Vec::new();
        if config.mode == CodecMode::TinyAutoencoder {
            let mut r = rng::stream(seed, &[rng::label("codec")]);
            let (h, l) = (config.hidden, config.latent_channels);
            for (name, cin, cout) in [("enc1", 3, h), ("enc2", h, l), ("dec1", l, h), ("dec2", h, 3)] {
                let bound = 1.0 / ((cin * 9) as f32).sqrt();
                layers.push(Layer {
                    w: store.add(format!("codec.{name}.weight"), Tensor::uniform(&mut r, &[cout, cin, 3, 3], bound), ParamGroup::Aux),
                    b: store.add(format!("codec.{name}.bias"), Tensor::zeros(&[cout]), ParamGroup::Aux),
                });
            }
        }
        Self {
            config: config.clone(),
            store,
            layers,
        }
    }

    pub fn mode(&self) -> CodecMode {
        self.config.mode
    }

    pub fn factor(&self) -> usize {
        match self.config.mode {
            CodecMode::Identity => 1,
            CodecMode::TinyAutoencoder => 2,
        }
    }

    pub fn latent_channels(&self) -> usize {
        match self.config.mode {
            CodecMode::Identity => 3,
            CodecMode::TinyAutoencoder => self.config.latent_channels,
        }
    }

    /// Latent `(C, H, W)` for an image of the given size.
    pub fn latent_shape(&self, height: usize, width: usize) -> (usize, usize, usize) {
        let f = self.factor();
        (self.latent_channels(), height / f, width / f)
    }

    fn conv(&self, g: &mut Graph, i: usize, x: Var, stride: usize) -> Var {
        let w = g.param(&self.store, self.layers[i].w);
        let b = g.param(&self.store, self.layers[i].b);
        g.conv2d(x, w, Some(b), stride, 1)
    }

    fn encode_graph(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.conv(g, 0, x, 1);
        let h = g.silu(h);
        self.conv(g, 1, h, 2)
    }

    fn decode_graph(&self, g: &mut Graph, z: Var) -> Var {
        let h = g.upsample2x(z);
        let h = self.conv(g, 2, h, 1);
        let h = g.silu(h);
        self.conv(g, 3, h, 1)
    }

    /// `[N, 3, H, W]` images in `[-1, 1]` to latents.
    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        ensure!(images.shape().len() == 4 && images.dim(1) == 3, Shape, "codec expects [N, 3, H, W], got {:?}", images.shape());
        ensure!(
            images.data().iter().all(|v| (-1.0..=1.0).contains(v)),
            InvalidArgument,
            "image values outside [-1, 1]"
        );
        match self.config.mode {
            CodecMode::Identity => Ok(images.clone()),
            CodecMode::TinyAutoencoder => {
                ensure!(images.dim(2) % 2 == 0 && images.dim(3) % 2 == 0, Shape, "image size must be even for the autoencoder");
                let mut g = Graph::inference();
                let x = g.input(images.clone(), false);
                let z = self.encode_graph(&mut g, x);
                Ok(g.value(z).clone())
            }
        }
    }

    pub fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        ensure!(latents.shape().len() == 4 && latents.dim(1) == self.latent_channels(), Shape, "latent shape {:?} does not match the codec", latents.shape());
        match self.config.mode {
            CodecMode::Identity => Ok(latents.clone()),
            CodecMode::TinyAutoencoder => {
                let mut g = Graph::inference();
                let z = g.input(latents.clone(), false);
                let x = self.decode_graph(&mut g, z);
                Ok(g.value(x).clone())
            }
        }
    }

    pub fn encode_image(&self, image: &Image) -> Result<Tensor> {
        self.encode(&image.to_tensor())
    }

    /// Trains the autoencoder on `images` with a reconstruction MSE and
    /// returns the final MSE over the whole set. No-op for identity.
    pub fn fit(&mut self, images: &[&Image], seed: u64) -> Result<f64> {
        if self.config.mode == CodecMode::Identity {
            return Ok(0.0);
        }
        ensure!(!images.is_empty(), Data, "no images to train the codec on");
        let mut r = rng::stream(seed, &[rng::label("codec-fit")]);
        let mut adam = Adam::default();
        let mut order: Vec<usize> = (0..images.len()).collect();
        let mut cursor = order.len();
        for _ in 0..self.config.train_steps {
            let mut batch = Vec::with_capacity(self.config.batch_size);
            while batch.len() < self.config.batch_size {
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
            let z = self.encode_graph(&mut g, xv);
            let y = self.decode_graph(&mut g, z);
            let n = x.numel() as f32;
            let diff = g.value(y).zip_map(&x, |a, b| 2.0 * (a - b) / n);
            let grads = g.backward(vec![(y, diff)]);
            let lr = self.config.lr;
            adam.step(&mut self.store, grads.params(), |_| lr);
        }
        let mse = self.reconstruction_mse(images)?;
        if !mse.is_finite() {
            return Err(Error::Numeric("codec training diverged".into()));
        }
        Ok(mse)
    }

    pub fn reconstruction_mse(&self, images: &[&Image]) -> Result<f64> {
        let mut total = 0.0f64;
        let mut count = 0usize;
        for chunk in images.chunks(16) {
            let x = Image::batch(chunk);
            let y = self.decode(&self.encode(&x)?)?;
            total += x.data().iter().zip(y.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>();
            count += x.numel();
        }
        Ok(total / count as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_round_trip_is_exact() {
        let c = Codec::new(&CodecConfig::default(), 0);
        let t = Tensor::new(&[1, 3, 2, 2], vec![-1.0, -0.5, 0.0, 0.25, 0.5, 1.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let z = c.encode(&t).unwrap();
        assert_eq!(c.decode(&z).unwrap(), t);
    }

    #[test]
    fn out_of_range_input_is_rejected() {
        let c = Codec::new(&CodecConfig::default(), 0);
        let t = Tensor::full(&[1, 3, 2, 2], 1.5);
        assert!(matches!(c.encode(&t), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn autoencoder_latent_shape() {
        let cfg = CodecConfig {
            mode: CodecMode::TinyAutoencoder,
            ..Default::default()
        };
        let c = Codec::new(&cfg, 1);
        let z = c.encode(&Tensor::zeros(&[2, 3, 32, 32])).unwrap();
        assert_eq!(z.shape(), &[2, 4, 16, 16]);
        assert_eq!(c.latent_shape(32, 32), (4, 16, 16));
        assert_eq!(c.decode(&z).unwrap().shape(), &[2, 3, 32, 32]);
    }
}
