//! Image and mask containers, PNG I/O and the resampling kernels shared by
//! augmentation, mask downsampling and attention-map resizing.

use std::path::Path;

use num_traits::Float;

use crate::error::{ensure, Error, Result};
use crate::nn::Tensor;

/// Planar (channel-major) image with values in the model range `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

/// Single-channel mask with values in `[0, 1]`; 1 marks the defect region.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

/// Maps an 8-bit code to the model range.
pub fn from_u8(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

/// Maps a model-range value to the nearest 8-bit code.
pub fn to_u8(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), channels * height * width);
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Snaps every value onto the 8-bit grid so that PNG round trips are
    /// exact.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = from_u8(to_u8(*v));
        }
    }

    /// `[1, C, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            &[1, self.channels, self.height, self.width],
            self.data.clone(),
        )
    }

    pub fn from_tensor(t: &Tensor, n: usize) -> Self {
        let s = t.shape();
        let per = s[1] * s[2] * s[3];
        Self::new(s[1], s[2], s[3], t.data()[n * per..(n + 1) * per].to_vec())
    }

    pub fn batch(images: &[&Image]) -> Tensor {
        let first = images[0];
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for im in images {
            assert_eq!(
                (im.channels, im.height, im.width),
                (first.channels, first.height, first.width)
            );
            data.extend_from_slice(&im.data);
        }
        Tensor::new(
            &[images.len(), first.channels, first.height, first.width],
            data,
        )
    }

    /// `(1 - M) * I`: the background image with the masked region removed.
    pub fn masked_background(&self, mask: &Mask) -> Image {
        self.check_mask(mask);
        let mut out = self.clone();
        let p = self.plane_len();
        for c in 0..self.channels {
            for i in 0..p {
                out.data[c * p + i] *= 1.0 - mask.data[i];
            }
        }
        out
    }

    pub fn check_mask(&self, mask: &Mask) {
        assert_eq!(
            (self.height, self.width),
            (mask.height, mask.width),
            "image and mask sizes differ"
        );
    }

    pub fn mean(&self) -> f32 {
        self.data.iter().sum::<f32>() / self.data.len() as f32
    }

    /// Mean over all channels of the pixels where `mask > 0.5`.
    pub fn mean_in_mask(&self, mask: &Mask) -> Option<f32> {
        self.check_mask(mask);
        let p = self.plane_len();
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..p {
            if mask.data[i] > 0.5 {
                for c in 0..self.channels {
                    sum += self.data[c * p + i];
                }
                count += self.channels;
            }
        }
        (count > 0).then(|| sum / count as f32)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        ensure!(self.channels == 3, Shape, "PNG export expects 3 channels, got {}", self.channels);
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let px = image::Rgb([
                    to_u8(self.get(0, y, x)),
                    to_u8(self.get(1, y, x)),
                    to_u8(self.get(2, y, x)),
                ]);
                buf.put_pixel(x as u32, y as u32, px);
            }
        }
        buf.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Image::filled(3, h, w, 0.0);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, from_u8(px[c]));
            }
        }
        Ok(out)
    }

    /// Bilinear resampling to `(height, width)` with half-pixel centers.
    pub fn resize(&self, height: usize, width: usize) -> Image {
        let data = (0..self.channels)
            .flat_map(|c| {
                let plane = &self.data[c * self.plane_len()..(c + 1) * self.plane_len()];
                resize_plane(plane, self.height, self.width, height, width)
            })
            .collect();
        Image::new(self.channels, height, width, data)
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Image {
        assert!(top + height <= self.height && left + width <= self.width);
        let mut out = Image::filled(self.channels, height, width, 0.0);
        for c in 0..self.channels {
            for y in 0..height {
                for x in 0..width {
                    out.set(c, y, x, self.get(c, top + y, left + x));
                }
            }
        }
        out
    }
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), height * width);
        Self {
            height,
            width,
            data,
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![0.0; height * width])
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![1.0; height * width])
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Number of pixels with value above one half.
    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.5).count()
    }

    pub fn area_fraction(&self) -> f64 {
        self.area() as f64 / self.data.len() as f64
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn binarize(&self) -> Mask {
        Mask::new(
            self.height,
            self.width,
            self.data
                .iter()
                .map(|&v| if v > 0.5 { 1.0 } else { 0.0 })
                .collect(),
        )
    }

    /// Inclusive-exclusive bounding box `(top, left, bottom, right)` of the
    /// nonzero region.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) > 0.0 {
                    bb = Some(match bb {
                        None => (y, x, y + 1, x + 1),
                        Some((t, l, b, r)) => (t.min(y), l.min(x), b.max(y + 1), r.max(x + 1)),
                    });
                }
            }
        }
        bb
    }

    /// Area-average downsampling by an integer factor; results stay soft.
    pub fn downsample(&self, factor: usize) -> Result<Mask> {
        ensure!(
            factor >= 1 && self.height % factor == 0 && self.width % factor == 0,
            Shape,
            "mask {}x{} not divisible by factor {factor}",
            self.height,
            self.width
        );
        if factor == 1 {
            return Ok(self.clone());
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let norm = (factor * factor) as f32;
        let mut out = Mask::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        s += self.get(y * factor + dy, x * factor + dx);
                    }
                }
                out.set(y, x, s / norm);
            }
        }
        Ok(out)
    }

    pub fn resize(&self, height: usize, width: usize) -> Mask {
        let data = resize_plane(&self.data, self.height, self.width, height, width)
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect();
        Mask::new(height, width, data)
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Mask {
        let mut out = Mask::zeros(height, width);
        for y in 0..height {
            for x in 0..width {
                out.set(y, x, self.get(top + y, left + x));
            }
        }
        out
    }

    /// `[1, 1, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, 1, self.height, self.width], self.data.clone())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::GrayImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let v = if self.get(y, x) > 0.5 { 255 } else { 0 };
                buf.put_pixel(x as u32, y as u32, image::Luma([v]));
            }
        }
        buf.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Loads an 8-bit mask; any value other than 0 or 255 is rejected.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Mask::zeros(h, w);
        for (x, y, px) in img.enumerate_pixels() {
            let v = match px[0] {
                0 => 0.0,
                255 => 1.0,
                other => {
                    return Err(Error::Data(format!(
                        "corrupt mask {}: value {other} at ({x}, {y})",
                        path.display()
                    )))
                }
            };
            out.set(y as usize, x as usize, v);
        }
        Ok(out)
    }
}

/// Per-output-index `(i0, i1, w1)` taps of a 1-d bilinear resize with
/// half-pixel centers and clamped borders: `out = (1 - w1) in[i0] + w1 in[i1]`.
pub fn bilinear_taps<F: Float>(input: usize, output: usize) -> Vec<(usize, usize, F)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let w1 = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, F::from(w1).unwrap())
        })
        .collect()
}

/// Bilinear resize of a single `h x w` plane.
pub fn resize_plane<F: Float>(plane: &[F], h: usize, w: usize, oh: usize, ow: usize) -> Vec<F> {
    let ty = bilinear_taps::<F>(h, oh);
    let tx = bilinear_taps::<F>(w, ow);
    let mut out = Vec::with_capacity(oh * ow);
    for &(y0, y1, wy) in &ty {
        for &(x0, x1, wx) in &tx {
            let top = plane[y0 * w + x0] * (F::one() - wx) + plane[y0 * w + x1] * wx;
            let bot = plane[y1 * w + x0] * (F::one() - wx) + plane[y1 * w + x1] * wx;
            out.push(top * (F::one() - wy) + bot * wy);
        }
    }
    out
}

/// Adjoint of [`resize_plane`]: scatters an `oh x ow` gradient back onto the
/// `h x w` input grid.
pub fn resize_plane_adjoint<F: Float>(grad: &[F], h: usize, w: usize, oh: usize, ow: usize) -> Vec<F> {
    let ty = bilinear_taps::<F>(h, oh);
    let tx = bilinear_taps::<F>(w, ow);
    let mut out = vec![F::zero(); h * w];
    for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
            let g = grad[oy * ow + ox];
            let one = F::one();
            out[y0 * w + x0] = out[y0 * w + x0] + g * (one - wy) * (one - wx);
            out[y0 * w + x1] = out[y0 * w + x1] + g * (one - wy) * wx;
            out[y1 * w + x0] = out[y1 * w + x0] + g * wy * (one - wx);
            out[y1 * w + x1] = out[y1 * w + x1] + g * wy * wx;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantized_values_survive_png() {
        let dir = tempfile::tempdir().unwrap();
        let mut im = Image::new(3, 2, 2, (0..12).map(|i| i as f32 / 6.0 - 1.0).collect());
        im.quantize();
        let p = dir.path().join("a.png");
        im.save_png(&p).unwrap();
        assert_eq!(Image::load_png(&p).unwrap(), im);
    }

    #[test]
    fn corrupt_mask_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let mut buf = image::GrayImage::new(2, 2);
        buf.put_pixel(1, 1, image::Luma([128]));
        buf.save(&p).unwrap();
        assert!(matches!(Mask::load_png(&p), Err(Error::Data(_))));
    }

    #[test]
    fn identity_resize_is_exact() {
        let plane: Vec<f64> = (0..16).map(|i| i as f64).collect();
        assert_eq!(resize_plane(&plane, 4, 4, 4, 4), plane);
    }

    #[test]
    fn upsampling_a_constant_is_constant() {
        let plane = vec![0.25f64; 4];
        for v in resize_plane(&plane, 2, 2, 5, 3) {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn adjoint_matches_transpose() {
        // <R x, y> == <x, R^T y>
        let (h, w, oh, ow) = (3, 4, 5, 7);
        let x: Vec<f64> = (0..h * w).map(|i| (i as f64 * 0.7).sin()).collect();
        let y: Vec<f64> = (0..oh * ow).map(|i| (i as f64 * 0.3).cos()).collect();
        let rx = resize_plane(&x, h, w, oh, ow);
        let rty = resize_plane_adjoint(&y, h, w, oh, ow);
        let lhs: f64 = rx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&rty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn area_downsample_keeps_soft_values() {
        let mut m = Mask::zeros(4, 4);
        m.set(0, 0, 1.0);
        let d = m.downsample(2).unwrap();
        assert_eq!(d.get(0, 0), 0.25);
        assert!(m.downsample(3).is_err());
    }
}
