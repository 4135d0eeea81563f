//! Defect, object and attention loss terms with analytic gradients, the
//! random-box mask generator, the adjusted background-weight mask and the
//! weighted combination.
//!
//! Every loss is a mean over all elements and returns its value together
//! with the gradient with respect to the prediction (or the attention maps),
//! generic over the float type so the same code serves `f32` training and
//! `f64` verification.

use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::image::{resize_plane, resize_plane_adjoint, Mask};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_def: f64,
    pub lambda_obj: f64,
    pub lambda_attn: f64,
    /// Background weight inside the adjusted mask.
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_def: 0.5,
            lambda_obj: 0.2,
            lambda_attn: 0.05,
            alpha: 0.3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_def", self.lambda_def),
            ("lambda_obj", self.lambda_obj),
            ("lambda_attn", self.lambda_attn),
        ] {
            ensure!(v >= 0.0 && v.is_finite(), Config, "loss weight {name} must be >= 0, got {v}");
        }
        ensure!(
            self.lambda_def + self.lambda_obj + self.lambda_attn > 0.0,
            Config,
            "at least one loss weight must be positive"
        );
        ensure!((0.0..=1.0).contains(&self.alpha), Config, "alpha must be in [0, 1], got {}", self.alpha);
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoxMaskParams {
    pub n_boxes: usize,
    pub min_side_frac: f64,
    pub max_side_frac: f64,
}

impl Default for BoxMaskParams {
    fn default() -> Self {
        Self {
            n_boxes: 30,
            min_side_frac: 0.03,
            max_side_frac: 0.25,
        }
    }
}

impl BoxMaskParams {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.min_side_frac > 0.0 && self.min_side_frac <= self.max_side_frac && self.max_side_frac <= 1.0,
            Config,
            "box side fractions must satisfy 0 < min <= max <= 1, got {}..{}",
            self.min_side_frac,
            self.max_side_frac
        );
        Ok(())
    }

    /// Discrete side length for a continuous draw in `[min, max] * side`.
    pub fn side_from_draw(draw: f64, side: usize) -> usize {
        (draw.round() as usize).clamp(1, side)
    }
}

/// Union of `n_boxes` axis-aligned boxes. Each side length is drawn
/// uniformly from `[min, max] * image side` (rounded, at least one pixel);
/// the top-left corner is uniform over the positions where the box fits.
pub fn random_box_mask<R: Rng + ?Sized>(rng: &mut R, params: &BoxMaskParams, h: usize, w: usize) -> Mask {
    let mut mask = Mask::zeros(h, w);
    for _ in 0..params.n_boxes {
        let bh = BoxMaskParams::side_from_draw(
            rng.gen_range(params.min_side_frac * h as f64..=params.max_side_frac * h as f64),
            h,
        );
        let bw = BoxMaskParams::side_from_draw(
            rng.gen_range(params.min_side_frac * w as f64..=params.max_side_frac * w as f64),
            w,
        );
        let top = rng.gen_range(0..=h - bh);
        let left = rng.gen_range(0..=w - bw);
        for y in top..top + bh {
            mask.data[y * w + left..y * w + left + bw].fill(1.0);
        }
    }
    mask
}

/// `M' = M + alpha (1 - M)`.
pub fn adjusted_mask<F: Float>(mask: &[F], alpha: f64) -> Result<Vec<F>> {
    ensure!((0.0..=1.0).contains(&alpha), InvalidArgument, "alpha must be in [0, 1], got {alpha}");
    let a = F::from(alpha).unwrap();
    Ok(mask.iter().map(|&m| m + a * (F::one() - m)).collect())
}

/// Shape of a `[N, C, H, W]` prediction whose per-pixel weights are
/// `[N, H, W]` and broadcast over channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossLayout {
    pub batch: usize,
    pub channels: usize,
    pub pixels: usize,
}

impl LossLayout {
    pub fn numel(&self) -> usize {
        self.batch * self.channels * self.pixels
    }
}

/// `mean((w * (eps - pred))^2)` over all `N * C * H * W` elements and its
/// gradient with respect to `pred`.
pub fn weighted_mse<F: Float>(eps: &[F], pred: &[F], weight: &[F], layout: LossLayout) -> Result<(F, Vec<F>)> {
    let n = layout.numel();
    ensure!(eps.len() == n && pred.len() == n, Shape, "expected {n} elements, got eps {} / pred {}", eps.len(), pred.len());
    ensure!(
        weight.len() == layout.batch * layout.pixels,
        Shape,
        "weight has {} elements, expected {}",
        weight.len(),
        layout.batch * layout.pixels
    );
    let count = F::from(n).unwrap();
    let two = F::from(2.0).unwrap();
    let mut total = F::zero();
    let mut grad = vec![F::zero(); n];
    for b in 0..layout.batch {
        for c in 0..layout.channels {
            for p in 0..layout.pixels {
                let i = (b * layout.channels + c) * layout.pixels + p;
                let w = weight[b * layout.pixels + p];
                let r = w * (eps[i] - pred[i]);
                total = total + r * r;
                grad[i] = -two * w * r / count;
            }
        }
    }
    Ok((total / count, grad))
}

/// Denoising error restricted to the defect mask.
pub fn defect_loss<F: Float>(eps: &[F], pred: &[F], mask: &[F], layout: LossLayout) -> Result<(F, Vec<F>)> {
    weighted_mse(eps, pred, mask, layout)
}

/// Denoising error weighted by the adjusted mask `M'` (1 on the defect,
/// `alpha` elsewhere).
pub fn object_loss<F: Float>(eps: &[F], pred: &[F], adjusted: &[F], layout: LossLayout) -> Result<(F, Vec<F>)> {
    weighted_mse(eps, pred, adjusted, layout)
}

/// Unweighted mean squared error.
pub fn plain_mse<F: Float>(eps: &[F], pred: &[F], layout: LossLayout) -> Result<(F, Vec<F>)> {
    let ones = vec![F::one(); layout.batch * layout.pixels];
    weighted_mse(eps, pred, &ones, layout)
}

/// Head-averaged cross-attention maps of one decoder layer, laid out
/// `[N, tokens, height * width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayer<F> {
    pub height: usize,
    pub width: usize,
    pub tokens: usize,
    pub maps: Vec<F>,
}

impl<F: Float> AttentionLayer<F> {
    pub fn token_map(&self, n: usize, token: usize) -> &[F] {
        let p = self.height * self.width;
        let start = (n * self.tokens + token) * p;
        &self.maps[start..start + p]
    }
}

/// Captured decoder cross-attention maps of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStack<F> {
    pub batch: usize,
    pub layers: Vec<AttentionLayer<F>>,
}

/// Averages softmax probabilities `[N * heads, Q, L]` over heads into a
/// token-major map `[N, L, Q]`.
pub fn head_average<F: Float>(probs: &[F], batch: usize, heads: usize, queries: usize, tokens: usize) -> Vec<F> {
    assert_eq!(probs.len(), batch * heads * queries * tokens);
    let inv = F::one() / F::from(heads).unwrap();
    let mut out = vec![F::zero(); batch * tokens * queries];
    for n in 0..batch {
        for h in 0..heads {
            let base = (n * heads + h) * queries * tokens;
            for q in 0..queries {
                for l in 0..tokens {
                    let o = (n * tokens + l) * queries + q;
                    out[o] = out[o] + probs[base + q * tokens + l] * inv;
                }
            }
        }
    }
    out
}

/// Adjoint of [`head_average`].
pub fn head_average_backward<F: Float>(grad: &[F], batch: usize, heads: usize, queries: usize, tokens: usize) -> Vec<F> {
    let inv = F::one() / F::from(heads).unwrap();
    let mut out = vec![F::zero(); batch * heads * queries * tokens];
    for n in 0..batch {
        for h in 0..heads {
            let base = (n * heads + h) * queries * tokens;
            for q in 0..queries {
                for l in 0..tokens {
                    out[base + q * tokens + l] = grad[(n * tokens + l) * queries + q] * inv;
                }
            }
        }
    }
    out
}

/// Row-wise softmax over the last axis of length `d`.
pub fn softmax_rows<F: Float>(logits: &[F], d: usize) -> Vec<F> {
    let mut out = logits.to_vec();
    for row in out.chunks_mut(d) {
        let m = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut s = F::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s = s + *v;
        }
        for v in row.iter_mut() {
            *v = *v / s;
        }
    }
    out
}

/// Gradient of a row-wise softmax with respect to its logits.
pub fn softmax_rows_backward<F: Float>(probs: &[F], grad: &[F], d: usize) -> Vec<F> {
    let mut out = vec![F::zero(); probs.len()];
    for ((p, g), o) in probs.chunks(d).zip(grad.chunks(d)).zip(out.chunks_mut(d)) {
        let dot = p.iter().zip(g).fold(F::zero(), |acc, (&a, &b)| acc + a * b);
        for k in 0..d {
            o[k] = p[k] * (g[k] - dot);
        }
    }
    out
}

/// Layer-averaged `[V*]` attention map resized to `(lh, lw)`, per sample.
pub fn aggregate_token_map<F: Float>(stack: &AttentionStack<F>, token: usize, lh: usize, lw: usize) -> Result<Vec<F>> {
    ensure!(!stack.layers.is_empty(), InvalidArgument, "attention stack is empty");
    let nl = F::from(stack.layers.len()).unwrap();
    let p = lh * lw;
    let mut out = vec![F::zero(); stack.batch * p];
    for layer in &stack.layers {
        ensure!(token < layer.tokens, InvalidArgument, "token index {token} has no attention map ({} tokens)", layer.tokens);
        ensure!(layer.maps.len() == stack.batch * layer.tokens * layer.height * layer.width, Shape, "attention layer size mismatch");
        for n in 0..stack.batch {
            let resized = resize_plane(layer.token_map(n, token), layer.height, layer.width, lh, lw);
            for (o, v) in out[n * p..(n + 1) * p].iter_mut().zip(resized) {
                *o = *o + v / nl;
            }
        }
    }
    Ok(out)
}

/// `mean((A - M)^2)` where `A` is the layer-averaged, resized `[V*]` map.
/// Returns the value and one gradient per layer, shaped like that layer's
/// `maps` and nonzero only on the `[V*]` rows.
pub fn attention_loss<F: Float>(
    stack: &AttentionStack<F>,
    token: usize,
    mask: &[F],
    lh: usize,
    lw: usize,
) -> Result<(F, Vec<Vec<F>>)> {
    let p = lh * lw;
    ensure!(mask.len() == stack.batch * p, Shape, "mask has {} elements, expected {}", mask.len(), stack.batch * p);
    let a = aggregate_token_map(stack, token, lh, lw)?;
    let count = F::from(stack.batch * p).unwrap();
    let two = F::from(2.0).unwrap();
    let nl = F::from(stack.layers.len()).unwrap();
    let mut total = F::zero();
    let mut dmap = vec![F::zero(); a.len()];
    for i in 0..a.len() {
        let r = a[i] - mask[i];
        total = total + r * r;
        dmap[i] = two * r / count / nl;
    }
    let grads = stack
        .layers
        .iter()
        .map(|layer| {
            let lp = layer.height * layer.width;
            let mut g = vec![F::zero(); layer.maps.len()];
            for n in 0..stack.batch {
                let back = resize_plane_adjoint(&dmap[n * p..(n + 1) * p], layer.height, layer.width, lh, lw);
                let start = (n * layer.tokens + token) * lp;
                g[start..start + lp].copy_from_slice(&back);
            }
            g
        })
        .collect();
    Ok((total / count, grads))
}

/// Loss component values for one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub defect: f64,
    pub object: f64,
    pub attention: f64,
}

/// `lambda_def L_def + lambda_obj L_obj + lambda_attn L_attn`.
pub fn combined_loss(terms: LossTerms, weights: &LossWeights) -> Result<f64> {
    for (name, v) in [("defect", terms.defect), ("object", terms.object), ("attention", terms.attention)] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name} loss is {v}")));
        }
    }
    Ok(weights.lambda_def * terms.defect + weights.lambda_obj * terms.object + weights.lambda_attn * terms.attention)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layout(n: usize, c: usize, p: usize) -> LossLayout {
        LossLayout { batch: n, channels: c, pixels: p }
    }

    #[test]
    fn hand_computed_defect_loss() {
        let eps = [2.0f64, 5.0, 5.0, 5.0];
        let pred = [0.0f64; 4];
        let m = [1.0f64, 0.0, 0.0, 0.0];
        let (v, _) = defect_loss(&eps, &pred, &m, layout(1, 1, 4)).unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn exact_prediction_and_full_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let eps: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let pred: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let m: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..1.0)).collect();
        assert_eq!(defect_loss(&eps, &eps, &m, layout(2, 3, 4)).unwrap().0, 0.0);
        let ones = vec![1.0; 8];
        let mse = eps.iter().zip(&pred).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 24.0;
        let (v, _) = defect_loss(&eps, &pred, &ones, layout(2, 3, 4)).unwrap();
        assert!((v - mse).abs() < 1e-15);
        assert!(defect_loss(&eps, &pred[..20], &m, layout(2, 3, 4)).is_err());
    }

    #[test]
    fn adjusted_mask_values() {
        let m = [0.0f64, 1.0, 1.0, 0.0];
        assert_eq!(adjusted_mask(&m, 0.3).unwrap(), vec![0.3, 1.0, 1.0, 0.3]);
        assert_eq!(adjusted_mask(&m, 1.0).unwrap(), vec![1.0; 4]);
        assert_eq!(adjusted_mask(&m, 0.0).unwrap(), m.to_vec());
        assert!(adjusted_mask(&m, 1.5).is_err());
    }

    #[test]
    fn combined_default_weights() {
        let t = LossTerms { defect: 1.0, object: 1.0, attention: 1.0 };
        assert!((combined_loss(t, &LossWeights::default()).unwrap() - 0.75).abs() < 1e-15);
        let only_obj = LossWeights { lambda_def: 0.0, lambda_attn: 0.0, ..LossWeights::default() };
        assert_eq!(combined_loss(LossTerms { defect: 3.0, object: 2.0, attention: 5.0 }, &only_obj).unwrap(), 0.4);
        assert_eq!(combined_loss(LossTerms::default(), &LossWeights::default()).unwrap(), 0.0);
        assert!(matches!(
            combined_loss(LossTerms { defect: f64::NAN, ..LossTerms::default() }, &LossWeights::default()),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn box_mask_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let none = BoxMaskParams { n_boxes: 0, ..BoxMaskParams::default() };
        assert!(random_box_mask(&mut rng, &none, 32, 32).is_empty());
        let full = BoxMaskParams { n_boxes: 1, min_side_frac: 1.0, max_side_frac: 1.0 };
        assert!(random_box_mask(&mut rng, &full, 32, 32).data.iter().all(|&v| v == 1.0));
        let m = random_box_mask(&mut rng, &BoxMaskParams::default(), 32, 32);
        assert!(m.is_binary());
    }

    #[test]
    fn attention_loss_constant_cases() {
        let layer = AttentionLayer { height: 2, width: 2, tokens: 2, maps: vec![0.0f64, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0] };
        let stack = AttentionStack { batch: 1, layers: vec![layer] };
        let (v, _) = attention_loss(&stack, 0, &[1.0; 4], 2, 2).unwrap();
        assert_eq!(v, 1.0);
        let (v, _) = attention_loss(&stack, 1, &[1.0; 4], 2, 2).unwrap();
        assert_eq!(v, 0.0);
        assert!(attention_loss(&stack, 2, &[1.0; 4], 2, 2).is_err());
        let empty: AttentionStack<f64> = AttentionStack { batch: 1, layers: vec![] };
        assert!(attention_loss(&empty, 0, &[1.0; 4], 2, 2).is_err());
    }

    #[test]
    fn head_average_adjoint() {
        let (n, h, q, l) = (2, 3, 4, 5);
        let probs: Vec<f64> = (0..n * h * q * l).map(|i| (i as f64 * 0.37).sin()).collect();
        let g: Vec<f64> = (0..n * l * q).map(|i| (i as f64 * 0.11).cos()).collect();
        let fwd = head_average(&probs, n, h, q, l);
        let back = head_average_backward(&g, n, h, q, l);
        let lhs: f64 = fwd.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = probs.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
