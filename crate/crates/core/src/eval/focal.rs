//! Binary focal loss on logits.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FocalParams {
    pub gamma: f64,
    /// Weight of the positive class; `None` disables class balancing.
    pub alpha: Option<f64>,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: Some(0.25),
        }
    }
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean focal loss and its gradient with respect to each logit.
/// Targets above one half count as positive.
pub fn focal_loss(logits: &[f64], targets: &[f64], params: FocalParams) -> (f64, Vec<f64>) {
    assert_eq!(logits.len(), targets.len());
    let n = logits.len().max(1) as f64;
    let g = params.gamma;
    let mut total = 0.0;
    let grads = logits
        .iter()
        .zip(targets)
        .map(|(&z, &y)| {
            // Mirror negatives onto the positive case: q = sigma(s z).
            let (s, w) = if y > 0.5 {
                (1.0, params.alpha.unwrap_or(1.0))
            } else {
                (-1.0, params.alpha.map_or(1.0, |a| 1.0 - a))
            };
            let q = sigmoid(s * z);
            let log_q = -softplus(-s * z);
            let one_minus = 1.0 - q;
            let modulator = if g == 0.0 { 1.0 } else { one_minus.powf(g) };
            total += -w * modulator * log_q;
            let d = w * modulator * (g * q * log_q - one_minus);
            s * d / n
        })
        .collect();
    (total / n, grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confident_correct_prediction_is_nearly_free() {
        let (l, _) = focal_loss(&[30.0, -30.0], &[1.0, 0.0], FocalParams::default());
        assert!(l <= 1e-6);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let z = [0.3, -1.2, 2.0, -0.1];
        let y = [1.0, 0.0, 0.0, 1.0];
        let p = FocalParams::default();
        let (_, g) = focal_loss(&z, &y, p);
        let h = 1e-6;
        for i in 0..z.len() {
            let mut a = z;
            let mut b = z;
            a[i] += h;
            b[i] -= h;
            let fd = (focal_loss(&a, &y, p).0 - focal_loss(&b, &y, p).0) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8, "{i}: {fd} vs {}", g[i]);
        }
    }
}
