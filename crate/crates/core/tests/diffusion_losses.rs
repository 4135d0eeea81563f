//! Forward/reverse consistency, loss gradients against central differences
//! and the mask identities.

use defectfill_core::diffusion::{ddim_step, diffuse, make_schedule, ScheduleKind};
use defectfill_core::losses::{
    adjusted_mask, attention_loss, combined_loss, defect_loss, object_loss, plain_mse, softmax_rows,
    softmax_rows_backward, AttentionLayer, AttentionStack, LossLayout, LossTerms, LossWeights,
};
use defectfill_core::RunConfig;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn kinds() -> [ScheduleKind; 2] {
    [ScheduleKind::default(), ScheduleKind::Cosine { s: 0.008 }]
}

fn max_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #[test]
    fn one_step_inversion_recovers_x0(seed in any::<u64>(), t in 1usize..=1000, cosine in any::<bool>()) {
        let s = make_schedule(1000, kinds()[cosine as usize]).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x0: Vec<f64> = (0..48).map(|_| r.gen_range(-1.0..1.0)).collect();
        let eps: Vec<f64> = (0..48).map(|_| r.sample(StandardNormal)).collect();
        let xt = diffuse(&x0, t, &eps, &s).unwrap();
        let back = ddim_step(&xt, &eps, t, 0, &s, 0.0).unwrap();
        prop_assert!(max_err(&back, &x0) <= 1e-5);
    }

    #[test]
    fn fifty_step_trajectory_lands_on_x0(seed in any::<u64>(), cosine in any::<bool>()) {
        let s = make_schedule(1000, kinds()[cosine as usize]).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x0: Vec<f64> = (0..48).map(|_| r.gen_range(-1.0..1.0)).collect();
        let eps: Vec<f64> = (0..48).map(|_| r.sample(StandardNormal)).collect();
        let ts = s.inference_timesteps(50).unwrap();
        let mut x = diffuse(&x0, ts[0], &eps, &s).unwrap();
        for (i, &t) in ts.iter().enumerate() {
            let prev = ts.get(i + 1).copied().unwrap_or(0);
            x = ddim_step(&x, &eps, t, prev, &s, 0.0).unwrap();
            if prev > 0 {
                // Each intermediate state stays on the forward marginal.
                prop_assert!(max_err(&x, &diffuse(&x0, prev, &eps, &s).unwrap()) <= 1e-9);
            }
        }
        prop_assert!(max_err(&x, &x0) <= 1e-5);
    }
}

const L: LossLayout = LossLayout { batch: 2, channels: 3, pixels: 64 };

struct Instance {
    eps: Vec<f64>,
    pred: Vec<f64>,
    mask: Vec<f64>,
}

fn instance(seed: u64) -> Instance {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = L.numel();
    Instance {
        eps: (0..n).map(|_| r.sample(StandardNormal)).collect(),
        pred: (0..n).map(|_| r.sample(StandardNormal)).collect(),
        mask: (0..L.batch * L.pixels).map(|_| if r.gen_bool(0.3) { 1.0 } else { 0.0 }).collect(),
    }
}

/// Largest relative error of `grad` against central differences of `f`.
fn fd_rel_error(x: &[f64], grad: &[f64], f: impl Fn(&[f64]) -> f64) -> f64 {
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut x = x.to_vec();
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = f(&x);
        x[i] = orig - h;
        let down = f(&x);
        x[i] = orig;
        let num = (up - down) / (2.0 * h);
        let scale = num.abs().max(grad[i].abs()).max(1e-6);
        worst = worst.max((num - grad[i]).abs() / scale);
    }
    worst
}

#[test]
fn defect_and_object_gradients_match_central_differences() {
    for seed in 0..3 {
        let ins = instance(seed);
        let (_, g) = defect_loss(&ins.eps, &ins.pred, &ins.mask, L).unwrap();
        let err = fd_rel_error(&ins.pred, &g, |p| defect_loss(&ins.eps, p, &ins.mask, L).unwrap().0);
        assert!(err <= 1e-4, "defect {err}");
        for b in 0..L.batch {
            for c in 0..L.channels {
                for p in 0..L.pixels {
                    if ins.mask[b * L.pixels + p] == 0.0 {
                        assert_eq!(g[(b * L.channels + c) * L.pixels + p], 0.0);
                    }
                }
            }
        }
        let adj = adjusted_mask(&ins.mask, 0.3).unwrap();
        let (_, g) = object_loss(&ins.eps, &ins.pred, &adj, L).unwrap();
        let err = fd_rel_error(&ins.pred, &g, |p| object_loss(&ins.eps, p, &adj, L).unwrap().0);
        assert!(err <= 1e-4, "object {err}");
    }
}

/// Two decoder layers at 4x4 and 8x8 over 5 tokens, built from logits so
/// the check also runs through the softmax.
fn attention_from_logits(logits: &[Vec<f64>], batch: usize) -> AttentionStack<f64> {
    let sizes = [4usize, 8];
    let tokens = 5;
    let layers = logits
        .iter()
        .zip(sizes)
        .map(|(lg, s)| {
            // logits are [N, Q, T]; the loss wants [N, T, Q].
            let probs = softmax_rows(lg, tokens);
            let q = s * s;
            let mut maps = vec![0.0; batch * tokens * q];
            for n in 0..batch {
                for qi in 0..q {
                    for t in 0..tokens {
                        maps[(n * tokens + t) * q + qi] = probs[(n * q + qi) * tokens + t];
                    }
                }
            }
            AttentionLayer { height: s, width: s, tokens, maps }
        })
        .collect();
    AttentionStack { batch, layers }
}

#[test]
fn attention_gradient_matches_central_differences_through_softmax() {
    let batch = 2;
    let token = 3;
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let logits: Vec<Vec<f64>> = [4usize, 8]
        .iter()
        .map(|s| (0..batch * s * s * 5).map(|_| r.gen_range(-2.0..2.0)).collect())
        .collect();
    let mask: Vec<f64> = (0..batch * 64).map(|_| if r.gen_bool(0.25) { 1.0 } else { 0.0 }).collect();
    let loss = |lg: &[Vec<f64>]| attention_loss(&attention_from_logits(lg, batch), token, &mask, 8, 8).unwrap();
    let (_, map_grads) = loss(&logits);
    for (li, s) in [4usize, 8].into_iter().enumerate() {
        let q = s * s;
        // Back through the transpose and the softmax.
        let mut g_probs = vec![0.0; batch * q * 5];
        for n in 0..batch {
            for qi in 0..q {
                for t in 0..5 {
                    g_probs[(n * q + qi) * 5 + t] = map_grads[li][(n * 5 + t) * q + qi];
                }
            }
        }
        let probs = softmax_rows(&logits[li], 5);
        let g_logits = softmax_rows_backward(&probs, &g_probs, 5);
        let err = fd_rel_error(&logits[li], &g_logits, |x| {
            let mut lg = logits.clone();
            lg[li] = x.to_vec();
            loss(&lg).0
        });
        assert!(err <= 1e-4, "layer {li}: {err}");
    }
}

#[test]
fn combined_gradient_is_the_weighted_sum() {
    let ins = instance(9);
    let w = LossWeights::default();
    let adj = adjusted_mask(&ins.mask, w.alpha).unwrap();
    let total = |p: &[f64]| {
        let terms = LossTerms {
            defect: defect_loss(&ins.eps, p, &ins.mask, L).unwrap().0,
            object: object_loss(&ins.eps, p, &adj, L).unwrap().0,
            attention: 0.0,
        };
        combined_loss(terms, &w).unwrap()
    };
    let (_, gd) = defect_loss(&ins.eps, &ins.pred, &ins.mask, L).unwrap();
    let (_, go) = object_loss(&ins.eps, &ins.pred, &adj, L).unwrap();
    let g: Vec<f64> = gd.iter().zip(&go).map(|(a, b)| w.lambda_def * a + w.lambda_obj * b).collect();
    assert!(fd_rel_error(&ins.pred, &g, total) <= 1e-4);
    assert!(combined_loss(LossTerms { defect: f64::NAN, ..Default::default() }, &w).is_err());
}

#[test]
fn mask_identities_are_exact() {
    let ins = instance(17);
    let adj = adjusted_mask(&ins.mask, 0.3).unwrap();
    assert!(adj.iter().all(|&v| v == 1.0 || (v - 0.3).abs() <= 1e-12));
    assert!(adj.iter().any(|&v| v == 1.0) && adj.iter().any(|&v| v != 1.0));
    let d = defect_loss(&ins.eps, &ins.pred, &ins.mask, L).unwrap().0;
    let o0 = object_loss(&ins.eps, &ins.pred, &adjusted_mask(&ins.mask, 0.0).unwrap(), L).unwrap().0;
    let o1 = object_loss(&ins.eps, &ins.pred, &adjusted_mask(&ins.mask, 1.0).unwrap(), L).unwrap().0;
    let m = plain_mse(&ins.eps, &ins.pred, L).unwrap().0;
    assert!((o0 - d).abs() <= 1e-12);
    assert!((o1 - m).abs() <= 1e-12);
    assert!(adjusted_mask(&ins.mask, 1.5).is_err());
}

#[test]
fn schedule_kind_is_overridable_from_the_command_line_syntax() {
    let c = RunConfig::default()
        .with_overrides(&[r#"schedule.kind={"kind":"cosine","s":0.008}"#])
        .unwrap();
    assert_eq!(c.schedule.kind, ScheduleKind::Cosine { s: 0.008 });
    assert!(RunConfig::default().with_overrides(&[r#"schedule.kind={"kind":"sigmoid"}"#]).is_err());
}
