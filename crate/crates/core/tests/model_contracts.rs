//! Freeze contract, adapter no-ops, background preservation and
//! low-fidelity selection.

use defectfill_core::corpus::generate_corpus;
use defectfill_core::diffusion::make_schedule;
use defectfill_core::eval::FeatureExtractor;
use defectfill_core::model::{randomize_adapters, PromptTemplate, UnetConfig};
use defectfill_core::nn::Tensor;
use defectfill_core::pipeline::reference_examples;
use defectfill_core::sampler::{low_fidelity_select, reconstruction_score, select_lowest_fidelity};
use defectfill_core::trainer::{train_defect_concept, Session};
use defectfill_core::{CorpusConfig, DenoiserModel, Image, Mask, ModelConfig, SelectionMetric, TrainConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_model() -> DenoiserModel {
    DenoiserModel::new(&ModelConfig {
        unet: UnetConfig {
            widths: [8, 16],
            heads: 2,
            groups: 4,
        },
        ..Default::default()
    })
    .unwrap()
}

fn small_corpus() -> defectfill_core::Dataset {
    generate_corpus(&CorpusConfig {
        image_size: 16,
        defects_per_category: 3,
        normals_count: 4,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn fine_tuning_leaves_frozen_parameters_bit_identical() {
    let corpus = small_corpus();
    let sched = make_schedule(1000, Default::default()).unwrap();
    let cfg = TrainConfig {
        steps: 3,
        batch_size: 2,
        pretrain_steps: 2,
        pretrain_batch_size: 2,
        ..Default::default()
    };
    let base = {
        let mut s = Session::pretrain(small_model(), sched, &cfg).unwrap();
        let normals = defectfill_core::pipeline::normal_examples(&corpus, defectfill_core::Split::Reference).unwrap();
        s.run_until(&normals, u64::MAX, |_| {}).unwrap();
        s.checkpoint()
    };
    let refs = reference_examples(&corpus, "hole").unwrap();
    let tuned = train_defect_concept(&base, &refs, Some("hole".into()), &cfg).unwrap();
    let mut frozen = 0;
    let mut moved = 0;
    for ((_, b), (_, t)) in base.model.store.iter().zip(tuned.model.store.iter()) {
        assert_eq!(b.name, t.name);
        if t.trainable {
            moved += (b.value != t.value) as usize;
        } else {
            frozen += 1;
            assert!(
                b.value.data().iter().zip(t.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()),
                "{} changed",
                b.name
            );
        }
    }
    assert!(frozen > 0 && moved > 0, "frozen {frozen}, moved {moved}");
}

fn probe_inputs(model: &DenoiserModel) -> (Tensor, Vec<usize>, Vec<defectfill_core::model::TokenizedPrompt>) {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::randn(&mut r, &[2, model.input_channels(), 8, 8], 1.0);
    let p = vec![
        model.prompt(PromptTemplate::Defect, "disc").unwrap(),
        model.prompt(PromptTemplate::Object, "disc").unwrap(),
    ];
    (x, vec![50, 700], p)
}

#[test]
fn fresh_adapters_change_nothing_and_merging_is_faithful() {
    let mut m = small_model();
    let (x, ts, p) = probe_inputs(&m);
    let on = m.predict_noise(&x, &ts, &p, false).unwrap().eps;
    m.set_adapters_enabled(false);
    assert_eq!(m.predict_noise(&x, &ts, &p, false).unwrap().eps, on);
    m.set_adapters_enabled(true);
    randomize_adapters(&mut m.store, &mut ChaCha8Rng::seed_from_u64(1), 0.05);
    let unmerged = m.predict_noise(&x, &ts, &p, false).unwrap().eps;
    m.merge_adapters().unwrap();
    m.set_adapters_enabled(false);
    let merged = m.predict_noise(&x, &ts, &p, false).unwrap().eps;
    assert!(merged.max_abs_diff(&unmerged) <= 1e-5);
}

fn textured(seed: u64) -> Image {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut im = Image::new(3, 16, 16, (0..768).map(|_| r.gen_range(-0.9f32..0.9)).collect());
    im.quantize();
    im
}

fn block(top: usize, left: usize, h: usize, w: usize) -> Mask {
    let mut m = Mask::zeros(16, 16);
    for y in top..top + h {
        for x in left..left + w {
            m.set(y, x, 1.0);
        }
    }
    m
}

#[test]
fn inpainting_keeps_the_background_exactly() {
    let model = small_model();
    let sched = make_schedule(1000, Default::default()).unwrap();
    let normal = textured(5);
    let prompt = model.prompt(PromptTemplate::Object, "disc").unwrap();
    let mask = block(3, 4, 6, 5);
    let out = defectfill_core::sampler::inpaint(&model, &sched, &normal, &mask, &prompt, 10, 1).unwrap();
    for y in 0..16 {
        for x in 0..16 {
            for c in 0..3 {
                if mask.get(y, x) == 0.0 {
                    assert_eq!(out.get(c, y, x), normal.get(c, y, x));
                }
            }
        }
    }
    let copy = defectfill_core::sampler::inpaint(&model, &sched, &normal, &Mask::zeros(16, 16), &prompt, 10, 1).unwrap();
    assert_eq!(copy, normal);
}

fn perturbed(img: &Image, mask: &Mask, amount: f32) -> Image {
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            if mask.get(y, x) > 0.5 {
                for c in 0..3 {
                    let v = out.get(c, y, x);
                    out.set(c, y, x, (v + amount).clamp(-1.0, 1.0));
                }
            }
        }
    }
    out
}

#[test]
fn copy_versus_perturbed_picks_the_perturbed_candidate() {
    let ex = FeatureExtractor::random(0);
    let original = textured(8);
    let mask = block(4, 4, 8, 8);
    let candidates = [original.clone(), perturbed(&original, &mask, 0.6)];
    for metric in [SelectionMetric::Psnr, SelectionMetric::Ssim, SelectionMetric::Perceptual] {
        let (idx, _) = low_fidelity_select(&candidates, &original, &mask, metric, &ex).unwrap();
        assert_eq!(idx, 1, "{metric:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn selection_is_the_brute_force_least_faithful(
        amounts in prop::collection::vec(0.0f32..0.8, 2..6),
        metric in prop::sample::select(vec![SelectionMetric::Psnr, SelectionMetric::Ssim, SelectionMetric::Perceptual]),
    ) {
        let ex = FeatureExtractor::random(1);
        let original = textured(2);
        let mask = block(2, 3, 9, 10);
        let candidates: Vec<Image> = amounts.iter().map(|&a| perturbed(&original, &mask, a)).collect();
        let (idx, scores) = low_fidelity_select(&candidates, &original, &mask, metric, &ex).unwrap();
        // Brute force: recompute each score and take the extreme in the
        // unfaithful direction, first index on ties.
        let brute: Vec<f64> = candidates.iter().map(|c| reconstruction_score(c, &original, &mask, metric, &ex).unwrap()).collect();
        prop_assert_eq!(&brute, &scores);
        let mut best = 0;
        for i in 1..brute.len() {
            let worse = match metric {
                SelectionMetric::Perceptual => brute[i] > brute[best],
                _ => brute[i] < brute[best],
            };
            if worse {
                best = i;
            }
        }
        prop_assert_eq!(idx, best);
    }

    #[test]
    fn rescaled_perceptual_scores_keep_the_choice(
        scores in prop::collection::vec(0.0f64..10.0, 1..9),
        scale in 1e-3f64..1e3,
    ) {
        let scaled: Vec<f64> = scores.iter().map(|s| s * scale).collect();
        prop_assert_eq!(
            select_lowest_fidelity(&scores, SelectionMetric::Perceptual),
            select_lowest_fidelity(&scaled, SelectionMetric::Perceptual)
        );
    }
}
