//! Kernel distance, perceptual distance, diversity and downstream sanity.

use defectfill_core::eval::{focal_loss, ic_diversity, ic_diversity_with, kid, Classifier, FeatureExtractor, FocalParams, KID_SCALE};
use defectfill_core::Image;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn k3(x: &[f64], y: &[f64]) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / x.len() as f64 + 1.0).powi(3)
}

/// Exhaustive double sums. Equal-sized sets are paired in lexicographic
/// order and the cross term drops the paired diagonal.
fn kid_oracle(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let sort = |s: &[Vec<f64>]| {
        let mut s = s.to_vec();
        s.sort_by(|x, y| x.partial_cmp(y).unwrap());
        s
    };
    let (a, b) = (sort(a), sort(b));
    let (m, n) = (a.len() as f64, b.len() as f64);
    let mut kaa = 0.0;
    let mut kbb = 0.0;
    let mut kab = 0.0;
    for i in 0..a.len() {
        for j in 0..a.len() {
            if i != j {
                kaa += k3(&a[i], &a[j]);
            }
        }
    }
    for i in 0..b.len() {
        for j in 0..b.len() {
            if i != j {
                kbb += k3(&b[i], &b[j]);
            }
        }
    }
    let paired = a.len() == b.len();
    for i in 0..a.len() {
        for j in 0..b.len() {
            if !(paired && i == j) {
                kab += k3(&a[i], &b[j]);
            }
        }
    }
    let cross = if paired { kab / (m * (m - 1.0)) } else { kab / (m * n) };
    (kaa / (m * (m - 1.0)) + kbb / (n * (n - 1.0)) - 2.0 * cross) * KID_SCALE
}

#[test]
fn toy_three_vector_sets_match_double_sums() {
    let a = vec![vec![0.1, 0.5, -0.2], vec![0.9, -0.3, 0.4], vec![-0.6, 0.2, 0.8]];
    let b = vec![vec![0.3, 0.3, 0.3], vec![-0.1, 0.7, 0.0], vec![0.5, -0.5, 1.0]];
    assert!((kid(&a, &b, 3).unwrap() - kid_oracle(&a, &b)).abs() <= 1e-9);
    let c = vec![vec![0.2, -0.4, 0.6], vec![1.0, 0.0, -1.0]];
    assert!((kid(&a, &c, 3).unwrap() - kid_oracle(&a, &c)).abs() <= 1e-9);
    assert!(kid(&a, &a, 3).unwrap().abs() <= 1e-6);
    assert!(kid(&a[..1], &b, 3).is_err());
    assert!(kid(&a, &[vec![0.0; 2], vec![1.0; 2]], 3).is_err());
}

fn point_set() -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 2..7)
}

proptest! {
    #[test]
    fn kid_is_symmetric_and_order_free(a in point_set(), b in point_set(), rot in 0usize..7) {
        let ab = kid(&a, &b, 3).unwrap();
        prop_assert!((ab - kid(&b, &a, 3).unwrap()).abs() <= 1e-9);
        let mut a2 = a.clone();
        let r = rot % a2.len();
        a2.rotate_left(r);
        a2.reverse();
        prop_assert!((ab - kid(&a2, &b, 3).unwrap()).abs() <= 1e-9);
        prop_assert!((ab - kid_oracle(&a, &b)).abs() <= 1e-9);
        prop_assert!(kid(&a, &a, 3).unwrap().abs() <= 1e-6);
    }

    #[test]
    fn diversity_ignores_group_and_image_order(
        vals in prop::collection::vec(prop::collection::vec(0u8..50, 2..6), 1..5),
        shift in 0usize..5,
    ) {
        let images: Vec<Vec<Image>> = vals
            .iter()
            .map(|g| g.iter().map(|&v| Image::filled(1, 1, 1, v as f32 / 50.0)).collect())
            .collect();
        let dist = |a: &Image, rest: &[&Image]| rest.iter().map(|b| (a.data[0] - b.data[0]).abs() as f64).collect();
        let groups: Vec<Vec<&Image>> = images.iter().map(|g| g.iter().collect()).collect();
        let base = ic_diversity_with(&groups, dist).unwrap();
        let mut shuffled: Vec<Vec<&Image>> = groups.iter().rev().cloned().collect();
        for g in &mut shuffled {
            let r = shift % g.len();
            g.rotate_left(r);
            g.reverse();
        }
        prop_assert!((base - ic_diversity_with(&shuffled, dist).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn duplicating_the_medoid_never_raises_the_group_mean(vals in prop::collection::vec(0u8..100, 2..8)) {
        let images: Vec<Image> = vals.iter().map(|&v| Image::filled(1, 1, 1, v as f32)).collect();
        let dist = |a: &Image, rest: &[&Image]| rest.iter().map(|b| ((a.data[0] - b.data[0]) as f64).powi(2)).collect();
        let group: Vec<&Image> = images.iter().collect();
        let before = ic_diversity_with(&[group.clone()], dist).unwrap();
        let total = |i: usize| -> f64 { group.iter().map(|b| ((group[i].data[0] - b.data[0]) as f64).powi(2)).sum() };
        let medoid = (0..group.len()).min_by(|&i, &j| total(i).total_cmp(&total(j))).unwrap();
        let mut grown = group.clone();
        grown.push(group[medoid]);
        prop_assert!(ic_diversity_with(&[grown], dist).unwrap() <= before + 1e-9);
    }
}

#[test]
fn two_groups_with_hand_set_distances() {
    // Distances are |a - b| of single-pixel values.
    let v = |x: f32| Image::filled(1, 1, 1, x);
    let (a, b, c, d, e) = (v(0.0), v(1.0), v(3.0), v(2.0), v(2.5));
    let dist = |x: &Image, rest: &[&Image]| rest.iter().map(|y| (x.data[0] - y.data[0]).abs() as f64).collect();
    // Group one: pairs 1, 3, 2 -> mean 2. Group two: 0.5 -> mean 0.5.
    let got = ic_diversity_with(&[vec![&a, &b, &c], vec![&d, &e]], dist).unwrap();
    assert!((got - 1.25).abs() <= 1e-12);
    assert!(ic_diversity_with(&[vec![&a]], dist).is_err());
}

fn random_image(r: &mut ChaCha8Rng) -> Image {
    Image::new(3, 32, 32, (0..3 * 32 * 32).map(|_| r.gen_range(-0.8f32..0.8)).collect())
}

fn add_noise(img: &Image, sigma: f32, r: &mut ChaCha8Rng) -> Image {
    let mut out = img.clone();
    for v in &mut out.data {
        *v += sigma * r.sample::<f32, _>(StandardNormal);
    }
    out
}

#[test]
fn perceptual_distance_grows_with_noise_on_average() {
    let ex = FeatureExtractor::random(3);
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let (mut small, mut large) = (0.0, 0.0);
    for _ in 0..100 {
        let a = random_image(&mut r);
        small += ex.perceptual_distance(&a, &add_noise(&a, 0.1, &mut r));
        large += ex.perceptual_distance(&a, &add_noise(&a, 0.3, &mut r));
    }
    assert!(small < large, "{small} vs {large}");
}

#[test]
fn perceptual_distance_identity_and_symmetry() {
    let ex = FeatureExtractor::random(5);
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let (a, b) = (random_image(&mut r), random_image(&mut r));
    assert_eq!(ex.perceptual_distance(&a, &a), 0.0);
    assert!((ex.perceptual_distance(&a, &b) - ex.perceptual_distance(&b, &a)).abs() <= 1e-12);
    let same = [a.clone(), a.clone(), a.clone()];
    assert_eq!(ic_diversity(&[same.iter().collect()], &ex).unwrap(), 0.0);
}

#[test]
fn focal_without_focusing_or_balance_is_cross_entropy() {
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let logits: Vec<f64> = (0..64).map(|_| r.gen_range(-6.0..6.0)).collect();
    let targets: Vec<f64> = (0..64).map(|_| if r.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
    let (fl, grad) = focal_loss(&logits, &targets, FocalParams { gamma: 0.0, alpha: None });
    let n = logits.len() as f64;
    let mut ce = 0.0;
    for (&x, &t) in logits.iter().zip(&targets) {
        let p = 1.0 / (1.0 + (-x).exp());
        ce -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    assert!((fl - ce / n).abs() <= 1e-10, "{fl} vs {}", ce / n);
    for ((&x, &t), g) in logits.iter().zip(&targets).zip(grad) {
        let p = 1.0 / (1.0 + (-x).exp());
        assert!((g - (p - t) / n).abs() <= 1e-10);
    }
}

#[test]
fn random_classifier_sits_near_chance() {
    // Four balanced classes of random images; a binomial 4-sigma band.
    let classes: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
    let mut r = ChaCha8Rng::seed_from_u64(21);
    let images: Vec<Image> = (0..400).map(|_| random_image(&mut r)).collect();
    let examples: Vec<(&Image, usize)> = images.iter().enumerate().map(|(i, im)| (im, i % 4)).collect();
    let mut accs = Vec::new();
    for seed in 0..5 {
        let c = Classifier::untrained(classes.clone(), seed).unwrap();
        accs.push(c.accuracy(&examples));
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let band = 4.0 * (0.25f64 * 0.75 / (400.0 * 5.0)).sqrt();
    assert!((mean - 0.25).abs() <= band, "mean accuracy {mean}, accs {accs:?}");
    assert!(Classifier::untrained(vec!["only".into()], 0).is_err());
}
