//! Distribution distance and within-condition diversity.

use std::cmp::Ordering;

use crate::error::{ensure, Result};
use crate::image::Image;

use super::features::FeatureExtractor;

/// Scale applied to the kernel distance in reports.
pub const KID_SCALE: f64 = 1000.0;

fn poly_kernel(x: &[f64], y: &[f64], degree: i32) -> f64 {
    let d = x.len() as f64;
    (x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / d + 1.0).powi(degree)
}

fn lex(a: &Vec<f64>, b: &Vec<f64>) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Unbiased squared MMD with the polynomial kernel `(x.y/d + 1)^degree`,
/// scaled by [`KID_SCALE`].
///
/// Equal-sized sets use the pairwise U-statistic
/// `1/(m(m-1)) sum_{i!=j} k(a_i,a_j) + k(b_i,b_j) - k(a_i,b_j) - k(a_j,b_i)`
/// with both sets sorted lexicographically first, which makes the value
/// independent of element order and exactly zero for identical sets.
/// Unequal sizes fall back to the two-sample estimator with the full cross
/// mean.
pub fn kid(a: &[Vec<f64>], b: &[Vec<f64>], degree: i32) -> Result<f64> {
    ensure!(a.len() >= 2 && b.len() >= 2, InvalidArgument, "kernel distance needs at least two samples per set");
    let d = a[0].len();
    ensure!(
        a.iter().chain(b).all(|v| v.len() == d),
        Shape,
        "feature dimensions differ"
    );
    let within = |s: &[Vec<f64>]| {
        let n = s.len();
        let mut t = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    t += poly_kernel(&s[i], &s[j], degree);
                }
            }
        }
        t / (n * (n - 1)) as f64
    };
    let value = if a.len() == b.len() {
        let mut a: Vec<Vec<f64>> = a.to_vec();
        let mut b: Vec<Vec<f64>> = b.to_vec();
        a.sort_by(lex);
        b.sort_by(lex);
        let m = a.len();
        let mut cross = 0.0;
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    cross += poly_kernel(&a[i], &b[j], degree);
                }
            }
        }
        // Symmetric in i,j so the two cross terms are equal in sum.
        within(&a) + within(&b) - 2.0 * cross / (m * (m - 1)) as f64
    } else {
        let mut cross = 0.0;
        for x in a {
            for y in b {
                cross += poly_kernel(x, y, degree);
            }
        }
        within(a) + within(b) - 2.0 * cross / (a.len() * b.len()) as f64
    };
    Ok(value * KID_SCALE)
}

/// Mean over groups of the mean pairwise distance inside each group.
pub fn ic_diversity_with(groups: &[Vec<&Image>], dist: impl Fn(&Image, &[&Image]) -> Vec<f64>) -> Result<f64> {
    ensure!(!groups.is_empty(), InvalidArgument, "no groups for diversity");
    let mut total = 0.0;
    for g in groups {
        ensure!(g.len() >= 2, InvalidArgument, "diversity group has {} image(s), needs at least two", g.len());
        let mut s = 0.0;
        for i in 0..g.len() - 1 {
            s += dist(g[i], &g[i + 1..]).iter().sum::<f64>();
        }
        total += s / (g.len() * (g.len() - 1) / 2) as f64;
    }
    Ok(total / groups.len() as f64)
}

pub fn ic_diversity(groups: &[Vec<&Image>], extractor: &FeatureExtractor) -> Result<f64> {
    ic_diversity_with(groups, |a, rest| extractor.perceptual_distances(a, rest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn points(r: &mut ChaCha8Rng, n: usize, d: usize, shift: f64) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| r.gen_range(-1.0..1.0) + shift).collect()).collect()
    }

    #[test]
    fn identical_sets_give_zero() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let a = points(&mut r, 12, 5, 0.0);
        assert!(kid(&a, &a, 3).unwrap().abs() <= 1e-6);
        let mut shuffled = a.clone();
        shuffled.reverse();
        assert!(kid(&a, &shuffled, 3).unwrap().abs() <= 1e-6);
    }

    #[test]
    fn separated_clusters_are_farther_than_held_out_half() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let a = points(&mut r, 40, 4, 0.0);
        let (a1, a2) = a.split_at(20);
        let b = points(&mut r, 20, 4, 2.0);
        assert!(kid(a1, &b, 3).unwrap() > kid(a1, a2, 3).unwrap());
    }

    #[test]
    fn symmetric_and_rejects_bad_input() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let a = points(&mut r, 6, 3, 0.0);
        let b = points(&mut r, 6, 3, 0.5);
        assert!((kid(&a, &b, 3).unwrap() - kid(&b, &a, 3).unwrap()).abs() < 1e-12);
        assert!(kid(&a[..1], &b, 3).is_err());
        assert!(kid(&a, &points(&mut r, 4, 2, 0.0), 3).is_err());
    }

    #[test]
    fn identical_images_have_zero_diversity() {
        let f = FeatureExtractor::random(0);
        let im = Image::filled(3, 16, 16, 0.2);
        assert_eq!(ic_diversity(&[vec![&im, &im, &im]], &f).unwrap(), 0.0);
        assert!(ic_diversity(&[vec![&im]], &f).is_err());
    }
}
