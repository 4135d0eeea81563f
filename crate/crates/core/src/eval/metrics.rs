//! Ranking and localization metrics over anomaly scores.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::image::Mask;

/// False-positive-rate limit of the per-region-overlap integral.
pub const PRO_FPR_LIMIT: f64 = 0.3;

/// Per-pixel anomaly scores for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ScoreMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), height * width);
        Self { height, width, data }
    }

    /// Image-level score: the maximum pixel score.
    pub fn max(&self) -> f64 {
        self.data.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PixelMetrics {
    pub auroc: f64,
    pub ap: f64,
    pub f1_max: f64,
    pub pro: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub auroc: f64,
    pub ap: f64,
    pub f1_max: f64,
}

fn check_labels(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    ensure!(scores.len() == labels.len(), Shape, "{} scores for {} labels", scores.len(), labels.len());
    ensure!(scores.iter().all(|s| s.is_finite()), Numeric, "non-finite anomaly score");
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    ensure!(pos > 0 && neg > 0, Data, "metrics need both positive and negative samples");
    Ok((pos, neg))
}

/// Indices sorted by descending score, grouped into runs of equal scores.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in idx {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Area under the ROC curve from the rank-sum statistic with midranks.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_labels(scores, labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * mid;
        i = j + 1;
    }
    let p = pos as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// Operating points `(tp, fp)` after each distinct threshold, highest first.
fn operating_points(scores: &[f64], labels: &[bool]) -> Vec<(usize, usize)> {
    let mut tp = 0;
    let mut fp = 0;
    tie_groups(scores)
        .into_iter()
        .map(|g| {
            for i in g {
                if labels[i] {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
            (tp, fp)
        })
        .collect()
}

/// Step-wise average precision: sum of precision times recall increments.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = check_labels(scores, labels)?;
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (tp, fp) in operating_points(scores, labels) {
        let recall = tp as f64 / pos as f64;
        ap += (recall - prev_recall) * tp as f64 / (tp + fp) as f64;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Best F1 over every distinct score threshold.
pub fn f1_max(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = check_labels(scores, labels)?;
    Ok(operating_points(scores, labels)
        .into_iter()
        .map(|(tp, fp)| 2.0 * tp as f64 / (tp + pos + fp) as f64)
        .fold(0.0, f64::max))
}

/// Labels 8-connected foreground components; returns per-pixel component
/// ids (`usize::MAX` for background) and the component count.
pub fn connected_components(mask: &Mask) -> (Vec<usize>, usize) {
    let (h, w) = (mask.height, mask.width);
    let mut label = vec![usize::MAX; h * w];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if mask.data[start] <= 0.5 || label[start] != usize::MAX {
            continue;
        }
        label[start] = count;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if mask.data[q] > 0.5 && label[q] == usize::MAX {
                        label[q] = count;
                        stack.push(q);
                    }
                }
            }
        }
        count += 1;
    }
    (label, count)
}

/// Normalised area under the per-region-overlap curve up to
/// [`PRO_FPR_LIMIT`].
///
/// Thresholds sweep every distinct score from high to low. At each one the
/// overlap of every ground-truth component (8-connected, per image) is
/// averaged and paired with the pixel false-positive rate. The curve starts
/// at the origin, is integrated with the trapezoid rule, interpolated at the
/// limit, and divided by the limit.
pub fn pro(maps: &[ScoreMap], masks: &[Mask]) -> Result<f64> {
    ensure!(maps.len() == masks.len(), Shape, "{} score maps for {} masks", maps.len(), masks.len());
    let mut scores = Vec::new();
    let mut component = Vec::new();
    let mut sizes: Vec<usize> = Vec::new();
    for (m, gt) in maps.iter().zip(masks) {
        ensure!((m.height, m.width) == (gt.height, gt.width), Shape, "score map and mask sizes differ");
        let (labels, n) = connected_components(gt);
        let base = sizes.len();
        sizes.extend(std::iter::repeat(0).take(n));
        for (&s, &l) in m.data.iter().zip(&labels) {
            scores.push(s as f64);
            if l == usize::MAX {
                component.push(None);
            } else {
                sizes[base + l] += 1;
                component.push(Some(base + l));
            }
        }
    }
    let negatives = component.iter().filter(|c| c.is_none()).count();
    ensure!(!sizes.is_empty() && negatives > 0, Data, "localization metrics need defect and background pixels");
    ensure!(scores.iter().all(|s| s.is_finite()), Numeric, "non-finite anomaly score");
    let regions = sizes.len() as f64;
    let mut hits = vec![0usize; sizes.len()];
    let mut fp = 0usize;
    let mut curve = vec![(0.0f64, 0.0f64)];
    for g in tie_groups(&scores) {
        for i in g {
            match component[i] {
                None => fp += 1,
                Some(c) => hits[c] += 1,
            }
        }
        // Summed from counts at every point so a full hit is exactly 1.
        let overlap: f64 = hits.iter().zip(&sizes).map(|(&h, &s)| h as f64 / s as f64).sum();
        curve.push((fp as f64 / negatives as f64, overlap / regions));
    }
    Ok(integrate_to(&curve, PRO_FPR_LIMIT) / PRO_FPR_LIMIT)
}

/// Trapezoid area under a curve with non-decreasing x, clipped at `limit`.
pub fn integrate_to(curve: &[(f64, f64)], limit: f64) -> f64 {
    let mut area = 0.0;
    for w in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= limit {
            break;
        }
        if x1 <= limit {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y) / 2.0;
        }
    }
    area
}

pub fn pixel_metrics(maps: &[ScoreMap], masks: &[Mask]) -> Result<PixelMetrics> {
    ensure!(maps.len() == masks.len(), Shape, "{} score maps for {} masks", maps.len(), masks.len());
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (m, gt) in maps.iter().zip(masks) {
        ensure!((m.height, m.width) == (gt.height, gt.width), Shape, "score map and mask sizes differ");
        scores.extend(m.data.iter().map(|&s| s as f64));
        labels.extend(gt.data.iter().map(|&v| v > 0.5));
    }
    Ok(PixelMetrics {
        auroc: auroc(&scores, &labels)?,
        ap: average_precision(&scores, &labels)?,
        f1_max: f1_max(&scores, &labels)?,
        pro: pro(maps, masks)?,
    })
}

pub fn image_metrics(scores: &[f64], labels: &[bool]) -> Result<ImageMetrics> {
    Ok(ImageMetrics {
        auroc: auroc(scores, labels)?,
        ap: average_precision(scores, labels)?,
        f1_max: f1_max(scores, labels)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_constant_predictors() {
        let labels = [true, false, true, false, false];
        let perfect = [0.9, 0.1, 0.8, 0.2, 0.3];
        let m = image_metrics(&perfect, &labels).unwrap();
        assert_eq!((m.auroc, m.ap, m.f1_max), (1.0, 1.0, 1.0));
        assert!((auroc(&[0.4; 5], &labels).unwrap() - 0.5).abs() < 1e-12);
        assert!(auroc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn inverted_predictor_has_zero_auroc() {
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[true, true, false, false]).unwrap(), 0.0);
    }

    #[test]
    fn components_use_diagonal_connectivity() {
        let m = Mask::new(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        assert_eq!(connected_components(&m).1, 1);
        let m = Mask::new(3, 3, vec![1., 0., 1., 0., 0., 0., 1., 0., 1.]);
        assert_eq!(connected_components(&m).1, 4);
    }

    #[test]
    fn clipped_integral_interpolates() {
        let c = [(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)];
        assert!((integrate_to(&c, 0.3) - 0.3).abs() < 1e-15);
        let c = [(0.0, 0.0), (0.6, 0.6)];
        assert!((integrate_to(&c, 0.3) - 0.045).abs() < 1e-15);
    }
}
