//! Saliency metrics: MAE, threshold-averaged F-measure and E-measure, and
//! the structure measure.

use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{Error, Result};

pub const F_BETA_SQ: f64 = 0.3;
pub const S_ALPHA: f64 = 0.5;
pub const NUM_THRESHOLDS: usize = 256;
const EPS: f64 = f64::EPSILON;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyScores {
    pub mae: f64,
    pub f_mean: f64,
    pub e_mean: f64,
    pub s_measure: f64,
    pub n_scenes: usize,
}

fn check_pair(pred: &Image, gt: &Image) -> Result<()> {
    if pred.channels() != 1 || gt.channels() != 1 || pred.dims() != gt.dims() {
        return Err(Error::Dimension {
            op: "metric",
            lhs: vec![pred.channels(), pred.height(), pred.width()],
            rhs: vec![gt.channels(), gt.height(), gt.width()],
        });
    }
    Ok(())
}

fn fg(gt: &Image) -> impl Iterator<Item = bool> + '_ {
    gt.pixels().iter().map(|&g| g >= 0.5)
}

pub fn mae(pred: &Image, gt: &Image) -> Result<f64> {
    check_pair(pred, gt)?;
    let sum: f64 = pred.pixels().iter().zip(gt.pixels()).map(|(p, g)| (p - g).abs()).sum();
    Ok(sum / pred.len() as f64)
}

/// For every pixel, how many thresholds `t/255` (t = 0..255) it reaches.
fn threshold_levels(pred: &Image) -> Vec<usize> {
    let thresholds: Vec<f64> = (0..NUM_THRESHOLDS).map(|t| t as f64 / 255.0).collect();
    pred.pixels()
        .iter()
        .map(|&p| thresholds.partition_point(|&t| t <= p))
        .collect()
}

/// Per threshold `t`, the number of foreground and background pixels with
/// `pred ≥ t/255`.
fn positive_counts(pred: &Image, gt: &Image) -> (Vec<usize>, Vec<usize>) {
    let mut fg_hist = vec![0usize; NUM_THRESHOLDS + 1];
    let mut bg_hist = vec![0usize; NUM_THRESHOLDS + 1];
    for (level, is_fg) in threshold_levels(pred).into_iter().zip(fg(gt)) {
        if is_fg {
            fg_hist[level] += 1;
        } else {
            bg_hist[level] += 1;
        }
    }
    // Suffix sums: count of pixels whose level exceeds t.
    let mut tp = vec![0; NUM_THRESHOLDS];
    let mut fp = vec![0; NUM_THRESHOLDS];
    let (mut acc_fg, mut acc_bg) = (0, 0);
    for t in (0..NUM_THRESHOLDS).rev() {
        acc_fg += fg_hist[t + 1];
        acc_bg += bg_hist[t + 1];
        tp[t] = acc_fg;
        fp[t] = acc_bg;
    }
    (tp, fp)
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Mean over 256 thresholds of `F = 1.3·P·R / (0.3·P + R)`, with `0/0 = 0`.
pub fn f_measure_mean(pred: &Image, gt: &Image) -> Result<f64> {
    check_pair(pred, gt)?;
    let n_fg = fg(gt).filter(|&b| b).count() as f64;
    let (tp, fp) = positive_counts(pred, gt);
    let total: f64 = (0..NUM_THRESHOLDS)
        .map(|t| {
            let (tp, fp) = (tp[t] as f64, fp[t] as f64);
            let precision = ratio(tp, tp + fp);
            let recall = ratio(tp, n_fg);
            ratio((1.0 + F_BETA_SQ) * precision * recall, F_BETA_SQ * precision + recall)
        })
        .sum();
    Ok(total / NUM_THRESHOLDS as f64)
}

/// Mean over 256 thresholds of the enhanced-alignment measure. For an
/// all-background or all-foreground GT the score at a threshold is
/// `1 − mean|bin − gt|`.
pub fn e_measure_mean(pred: &Image, gt: &Image) -> Result<f64> {
    check_pair(pred, gt)?;
    let n = pred.len() as f64;
    let n_fg = fg(gt).filter(|&b| b).count() as f64;
    let n_bg = n - n_fg;
    let (tp, fp) = positive_counts(pred, gt);
    let gt_mean = n_fg / n;
    let total: f64 = (0..NUM_THRESHOLDS)
        .map(|t| {
            let (tp, fp) = (tp[t] as f64, fp[t] as f64);
            let (fneg, tn) = (n_fg - tp, n_bg - fp);
            if n_fg == 0.0 || n_bg == 0.0 {
                return (tp + tn) / n;
            }
            let bin_mean = (tp + fp) / n;
            // (pred_bin, gt) in {(1,1), (1,0), (0,1), (0,0)}.
            let enhanced = |b: f64, g: f64| {
                let (pb, pg) = (b - bin_mean, g - gt_mean);
                let xi = 2.0 * pb * pg / (pb * pb + pg * pg);
                (1.0 + xi).powi(2) / 4.0
            };
            (tp * enhanced(1.0, 1.0) + fp * enhanced(1.0, 0.0) + fneg * enhanced(0.0, 1.0) + tn * enhanced(0.0, 0.0))
                / n
        })
        .sum();
    Ok(total / NUM_THRESHOLDS as f64)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (mean, std)
}

fn object_similarity(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let (x, sigma) = mean_std(values);
    2.0 * x / (x * x + 1.0 + sigma + EPS)
}

fn s_object(pred: &Image, gt: &Image) -> f64 {
    let mut fg_vals = Vec::new();
    let mut bg_vals = Vec::new();
    for (&p, is_fg) in pred.pixels().iter().zip(fg(gt)) {
        if is_fg {
            fg_vals.push(p);
        } else {
            bg_vals.push(1.0 - p);
        }
    }
    let u = fg_vals.len() as f64 / pred.len() as f64;
    u * object_similarity(&fg_vals) + (1.0 - u) * object_similarity(&bg_vals)
}

/// Region similarity with sample (N−1) moments; a block of one pixel has
/// zero variance.
fn ssim(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len() as f64;
    let x = pred.iter().sum::<f64>() / n;
    let y = gt.iter().sum::<f64>() / n;
    let (mut sx, mut sy, mut sxy) = (0.0, 0.0, 0.0);
    if pred.len() > 1 {
        for (p, g) in pred.iter().zip(gt) {
            sx += (p - x) * (p - x);
            sy += (g - y) * (g - y);
            sxy += (p - x) * (g - y);
        }
        sx /= n - 1.0;
        sy /= n - 1.0;
        sxy /= n - 1.0;
    }
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Split point: rounded foreground centroid plus one, or the image centre
/// for an empty mask.
fn centroid(gt: &Image) -> (usize, usize) {
    let (h, w) = gt.dims();
    let (mut sy, mut sx, mut count) = (0.0, 0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            if gt.get(0, y, x) >= 0.5 {
                sy += y as f64;
                sx += x as f64;
                count += 1;
            }
        }
    }
    if count == 0 {
        return (
            (h as f64 / 2.0).round_ties_even() as usize,
            (w as f64 / 2.0).round_ties_even() as usize,
        );
    }
    let cy = (sy / count as f64).round_ties_even() as usize + 1;
    let cx = (sx / count as f64).round_ties_even() as usize + 1;
    (cy.min(h), cx.min(w))
}

fn s_region(pred: &Image, gt: &Image) -> f64 {
    let (h, w) = gt.dims();
    let (cy, cx) = centroid(gt);
    let area = (h * w) as f64;
    let blocks = [(0, cy, 0, cx), (0, cy, cx, w), (cy, h, 0, cx), (cy, h, cx, w)];
    let mut score = 0.0;
    for (y0, y1, x0, x1) in blocks {
        if y1 <= y0 || x1 <= x0 {
            continue;
        }
        let weight = ((y1 - y0) * (x1 - x0)) as f64 / area;
        let mut pb = Vec::new();
        let mut gb = Vec::new();
        for y in y0..y1 {
            for x in x0..x1 {
                pb.push(pred.get(0, y, x));
                gb.push(if gt.get(0, y, x) >= 0.5 { 1.0 } else { 0.0 });
            }
        }
        score += weight * ssim(&pb, &gb);
    }
    score
}

/// `0.5·S_object + 0.5·S_region`, clamped to `[0, 1]`. An all-background
/// GT scores `1 − mean(pred)`, an all-foreground GT `mean(pred)`.
pub fn s_measure(pred: &Image, gt: &Image) -> Result<f64> {
    check_pair(pred, gt)?;
    let y = fg(gt).filter(|&b| b).count() as f64 / gt.len() as f64;
    let s = if y == 0.0 {
        1.0 - pred.mean()
    } else if y == 1.0 {
        pred.mean()
    } else {
        S_ALPHA * s_object(pred, gt) + (1.0 - S_ALPHA) * s_region(pred, gt)
    };
    Ok(s.clamp(0.0, 1.0))
}

/// All four metrics for one prediction.
pub fn score_pair(pred: &Image, gt: &Image) -> Result<SaliencyScores> {
    Ok(SaliencyScores {
        mae: mae(pred, gt)?,
        f_mean: f_measure_mean(pred, gt)?,
        e_mean: e_measure_mean(pred, gt)?,
        s_measure: s_measure(pred, gt)?,
        n_scenes: 1,
    })
}

/// Unweighted mean of per-scene scores.
pub fn aggregate(scores: &[SaliencyScores]) -> Result<SaliencyScores> {
    if scores.is_empty() {
        return Err(Error::Usage("cannot aggregate an empty set of scores".into()));
    }
    let n = scores.len() as f64;
    let mean = |f: fn(&SaliencyScores) -> f64| scores.iter().map(f).sum::<f64>() / n;
    Ok(SaliencyScores {
        mae: mean(|s| s.mae),
        f_mean: mean(|s| s.f_mean),
        e_mean: mean(|s| s.e_mean),
        s_measure: mean(|s| s.s_measure),
        n_scenes: scores.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, v: &[f64]) -> Image {
        Image::new(1, h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn mae_basics() {
        let gt = img(1, 2, &[0.0, 0.0]);
        assert_eq!(mae(&gt, &gt).unwrap(), 0.0);
        assert_eq!(mae(&img(1, 2, &[0.5, 0.5]), &gt).unwrap(), 0.5);
    }

    #[test]
    fn f_measure_all_ones_prediction() {
        let gt = img(2, 2, &[1.0, 1.0, 0.0, 0.0]);
        let f = f_measure_mean(&img(2, 2, &[1.0; 4]), &gt).unwrap();
        assert!((f - 1.3 * 0.5 / (0.3 * 0.5 + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn f_measure_empty_gt_is_zero() {
        let gt = img(2, 2, &[0.0; 4]);
        assert_eq!(f_measure_mean(&img(2, 2, &[0.3, 0.9, 0.0, 1.0]), &gt).unwrap(), 0.0);
    }

    #[test]
    fn e_measure_alignment_extremes() {
        let gt = img(2, 2, &[1.0, 1.0, 0.0, 0.0]);
        // At t = 0 the binarised map is constant, giving ξ = 0 and 1/4 per pixel.
        let at_zero = 0.25;
        assert!((e_measure_mean(&gt, &gt).unwrap() - (at_zero + 255.0) / 256.0).abs() < 1e-12);
        let inv = img(2, 2, &[0.0, 0.0, 1.0, 1.0]);
        let e = e_measure_mean(&inv, &gt).unwrap();
        assert!((e - at_zero / 256.0).abs() < 1e-12, "{e}");
    }

    #[test]
    fn s_measure_conventions() {
        let gt = img(2, 2, &[1.0, 1.0, 0.0, 0.0]);
        assert!((s_measure(&gt, &gt).unwrap() - 1.0).abs() < 1e-6);
        let zeros = img(2, 2, &[0.0; 4]);
        assert_eq!(s_measure(&zeros, &zeros).unwrap(), 1.0);
    }

    #[test]
    fn aggregate_of_duplicates_is_unchanged() {
        let s = SaliencyScores {
            mae: 0.2,
            f_mean: 0.5,
            e_mean: 0.7,
            s_measure: 0.6,
            n_scenes: 1,
        };
        let a = aggregate(&[s, s]).unwrap();
        assert!((a.mae - 0.2).abs() < 1e-15 && a.n_scenes == 2);
        assert!(matches!(aggregate(&[]), Err(Error::Usage(_))));
    }
}
