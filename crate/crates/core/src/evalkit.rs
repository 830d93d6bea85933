//! Saliency metrics: MAE, max F-measure, S-measure and max E-measure.
//!
//! Maps are `[H, W]` tensors at 64 bits. Predictions are probabilities in
//! `[0, 1]`; groundtruth is binarized at 0.5. Threshold sweeps use the 256
//! levels `t = k/255` and binarize with `pred > t`, so an all-zero
//! prediction is empty at every level. All means are plain left to right
//! sums divided by the count.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const THRESHOLDS: usize = 256;
/// Precision weight of the F-measure.
pub const BETA2: f64 = 0.3;
/// Weight of the object term in the S-measure.
pub const S_ALPHA: f64 = 0.5;

fn check(pred: &Tensor<f64>, gt: &Tensor<f64>) -> Result<(usize, usize)> {
    let s = pred.shape();
    if s.len() != 2 || s != gt.shape() {
        return Err(Error::Shape {
            op: "metric",
            left: s.to_vec(),
            right: gt.shape().to_vec(),
        });
    }
    if !pred.is_finite() || !gt.is_finite() {
        return Err(Error::Metric("non-finite input".into()));
    }
    Ok((s[0], s[1]))
}

fn binary(gt: &Tensor<f64>) -> Vec<bool> {
    gt.data().iter().map(|&v| v >= 0.5).collect()
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v {
        s += x;
        n += 1;
    }
    s / n as f64
}

pub fn threshold(k: usize) -> f64 {
    k as f64 / 255.0
}

pub fn mae(pred: &Tensor<f64>, gt: &Tensor<f64>) -> Result<f64> {
    check(pred, gt)?;
    Ok(mean(pred.data().iter().zip(gt.data()).map(|(p, g)| (p - g).abs())))
}

/// `F_β` of a binary prediction; zero when nothing true is predicted.
pub fn f_beta(tp: usize, fp: usize, positives: usize, beta2: f64) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    let p = tp as f64 / (tp + fp) as f64;
    let r = tp as f64 / positives as f64;
    (1.0 + beta2) * p * r / (beta2 * p + r)
}

/// Best `F_β` over the threshold sweep, and the whole curve.
pub fn max_f_beta(pred: &Tensor<f64>, gt: &Tensor<f64>, beta2: f64) -> Result<(f64, Vec<f64>)> {
    check(pred, gt)?;
    let gt = binary(gt);
    let positives = gt.iter().filter(|&&g| g).count();
    if positives == 0 {
        return Err(Error::Metric("F-measure undefined for an all-background groundtruth".into()));
    }
    let curve: Vec<f64> = (0..THRESHOLDS)
        .map(|k| {
            let t = threshold(k);
            let (mut tp, mut fp) = (0, 0);
            for (&p, &g) in pred.data().iter().zip(&gt) {
                if p > t {
                    if g {
                        tp += 1;
                    } else {
                        fp += 1;
                    }
                }
            }
            f_beta(tp, fp, positives, beta2)
        })
        .collect();
    Ok((curve.iter().copied().fold(0.0, f64::max), curve))
}

pub fn max_f(pred: &Tensor<f64>, gt: &Tensor<f64>) -> Result<(f64, Vec<f64>)> {
    max_f_beta(pred, gt, BETA2)
}

/// Object similarity `2x̄ / (x̄² + 1 + σ + ε)` over the selected values;
/// σ is the sample standard deviation (zero for fewer than two values).
fn object_score(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let x = mean(values.iter().copied());
    let sigma = if values.len() > 1 {
        (mean(values.iter().map(|v| (v - x) * (v - x))) * n / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    2.0 * x / (x * x + 1.0 + sigma + f64::EPSILON)
}

fn s_object(pred: &[f64], gt: &[bool]) -> f64 {
    let fg: Vec<f64> = pred.iter().zip(gt).filter(|(_, &g)| g).map(|(&p, _)| p).collect();
    let bg: Vec<f64> = pred.iter().zip(gt).filter(|(_, &g)| !g).map(|(&p, _)| 1.0 - p).collect();
    let u = fg.len() as f64 / pred.len() as f64;
    u * object_score(&fg) + (1.0 - u) * object_score(&bg)
}

/// SSIM-style structural similarity of one rectangle.
fn region_ssim(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len() as f64;
    let x = mean(pred.iter().copied());
    let y = mean(gt.iter().copied());
    let denom = n - 1.0 + f64::EPSILON;
    let sx = pred.iter().map(|p| (p - x) * (p - x)).sum::<f64>() / denom;
    let sy = gt.iter().map(|g| (g - y) * (g - y)).sum::<f64>() / denom;
    let sxy = pred.iter().zip(gt).map(|(p, g)| (p - x) * (g - y)).sum::<f64>() / denom;
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + f64::EPSILON)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// 1-based centroid `(X, Y)` of the foreground, rounded half away from zero.
fn centroid(gt: &[bool], h: usize, w: usize) -> (usize, usize) {
    let total = gt.iter().filter(|&&g| g).count();
    if total == 0 {
        return ((w as f64 / 2.0).round() as usize, (h as f64 / 2.0).round() as usize);
    }
    let (mut sx, mut sy) = (0.0, 0.0);
    for (i, _) in gt.iter().enumerate().filter(|(_, &g)| g) {
        sy += (i / w + 1) as f64;
        sx += (i % w + 1) as f64;
    }
    ((sx / total as f64).round() as usize, (sy / total as f64).round() as usize)
}

fn s_region(pred: &[f64], gt: &[bool], h: usize, w: usize) -> f64 {
    let (cx, cy) = centroid(gt, h, w);
    let area = (h * w) as f64;
    let rects = [(0, cy, 0, cx), (0, cy, cx, w), (cy, h, 0, cx), (cy, h, cx, w)];
    let mut score = 0.0;
    let mut used = 0.0;
    for (k, &(y0, y1, x0, x1)) in rects.iter().enumerate() {
        let weight = if k < 3 {
            ((y1 - y0) * (x1 - x0)) as f64 / area
        } else {
            1.0 - used
        };
        used += weight;
        if y1 == y0 || x1 == x0 {
            continue;
        }
        let mut p = Vec::with_capacity((y1 - y0) * (x1 - x0));
        let mut g = Vec::with_capacity(p.capacity());
        for y in y0..y1 {
            for x in x0..x1 {
                p.push(pred[y * w + x]);
                g.push(if gt[y * w + x] { 1.0 } else { 0.0 });
            }
        }
        score += weight * region_ssim(&p, &g);
    }
    score
}

/// Structure measure `α·S_object + (1 − α)·S_region`, clamped at 0.
/// An all-background groundtruth scores `1 − mean(pred)`, an all-foreground
/// one `mean(pred)`.
pub fn s_measure(pred: &Tensor<f64>, gt: &Tensor<f64>) -> Result<f64> {
    let (h, w) = check(pred, gt)?;
    let gt = binary(gt);
    let p = pred.data();
    let y = mean(gt.iter().map(|&g| if g { 1.0 } else { 0.0 }));
    let s = if y == 0.0 {
        1.0 - mean(p.iter().copied())
    } else if y == 1.0 {
        mean(p.iter().copied())
    } else {
        S_ALPHA * s_object(p, &gt) + (1.0 - S_ALPHA) * s_region(p, &gt, h, w)
    };
    Ok(s.max(0.0))
}

/// Enhanced alignment of one binary map against the groundtruth.
pub fn e_measure_binary(bin: &[bool], gt: &[bool]) -> f64 {
    let as_f = |b: &bool| if *b { 1.0 } else { 0.0 };
    let positives = gt.iter().filter(|&&g| g).count();
    if positives == 0 {
        return mean(bin.iter().map(|b| 1.0 - as_f(b)));
    }
    if positives == gt.len() {
        return mean(bin.iter().map(as_f));
    }
    let mb = mean(bin.iter().map(as_f));
    let mg = mean(gt.iter().map(as_f));
    mean(bin.iter().zip(gt).map(|(b, g)| {
        let (pb, pg) = (as_f(b) - mb, as_f(g) - mg);
        let align = 2.0 * pb * pg / (pb * pb + pg * pg + f64::EPSILON);
        (1.0 + align) * (1.0 + align) / 4.0
    }))
}

/// Best enhanced-alignment score over the threshold sweep, and the curve.
pub fn e_measure_max(pred: &Tensor<f64>, gt: &Tensor<f64>) -> Result<(f64, Vec<f64>)> {
    check(pred, gt)?;
    let gt = binary(gt);
    let curve: Vec<f64> = (0..THRESHOLDS)
        .map(|k| {
            let t = threshold(k);
            let bin: Vec<bool> = pred.data().iter().map(|&p| p > t).collect();
            e_measure_binary(&bin, &gt)
        })
        .collect();
    Ok((curve.iter().copied().fold(0.0, f64::max), curve))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub s_measure: f64,
    pub max_f: f64,
    pub e_max: f64,
    pub mae: f64,
    #[serde(skip)]
    pub f_curve: Vec<f64>,
    #[serde(skip)]
    pub e_curve: Vec<f64>,
}

pub fn evaluate(pred: &Tensor<f64>, gt: &Tensor<f64>) -> Result<MetricReport> {
    if pred.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Metric("prediction values must lie in [0, 1]".into()));
    }
    let (max_f, f_curve) = max_f(pred, gt)?;
    let (e_max, e_curve) = e_measure_max(pred, gt)?;
    Ok(MetricReport {
        s_measure: s_measure(pred, gt)?,
        max_f,
        e_max,
        mae: mae(pred, gt)?,
        f_curve,
        e_curve,
    })
}

/// Means of the four scalars, in input order.
pub fn mean_report(reports: &[MetricReport]) -> Option<MetricReport> {
    if reports.is_empty() {
        return None;
    }
    let avg = |f: fn(&MetricReport) -> f64| mean(reports.iter().map(f));
    let curve = |f: fn(&MetricReport) -> &Vec<f64>| -> Vec<f64> {
        (0..THRESHOLDS).map(|k| mean(reports.iter().map(|r| f(r)[k]))).collect()
    };
    Some(MetricReport {
        s_measure: avg(|r| r.s_measure),
        max_f: avg(|r| r.max_f),
        e_max: avg(|r| r.e_max),
        mae: avg(|r| r.mae),
        f_curve: curve(|r| &r.f_curve),
        e_curve: curve(|r| &r.e_curve),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::new(&[h, w], v.to_vec()).unwrap()
    }

    #[test]
    fn mae_examples() {
        let gt = map(2, 2, &[1., 0., 0., 1.]);
        assert_eq!(mae(&gt, &gt).unwrap(), 0.0);
        assert_eq!(mae(&gt.map(|v| 1.0 - v), &gt).unwrap(), 1.0);
        assert_eq!(mae(&Tensor::full(&[2, 2], 0.5), &gt).unwrap(), 0.5);
        assert!(mae(&Tensor::zeros(&[2, 3]), &gt).is_err());
    }

    #[test]
    fn max_f_examples() {
        let gt = map(2, 2, &[1., 0., 0., 1.]);
        let (f, curve) = max_f(&gt, &gt).unwrap();
        assert_eq!(f, 1.0);
        assert_eq!(curve.len(), 256);
        assert_eq!(max_f(&Tensor::zeros(&[2, 2]), &gt).unwrap().0, 0.0);
        assert!(max_f(&gt, &Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn three_of_four_with_one_false_positive() {
        let mut gt = vec![0.0; 16];
        let mut pred = vec![0.0; 16];
        for i in [0, 1, 4, 5] {
            gt[i] = 1.0;
        }
        for i in [0, 1, 4, 15] {
            pred[i] = 1.0;
        }
        let (gt, pred) = (map(4, 4, &gt), map(4, 4, &pred));
        let (_, curve) = max_f(&pred, &gt).unwrap();
        let k = 128; // 128/255 ≈ 0.502, the first level above one half
        assert!((curve[k] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn s_measure_degenerate_branches() {
        let gt = Tensor::zeros(&[3, 3]);
        assert_eq!(s_measure(&Tensor::zeros(&[3, 3]), &gt).unwrap(), 1.0);
        let pred = Tensor::full(&[3, 3], 0.25);
        assert!((s_measure(&pred, &gt).unwrap() - 0.75).abs() < 1e-15);
        let ones = Tensor::full(&[3, 3], 1.0);
        assert!((s_measure(&pred, &ones).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let gt = map(3, 4, &[0., 1., 1., 0., 0., 1., 1., 0., 0., 0., 0., 0.]);
        let r = evaluate(&gt, &gt).unwrap();
        assert!(r.mae.abs() < 1e-9);
        assert!((r.max_f - 1.0).abs() < 1e-9);
        assert!((r.s_measure - 1.0).abs() < 1e-9, "{}", r.s_measure);
        assert!((r.e_max - 1.0).abs() < 1e-9);
    }

    #[test]
    fn inverted_balanced_map_has_zero_alignment() {
        let gt: Vec<bool> = (0..16).map(|i| i % 4 < 2).collect();
        let inv: Vec<bool> = gt.iter().map(|g| !g).collect();
        assert!(e_measure_binary(&inv, &gt).abs() < 1e-12);
        assert!((e_measure_binary(&gt, &gt) - 1.0).abs() < 1e-12);
    }

    /// The four 8×8 cases of `tools/metrics_oracle.py`.
    fn oracle_case(case: usize) -> (Tensor<f64>, Tensor<f64>) {
        let mut pred = vec![0.0; 64];
        let mut gt = vec![0.0; 64];
        for i in 0..8i64 {
            for j in 0..8i64 {
                let k = (i * 8 + j) as usize;
                let (p, g) = match case {
                    0 => (((i * 37 + j * 11) % 17) as f64 / 16.0, (i - 3).pow(2) + (j - 4).pow(2) <= 6),
                    1 => (((i * 5 + j * 3) % 16) as f64 / 15.0, (1..=3).contains(&i) && (4..=6).contains(&j)),
                    2 => {
                        let g = i + j >= 9;
                        let v = 0.1 + 0.8 * f64::from(u8::from(g)) - 0.05 * ((i * 3 + j * 7) % 5) as f64;
                        (v.clamp(0.0, 1.0), g)
                    }
                    _ => (((i * j) % 9) as f64 / 8.0, i == 6 && j == 1),
                };
                pred[k] = p;
                gt[k] = if g { 1.0 } else { 0.0 };
            }
        }
        (map(8, 8, &pred), map(8, 8, &gt))
    }

    #[test]
    fn frozen_oracle_constants() {
        // (S, Emax) from the independent numpy reference
        let want = [
            (0.350_070_256_679_956_5, 0.600_265_474_187_651),
            (0.298_190_771_970_085_26, 0.779_007_375_791_362_5),
            (0.923_759_649_928_522_7, 0.999_999_999_999_999_4),
            (0.404_472_097_042_288_9, 0.516_000_204_134_986_5),
        ];
        for (case, (s, e)) in want.into_iter().enumerate() {
            let (pred, gt) = oracle_case(case);
            let got_s = s_measure(&pred, &gt).unwrap();
            let got_e = e_measure_max(&pred, &gt).unwrap().0;
            assert!((got_s - s).abs() < 1e-9, "case {case}: S {got_s} vs {s}");
            assert!((got_e - e).abs() < 1e-9, "case {case}: E {got_e} vs {e}");
        }
    }
}
