//! Saliency evaluation: MAE, max F-measure, S-measure and max E-measure,
//! following the conventions of the widely used saliency toolkits.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{png_stems, read_mask, read_soft};
use crate::error::{PopError, Result};
use crate::grid::{check_same_shape, BinaryMask, Grid, SoftMask};

pub const BETA2: f64 = 0.3;
pub const S_ALPHA: f64 = 0.5;
pub const NUM_THRESHOLDS: usize = 256;
/// Machine epsilon, the toolkit guard against zero denominators.
pub const EPS: f64 = f64::EPSILON;

/// `k / 255` for `k` in `0..256`.
pub fn thresholds() -> impl Iterator<Item = f64> {
    (0..NUM_THRESHOLDS).map(|k| k as f64 / 255.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricOptions {
    /// Min-max normalize each prediction before scoring.
    pub normalize: bool,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self { normalize: true }
    }
}

/// Per-image min-max normalization; constant maps are left unchanged.
pub fn normalize_prediction(pred: &Grid<f64>) -> Grid<f64> {
    let (lo, hi) = pred
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    if hi > lo {
        pred.map(|v| (v - lo) / (hi - lo))
    } else {
        pred.clone()
    }
}

fn prepare(pred: &SoftMask, g: &BinaryMask, opts: &MetricOptions) -> Result<Grid<f64>> {
    check_same_shape(pred.shape(), g.shape())?;
    Ok(if opts.normalize {
        normalize_prediction(pred.grid())
    } else {
        pred.grid().clone()
    })
}

pub fn mae(pred: &SoftMask, g: &BinaryMask) -> Result<f64> {
    mae_with(pred, g, &MetricOptions::default())
}

pub fn mae_with(pred: &SoftMask, g: &BinaryMask, opts: &MetricOptions) -> Result<f64> {
    let p = prepare(pred, g, opts)?;
    let sum: f64 = p
        .data()
        .iter()
        .zip(g.data())
        .map(|(v, t)| (v - if *t { 1.0 } else { 0.0 }).abs())
        .sum();
    Ok(sum / p.len() as f64)
}

/// Counts of predicted-foreground pixels per threshold, split by ground truth.
struct ThresholdCounts {
    /// `tp[k]` = foreground pixels with `pred > k / 255`.
    tp: Vec<usize>,
    fp: Vec<usize>,
    n_fg: usize,
    n: usize,
}

impl ThresholdCounts {
    fn new(p: &Grid<f64>, g: &BinaryMask) -> Self {
        let mut fg: Vec<f64> = Vec::new();
        let mut bg: Vec<f64> = Vec::new();
        for (v, t) in p.data().iter().zip(g.data()) {
            if *t {
                fg.push(*v)
            } else {
                bg.push(*v)
            }
        }
        fg.sort_by(f64::total_cmp);
        bg.sort_by(f64::total_cmp);
        let above = |sorted: &[f64], t: f64| sorted.len() - sorted.partition_point(|v| *v <= t);
        let tp = thresholds().map(|t| above(&fg, t)).collect();
        let fp = thresholds().map(|t| above(&bg, t)).collect();
        Self {
            tp,
            fp,
            n_fg: fg.len(),
            n: p.len(),
        }
    }
}

fn f_beta(tp: usize, fp: usize, n_fg: usize) -> f64 {
    let predicted = tp + fp;
    let precision = if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 };
    let recall = tp as f64 / n_fg as f64;
    let den = BETA2 * precision + recall;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + BETA2) * precision * recall / den
    }
}

pub fn max_f_measure(pred: &SoftMask, g: &BinaryMask) -> Result<f64> {
    max_f_measure_with(pred, g, &MetricOptions::default())
}

pub fn max_f_measure_with(pred: &SoftMask, g: &BinaryMask, opts: &MetricOptions) -> Result<f64> {
    let p = prepare(pred, g, opts)?;
    if g.count() == 0 {
        return Err(PopError::Validation("F-measure needs a non-empty ground truth".into()));
    }
    let c = ThresholdCounts::new(&p, g);
    Ok((0..NUM_THRESHOLDS)
        .map(|k| f_beta(c.tp[k], c.fp[k], c.n_fg))
        .fold(0.0, f64::max))
}

/// Enhanced-alignment score of one binarization from its confusion counts.
fn enhanced_alignment(tp: usize, fp: usize, n_fg: usize, n: usize) -> f64 {
    let pred_fg = tp + fp;
    let pred_bg = n - pred_fg;
    let sum = if n_fg == 0 {
        pred_bg as f64
    } else if n_fg == n {
        pred_fg as f64
    } else {
        let mean_p = pred_fg as f64 / n as f64;
        let mean_g = n_fg as f64 / n as f64;
        let (p1, p0) = (1.0 - mean_p, -mean_p);
        let (g1, g0) = (1.0 - mean_g, -mean_g);
        let fn_ = n_fg - tp;
        let tn = (n - n_fg) - fp;
        [(p1, g1, tp), (p1, g0, fp), (p0, g1, fn_), (p0, g0, tn)]
            .iter()
            .map(|&(a, b, count)| {
                let align = 2.0 * a * b / (a * a + b * b + EPS);
                (align + 1.0).powi(2) / 4.0 * count as f64
            })
            .sum()
    };
    sum / n as f64
}

pub fn max_e_measure(pred: &SoftMask, g: &BinaryMask) -> Result<f64> {
    max_e_measure_with(pred, g, &MetricOptions::default())
}

pub fn max_e_measure_with(pred: &SoftMask, g: &BinaryMask, opts: &MetricOptions) -> Result<f64> {
    let p = prepare(pred, g, opts)?;
    let c = ThresholdCounts::new(&p, g);
    Ok((0..NUM_THRESHOLDS)
        .map(|k| enhanced_alignment(c.tp[k], c.fp[k], c.n_fg, c.n))
        .fold(0.0, f64::max))
}

pub fn s_measure(pred: &SoftMask, g: &BinaryMask) -> Result<f64> {
    s_measure_with(pred, g, &MetricOptions::default())
}

pub fn s_measure_with(pred: &SoftMask, g: &BinaryMask, opts: &MetricOptions) -> Result<f64> {
    let p = prepare(pred, g, opts)?;
    let score = if g.count() == 0 {
        1.0 - p.mean()
    } else if g.count() == g.grid().len() {
        p.mean()
    } else {
        S_ALPHA * s_object(&p, g) + (1.0 - S_ALPHA) * s_region(&p, g)
    };
    Ok(score.clamp(0.0, 1.0))
}

/// Mean and sample standard deviation (zero below two values).
fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    (mean, std)
}

fn object_similarity(values: &[f64]) -> f64 {
    let (x, sigma) = mean_std(values);
    2.0 * x / (x * x + 1.0 + sigma + EPS)
}

fn s_object(p: &Grid<f64>, g: &BinaryMask) -> f64 {
    let u = g.fraction();
    let pairs = || p.data().iter().zip(g.data());
    let fg: Vec<f64> = pairs().filter(|(_, t)| **t).map(|(v, _)| *v).collect();
    let bg: Vec<f64> = pairs().filter(|(_, t)| !**t).map(|(v, _)| 1.0 - *v).collect();
    let (fg, bg) = (object_similarity(&fg), object_similarity(&bg));
    u * fg + (1.0 - u) * bg
}

/// Centroid split point `(x, y)`: rounded foreground centroid plus one.
pub(crate) fn centroid(g: &BinaryMask) -> (usize, usize) {
    let (h, w) = g.shape();
    let n = g.count();
    if n == 0 {
        return (
            (w as f64 / 2.0).round_ties_even() as usize + 1,
            (h as f64 / 2.0).round_ties_even() as usize + 1,
        );
    }
    let (mut sy, mut sx) = (0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            if g.get(y, x) {
                sy += y;
                sx += x;
            }
        }
    }
    let cx = (sx as f64 / n as f64).round_ties_even() as usize;
    let cy = (sy as f64 / n as f64).round_ties_even() as usize;
    (cx + 1, cy + 1)
}

/// SSIM-style similarity of one block; blocks with fewer than two pixels have zero dispersion.
fn block_ssim(p: &Grid<f64>, g: &BinaryMask, ys: std::ops::Range<usize>, xs: std::ops::Range<usize>) -> f64 {
    let n = ys.len() * xs.len();
    if n == 0 {
        return 0.0;
    }
    let cells = || ys.clone().flat_map(|y| xs.clone().map(move |x| (y, x)));
    let nf = n as f64;
    let mx = cells().map(|(y, x)| p.get(y, x)).sum::<f64>() / nf;
    let my = cells().filter(|&(y, x)| g.get(y, x)).count() as f64 / nf;
    let (vx, vy, cxy) = if n < 2 {
        (0.0, 0.0, 0.0)
    } else {
        let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
        for (y, x) in cells() {
            let a = p.get(y, x) - mx;
            let b = if g.get(y, x) { 1.0 } else { 0.0 } - my;
            vx += a * a;
            vy += b * b;
            cxy += a * b;
        }
        let d = nf - 1.0;
        (vx / d, vy / d, cxy / d)
    };
    let alpha = 4.0 * mx * my * cxy;
    let beta = (mx * mx + my * my) * (vx + vy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn s_region(p: &Grid<f64>, g: &BinaryMask) -> f64 {
    let (h, w) = g.shape();
    let (x, y) = centroid(g);
    let (x, y) = (x.min(w), y.min(h));
    let area = (h * w) as f64;
    let w1 = (x * y) as f64 / area;
    let w2 = (y * (w - x)) as f64 / area;
    let w3 = ((h - y) * x) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    w1 * block_ssim(p, g, 0..y, 0..x)
        + w2 * block_ssim(p, g, 0..y, x..w)
        + w3 * block_ssim(p, g, y..h, 0..x)
        + w4 * block_ssim(p, g, y..h, x..w)
}

/// The four measures of one image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    #[serde(rename = "M")]
    pub mae: f64,
    #[serde(rename = "Fm")]
    pub max_f: f64,
    #[serde(rename = "Sm")]
    pub s_measure: f64,
    #[serde(rename = "Em")]
    pub max_e: f64,
}

impl MetricValues {
    pub fn compute(pred: &SoftMask, g: &BinaryMask, opts: &MetricOptions) -> Result<Self> {
        Ok(Self {
            mae: mae_with(pred, g, opts)?,
            max_f: max_f_measure_with(pred, g, opts)?,
            s_measure: s_measure_with(pred, g, opts)?,
            max_e: max_e_measure_with(pred, g, opts)?,
        })
    }

    pub fn mean(values: &[MetricValues]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let avg = |f: fn(&MetricValues) -> f64| values.iter().map(f).sum::<f64>() / n;
        Some(Self {
            mae: avg(|v| v.mae),
            max_f: avg(|v| v.max_f),
            s_measure: avg(|v| v.s_measure),
            max_e: avg(|v| v.max_e),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub stem: String,
    #[serde(flatten)]
    pub values: MetricValues,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skipped {
    pub stem: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_image: Vec<ImageMetrics>,
    /// Absent when no image could be scored.
    pub mean: Option<MetricValues>,
    pub skipped: Vec<Skipped>,
    /// Scores of the hard pseudo-semantics, when requested during evaluation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub separation: Option<Box<MetricsReport>>,
}

impl MetricsReport {
    /// Build from per-image results; sorted by stem so the report is order independent.
    pub fn from_parts(mut per_image: Vec<ImageMetrics>, mut skipped: Vec<Skipped>) -> Self {
        per_image.sort_by(|a, b| a.stem.cmp(&b.stem));
        skipped.sort_by(|a, b| a.stem.cmp(&b.stem));
        let values: Vec<MetricValues> = per_image.iter().map(|m| m.values).collect();
        Self {
            mean: MetricValues::mean(&values),
            per_image,
            skipped,
            separation: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("stem,M,Fm,Sm,Em\n");
        let row = |out: &mut String, stem: &str, v: &MetricValues| {
            out.push_str(&format!("{stem},{},{},{},{}\n", v.mae, v.max_f, v.s_measure, v.max_e));
        };
        for m in &self.per_image {
            row(&mut out, &m.stem, &m.values);
        }
        if let Some(mean) = &self.mean {
            row(&mut out, "mean", mean);
        }
        out
    }
}

/// Score `(stem, prediction, mask)` triples, skipping images that cannot be scored.
pub fn evaluate_pairs(
    items: impl IntoIterator<Item = (String, SoftMask, BinaryMask)>,
    opts: &MetricOptions,
) -> MetricsReport {
    let mut per_image = Vec::new();
    let mut skipped = Vec::new();
    for (stem, pred, g) in items {
        match MetricValues::compute(&pred, &g, opts) {
            Ok(values) => per_image.push(ImageMetrics { stem, values }),
            Err(e) => skipped.push(Skipped {
                stem,
                reason: e.to_string(),
            }),
        }
    }
    MetricsReport::from_parts(per_image, skipped)
}

/// Score 8-bit prediction PNGs against mask PNGs with matching stems.
pub fn evaluate_dataset(pred_dir: &Path, gt_dir: &Path, opts: &MetricOptions) -> Result<MetricsReport> {
    let preds = png_stems(pred_dir)?;
    let gts = png_stems(gt_dir)?;
    let mut skipped: Vec<Skipped> = preds
        .symmetric_difference(&gts)
        .map(|s| Skipped {
            stem: s.clone(),
            reason: if preds.contains(s) {
                "no ground truth".into()
            } else {
                "no prediction".into()
            },
        })
        .collect();
    let common: BTreeSet<&String> = preds.intersection(&gts).collect();
    let mut items = Vec::with_capacity(common.len());
    for stem in common {
        let file = format!("{stem}.png");
        let loaded = read_soft(&pred_dir.join(&file))
            .and_then(SoftMask::new)
            .and_then(|p| Ok((p, read_mask(&gt_dir.join(&file))?)));
        match loaded {
            Ok((p, g)) => items.push((stem.clone(), p, g)),
            Err(e) => skipped.push(Skipped {
                stem: stem.clone(),
                reason: e.to_string(),
            }),
        }
    }
    let mut report = evaluate_pairs(items, opts);
    report.skipped.extend(skipped);
    report.skipped.sort_by(|a, b| a.stem.cmp(&b.stem));
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn soft(h: usize, w: usize, f: impl FnMut(usize, usize) -> f64) -> SoftMask {
        SoftMask::new(Grid::from_fn(h, w, f)).unwrap()
    }

    fn as_soft(g: &BinaryMask) -> SoftMask {
        SoftMask::new(g.to_real()).unwrap()
    }

    #[test]
    fn mae_examples() {
        let g = BinaryMask::from_fn(4, 4, |y, x| y < 2 && x < 3);
        assert_eq!(mae(&as_soft(&g), &g).unwrap(), 0.0);
        let mut p = g.to_real::<f64>();
        p.set(3, 3, 1.0);
        assert_eq!(mae(&SoftMask::new(p).unwrap(), &g).unwrap(), 0.0625);
        assert_eq!(mae(&SoftMask::filled(4, 4, 0.5).unwrap(), &g).unwrap(), 0.5);
    }

    #[test]
    fn f_measure_examples() {
        let g = BinaryMask::from_fn(8, 8, |y, x| y < 3 && x < 5);
        assert_eq!(max_f_measure(&as_soft(&g), &g).unwrap(), 1.0);
        let rho = g.fraction();
        let want = 1.3 * rho / (0.3 * rho + 1.0);
        let got = max_f_measure(&SoftMask::filled(8, 8, 1.0).unwrap(), &g).unwrap();
        assert!((got - want).abs() < 1e-12);
        let empty = BinaryMask::from_fn(8, 8, |_, _| false);
        assert!(max_f_measure(&as_soft(&g), &empty).is_err());
    }

    #[test]
    fn s_and_e_measure_extremes() {
        let g = BinaryMask::from_fn(12, 10, |y, x| (3..8).contains(&y) && (2..6).contains(&x));
        // the toolkit's epsilon guards keep these a few ulps below 1
        assert!((s_measure(&as_soft(&g), &g).unwrap() - 1.0).abs() < 1e-12);
        assert!((max_e_measure(&as_soft(&g), &g).unwrap() - 1.0).abs() < 1e-12);
        let inv = as_soft(&g.complement());
        assert!(s_measure(&inv, &g).unwrap() < 0.5);
        // only the all-background binarization has any alignment left
        assert!((max_e_measure(&inv, &g).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn degenerate_ground_truth() {
        let empty = BinaryMask::from_fn(8, 8, |_, _| false);
        let p = soft(8, 8, |y, _| if y == 0 { 1.0 } else { 0.0 });
        assert!((s_measure(&p, &empty).unwrap() - 7.0 / 8.0).abs() < 1e-12);
        let full = empty.complement();
        assert!((s_measure(&p, &full).unwrap() - 1.0 / 8.0).abs() < 1e-12);
        assert_eq!(max_e_measure(&SoftMask::filled(8, 8, 0.0).unwrap(), &empty).unwrap(), 1.0);
    }

    #[test]
    fn centroid_rounds_half_to_even() {
        // foreground columns 0..=1 average 0.5, rounding to 0
        let g = BinaryMask::from_fn(4, 4, |y, x| y == 1 && x < 2);
        assert_eq!(centroid(&g), (1, 2));
        let g = BinaryMask::from_fn(4, 4, |y, x| y == 1 && (1..3).contains(&x));
        assert_eq!(centroid(&g), (3, 2));
    }

    #[test]
    fn report_means_and_csv() {
        let g = BinaryMask::from_fn(4, 4, |y, _| y < 2);
        let items = [0.0, 0.1, 0.2].iter().enumerate().map(|(i, e)| {
            let p = g.to_real::<f64>().map(|v| (v - e).abs());
            (format!("s{i}"), SoftMask::new(p).unwrap(), g.clone())
        });
        let opts = MetricOptions { normalize: false };
        let r = evaluate_pairs(items, &opts);
        assert!((r.mean.unwrap().mae - 0.1).abs() < 1e-12);
        assert_eq!(r.to_csv().lines().count(), 5);
        assert_eq!(MetricsReport::from_json(&r.to_json()).unwrap(), r);
    }

    #[test]
    fn evaluate_dataset_matches_and_skips() {
        use crate::data::{write_mask, write_soft};
        let pred = tempfile::tempdir().unwrap();
        let gt = tempfile::tempdir().unwrap();
        let g = BinaryMask::from_fn(16, 16, |y, x| y > 4 && x > 6);
        for stem in ["a", "b"] {
            write_mask(&gt.path().join(format!("{stem}.png")), &g).unwrap();
        }
        write_soft(&pred.path().join("a.png"), &g.to_real()).unwrap();
        write_soft(&pred.path().join("c.png"), &g.to_real()).unwrap();
        let r = evaluate_dataset(pred.path(), gt.path(), &MetricOptions::default()).unwrap();
        assert_eq!(r.per_image.len(), 1);
        let m = r.per_image[0].values;
        assert_eq!((m.mae, m.max_f), (0.0, 1.0));
        assert!((m.s_measure - 1.0).abs() < 1e-12 && (m.max_e - 1.0).abs() < 1e-12);
        let stems: Vec<_> = r.skipped.iter().map(|s| s.stem.as_str()).collect();
        assert_eq!(stems, ["b", "c"]);
    }
}
