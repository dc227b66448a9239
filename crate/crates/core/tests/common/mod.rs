//! Shared helpers for the integration tests: brute-force metric oracles and
//! random fixtures.
#![allow(dead_code)]

use popnet_core::grid::{BinaryMask, SoftMask};
use rand::Rng;

const EPS: f64 = f64::EPSILON;
const BETA2: f64 = 0.3;

/// Per-image min-max normalization, written out longhand.
pub fn normalized(p: &[f64]) -> Vec<f64> {
    let lo = p.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        p.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        p.to_vec()
    }
}

pub fn oracle_mae(p: &[f64], g: &[bool]) -> f64 {
    let mut s = 0.0;
    for (v, t) in p.iter().zip(g) {
        s += (v - if *t { 1.0 } else { 0.0 }).abs();
    }
    s / p.len() as f64
}

/// Binarize at every `k / 255` with a strict comparison and score each map pixel by pixel.
pub fn oracle_max_f(p: &[f64], g: &[bool]) -> f64 {
    let mut best = 0.0f64;
    for k in 0..256 {
        let t = k as f64 / 255.0;
        let (mut tp, mut pos, mut gt) = (0.0, 0.0, 0.0);
        for (v, m) in p.iter().zip(g) {
            let b = *v > t;
            if b {
                pos += 1.0;
            }
            if *m {
                gt += 1.0;
            }
            if b && *m {
                tp += 1.0;
            }
        }
        let prec = if pos > 0.0 { tp / pos } else { 0.0 };
        let rec = tp / gt;
        let f = if BETA2 * prec + rec > 0.0 {
            (1.0 + BETA2) * prec * rec / (BETA2 * prec + rec)
        } else {
            0.0
        };
        best = best.max(f);
    }
    best
}

/// Full enhanced-alignment matrix per threshold, averaged over pixels.
pub fn oracle_max_e(p: &[f64], g: &[bool]) -> f64 {
    let n = p.len() as f64;
    let gf: Vec<f64> = g.iter().map(|t| if *t { 1.0 } else { 0.0 }).collect();
    let g_sum: f64 = gf.iter().sum();
    let mut best = 0.0f64;
    for k in 0..256 {
        let t = k as f64 / 255.0;
        let fm: Vec<f64> = p.iter().map(|v| if *v > t { 1.0 } else { 0.0 }).collect();
        let matrix: Vec<f64> = if g_sum == 0.0 {
            fm.iter().map(|b| 1.0 - b).collect()
        } else if g_sum == n {
            fm.clone()
        } else {
            let mf = fm.iter().sum::<f64>() / n;
            let mg = g_sum / n;
            fm.iter()
                .zip(&gf)
                .map(|(b, m)| {
                    let (a, c) = (b - mf, m - mg);
                    let align = 2.0 * a * c / (a * a + c * c + EPS);
                    (align + 1.0) * (align + 1.0) / 4.0
                })
                .collect()
        };
        best = best.max(matrix.iter().sum::<f64>() / n);
    }
    best
}

fn two_pass(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn object_score(values: &[f64]) -> f64 {
    let (x, s) = two_pass(values);
    2.0 * x / (x * x + 1.0 + s + EPS)
}

fn ssim_block(p: &[f64], g: &[f64]) -> f64 {
    if p.is_empty() {
        return 0.0;
    }
    let n = p.len() as f64;
    let mx = p.iter().sum::<f64>() / n;
    let my = g.iter().sum::<f64>() / n;
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    if p.len() > 1 {
        for (a, b) in p.iter().zip(g) {
            vx += (a - mx) * (a - mx);
            vy += (b - my) * (b - my);
            cxy += (a - mx) * (b - my);
        }
        vx /= n - 1.0;
        vy /= n - 1.0;
        cxy /= n - 1.0;
    }
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

/// Structure measure: object term from per-class mean and deviation,
/// region term from four quadrants split at the ground-truth centroid.
pub fn oracle_s(p: &[f64], g: &[bool], h: usize, w: usize) -> f64 {
    let n = p.len() as f64;
    let fg_n = g.iter().filter(|t| **t).count() as f64;
    let mean_p = p.iter().sum::<f64>() / n;
    let score = if fg_n == 0.0 {
        1.0 - mean_p
    } else if fg_n == n {
        mean_p
    } else {
        let u = fg_n / n;
        let fg: Vec<f64> = p.iter().zip(g).filter(|(_, t)| **t).map(|(v, _)| *v).collect();
        let bg: Vec<f64> = p.iter().zip(g).filter(|(_, t)| !**t).map(|(v, _)| 1.0 - v).collect();
        let object = u * object_score(&fg) + (1.0 - u) * object_score(&bg);

        let (mut sy, mut sx) = (0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                if g[y * w + x] {
                    sy += y as f64;
                    sx += x as f64;
                }
            }
        }
        let cx = ((sx / fg_n).round_ties_even() as usize + 1).min(w);
        let cy = ((sy / fg_n).round_ties_even() as usize + 1).min(h);
        let mut region = 0.0;
        for (ys, xs) in [(0..cy, 0..cx), (0..cy, cx..w), (cy..h, 0..cx), (cy..h, cx..w)] {
            let (mut bp, mut bg) = (Vec::new(), Vec::new());
            for y in ys.clone() {
                for x in xs.clone() {
                    bp.push(p[y * w + x]);
                    bg.push(if g[y * w + x] { 1.0 } else { 0.0 });
                }
            }
            let weight = bp.len() as f64 / n;
            region += weight * ssim_block(&bp, &bg);
        }
        0.5 * object + 0.5 * region
    };
    score.clamp(0.0, 1.0)
}

/// Random prediction; every third one is quantized to 8 bits to exercise ties.
pub fn random_prediction(rng: &mut impl Rng, h: usize, w: usize, i: usize) -> SoftMask {
    let data: Vec<f64> = (0..h * w)
        .map(|_| {
            let v: f64 = rng.random();
            if i % 3 == 0 {
                (v * 255.0).round() / 255.0
            } else {
                v
            }
        })
        .collect();
    SoftMask::from_vec(h, w, data).unwrap()
}

/// Random rectangle plus scattered pixels; never empty.
pub fn random_gt(rng: &mut impl Rng, h: usize, w: usize) -> BinaryMask {
    let rh = rng.random_range(1..=h / 2);
    let rw = rng.random_range(1..=w / 2);
    let top = rng.random_range(0..=h - rh);
    let left = rng.random_range(0..=w - rw);
    let speckle: f64 = rng.random_range(0.0..0.2);
    let mut noise: Vec<bool> = (0..h * w).map(|_| rng.random::<f64>() < speckle).collect();
    for y in top..top + rh {
        for x in left..left + rw {
            noise[y * w + x] = true;
        }
    }
    BinaryMask::from_fn(h, w, |y, x| noise[y * w + x])
}
