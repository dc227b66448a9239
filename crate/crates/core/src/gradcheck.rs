//! Finite-difference verification of every analytic gradient used in training.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PopError, Result};
use crate::grid::{BinaryMask, Grid, Real};
use crate::losses::{local_smoothness_grad, structure_loss_grad, wtv_grad, SsimConfig, WtvConfig};
use crate::networks::semantic_loss_grad;
use crate::separation::{bce_grad, pop_out_separation_raw, separate_slice_vjp, SeparationConfig};

pub const SIDE: usize = 8;
pub const DEFAULT_INSTANCES: usize = 10;
pub const FD_STEP: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossName {
    Dep,
    Loc,
    Wtv,
    Sep,
    Sem,
    /// The separation map itself, w.r.t. both the depth and the contact surface.
    Separation,
}

impl LossName {
    pub const ALL: [LossName; 6] = [
        LossName::Dep,
        LossName::Loc,
        LossName::Wtv,
        LossName::Sep,
        LossName::Sem,
        LossName::Separation,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            LossName::Dep => "dep",
            LossName::Loc => "loc",
            LossName::Wtv => "wtv",
            LossName::Sep => "sep",
            LossName::Sem => "sem",
            LossName::Separation => "separation",
        }
    }
}

impl fmt::Display for LossName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossName {
    type Err = PopError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| PopError::Config(format!("unknown loss {s:?}, expected one of dep|loc|wtv|sep|sem|separation")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn threshold(&self) -> f64 {
        match self {
            Precision::F32 => 1e-3,
            Precision::F64 => 1e-6,
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

/// One random problem: the differentiated grid `x` plus fixed context.
#[derive(Clone, Debug)]
pub struct Instance {
    pub x: Grid<f64>,
    pub other: Grid<f64>,
    pub mask: BinaryMask,
    pub upstream: Grid<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Wrt {
    First,
    Second,
}

fn scalar_and_grad<T: Real>(loss: LossName, wrt: Wrt, inst: &Instance) -> Result<(T, Grid<T>)> {
    let x: Grid<T> = inst.x.cast();
    let other: Grid<T> = inst.other.cast();
    let lg = match loss {
        LossName::Dep => structure_loss_grad(&x, &other, &SsimConfig::default())?,
        LossName::Loc => local_smoothness_grad(&x, &inst.mask)?,
        LossName::Wtv => wtv_grad(&x, &inst.mask, &WtvConfig::default())?,
        LossName::Sep => bce_grad(&x, &inst.mask, SeparationConfig::default().eps)?,
        LossName::Sem => semantic_loss_grad(&x, &inst.mask, SeparationConfig::default().eps)?,
        LossName::Separation => {
            // scalarize with a fixed random upstream: sum(u * S)
            let sigma = SeparationConfig::default().sigma;
            let (d, c) = match wrt {
                Wrt::First => (&x, &other),
                Wrt::Second => (&other, &x),
            };
            let s = pop_out_separation_raw(d, c, sigma)?;
            let u: Grid<T> = inst.upstream.cast();
            let value = s.data().iter().zip(u.data()).map(|(a, b)| *a * *b).sum();
            let n = x.len();
            let (mut gd, mut gc) = (vec![T::zero(); n], vec![T::zero(); n]);
            separate_slice_vjp(s.data(), u.data(), sigma, &mut gd, &mut gc);
            let g = match wrt {
                Wrt::First => gd,
                Wrt::Second => gc,
            };
            return Ok((value, Grid::new(x.height(), x.width(), g)?));
        }
    };
    Ok((lg.value, lg.grad))
}

/// Central differences of the f64 loss at `inst.x` (cast through `T` first so
/// both sides see the same point).
fn finite_difference<T: Real>(loss: LossName, wrt: Wrt, inst: &Instance) -> Result<Grid<f64>> {
    let base: Grid<f64> = inst.x.cast::<T>().cast();
    let mut out = Grid::filled(base.height(), base.width(), 0.0);
    let mut probe = inst.clone();
    for i in 0..base.len() {
        let mut eval = |delta: f64| -> Result<f64> {
            probe.x = base.clone();
            probe.x.data_mut()[i] += delta;
            Ok(scalar_and_grad::<f64>(loss, wrt, &probe)?.0)
        };
        let plus = eval(FD_STEP)?;
        let minus = eval(-FD_STEP)?;
        out.data_mut()[i] = (plus - minus) / (2.0 * FD_STEP);
    }
    Ok(out)
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

fn random_grid(rng: &mut impl Rng, lo: f64, hi: f64) -> Grid<f64> {
    Grid::from_fn(SIDE, SIDE, |_, _| rng.random_range(lo..hi))
}

/// Random object occupying a rectangle at least 4×4 so the stencil interior is non-empty.
fn random_mask(rng: &mut impl Rng) -> BinaryMask {
    let h = rng.random_range(4..=6);
    let w = rng.random_range(4..=6);
    let top = rng.random_range(0..=SIDE - h);
    let left = rng.random_range(0..=SIDE - w);
    BinaryMask::from_fn(SIDE, SIDE, |y, x| (top..top + h).contains(&y) && (left..left + w).contains(&x))
}

/// Total variation is not differentiable where neighbours tie; keep clear of the kinks.
fn clear_of_kinks(x: &Grid<f64>) -> bool {
    let margin = 10.0 * FD_STEP;
    (0..SIDE).all(|y| {
        (0..SIDE).all(|c| {
            let v = x.get(y, c);
            (c + 1 == SIDE || (v - x.get(y, c + 1)).abs() > margin) && (y + 1 == SIDE || (v - x.get(y + 1, c)).abs() > margin)
        })
    })
}

pub fn random_instance(loss: LossName, rng: &mut impl Rng) -> Instance {
    loop {
        let (lo, hi) = match loss {
            LossName::Sep | LossName::Sem => (0.05, 0.95),
            _ => (0.1, 0.9),
        };
        let inst = Instance {
            x: random_grid(rng, lo, hi),
            other: random_grid(rng, 0.1, 0.9),
            mask: random_mask(rng),
            upstream: random_grid(rng, -1.0, 1.0),
        };
        if loss != LossName::Wtv || clear_of_kinks(&inst.x) {
            return inst;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRow {
    pub loss: LossName,
    pub precision: Precision,
    pub instances: usize,
    pub max_rel_err: f64,
    pub threshold: f64,
    pub passed: bool,
}

fn max_error<T: Real>(loss: LossName, inst: &Instance) -> Result<f64> {
    let wrts: &[Wrt] = if loss == LossName::Separation {
        &[Wrt::First, Wrt::Second]
    } else {
        &[Wrt::First]
    };
    let mut worst = 0.0f64;
    for &wrt in wrts {
        let (_, analytic) = scalar_and_grad::<T>(loss, wrt, inst)?;
        let fd = finite_difference::<T>(loss, wrt, inst)?;
        let a: Vec<f64> = analytic.data().iter().map(|v| v.as_f64()).collect();
        worst = worst.max(relative_error(&a, fd.data()));
    }
    Ok(worst)
}

pub fn check_loss(loss: LossName, precision: Precision, seed: u64, instances: usize) -> Result<GradcheckRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (loss as u64).wrapping_mul(0x9E37_79B9));
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let inst = random_instance(loss, &mut rng);
        let err = match precision {
            Precision::F32 => max_error::<f32>(loss, &inst)?,
            Precision::F64 => max_error::<f64>(loss, &inst)?,
        };
        worst = worst.max(err);
    }
    let threshold = precision.threshold();
    Ok(GradcheckRow {
        loss,
        precision,
        instances,
        max_rel_err: worst,
        threshold,
        passed: worst < threshold,
    })
}

pub fn run(losses: &[LossName], precision: Precision, seed: u64, instances: usize) -> Result<Vec<GradcheckRow>> {
    losses.iter().map(|l| check_loss(*l, precision, seed, instances)).collect()
}

pub fn format_table(rows: &[GradcheckRow]) -> String {
    let mut out = format!("{:<12}{:<6}{:>10}{:>14}{:>12}  result\n", "loss", "prec", "instances", "max rel err", "threshold");
    for r in rows {
        out.push_str(&format!(
            "{:<12}{:<6}{:>10}{:>14.3e}{:>12.0e}  {}\n",
            r.loss.as_str(),
            r.precision.to_string(),
            r.instances,
            r.max_rel_err,
            r.threshold,
            if r.passed { "ok" } else { "FAIL" }
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_parse() {
        for l in LossName::ALL {
            assert_eq!(l.as_str().parse::<LossName>().unwrap(), l);
        }
        assert!("pop".parse::<LossName>().is_err());
    }

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((relative_error(&[1.0, 0.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn kink_filter() {
        let flat = Grid::filled(SIDE, SIDE, 0.5);
        assert!(!clear_of_kinks(&flat));
        let ramp = Grid::from_fn(SIDE, SIDE, |y, x| (y * SIDE + x) as f64 * 0.01 + (x as f64) * 0.003);
        assert!(clear_of_kinks(&ramp));
    }
}
