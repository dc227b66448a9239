//! Object/background separation against a contact surface.
//!
//! Pixels nearer than the contact surface are objects: the soft mask is
//! `sigmoid(sigma * (d_po - d_c))`, supervised with binary cross-entropy.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::grid::{check_same_shape, BinaryMask, DepthMap, Grid, Real, SoftMask};
use crate::losses::LossGrad;

/// Learned object/background interface, same nearness convention as [`DepthMap`].
#[derive(Clone, Debug, PartialEq)]
pub struct ContactSurface(DepthMap);

impl ContactSurface {
    pub fn new(grid: Grid<f64>) -> Result<Self> {
        Ok(Self(DepthMap::new(grid)?))
    }

    pub fn from_depth(d: DepthMap) -> Self {
        Self(d)
    }

    pub fn as_depth(&self) -> &DepthMap {
        &self.0
    }

    pub fn grid(&self) -> &Grid<f64> {
        self.0.grid()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeparationConfig {
    /// Slope of the logistic.
    pub sigma: f64,
    /// Probability clamp for the cross-entropy logarithms.
    pub eps: f64,
}

impl Default for SeparationConfig {
    fn default() -> Self {
        Self { sigma: 10.0, eps: 1e-7 }
    }
}

impl SeparationConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.sigma > 0.0 && self.sigma.is_finite(), || {
            format!("separation sigma must be > 0, got {}", self.sigma)
        })?;
        ensure(self.eps > 0.0 && self.eps < 0.5, || {
            format!("bce eps must be in (0, 0.5), got {}", self.eps)
        })
    }
}

#[inline]
pub(crate) fn logistic<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Elementwise `sigmoid(sigma * (d - c))` on raw slices.
pub fn separate_slice<T: Real>(d: &[T], c: &[T], sigma: f64, out: &mut [T]) {
    let s = T::c(sigma);
    for ((o, &a), &b) in out.iter_mut().zip(d).zip(c) {
        *o = logistic(s * (a - b));
    }
}

/// Vector-Jacobian product of [`separate_slice`]: given the forward output and
/// upstream gradient, accumulate into the gradients of `d` and `c`.
pub fn separate_slice_vjp<T: Real>(out: &[T], upstream: &[T], sigma: f64, grad_d: &mut [T], grad_c: &mut [T]) {
    let s = T::c(sigma);
    for (((&y, &u), gd), gc) in out.iter().zip(upstream).zip(grad_d.iter_mut()).zip(grad_c.iter_mut()) {
        let local = u * s * y * (T::one() - y);
        *gd += local;
        *gc -= local;
    }
}

pub fn pop_out_separation_raw<T: Real>(d_po: &Grid<T>, d_c: &Grid<T>, sigma: f64) -> Result<Grid<T>> {
    check_same_shape(d_po.shape(), d_c.shape())?;
    let (h, w) = d_po.shape();
    let mut out = vec![T::zero(); h * w];
    separate_slice(d_po.data(), d_c.data(), sigma, &mut out);
    Grid::new(h, w, out)
}

/// Pseudo-semantic soft mask from popped-out depth and the contact surface.
pub fn pop_out_separation(d_po: &DepthMap, d_c: &ContactSurface, cfg: &SeparationConfig) -> Result<SoftMask> {
    cfg.validate()?;
    SoftMask::new(pop_out_separation_raw(d_po.grid(), d_c.grid(), cfg.sigma)?)
}

/// Pixel-mean binary cross-entropy with the prediction clamped to `[eps, 1 - eps]`.
pub fn bce_grad<T: Real>(s: &Grid<T>, g: &BinaryMask, eps: f64) -> Result<LossGrad<T>> {
    check_same_shape(s.shape(), g.shape())?;
    let lo = T::c(eps);
    let hi = T::one() - lo;
    let inv_n = T::one() / T::c(s.len() as f64);
    let mut total = T::zero();
    let grad = s.zip_map(g.grid(), |p, t| {
        let pc = p.max(lo).min(hi);
        if t {
            total += -pc.ln();
        } else {
            total += -(T::one() - pc).ln();
        }
        if pc != p {
            T::zero()
        } else if t {
            -inv_n / pc
        } else {
            inv_n / (T::one() - pc)
        }
    })?;
    Ok(LossGrad {
        value: total * inv_n,
        grad,
    })
}

/// Cross-entropy between the pseudo-semantics and the ground-truth mask.
pub fn separation_loss(s_s: &SoftMask, g: &BinaryMask, cfg: &SeparationConfig) -> Result<f64> {
    cfg.validate()?;
    Ok(bce_grad(s_s.grid(), g, cfg.eps)?.value)
}

/// Binarize with a strict `>`; ties fall to background.
pub fn hard_separation(s_s: &SoftMask, threshold: f64) -> Result<BinaryMask> {
    ensure(threshold > 0.0 && threshold < 1.0, || {
        format!("threshold must be in (0, 1), got {threshold}")
    })?;
    Ok(BinaryMask::new(s_s.grid().map(|v| v > threshold)))
}
