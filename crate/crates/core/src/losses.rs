//! Supervision for the object popping network: structure preservation
//! (DSSIM against the source-free depth), local normal smoothness inside the
//! object, and edge-aware weighted total variation.
//!
//! Every loss has a generic `*_grad` form that returns the value together with
//! its analytic gradient with respect to the popped-out depth. The trainer and
//! the gradient checker both go through these.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, PopError, Result};
use crate::grid::{
    boundary_map, check_same_shape, interior_mask, sobel, sobel_adjoint, BinaryMask, DepthMap, Grid,
    Neighborhood, Real,
};

/// Local window statistics for SSIM.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsimConfig {
    pub window: usize,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 3,
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
        }
    }
}

impl SsimConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.window >= 3 && self.window % 2 == 1, || {
            format!("ssim window must be odd and >= 3, got {}", self.window)
        })?;
        ensure(self.c1 > 0.0 && self.c2 > 0.0, || "ssim constants must be positive".into())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum W0Mode {
    /// `w0` is the number of boundary pixels divided by the image area.
    #[default]
    BoundaryFraction,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WtvConfig {
    pub gamma: f64,
    pub w0_mode: W0Mode,
}

impl Default for WtvConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            w0_mode: W0Mode::BoundaryFraction,
        }
    }
}

impl WtvConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.gamma >= 0.0 && self.gamma.is_finite(), || {
            format!("wtv gamma must be >= 0, got {}", self.gamma)
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PopLossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for PopLossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
        }
    }
}

impl PopLossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        ensure(ok(self.lambda1) && ok(self.lambda2), || {
            format!("pop loss weights must be finite and >= 0, got {self:?}")
        })
    }
}

/// Everything `pop_loss` needs besides its inputs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PopLossConfig {
    pub ssim: SsimConfig,
    pub wtv: WtvConfig,
    pub weights: PopLossWeights,
}

/// A scalar loss and its gradient with respect to one input grid.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad<T> {
    pub value: T,
    pub grad: Grid<T>,
}

/// Per-window SSIM map over `window × window` mean pooling, without padding.
pub fn ssim_map<T: Real>(a: &Grid<T>, b: &Grid<T>, cfg: &SsimConfig) -> Result<Grid<T>> {
    Ok(ssim_windows(a, b, cfg)?.map(|w| w.ssim))
}

pub fn ssim_index(a: &DepthMap, b: &DepthMap, cfg: &SsimConfig) -> Result<Grid<f64>> {
    ssim_map(a.grid(), b.grid(), cfg)
}

#[derive(Clone, Copy, Debug, Default)]
struct WindowStats<T> {
    ssim: T,
    // partial derivatives of ssim w.r.t. the raw moments of `a`
    d_ma: T,
    d_maa: T,
    d_mab: T,
}

fn ssim_windows<T: Real>(a: &Grid<T>, b: &Grid<T>, cfg: &SsimConfig) -> Result<Grid<WindowStats<T>>> {
    cfg.validate()?;
    check_same_shape(a.shape(), b.shape())?;
    let (h, w) = a.shape();
    let k = cfg.window;
    ensure(h >= k && w >= k, || format!("grid {h}x{w} is smaller than the ssim window {k}"))?;
    let inv_n = T::one() / T::c((k * k) as f64);
    let two = T::c(2.0);
    let c1 = T::c(cfg.c1);
    let c2 = T::c(cfg.c2);
    let out = Grid::from_fn(h - k + 1, w - k + 1, |y0, x0| {
        let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (T::zero(), T::zero(), T::zero(), T::zero(), T::zero());
        for y in y0..y0 + k {
            for x in x0..x0 + k {
                let va = a.get(y, x);
                let vb = b.get(y, x);
                sa += va;
                sb += vb;
                saa += va * va;
                sbb += vb * vb;
                sab += va * vb;
            }
        }
        let (ma, mb) = (sa * inv_n, sb * inv_n);
        let var_a = saa * inv_n - ma * ma;
        let var_b = sbb * inv_n - mb * mb;
        let cov = sab * inv_n - ma * mb;
        let a1 = two * (ma * mb) + c1;
        let a2 = two * cov + c2;
        let b1 = ma * ma + mb * mb + c1;
        let b2 = var_a + var_b + c2;
        let den = b1 * b2;
        let ssim = a1 * a2 / den;
        let ds_a1 = a2 / den;
        let ds_a2 = a1 / den;
        let ds_b1 = -ssim / b1;
        let ds_b2 = -ssim / b2;
        WindowStats {
            ssim,
            d_ma: two * mb * (ds_a1 - ds_a2) + two * ma * (ds_b1 - ds_b2),
            d_maa: ds_b2,
            d_mab: two * ds_a2,
        }
    });
    Ok(out)
}

/// DSSIM `(1 - SSIM) / 2`, clamped to `[0, 1]` and averaged over windows.
pub fn structure_loss_grad<T: Real>(d_po: &Grid<T>, d_sf: &Grid<T>, cfg: &SsimConfig) -> Result<LossGrad<T>> {
    let windows = ssim_windows(d_po, d_sf, cfg)?;
    let k = cfg.window;
    let (h, w) = d_po.shape();
    let inv_windows = T::one() / T::c(windows.len() as f64);
    let inv_n = T::one() / T::c((k * k) as f64);
    let half = T::c(0.5);
    let two = T::c(2.0);
    let mut value = T::zero();
    let mut grad = Grid::filled(h, w, T::zero());
    for y0 in 0..windows.height() {
        for x0 in 0..windows.width() {
            let st = windows.get(y0, x0);
            let raw = (T::one() - st.ssim) * half;
            let clamped = raw.max(T::zero()).min(T::one());
            value += clamped;
            if clamped != raw {
                continue;
            }
            // d(loss)/d(ssim) for this window
            let up = -half * inv_windows;
            for y in y0..y0 + k {
                for x in x0..x0 + k {
                    let ds = (st.d_ma + two * d_po.get(y, x) * st.d_maa + d_sf.get(y, x) * st.d_mab) * inv_n;
                    grad.data_mut()[y * w + x] += up * ds;
                }
            }
        }
    }
    Ok(LossGrad {
        value: value * inv_windows,
        grad,
    })
}

/// Structure-preserving loss between popped-out and source-free depth.
pub fn structure_loss(d_po: &DepthMap, d_sf: &DepthMap, cfg: &SsimConfig) -> Result<f64> {
    Ok(structure_loss_grad(d_po.grid(), d_sf.grid(), cfg)?.value)
}

/// Unnormalized normals `(-gx, -gy, 1)` per pixel.
pub fn normal_field(d_obj: &DepthMap) -> Grid<[f64; 3]> {
    normals(d_obj.grid())
}

pub(crate) fn normals<T: Real>(d: &Grid<T>) -> Grid<[T; 3]> {
    let f = sobel(d);
    f.gx.zip_map(&f.gy, |gx, gy| [-gx, -gy, T::one()]).expect("sobel preserves shape")
}

const COSINE_EPS: f64 = 1e-8;

/// Mean `1 - cos` between normals of 4-connected pixel pairs that both lie in
/// the stencil interior of the object mask.
pub fn local_smoothness_grad<T: Real>(d_po: &Grid<T>, g: &BinaryMask) -> Result<LossGrad<T>> {
    check_same_shape(d_po.shape(), g.shape())?;
    if g.count() == 0 {
        return Err(PopError::Validation("local smoothness needs a non-empty foreground".into()));
    }
    let (h, w) = d_po.shape();
    let gm = g.to_real::<T>();
    let d_obj = d_po.zip_map(&gm, |d, m| d * m)?;
    let n = normals(&d_obj);
    let interior = interior_mask(g);
    let valid: Vec<(usize, usize)> = Neighborhood::FourConnected
        .pairs(h, w)
        .filter(|&(p, q)| interior.data()[p] && interior.data()[q])
        .collect();
    let mut grad = Grid::filled(h, w, T::zero());
    if valid.is_empty() {
        return Ok(LossGrad { value: T::zero(), grad });
    }
    let inv_pairs = T::one() / T::c(valid.len() as f64);
    let eps = T::c(COSINE_EPS);
    let mut dgx = Grid::filled(h, w, T::zero());
    let mut dgy = Grid::filled(h, w, T::zero());
    let mut total = T::zero();
    for &(p, q) in &valid {
        let np = n.data()[p];
        let nq = n.data()[q];
        let dot = np[0] * nq[0] + np[1] * nq[1] + np[2] * nq[2];
        let sp = np[0] * np[0] + np[1] * np[1] + np[2] * np[2];
        let sq = nq[0] * nq[0] + nq[1] * nq[1] + nq[2] * nq[2];
        let den = (sp * sq).sqrt().max(eps);
        let cos = dot / den;
        total += T::one() - cos;
        // d(1 - cos)/d(gx_p) = (nq_x / den - cos * np_x / |np|^2), since n_x = -gx
        for (i, (gxs, gys)) in [(p, (np, nq, sp)), (q, (nq, np, sq))]
            .into_iter()
            .map(|(i, (a, b, sa))| (i, ((b[0] / den - cos * a[0] / sa), (b[1] / den - cos * a[1] / sa))))
        {
            dgx.data_mut()[i] += gxs * inv_pairs;
            dgy.data_mut()[i] += gys * inv_pairs;
        }
    }
    let d_dobj = sobel_adjoint(&dgx, &dgy);
    for ((o, v), m) in grad.data_mut().iter_mut().zip(d_dobj.data()).zip(gm.data()) {
        *o = *v * *m;
    }
    Ok(LossGrad {
        value: total * inv_pairs,
        grad,
    })
}

pub fn local_smoothness_loss(d_po: &DepthMap, g: &BinaryMask) -> Result<f64> {
    Ok(local_smoothness_grad(d_po.grid(), g)?.value)
}

/// Edge-aware weights: `w0` on semantic boundary pixels, `w0 + gamma` elsewhere,
/// with `w0` the boundary pixel fraction. Returns `(w0, weights)`.
pub fn edge_weights(g: &BinaryMask, cfg: &WtvConfig) -> Result<(f64, Grid<f64>)> {
    cfg.validate()?;
    let boundary = boundary_map(g);
    let W0Mode::BoundaryFraction = cfg.w0_mode;
    let w0 = boundary.count() as f64 / boundary.grid().len() as f64;
    let weights = boundary.grid().map(|b| if b { w0 } else { w0 + cfg.gamma });
    Ok((w0, weights))
}

/// Mean over ordered 4-connected pairs `(p, q)` of `w(p) * |d(p) - d(q)|`.
pub fn wtv_grad<T: Real>(d_po: &Grid<T>, g: &BinaryMask, cfg: &WtvConfig) -> Result<LossGrad<T>> {
    check_same_shape(d_po.shape(), g.shape())?;
    let (_, weights) = edge_weights(g, cfg)?;
    let (h, w) = d_po.shape();
    let mut grad = Grid::filled(h, w, T::zero());
    let n_pairs = Neighborhood::FourConnected.pair_count(h, w);
    if n_pairs == 0 {
        return Ok(LossGrad { value: T::zero(), grad });
    }
    let inv = T::one() / T::c((2 * n_pairs) as f64);
    let mut total = T::zero();
    for (p, q) in Neighborhood::FourConnected.pairs(h, w) {
        // both orderings of the pair share |d(p) - d(q)|
        let wpq = T::c(weights.data()[p] + weights.data()[q]);
        let diff = d_po.data()[p] - d_po.data()[q];
        total += wpq * diff.abs();
        let s = if diff > T::zero() {
            T::one()
        } else if diff < T::zero() {
            -T::one()
        } else {
            T::zero()
        };
        grad.data_mut()[p] += wpq * s * inv;
        grad.data_mut()[q] -= wpq * s * inv;
    }
    Ok(LossGrad {
        value: total * inv,
        grad,
    })
}

pub fn wtv_loss(d_po: &DepthMap, g: &BinaryMask, cfg: &WtvConfig) -> Result<f64> {
    Ok(wtv_grad(d_po.grid(), g, cfg)?.value)
}

/// Values of the three popping terms and their weighted sum.
#[derive(Clone, Debug, PartialEq)]
pub struct PopLossParts<T> {
    pub dep: T,
    pub loc: T,
    pub wtv: T,
    pub total: T,
    pub grad: Grid<T>,
}

/// `L_dep + lambda1 * L_loc + lambda2 * L_wtv` with its gradient.
pub fn pop_loss_grad<T: Real>(
    d_po: &Grid<T>,
    d_sf: &Grid<T>,
    g: &BinaryMask,
    cfg: &PopLossConfig,
) -> Result<PopLossParts<T>> {
    cfg.weights.validate()?;
    let dep = structure_loss_grad(d_po, d_sf, &cfg.ssim)?;
    let loc = local_smoothness_grad(d_po, g)?;
    let wtv = wtv_grad(d_po, g, &cfg.wtv)?;
    let l1 = T::c(cfg.weights.lambda1);
    let l2 = T::c(cfg.weights.lambda2);
    let grad = Grid::from_fn(d_po.height(), d_po.width(), |y, x| {
        dep.grad.get(y, x) + l1 * loc.grad.get(y, x) + l2 * wtv.grad.get(y, x)
    });
    Ok(PopLossParts {
        total: dep.value + l1 * loc.value + l2 * wtv.value,
        dep: dep.value,
        loc: loc.value,
        wtv: wtv.value,
        grad,
    })
}

pub fn pop_loss(d_po: &DepthMap, d_sf: &DepthMap, g: &BinaryMask, cfg: &PopLossConfig) -> Result<f64> {
    Ok(pop_loss_grad(d_po.grid(), d_sf.grid(), g, cfg)?.total)
}
