//! Grid primitives shared by every other module: the image/depth/mask types,
//! Sobel gradients (and their adjoint), boundary and interior maps, and depth
//! normalization.
//!
//! Depth is always stored as *nearness* in `[0, 1]`: larger values are closer
//! to the camera. Raw metric depth is flipped on ingestion.

use std::fmt::Debug;
use std::iter::Sum;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, PopError, Result};

/// Floating point scalar used by the differentiable code paths.
///
/// Losses are generic so that gradient checks can run in both 32- and 64-bit.
pub trait Real:
    num_traits::Float + Sum + Debug + Default + Send + Sync + std::ops::AddAssign + std::ops::SubAssign + 'static
{
    fn c(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn c(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn c(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Row-major `height × width` grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Grid<T = f64> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        ensure(data.len() == height * width, || {
            format!(
                "grid data has {} values, expected {height}x{width}",
                data.len()
            )
        })?;
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    /// Read with replicate padding for out-of-range coordinates.
    #[inline]
    pub fn get_clamped(&self, y: isize, x: isize) -> T {
        let yy = y.clamp(0, self.height as isize - 1) as usize;
        let xx = x.clamp(0, self.width as isize - 1) as usize;
        self.data[yy * self.width + xx]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Copy>(&self, f: impl FnMut(T) -> U) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().copied().map(f).collect(),
        }
    }

    pub fn zip_map<U: Copy, V: Copy>(&self, other: &Grid<U>, mut f: impl FnMut(T, U) -> V) -> Result<Grid<V>> {
        check_same_shape(self.shape(), other.shape())?;
        Ok(Grid {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x| self.get(y, self.width - 1 - x))
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.width, self.height, |y, x| self.get(x, y))
    }
}

impl<T: Real> Grid<T> {
    pub fn mean(&self) -> T {
        self.data.iter().copied().sum::<T>() / T::c(self.data.len() as f64)
    }

    pub fn cast<U: Real>(&self) -> Grid<U> {
        self.map(|v| U::c(v.as_f64()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn check_same_shape(expected: (usize, usize), actual: (usize, usize)) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(PopError::ShapeMismatch { expected, actual })
    }
}

fn check_unit_range(data: &[f64], what: &str) -> Result<()> {
    match data.iter().position(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
        None => Ok(()),
        Some(i) => Err(PopError::Validation(format!(
            "{what} value {} at index {i} is outside [0, 1]",
            data[i]
        ))),
    }
}

/// `H×W×3` colour image, channel-interleaved, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl RgbImage {
    pub const MIN_SIDE: usize = 8;

    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        ensure(height >= Self::MIN_SIDE && width >= Self::MIN_SIDE, || {
            format!("rgb image {height}x{width} is smaller than 8x8")
        })?;
        ensure(data.len() == height * width * 3, || {
            format!("rgb data has {} values, expected {}", data.len(), height * width * 3)
        })?;
        check_unit_range(&data, "rgb")?;
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// One colour plane as a grid.
    pub fn channel(&self, c: usize) -> Grid<f64> {
        Grid::from_fn(self.height, self.width, |y, x| self.data[(y * self.width + x) * 3 + c])
    }

    pub fn from_channels(channels: [&Grid<f64>; 3]) -> Result<Self> {
        let (h, w) = channels[0].shape();
        for c in &channels[1..] {
            check_same_shape((h, w), c.shape())?;
        }
        Self::from_fn(h, w, |y, x| [channels[0].get(y, x), channels[1].get(y, x), channels[2].get(y, x)])
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                data.extend_from_slice(&self.pixel(y, x));
            }
        }
        Self {
            height: self.height,
            width: self.width,
            data,
        }
    }
}

macro_rules! unit_grid_type {
    ($(#[$m:meta])* $name:ident, $what:literal) => {
        $(#[$m])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name(Grid<f64>);

        impl $name {
            pub fn new(grid: Grid<f64>) -> Result<Self> {
                check_unit_range(grid.data(), $what)?;
                Ok(Self(grid))
            }

            pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
                Self::new(Grid::new(height, width, data)?)
            }

            pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
                Self::new(Grid::filled(height, width, value))
            }

            pub fn grid(&self) -> &Grid<f64> {
                &self.0
            }

            pub fn into_grid(self) -> Grid<f64> {
                self.0
            }

            pub fn shape(&self) -> (usize, usize) {
                self.0.shape()
            }

            pub fn get(&self, y: usize, x: usize) -> f64 {
                self.0.get(y, x)
            }

            pub fn data(&self) -> &[f64] {
                self.0.data()
            }

            pub fn flip_horizontal(&self) -> Self {
                Self(self.0.flip_horizontal())
            }
        }
    };
}

unit_grid_type!(
    /// Relative nearness in `[0, 1]`; larger is closer to the camera.
    DepthMap,
    "depth"
);
unit_grid_type!(
    /// Soft prediction in `[0, 1]`.
    SoftMask,
    "soft mask"
);

/// Ground-truth mask with entries exactly 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask(Grid<bool>);

impl BinaryMask {
    pub fn new(grid: Grid<bool>) -> Self {
        Self(grid)
    }

    pub fn from_fn(height: usize, width: usize, f: impl FnMut(usize, usize) -> bool) -> Self {
        Self(Grid::from_fn(height, width, f))
    }

    /// Accepts only values that are exactly 0 or 1.
    pub fn from_values(height: usize, width: usize, values: &[f64]) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| **v != 0.0 && **v != 1.0) {
            return Err(PopError::Validation(format!("binary mask value {v} is not 0 or 1")));
        }
        Ok(Self(Grid::new(height, width, values.iter().map(|v| *v == 1.0).collect())?))
    }

    pub fn grid(&self) -> &Grid<bool> {
        &self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.0.get(y, x)
    }

    pub fn data(&self) -> &[bool] {
        self.0.data()
    }

    pub fn count(&self) -> usize {
        self.0.data().iter().filter(|v| **v).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.0.len() as f64
    }

    pub fn complement(&self) -> Self {
        Self(self.0.map(|v| !v))
    }

    pub fn to_real<T: Real>(&self) -> Grid<T> {
        self.0.map(|v| if v { T::one() } else { T::zero() })
    }

    pub fn flip_horizontal(&self) -> Self {
        Self(self.0.flip_horizontal())
    }

    /// Intersection over union; two empty masks count as a perfect match.
    pub fn iou(&self, other: &BinaryMask) -> Result<f64> {
        check_same_shape(self.shape(), other.shape())?;
        let (mut inter, mut union) = (0usize, 0usize);
        for (a, b) in self.data().iter().zip(other.data()) {
            inter += (*a && *b) as usize;
            union += (*a || *b) as usize;
        }
        Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
    }
}

/// Sobel responses of a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientField<T = f64> {
    pub gx: Grid<T>,
    pub gy: Grid<T>,
}

/// Pixel adjacency used by the pairwise losses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Neighborhood {
    #[default]
    FourConnected,
}

impl Neighborhood {
    /// Unordered neighbor pairs `(p, q)` with `p < q`, as flat indices.
    pub fn pairs(self, height: usize, width: usize) -> impl Iterator<Item = (usize, usize)> {
        let Neighborhood::FourConnected = self;
        (0..height).flat_map(move |y| {
            (0..width).flat_map(move |x| {
                let p = y * width + x;
                let right = (x + 1 < width).then_some((p, p + 1));
                let down = (y + 1 < height).then_some((p, p + width));
                right.into_iter().chain(down)
            })
        })
    }

    pub fn neighbors(self, height: usize, width: usize, p: usize) -> impl Iterator<Item = usize> {
        let Neighborhood::FourConnected = self;
        let (y, x) = (p / width, p % width);
        [
            (y > 0).then(|| p - width),
            (x > 0).then(|| p - 1),
            (x + 1 < width).then(|| p + 1),
            (y + 1 < height).then(|| p + width),
        ]
        .into_iter()
        .flatten()
    }

    pub fn pair_count(self, height: usize, width: usize) -> usize {
        height * width.saturating_sub(1) + height.saturating_sub(1) * width
    }
}

pub(crate) const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
pub(crate) const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Sobel correlation with replicate padding. No validation.
pub fn sobel<T: Real>(grid: &Grid<T>) -> GradientField<T> {
    let (h, w) = grid.shape();
    let mut gx = Grid::filled(h, w, T::zero());
    let mut gy = Grid::filled(h, w, T::zero());
    // written as differences so constant and mirrored inputs round identically
    let two = T::c(2.0);
    for y in 0..h {
        for x in 0..w {
            let p = |dy: isize, dx: isize| grid.get_clamped(y as isize + dy, x as isize + dx);
            let sx = (p(-1, 1) - p(-1, -1)) + two * (p(0, 1) - p(0, -1)) + (p(1, 1) - p(1, -1));
            let sy = (p(1, -1) - p(-1, -1)) + two * (p(1, 0) - p(-1, 0)) + (p(1, 1) - p(-1, 1));
            gx.set(y, x, sx);
            gy.set(y, x, sy);
        }
    }
    GradientField { gx, gy }
}

/// Adjoint of [`sobel`]: maps upstream gradients on `(gx, gy)` back onto the input grid.
pub fn sobel_adjoint<T: Real>(dgx: &Grid<T>, dgy: &Grid<T>) -> Grid<T> {
    let (h, w) = dgx.shape();
    let mut out = Grid::filled(h, w, T::zero());
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    for y in 0..h {
        for x in 0..w {
            let ux = dgx.get(y, x);
            let uy = dgy.get(y, x);
            if ux == T::zero() && uy == T::zero() {
                continue;
            }
            for ky in 0..3 {
                let yy = clamp(y as isize + ky as isize - 1, h);
                for kx in 0..3 {
                    let xx = clamp(x as isize + kx as isize - 1, w);
                    let contrib = T::c(SOBEL_X[ky][kx]) * ux + T::c(SOBEL_Y[ky][kx]) * uy;
                    let i = yy * w + xx;
                    out.data[i] += contrib;
                }
            }
        }
    }
    out
}

/// Validated Sobel gradients of a real grid.
pub fn sobel_gradients(grid: &Grid<f64>) -> Result<GradientField> {
    ensure(grid.height() >= 3 && grid.width() >= 3, || {
        format!("sobel needs at least 3x3, got {:?}", grid.shape())
    })?;
    ensure(grid.all_finite(), || "sobel input contains non-finite values".into())?;
    Ok(sobel(grid))
}

/// Pixels where the squared Sobel gradient magnitude of the mask is nonzero.
pub fn boundary_map(mask: &BinaryMask) -> BinaryMask {
    let field = sobel(&mask.to_real::<f64>());
    let (h, w) = mask.shape();
    BinaryMask::from_fn(h, w, |y, x| {
        let gx = field.gx.get(y, x);
        let gy = field.gy.get(y, x);
        gx * gx + gy * gy != 0.0
    })
}

/// Pixels whose whole 3×3 stencil lies inside the foreground. Image-border
/// pixels never qualify because their stencil relies on padding.
pub fn interior_mask(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = mask.shape();
    BinaryMask::from_fn(h, w, |y, x| {
        if y == 0 || x == 0 || y + 1 >= h || x + 1 >= w {
            return false;
        }
        (y - 1..=y + 1).all(|yy| (x - 1..=x + 1).all(|xx| mask.get(yy, xx)))
    })
}

/// How raw depth values are ordered.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DepthConvention {
    /// Larger means closer (relative inverse depth).
    #[default]
    Nearness,
    /// Larger means farther.
    MetricDepth,
}

/// Min-max rescale raw depth into a nearness map.
pub fn normalize_depth(raw: &Grid<f64>, convention: DepthConvention) -> Result<DepthMap> {
    ensure(raw.all_finite(), || "raw depth contains non-finite values".into())?;
    let (lo, hi) = raw
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return Err(PopError::Degenerate("raw depth is constant; no scale to normalize".into()));
    }
    let span = hi - lo;
    let out = raw.map(|v| {
        let t = ((v - lo) / span).clamp(0.0, 1.0);
        match convention {
            DepthConvention::Nearness => t,
            DepthConvention::MetricDepth => 1.0 - t,
        }
    });
    DepthMap::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn centered_block(n: usize, k: usize) -> BinaryMask {
        let lo = (n - k) / 2;
        BinaryMask::from_fn(n, n, |y, x| (lo..lo + k).contains(&y) && (lo..lo + k).contains(&x))
    }

    #[test]
    fn sobel_of_constant_is_zero() {
        let g = Grid::filled(6, 7, 0.7);
        let f = sobel_gradients(&g).unwrap();
        assert!(f.gx.data().iter().chain(f.gy.data()).all(|v| *v == 0.0));
    }

    #[test]
    fn sobel_column_ramp_center() {
        let g = Grid::from_fn(3, 3, |_, x| [0.0, 0.5, 1.0][x]);
        let f = sobel_gradients(&g).unwrap();
        assert_eq!(f.gx.get(1, 1), 4.0);
        assert_eq!(f.gy.get(1, 1), 0.0);
    }

    #[test]
    fn sobel_transpose_swaps_components() {
        let g = Grid::from_fn(5, 4, |y, x| ((y * 7 + x * 3) % 5) as f64 / 5.0);
        let f = sobel(&g);
        let ft = sobel(&g.transpose());
        assert_eq!(ft.gx, f.gy.transpose());
        assert_eq!(ft.gy, f.gx.transpose());
    }

    #[test]
    fn sobel_rejects_non_finite() {
        let mut g = Grid::filled(4, 4, 0.0);
        g.set(1, 1, f64::NAN);
        assert!(matches!(sobel_gradients(&g), Err(PopError::Validation(_))));
    }

    #[test]
    fn sobel_adjoint_matches_inner_product() {
        let g = Grid::from_fn(5, 6, |y, x| ((y * 13 + x * 5) % 7) as f64 * 0.1);
        let ux = Grid::from_fn(5, 6, |y, x| ((y + 2 * x) % 3) as f64 - 1.0);
        let uy = Grid::from_fn(5, 6, |y, x| ((3 * y + x) % 4) as f64 * 0.5);
        let f = sobel(&g);
        let lhs: f64 = f.gx.data().iter().zip(ux.data()).map(|(a, b)| a * b).sum::<f64>()
            + f.gy.data().iter().zip(uy.data()).map(|(a, b)| a * b).sum::<f64>();
        let adj = sobel_adjoint(&ux, &uy);
        let rhs: f64 = g.data().iter().zip(adj.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn boundary_of_constant_masks_is_empty() {
        assert_eq!(boundary_map(&BinaryMask::from_fn(8, 8, |_, _| false)).count(), 0);
        assert_eq!(boundary_map(&BinaryMask::from_fn(8, 8, |_, _| true)).count(), 0);
    }

    #[test]
    fn boundary_of_centered_2x2_block() {
        let b = boundary_map(&centered_block(8, 2));
        assert_eq!(b.count(), 16);
        // the 4x4 block of pixels whose stencil straddles both values
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(b.get(y, x), (2..6).contains(&y) && (2..6).contains(&x));
            }
        }
    }

    #[test]
    fn normalize_depth_conventions() {
        let raw = Grid::new(1, 3, vec![2.0, 4.0, 6.0]).unwrap();
        let near = normalize_depth(&raw, DepthConvention::Nearness).unwrap();
        assert_eq!(near.data(), &[0.0, 0.5, 1.0]);
        let metric = normalize_depth(&raw, DepthConvention::MetricDepth).unwrap();
        assert_eq!(metric.data(), &[1.0, 0.5, 0.0]);
        let flat = Grid::filled(2, 2, 3.0);
        assert!(matches!(
            normalize_depth(&flat, DepthConvention::Nearness),
            Err(PopError::Degenerate(_))
        ));
    }

    #[test]
    fn interior_examples() {
        let full = BinaryMask::from_fn(8, 8, |_, _| true);
        let int = interior_mask(&full);
        assert_eq!(int.count(), 36);
        assert!(!int.get(0, 3) && int.get(1, 1) && int.get(6, 6) && !int.get(7, 7));
        assert_eq!(interior_mask(&centered_block(8, 2)).count(), 0);
        let five = BinaryMask::from_fn(9, 9, |y, x| (2..7).contains(&y) && (2..7).contains(&x));
        let int5 = interior_mask(&five);
        assert_eq!(int5.count(), 9);
        assert!(int5.get(3, 3) && int5.get(5, 5) && !int5.get(2, 2));
    }

    #[test]
    fn neighborhood_pairs_are_symmetric_and_complete() {
        let n = Neighborhood::FourConnected;
        let pairs: Vec<_> = n.pairs(4, 5).collect();
        assert_eq!(pairs.len(), n.pair_count(4, 5));
        for (p, q) in pairs {
            assert_ne!(p, q);
            assert!(n.neighbors(4, 5, p).any(|r| r == q));
            assert!(n.neighbors(4, 5, q).any(|r| r == p));
        }
    }

    #[test]
    fn binary_mask_rejects_soft_values() {
        assert!(BinaryMask::from_values(1, 2, &[0.0, 0.5]).is_err());
        assert!(DepthMap::from_vec(1, 2, vec![0.0, 1.5]).is_err());
        assert!(RgbImage::new(4, 4, vec![0.0; 48]).is_err());
    }

    fn grid_strategy() -> impl Strategy<Value = (Grid<f64>, Grid<f64>)> {
        (3usize..9, 3usize..9).prop_flat_map(|(h, w)| {
            (
                prop::collection::vec(-1.0f64..1.0, h * w),
                prop::collection::vec(-1.0f64..1.0, h * w),
            )
                .prop_map(move |(a, b)| (Grid::new(h, w, a).unwrap(), Grid::new(h, w, b).unwrap()))
        })
    }

    fn mask_strategy() -> impl Strategy<Value = BinaryMask> {
        (3usize..10, 3usize..10).prop_flat_map(|(h, w)| {
            prop::collection::vec(any::<bool>(), h * w)
                .prop_map(move |v| BinaryMask::new(Grid::new(h, w, v).unwrap()))
        })
    }

    proptest! {
        #[test]
        fn sobel_is_linear((x, y) in grid_strategy(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let combo = x.zip_map(&y, |u, v| a * u + b * v).unwrap();
            let f = sobel(&combo);
            let fx = sobel(&x);
            let fy = sobel(&y);
            for i in 0..combo.len() {
                let ex = a * fx.gx.data()[i] + b * fy.gx.data()[i];
                let ey = a * fx.gy.data()[i] + b * fy.gy.data()[i];
                prop_assert!((f.gx.data()[i] - ex).abs() < 1e-12);
                prop_assert!((f.gy.data()[i] - ey).abs() < 1e-12);
            }
        }

        #[test]
        fn boundary_is_complement_invariant(m in mask_strategy()) {
            prop_assert_eq!(boundary_map(&m), boundary_map(&m.complement()));
        }

        #[test]
        fn interior_is_subset(m in mask_strategy()) {
            let int = interior_mask(&m);
            for (i, v) in int.data().iter().enumerate() {
                prop_assert!(!*v || m.data()[i]);
            }
        }

        #[test]
        fn normalize_attains_both_ends((x, _) in grid_strategy()) {
            prop_assume!(x.data().iter().any(|v| *v != x.data()[0]));
            let d = normalize_depth(&x, DepthConvention::MetricDepth).unwrap();
            prop_assert!(d.data().contains(&0.0));
            prop_assert!(d.data().contains(&1.0));
        }
    }
}
