//! Joint geometric augmentation of RGB, depth, mask and contact surface:
//! horizontal flips, small rotations and border clipping.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::SceneSample;
use crate::error::{ensure, Result};
use crate::grid::{BinaryMask, DepthMap, Grid, RgbImage};
use crate::separation::ContactSurface;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationPolicy {
    pub flip_prob: f64,
    pub rotation_prob: f64,
    /// Angles are drawn uniformly from `[-max_rotation_deg, max_rotation_deg]`.
    pub max_rotation_deg: f64,
    pub clip_prob: f64,
    /// Fraction of each side removed is drawn from `[0, max_clip]`.
    pub max_clip: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            rotation_prob: 0.3,
            max_rotation_deg: 10.0,
            clip_prob: 0.3,
            max_clip: 0.1,
        }
    }
}

impl AugmentationPolicy {
    pub fn disabled() -> Self {
        Self {
            flip_prob: 0.0,
            rotation_prob: 0.0,
            max_rotation_deg: 0.0,
            clip_prob: 0.0,
            max_clip: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        ensure(prob(self.flip_prob) && prob(self.rotation_prob) && prob(self.clip_prob), || {
            "augmentation probabilities must lie in [0, 1]".into()
        })?;
        ensure((0.0..0.3).contains(&self.max_clip), || {
            format!("border clip fraction must lie in [0, 0.3), got {}", self.max_clip)
        })?;
        ensure(self.max_rotation_deg.is_finite() && self.max_rotation_deg >= 0.0, || {
            "rotation range must be finite and >= 0".into()
        })
    }
}

/// Concrete transform drawn from a policy.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Transform {
    pub flip: bool,
    pub angle_deg: f64,
    /// Fraction removed from every side before resampling to full size.
    pub clip: f64,
}

impl Transform {
    pub fn draw(policy: &AugmentationPolicy, rng: &mut impl Rng) -> Self {
        // fixed draw count keeps the stream aligned whatever the outcomes
        let (u_flip, u_rot, u_angle, u_clip, u_frac): (f64, f64, f64, f64, f64) =
            (rng.random(), rng.random(), rng.random(), rng.random(), rng.random());
        Self {
            flip: u_flip < policy.flip_prob,
            angle_deg: if u_rot < policy.rotation_prob {
                (2.0 * u_angle - 1.0) * policy.max_rotation_deg
            } else {
                0.0
            },
            clip: if u_clip < policy.clip_prob { u_frac * policy.max_clip } else { 0.0 },
        }
    }

    fn is_geometric_identity(&self) -> bool {
        self.angle_deg == 0.0 && self.clip == 0.0
    }

    /// Source coordinates for output pixel `(y, x)`: zoom by the clip, then rotate about the centre.
    fn source(&self, h: usize, w: usize, y: usize, x: usize) -> (f64, f64) {
        let cy = (h as f64 - 1.0) / 2.0;
        let cx = (w as f64 - 1.0) / 2.0;
        let scale = 1.0 - 2.0 * self.clip;
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let dy = (y as f64 - cy) * scale;
        let dx = (x as f64 - cx) * scale;
        (cy + c * dy - s * dx, cx + s * dy + c * dx)
    }
}

pub fn bilinear(grid: &Grid<f64>, sy: f64, sx: f64) -> f64 {
    let y0 = sy.floor();
    let x0 = sx.floor();
    let fy = sy - y0;
    let fx = sx - x0;
    let (y0, x0) = (y0 as isize, x0 as isize);
    let a = grid.get_clamped(y0, x0);
    let b = grid.get_clamped(y0, x0 + 1);
    let c = grid.get_clamped(y0 + 1, x0);
    let d = grid.get_clamped(y0 + 1, x0 + 1);
    (a * (1.0 - fx) + b * fx) * (1.0 - fy) + (c * (1.0 - fx) + d * fx) * fy
}

fn warp_grid(grid: &Grid<f64>, t: &Transform) -> Grid<f64> {
    let (h, w) = grid.shape();
    Grid::from_fn(h, w, |y, x| {
        let (sy, sx) = t.source(h, w, y, x);
        bilinear(grid, sy, sx).clamp(0.0, 1.0)
    })
}

fn warp_mask(mask: &BinaryMask, t: &Transform) -> BinaryMask {
    let (h, w) = mask.shape();
    let g = mask.to_real::<f64>();
    BinaryMask::from_fn(h, w, |y, x| {
        let (sy, sx) = t.source(h, w, y, x);
        g.get_clamped(sy.round() as isize, sx.round() as isize) > 0.5
    })
}

/// Apply one transform jointly to every modality.
pub fn apply(sample: &SceneSample, t: &Transform) -> SceneSample {
    let mut out = sample.clone();
    if t.flip {
        out.rgb = out.rgb.flip_horizontal();
        out.depth = out.depth.flip_horizontal();
        out.mask = out.mask.flip_horizontal();
        out.surface = out.surface.map(|c| ContactSurface::from_depth(c.as_depth().flip_horizontal()));
    }
    if t.is_geometric_identity() {
        return out;
    }
    let channels = [0, 1, 2].map(|c| warp_grid(&out.rgb.channel(c), t));
    out.rgb = RgbImage::from_channels([&channels[0], &channels[1], &channels[2]]).expect("warped rgb in range");
    out.depth = DepthMap::new(warp_grid(out.depth.grid(), t)).expect("warped depth in range");
    out.mask = warp_mask(&out.mask, t);
    out.surface = out
        .surface
        .map(|c| ContactSurface::new(warp_grid(c.grid(), t)).expect("warped surface in range"));
    out
}

pub fn augment(sample: &SceneSample, policy: &AugmentationPolicy, rng: &mut impl Rng) -> SceneSample {
    apply(sample, &Transform::draw(policy, rng))
}

/// Bilinear resize of every modality (nearest for the mask).
pub fn resize(sample: &SceneSample, h: usize, w: usize) -> SceneSample {
    if sample.shape() == (h, w) {
        return sample.clone();
    }
    let (sh, sw) = sample.shape();
    let map = |y: usize, x: usize| {
        (
            (y as f64 + 0.5) * sh as f64 / h as f64 - 0.5,
            (x as f64 + 0.5) * sw as f64 / w as f64 - 0.5,
        )
    };
    let rs = |g: &Grid<f64>| {
        Grid::from_fn(h, w, |y, x| {
            let (sy, sx) = map(y, x);
            bilinear(g, sy, sx).clamp(0.0, 1.0)
        })
    };
    let ch = [0, 1, 2].map(|c| rs(&sample.rgb.channel(c)));
    let mg = sample.mask.to_real::<f64>();
    SceneSample {
        stem: sample.stem.clone(),
        rgb: RgbImage::from_channels([&ch[0], &ch[1], &ch[2]]).expect("resized rgb in range"),
        depth: DepthMap::new(rs(sample.depth.grid())).expect("resized depth in range"),
        mask: BinaryMask::from_fn(h, w, |y, x| {
            let (sy, sx) = map(y, x);
            mg.get_clamped(sy.round() as isize, sx.round() as isize) > 0.5
        }),
        surface: sample
            .surface
            .as_ref()
            .map(|c| ContactSurface::new(rs(c.grid())).expect("resized surface in range")),
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn sample() -> SceneSample {
        let (h, w) = (16, 20);
        SceneSample {
            stem: "s".into(),
            rgb: RgbImage::from_fn(h, w, |y, x| [y as f64 / 16.0, x as f64 / 20.0, 0.5]).unwrap(),
            depth: DepthMap::new(Grid::from_fn(h, w, |y, x| ((y * 3 + x) % 11) as f64 / 10.0)).unwrap(),
            mask: BinaryMask::from_fn(h, w, |y, x| (4..10).contains(&y) && (3..12).contains(&x)),
            surface: Some(ContactSurface::new(Grid::filled(h, w, 0.3)).unwrap()),
        }
    }

    #[test]
    fn double_flip_is_identity() {
        let s = sample();
        let t = Transform {
            flip: true,
            ..Default::default()
        };
        assert_eq!(apply(&apply(&s, &t), &t), s);
    }

    #[test]
    fn zero_transform_is_identity() {
        let s = sample();
        assert_eq!(apply(&s, &Transform::default()), s);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            assert_eq!(augment(&s, &AugmentationPolicy::disabled(), &mut rng), s);
        }
    }

    #[test]
    fn augmented_masks_stay_binary_and_in_range() {
        let s = sample();
        let policy = AugmentationPolicy {
            flip_prob: 0.5,
            rotation_prob: 1.0,
            max_rotation_deg: 30.0,
            clip_prob: 1.0,
            max_clip: 0.25,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let a = augment(&s, &policy, &mut rng);
            assert!(a.validate().is_ok());
            assert!(a.depth.data().iter().all(|v| (0.0..=1.0).contains(v)));
            // BinaryMask cannot hold anything but {0, 1}; the content must survive
            assert!(a.mask.count() > 0);
        }
    }

    #[test]
    fn policy_bounds() {
        assert!(AugmentationPolicy::default().validate().is_ok());
        let bad = AugmentationPolicy {
            max_clip: 0.3,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn resize_identity_and_shape() {
        let s = sample();
        assert_eq!(resize(&s, 16, 20), s);
        let r = resize(&s, 32, 32);
        assert_eq!(r.shape(), (32, 32));
        assert!(r.validate().is_ok());
    }
}
