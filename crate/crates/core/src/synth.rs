//! Synthetic RGB-D scenes: objects resting on a tilted background plane, with
//! exact masks and contact surfaces, and a corruption model for the depth.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::bilinear;
use crate::data::{self, SceneSample};
use crate::error::{ensure, PopError, Result};
use crate::grid::{BinaryMask, DepthMap, Grid, RgbImage};
use crate::separation::ContactSurface;
use crate::train::derive_seed;

pub const PLANE_MAX: f64 = 0.6;
pub const DELTA_MAX: f64 = 0.4;

/// Nearness `a * x + b * y + c` with `x, y` normalized to `[0, 1]`, clipped to `[0, PLANE_MAX]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Plane {
    pub fn at(&self, y: usize, x: usize, h: usize, w: usize) -> f64 {
        let nx = x as f64 / (w.max(2) - 1) as f64;
        let ny = y as f64 / (h.max(2) - 1) as f64;
        (self.a * nx + self.b * ny + self.c).clamp(0.0, PLANE_MAX)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Shape {
    /// Axis-aligned, `top..top + height` by `left..left + width`.
    Rectangle { top: usize, left: usize, height: usize, width: usize },
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
    /// Star-shaped polygon given by radii at evenly spaced angles.
    Blob { cy: f64, cx: f64, radii: Vec<f64> },
}

impl Shape {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        let (fy, fx) = (y as f64, x as f64);
        match self {
            Shape::Rectangle { top, left, height, width } => {
                (*top..top + height).contains(&y) && (*left..left + width).contains(&x)
            }
            Shape::Ellipse { cy, cx, ry, rx } => ((fy - cy) / ry).powi(2) + ((fx - cx) / rx).powi(2) <= 1.0,
            Shape::Blob { cy, cx, radii } => {
                let n = radii.len();
                let (dy, dx) = (fy - cy, fx - cx);
                let r = dy.hypot(dx);
                if r == 0.0 {
                    return true;
                }
                let t = dy.atan2(dx).rem_euclid(std::f64::consts::TAU) / std::f64::consts::TAU * n as f64;
                let i = (t.floor() as usize) % n;
                let f = t - t.floor();
                // polygon edge between consecutive vertices, in polar form
                let (a, b) = (radii[i], radii[(i + 1) % n]);
                let step = std::f64::consts::TAU / n as f64;
                let (pa, pb) = ((a, 0.0), (b * step.cos(), b * step.sin()));
                let ang = f * step;
                let (ux, uy) = (ang.cos(), ang.sin());
                // intersect the ray (ux, uy) * s with segment pa-pb
                let (ex, ey) = (pb.0 - pa.0, pb.1 - pa.1);
                let den = ux * ey - uy * ex;
                let s = (pa.0 * ey - pa.1 * ex) / den;
                r <= s
            }
        }
    }

    fn fits(&self, h: usize, w: usize) -> bool {
        let (hf, wf) = (h as f64, w as f64);
        match self {
            Shape::Rectangle { top, left, height, width } => {
                *height > 0 && *width > 0 && top + height <= h && left + width <= w
            }
            Shape::Ellipse { cy, cx, ry, rx } => {
                *ry > 0.0 && *rx > 0.0 && cy - ry >= 0.0 && cx - rx >= 0.0 && cy + ry <= hf - 1.0 && cx + rx <= wf - 1.0
            }
            Shape::Blob { cy, cx, radii } => {
                let r = radii.iter().cloned().fold(0.0, f64::max);
                radii.len() >= 3
                    && radii.iter().all(|v| *v > 0.0)
                    && cy - r >= 0.0
                    && cx - r >= 0.0
                    && cy + r <= hf - 1.0
                    && cx + r <= wf - 1.0
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    /// Pop height above the plane, in `(0, DELTA_MAX]`.
    pub delta: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    pub sigma: f64,
    /// Box blur radius in pixels.
    pub blur_radius: usize,
    /// Peak displacement of the low-frequency warp, in pixels.
    pub warp_amplitude: f64,
    /// Probability that each 8×8 block is dropped to zero.
    pub dropout_rate: f64,
}

impl NoiseModel {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        ensure(
            self.sigma >= 0.0 && self.warp_amplitude >= 0.0 && (0.0..=1.0).contains(&self.dropout_rate),
            || format!("noise parameters must be >= 0 (dropout <= 1), got {self:?}"),
        )
    }

    pub fn is_identity(&self) -> bool {
        self.sigma == 0.0 && self.blur_radius == 0 && self.warp_amplitude == 0.0 && self.dropout_rate == 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub plane: Plane,
    pub objects: Vec<SceneObject>,
    /// 0 gives unrelated object colours, 1 copies the background texture.
    pub camouflage: f64,
    pub noise: NoiseModel,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        ensure(self.height >= 8 && self.width >= 8, || "scene must be at least 8x8".into())?;
        ensure((0.0..=1.0).contains(&self.camouflage), || "camouflage must lie in [0, 1]".into())?;
        self.noise.validate()?;
        for (i, o) in self.objects.iter().enumerate() {
            ensure(o.delta > 0.0 && o.delta <= DELTA_MAX, || {
                format!("object {i}: delta {} outside (0, {DELTA_MAX}]", o.delta)
            })?;
            ensure(o.shape.fits(self.height, self.width), || format!("object {i} does not fit the canvas"))?;
        }
        Ok(())
    }

    /// 1-3 random objects on a random plane.
    pub fn random(height: usize, width: usize, camouflage: f64, noise: NoiseModel, rng: &mut impl Rng) -> Self {
        let plane = Plane {
            a: rng.random_range(-0.2..0.2),
            b: rng.random_range(0.0..0.3),
            c: rng.random_range(0.05..0.25),
        };
        let n = rng.random_range(1..=3);
        let (hf, wf) = (height as f64, width as f64);
        let min_side = hf.min(wf);
        let objects = (0..n)
            .map(|_| {
                let delta = rng.random_range(0.12..DELTA_MAX);
                let shape = match rng.random_range(0..3) {
                    0 => {
                        let hh = rng.random_range(height / 6..height / 2);
                        let ww = rng.random_range(width / 6..width / 2);
                        Shape::Rectangle {
                            top: rng.random_range(0..height - hh),
                            left: rng.random_range(0..width - ww),
                            height: hh,
                            width: ww,
                        }
                    }
                    1 => {
                        let ry = rng.random_range(min_side / 10.0..min_side / 4.0);
                        let rx = rng.random_range(min_side / 10.0..min_side / 4.0);
                        Shape::Ellipse {
                            cy: rng.random_range(ry..hf - 1.0 - ry),
                            cx: rng.random_range(rx..wf - 1.0 - rx),
                            ry,
                            rx,
                        }
                    }
                    _ => {
                        let base = rng.random_range(min_side / 9.0..min_side / 5.0);
                        let k = rng.random_range(5..10);
                        let radii: Vec<f64> = (0..k).map(|_| base * rng.random_range(0.6..1.3)).collect();
                        let r = radii.iter().cloned().fold(0.0, f64::max);
                        Shape::Blob {
                            cy: rng.random_range(r..hf - 1.0 - r),
                            cx: rng.random_range(r..wf - 1.0 - r),
                            radii,
                        }
                    }
                };
                SceneObject { shape, delta }
            })
            .collect();
        Self {
            height,
            width,
            plane,
            objects,
            camouflage,
            noise,
        }
    }
}

/// A generated scene. `sample.depth` is the corrupted depth; `ideal_depth` the clean one.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub sample: SceneSample,
    pub ideal_depth: DepthMap,
    pub surface: ContactSurface,
}

/// Smooth colour field: a base colour plus a few random sinusoids.
struct Texture {
    base: [f64; 3],
    waves: Vec<(f64, f64, f64, [f64; 3])>,
}

impl Texture {
    fn random(rng: &mut impl Rng) -> Self {
        let base = [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)];
        let waves = (0..3)
            .map(|_| {
                let f = rng.random_range(0.05..0.4);
                let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let amp = [0, 1, 2].map(|_| rng.random_range(-0.08..0.08));
                (f * theta.cos(), f * theta.sin(), phase, amp)
            })
            .collect();
        Self { base, waves }
    }

    fn at(&self, y: usize, x: usize) -> [f64; 3] {
        let mut c = self.base;
        for (fy, fx, phase, amp) in &self.waves {
            let s = (fy * y as f64 + fx * x as f64 + phase).sin();
            for k in 0..3 {
                c[k] += amp[k] * s;
            }
        }
        c.map(|v| v.clamp(0.0, 1.0))
    }
}

/// Render the scene; deterministic per `(spec, seed)`.
pub fn make_scene(spec: &SceneSpec, seed: u64, stem: &str) -> Result<Scene> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background = Texture::random(&mut rng);
    let textures: Vec<Texture> = spec.objects.iter().map(|_| Texture::random(&mut rng)).collect();

    let plane = Grid::from_fn(h, w, |y, x| spec.plane.at(y, x, h, w));
    // highest delta wins where objects overlap
    let owner = Grid::from_fn(h, w, |y, x| {
        spec.objects
            .iter()
            .enumerate()
            .filter(|(_, o)| o.shape.contains(y, x))
            .max_by(|a, b| a.1.delta.total_cmp(&b.1.delta))
            .map(|(i, _)| i)
    });
    let ideal = Grid::from_fn(h, w, |y, x| {
        let p = plane.get(y, x);
        owner.get(y, x).map_or(p, |i| p + spec.objects[i].delta)
    });
    let mask = BinaryMask::new(owner.map(|o| o.is_some()));
    let cam = spec.camouflage;
    let rgb = RgbImage::from_fn(h, w, |y, x| {
        let bg = background.at(y, x);
        match owner.get(y, x) {
            None => bg,
            Some(i) => {
                let fg = textures[i].at(y, x);
                [0, 1, 2].map(|k| (1.0 - cam) * fg[k] + cam * bg[k])
            }
        }
    })?;
    let ideal_depth = DepthMap::new(ideal)?;
    let depth = corrupt_depth(&ideal_depth, &spec.noise, derive_seed(seed, 0x5eed, 0, 0))?;
    let surface = ContactSurface::new(plane)?;
    Ok(Scene {
        sample: SceneSample {
            stem: stem.to_string(),
            rgb,
            depth,
            mask,
            surface: Some(surface.clone()),
        },
        ideal_depth,
        surface,
    })
}

fn box_blur(grid: &Grid<f64>, r: usize) -> Grid<f64> {
    if r == 0 {
        return grid.clone();
    }
    let (h, w) = grid.shape();
    let k = (2 * r + 1) as f64;
    let ri = r as isize;
    let horiz = Grid::from_fn(h, w, |y, x| {
        (-ri..=ri).map(|d| grid.get_clamped(y as isize, x as isize + d)).sum::<f64>() / k
    });
    Grid::from_fn(h, w, |y, x| {
        (-ri..=ri).map(|d| horiz.get_clamped(y as isize + d, x as isize)).sum::<f64>() / k
    })
}

pub const DROPOUT_BLOCK: usize = 8;

/// Noise, blur, warp and block dropout, clipped to `[0, 1]`. Deterministic per seed.
pub fn corrupt_depth(d: &DepthMap, noise: &NoiseModel, seed: u64) -> Result<DepthMap> {
    noise.validate()?;
    if noise.is_identity() {
        return Ok(d.clone());
    }
    let (h, w) = d.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = d.grid().clone();
    if noise.sigma > 0.0 {
        let normal = Normal::new(0.0, noise.sigma).map_err(|e| PopError::Validation(e.to_string()))?;
        for v in g.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    g = box_blur(&g, noise.blur_radius);
    if noise.warp_amplitude > 0.0 {
        let a = noise.warp_amplitude;
        let f: [f64; 4] = [0, 1, 2, 3].map(|_| rng.random_range(0.5..1.5));
        let p: [f64; 4] = [0, 1, 2, 3].map(|_| rng.random_range(0.0..std::f64::consts::TAU));
        let tau = std::f64::consts::TAU;
        let src = g.clone();
        g = Grid::from_fn(h, w, |y, x| {
            let (ny, nx) = (y as f64 / h as f64, x as f64 / w as f64);
            let dy = a * (tau * f[0] * nx + p[0]).sin() * (tau * f[1] * ny + p[1]).cos();
            let dx = a * (tau * f[2] * ny + p[2]).sin() * (tau * f[3] * nx + p[3]).cos();
            bilinear(&src, y as f64 + dy, x as f64 + dx)
        });
    }
    if noise.dropout_rate > 0.0 {
        for by in (0..h).step_by(DROPOUT_BLOCK) {
            for bx in (0..w).step_by(DROPOUT_BLOCK) {
                if rng.random::<f64>() < noise.dropout_rate {
                    for y in by..(by + DROPOUT_BLOCK).min(h) {
                        for x in bx..(bx + DROPOUT_BLOCK).min(w) {
                            g.set(y, x, 0.0);
                        }
                    }
                }
            }
        }
    }
    DepthMap::new(g.map(|v| v.clamp(0.0, 1.0)))
}

/// `n` random specs and their per-scene seeds, deterministic per `seed`.
pub fn random_specs(n: usize, size: usize, camouflage: f64, noise: NoiseModel, seed: u64) -> Vec<(SceneSpec, u64)> {
    (0..n)
        .map(|i| {
            let s = derive_seed(seed, 0x5ce7e, i as u64, 0);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            (SceneSpec::random(size, size, camouflage, noise, &mut rng), s)
        })
        .collect()
}

/// Generate the scenes for `specs` in memory.
pub fn generate(specs: &[(SceneSpec, u64)]) -> Result<Vec<Scene>> {
    specs
        .iter()
        .enumerate()
        .map(|(i, (spec, seed))| make_scene(spec, *seed, &stem_for(i)))
        .collect()
}

pub fn stem_for(i: usize) -> String {
    format!("scene_{i:05}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub stem: String,
    pub seed: u64,
    pub spec: SceneSpec,
    /// SHA-256 of each written PNG, keyed by subdirectory.
    pub checksums: std::collections::BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| PopError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Write scenes into the dataset layout with a manifest. A non-empty `out_dir`
/// is refused unless `force` is set.
pub fn export_dataset(specs: &[(SceneSpec, u64)], out_dir: &Path, seed: u64, force: bool) -> Result<Manifest> {
    if out_dir.exists() {
        let non_empty = fs::read_dir(out_dir)
            .map_err(|e| PopError::io(out_dir, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(PopError::Data(format!(
                "{} is not empty; pass force to overwrite",
                out_dir.display()
            )));
        }
    }
    data::create_layout(out_dir, true)?;
    let mut entries = Vec::with_capacity(specs.len());
    for (i, (spec, s)) in specs.iter().enumerate() {
        let stem = stem_for(i);
        let scene = make_scene(spec, *s, &stem)?;
        data::write_sample(out_dir, &scene.sample)?;
        let mut checksums = std::collections::BTreeMap::new();
        for sub in [data::IMAGES, data::DEPTHS, data::MASKS, data::SURFACES] {
            checksums.insert(sub.to_string(), sha256_file(&data::sample_path(out_dir, sub, &stem))?);
        }
        entries.push(ManifestEntry {
            stem,
            seed: *s,
            spec: spec.clone(),
            checksums,
        });
    }
    let manifest = Manifest {
        version: 1,
        seed,
        entries,
    };
    let path = out_dir.join(data::MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| PopError::io(&path, e))?;
    Ok(manifest)
}
