//! Training records and the on-disk dataset layout:
//! `images/*.png` (8-bit RGB), `depths/*.png` (16-bit gray),
//! `masks/*.png` (8-bit gray), optional `surfaces/*.png`, matching stems.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb};

use crate::error::{PopError, Result};
use crate::grid::{BinaryMask, DepthMap, Grid, RgbImage};
use crate::separation::ContactSurface;

pub const IMAGES: &str = "images";
pub const DEPTHS: &str = "depths";
pub const MASKS: &str = "masks";
pub const SURFACES: &str = "surfaces";
pub const MANIFEST: &str = "manifest.json";

/// One training record.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub stem: String,
    pub rgb: RgbImage,
    /// Source-free depth.
    pub depth: DepthMap,
    pub mask: BinaryMask,
    /// Ground-truth contact surface (synthetic data only).
    pub surface: Option<ContactSurface>,
}

impl SceneSample {
    pub fn shape(&self) -> (usize, usize) {
        self.rgb.shape()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.shape();
        let same = self.depth.shape() == s
            && self.mask.shape() == s
            && self.surface.as_ref().is_none_or(|c| c.shape() == s);
        if same {
            Ok(())
        } else {
            Err(PopError::ShapeMismatch {
                expected: s,
                actual: self.depth.shape(),
            })
        }
    }
}

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> PopError + '_ {
    move |source| PopError::Image {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(image_err(path))?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    RgbImage::new(h as usize, w as usize, data)
}

pub fn write_rgb(path: &Path, rgb: &RgbImage) -> Result<()> {
    let (h, w) = rgb.shape();
    let raw = rgb.data().iter().map(|v| (v * 255.0).round() as u8).collect();
    let img: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_raw(w as u32, h as u32, raw).expect("rgb buffer size");
    img.save(path).map_err(image_err(path))
}

/// 16-bit (or 8-bit) grayscale as `value / max`.
pub fn read_depth(path: &Path) -> Result<DepthMap> {
    let img = image::open(path).map_err(image_err(path))?.to_luma16();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect();
    DepthMap::new(Grid::new(h as usize, w as usize, data)?)
}

pub fn write_depth(path: &Path, grid: &Grid<f64>) -> Result<()> {
    let (h, w) = grid.shape();
    let raw = grid.data().iter().map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(w as u32, h as u32, raw).expect("depth buffer size");
    img.save(path).map_err(image_err(path))
}

/// 8-bit gray, foreground where the value exceeds 127.
pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let img = image::open(path).map_err(image_err(path))?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v > 127).collect();
    Ok(BinaryMask::new(Grid::new(h as usize, w as usize, data)?))
}

pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let (h, w) = mask.shape();
    let raw = mask.data().iter().map(|b| if *b { 255 } else { 0 }).collect();
    let img = GrayImage::from_raw(w as u32, h as u32, raw).expect("mask buffer size");
    img.save(path).map_err(image_err(path))
}

/// 8-bit gray rendering of a `[0, 1]` grid (predictions).
pub fn read_soft(path: &Path) -> Result<Grid<f64>> {
    let img = image::open(path).map_err(image_err(path))?.to_luma8();
    let (w, h) = img.dimensions();
    Grid::new(h as usize, w as usize, img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect())
}

pub fn write_soft(path: &Path, grid: &Grid<f64>) -> Result<()> {
    let (h, w) = grid.shape();
    let raw = grid.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = GrayImage::from_raw(w as u32, h as u32, raw).expect("soft buffer size");
    img.save(path).map_err(image_err(path))
}

/// PNG stems in a directory, sorted.
pub fn png_stems(dir: &Path) -> Result<BTreeSet<String>> {
    let entries = fs::read_dir(dir).map_err(|e| PopError::io(dir, e))?;
    let mut out = BTreeSet::new();
    for entry in entries {
        let path = entry.map_err(|e| PopError::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string());
            }
        }
    }
    Ok(out)
}

pub fn sample_path(root: &Path, sub: &str, stem: &str) -> PathBuf {
    root.join(sub).join(format!("{stem}.png"))
}

/// A dataset directory whose stems are present in every required modality.
#[derive(Clone, Debug)]
pub struct Dataset {
    root: PathBuf,
    stems: Vec<String>,
    has_surfaces: bool,
}

impl Dataset {
    /// Fails with a data error listing the stems missing any modality.
    pub fn open(root: &Path) -> Result<Self> {
        let images = png_stems(&root.join(IMAGES))?;
        let depths = png_stems(&root.join(DEPTHS))?;
        let masks = png_stems(&root.join(MASKS))?;
        let all: BTreeSet<&String> = images.iter().chain(&depths).chain(&masks).collect();
        let missing: Vec<String> = all
            .iter()
            .filter(|s| !(images.contains(**s) && depths.contains(**s) && masks.contains(**s)))
            .map(|s| s.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(PopError::Data(format!(
                "stems missing a modality under {}: {}",
                root.display(),
                missing.join(", ")
            )));
        }
        if images.is_empty() {
            return Err(PopError::Data(format!("no samples under {}", root.display())));
        }
        let surface_dir = root.join(SURFACES);
        let has_surfaces = surface_dir.is_dir() && png_stems(&surface_dir)?.is_superset(&images);
        Ok(Self {
            root: root.to_path_buf(),
            stems: images.into_iter().collect(),
            has_surfaces,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn stems(&self) -> &[String] {
        &self.stems
    }

    pub fn len(&self) -> usize {
        self.stems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stems.is_empty()
    }

    pub fn load(&self, stem: &str) -> Result<SceneSample> {
        let surface = if self.has_surfaces {
            Some(ContactSurface::from_depth(read_depth(&sample_path(&self.root, SURFACES, stem))?))
        } else {
            None
        };
        let sample = SceneSample {
            stem: stem.to_string(),
            rgb: read_rgb(&sample_path(&self.root, IMAGES, stem))?,
            depth: read_depth(&sample_path(&self.root, DEPTHS, stem))?,
            mask: read_mask(&sample_path(&self.root, MASKS, stem))?,
            surface,
        };
        sample.validate().map_err(|e| PopError::Data(format!("{stem}: {e}")))?;
        Ok(sample)
    }

    pub fn load_all(&self) -> Result<Vec<SceneSample>> {
        self.stems.iter().map(|s| self.load(s)).collect()
    }
}

/// Write one sample into the dataset layout.
pub fn write_sample(root: &Path, sample: &SceneSample) -> Result<()> {
    write_rgb(&sample_path(root, IMAGES, &sample.stem), &sample.rgb)?;
    write_depth(&sample_path(root, DEPTHS, &sample.stem), sample.depth.grid())?;
    write_mask(&sample_path(root, MASKS, &sample.stem), &sample.mask)?;
    if let Some(c) = &sample.surface {
        write_depth(&sample_path(root, SURFACES, &sample.stem), c.grid())?;
    }
    Ok(())
}

pub fn create_layout(root: &Path, with_surfaces: bool) -> Result<()> {
    let mut subs = vec![IMAGES, DEPTHS, MASKS];
    if with_surfaces {
        subs.push(SURFACES);
    }
    for sub in subs {
        let p = root.join(sub);
        fs::create_dir_all(&p).map_err(|e| PopError::io(&p, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_png_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.png");
        let g = Grid::from_fn(9, 11, |y, x| ((y * 31 + x * 17) % 97) as f64 / 96.0);
        write_depth(&p, &g).unwrap();
        let back = read_depth(&p).unwrap();
        for (a, b) in g.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-15);
        }
    }

    #[test]
    fn mask_and_rgb_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = BinaryMask::from_fn(8, 10, |y, x| (x + y) % 3 == 0);
        write_mask(&dir.path().join("m.png"), &m).unwrap();
        assert_eq!(read_mask(&dir.path().join("m.png")).unwrap(), m);
        let rgb = RgbImage::from_fn(8, 10, |y, x| [y as f64 / 255.0, x as f64 / 255.0, 1.0]).unwrap();
        write_rgb(&dir.path().join("i.png"), &rgb).unwrap();
        assert_eq!(read_rgb(&dir.path().join("i.png")).unwrap(), rgb);
    }

    #[test]
    fn missing_modality_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        create_layout(dir.path(), false).unwrap();
        let m = BinaryMask::from_fn(8, 8, |y, _| y > 3);
        write_mask(&sample_path(dir.path(), MASKS, "a"), &m).unwrap();
        let err = Dataset::open(dir.path()).unwrap_err();
        assert!(err.is_data_error());
        assert!(err.to_string().contains('a'));
    }
}
