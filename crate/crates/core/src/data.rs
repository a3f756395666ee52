//! Dataset ingestion and synthetic test-data generation.
//!
//! A manifest pairs image files with optional label maps in deterministic
//! (sorted) order. Two on-disk layouts are understood: a flat
//! `images/` + `labels/` tree, and the Cityscapes tree
//! (`leftImg8bit/<split>/<city>/*_leftImg8bit.png` with
//! `gtFine/.../*_gtFine_labelTrainIds.png`). Label maps are single-channel
//! 8-bit PNGs of class ids with 255 = ignore.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::ImageTensor;
use crate::error::{Error, Result};
use crate::metrics::IGNORE_LABEL;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ResolutionPolicy {
    #[default]
    Native,
    /// Downsample by 2 in height and width at load time (2x2 average for
    /// images, nearest for labels).
    Half,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Flat,
    Cityscapes,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: String,
    pub images: Vec<PathBuf>,
    pub labels: Option<Vec<PathBuf>>,
    pub resolution: ResolutionPolicy,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(labels) = &self.labels {
            if labels.len() != self.images.len() {
                return Err(Error::Dataset(format!(
                    "{} images but {} labels in split '{}'",
                    self.images.len(),
                    labels.len(),
                    self.split
                )));
            }
        }
        Ok(())
    }

    pub fn load_image(&self, index: usize) -> Result<ImageTensor> {
        let img = load_rgb(&self.images[index])?;
        let img = match self.resolution {
            ResolutionPolicy::Native => img,
            ResolutionPolicy::Half => half_image(&img),
        };
        Ok(ImageTensor::from_rgb8(&img))
    }

    pub fn load_label(&self, index: usize) -> Result<Array2<u8>> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::Dataset(format!("split '{}' has no labels", self.split)))?;
        let map = load_label_map(&labels[index])?;
        Ok(match self.resolution {
            ResolutionPolicy::Native => map,
            ResolutionPolicy::Half => half_label(&map),
        })
    }

    /// All images as (C, H, W) unit-domain arrays, ready for `make_batch`.
    pub fn load_all_images(&self) -> Result<Vec<Array3<f32>>> {
        (0..self.len())
            .map(|i| self.load_image(i).map(|t| t.data))
            .collect()
    }
}

pub fn load_rgb(path: &Path) -> Result<image::RgbImage> {
    let img = image::open(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    Ok(img.to_rgb8())
}

pub fn load_label_map(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        gray.get_pixel(x as u32, y as u32)[0]
    }))
}

pub fn save_label_map(path: &Path, map: &Array2<u8>) -> Result<()> {
    let (h, w) = map.dim();
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([map[[y as usize, x as usize]]])
    });
    img.save(path)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

fn half_image(img: &image::RgbImage) -> image::RgbImage {
    let (w, h) = img.dimensions();
    let (wo, ho) = (w / 2, h / 2);
    image::RgbImage::from_fn(wo, ho, |x, y| {
        let mut acc = [0u32; 3];
        for dy in 0..2 {
            for dx in 0..2 {
                let p = img.get_pixel(2 * x + dx, 2 * y + dy);
                for c in 0..3 {
                    acc[c] += p[c] as u32;
                }
            }
        }
        image::Rgb([(acc[0] / 4) as u8, (acc[1] / 4) as u8, (acc[2] / 4) as u8])
    })
}

fn half_label(map: &Array2<u8>) -> Array2<u8> {
    let (h, w) = map.dim();
    Array2::from_shape_fn((h / 2, w / 2), |(y, x)| map[[2 * y, 2 * x]])
}

fn sorted_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().is_some_and(|e| e == "png") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn collect_recursive(dir: &Path, suffix: &str, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            collect_recursive(&path, suffix, out)?;
        } else if path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.ends_with(suffix))
        {
            out.push(path);
        }
    }
    Ok(())
}

/// Build a manifest from a dataset directory.
///
/// `Flat` expects `root/images/*.png` and optionally `root/labels/*.png`
/// with identical file names. `Cityscapes` expects the standard
/// `leftImg8bit`/`gtFine` trees for the given split.
pub fn ingest(
    root: &Path,
    layout: Layout,
    split: &str,
    resolution: ResolutionPolicy,
) -> Result<DatasetManifest> {
    let (images, labels) = match layout {
        Layout::Flat => {
            let image_dir = root.join("images");
            let images = sorted_pngs(&image_dir)?;
            let label_dir = root.join("labels");
            let labels = if label_dir.is_dir() {
                let labels = sorted_pngs(&label_dir)?;
                let mut missing = Vec::new();
                for img in &images {
                    let want = label_dir.join(img.file_name().unwrap());
                    if !want.is_file() {
                        missing.push(want.display().to_string());
                    }
                }
                if !missing.is_empty() {
                    return Err(Error::Dataset(format!(
                        "missing label files: {}",
                        missing.join(", ")
                    )));
                }
                if labels.len() != images.len() {
                    return Err(Error::Dataset(format!(
                        "{} images but {} labels under {}",
                        images.len(),
                        labels.len(),
                        root.display()
                    )));
                }
                Some(
                    images
                        .iter()
                        .map(|img| label_dir.join(img.file_name().unwrap()))
                        .collect(),
                )
            } else {
                None
            };
            (images, labels)
        }
        Layout::Cityscapes => {
            let image_dir = root.join("leftImg8bit").join(split);
            if !image_dir.is_dir() {
                return Err(Error::Dataset(format!(
                    "no such split directory: {}",
                    image_dir.display()
                )));
            }
            let mut images = Vec::new();
            collect_recursive(&image_dir, "_leftImg8bit.png", &mut images)?;
            images.sort();
            let label_root = root.join("gtFine").join(split);
            let labels = if label_root.is_dir() {
                let mut missing = Vec::new();
                let mut labels = Vec::new();
                for img in &images {
                    let city = img.parent().unwrap().file_name().unwrap();
                    let name = img
                        .file_name()
                        .unwrap()
                        .to_string_lossy()
                        .replace("_leftImg8bit.png", "_gtFine_labelTrainIds.png");
                    let want = label_root.join(city).join(name);
                    if want.is_file() {
                        labels.push(want);
                    } else {
                        missing.push(want.display().to_string());
                    }
                }
                if !missing.is_empty() {
                    return Err(Error::Dataset(format!(
                        "missing label files: {}",
                        missing.join(", ")
                    )));
                }
                Some(labels)
            } else {
                None
            };
            (images, labels)
        }
    };
    if images.is_empty() {
        return Err(Error::Dataset(format!(
            "no images found under {}",
            root.display()
        )));
    }
    let manifest = DatasetManifest {
        split: split.to_string(),
        images,
        labels,
        resolution,
    };
    manifest.validate()?;
    Ok(manifest)
}

/// Fixed palette for synthetic classes; class 0 is the background.
const PALETTE: [[u8; 3]; 8] = [
    [32, 36, 44],
    [200, 60, 50],
    [60, 170, 70],
    [70, 90, 200],
    [220, 190, 60],
    [150, 70, 180],
    [70, 190, 190],
    [230, 130, 40],
];

/// Write `count` seeded image/label pairs of colored geometric shapes with
/// pixel-exact class masks into `dir/images` and `dir/labels`.
///
/// Every image contains all `classes` ids (background is class 0, each
/// remaining class draws one shape), so the dataset label histogram always
/// covers the full class range. Dims must be divisible by 16 so the pairs
/// feed the compression models directly.
pub fn generate_synthetic(
    dir: &Path,
    count: usize,
    height: usize,
    width: usize,
    classes: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    if height % 16 != 0 || width % 16 != 0 {
        return Err(Error::Config(format!(
            "synthetic dims must be divisible by 16, got {height}x{width}"
        )));
    }
    if classes < 2 || classes > PALETTE.len() {
        return Err(Error::Config(format!(
            "synthetic class count must be in 2..={}, got {classes}",
            PALETTE.len()
        )));
    }
    let image_dir = dir.join("images");
    let label_dir = dir.join("labels");
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    fs::create_dir_all(&label_dir).map_err(|e| Error::io(&label_dir, e))?;
    for index in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(index as u64));
        let (img, map) = synth_pair(&mut rng, height, width, classes);
        let name = format!("img_{index:04}.png");
        img.save(image_dir.join(&name))
            .map_err(|e| Error::Dataset(format!("{name}: {e}")))?;
        save_label_map(&label_dir.join(&name), &map)?;
    }
    ingest(dir, Layout::Flat, "synthetic", ResolutionPolicy::Native)
}

fn synth_pair(
    rng: &mut ChaCha8Rng,
    height: usize,
    width: usize,
    classes: usize,
) -> (image::RgbImage, Array2<u8>) {
    let mut map = Array2::from_elem((height, width), 0u8);
    let mut img = image::RgbImage::new(width as u32, height as u32);
    // shaded background so the codec has a gradient to learn
    let base = PALETTE[0];
    let tilt: [i16; 3] = [rng.gen_range(-30..=30), rng.gen_range(-30..=30), rng.gen_range(-30..=30)];
    for y in 0..height {
        for x in 0..width {
            let fx = x as f32 / width as f32;
            let fy = y as f32 / height as f32;
            let px = image::Rgb(std::array::from_fn(|c| {
                (base[c] as f32 + tilt[c] as f32 * (fx + fy)).clamp(0.0, 255.0) as u8
            }));
            img.put_pixel(x as u32, y as u32, px);
        }
    }
    for class in 1..classes {
        let color = PALETTE[class];
        let jitter: [i16; 3] = [
            rng.gen_range(-20..=20),
            rng.gen_range(-20..=20),
            rng.gen_range(-20..=20),
        ];
        let shaded = |c: usize| (color[c] as i16 + jitter[c]).clamp(0, 255) as u8;
        let fill = image::Rgb([shaded(0), shaded(1), shaded(2)]);
        let circle = rng.gen_bool(0.5);
        let cy = rng.gen_range(0..height) as i64;
        let cx = rng.gen_range(0..width) as i64;
        let r = rng.gen_range((height.min(width) / 8)..=(height.min(width) / 3)) as i64;
        for y in (cy - r).max(0)..(cy + r + 1).min(height as i64) {
            for x in (cx - r).max(0)..(cx + r + 1).min(width as i64) {
                let inside = if circle {
                    (y - cy).pow(2) + (x - cx).pow(2) <= r * r
                } else {
                    true // bounding box, i.e. a rectangle
                };
                if inside {
                    map[[y as usize, x as usize]] = class as u8;
                    img.put_pixel(x as u32, y as u32, fill);
                }
            }
        }
        // guarantee presence even when the shape mostly clipped off-screen
        let ay = (cy.clamp(0, height as i64 - 1)) as usize;
        let ax = (cx.clamp(0, width as i64 - 1)) as usize;
        map[[ay, ax]] = class as u8;
        img.put_pixel(ax as u32, ay as u32, fill);
    }
    // a thin ignore border exercises label masking downstream
    for x in 0..width {
        map[[0, x]] = IGNORE_LABEL;
    }
    (img, map)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_generates_pairs_with_all_classes() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_synthetic(dir.path(), 8, 64, 128, 4, 7).unwrap();
        assert_eq!(manifest.len(), 8);
        assert!(manifest.labels.is_some());
        let mut seen = [false; 4];
        for i in 0..manifest.len() {
            let img = manifest.load_image(i).unwrap();
            assert_eq!(img.data.dim(), (3, 64, 128));
            let map = manifest.load_label(i).unwrap();
            assert_eq!(map.dim(), (64, 128));
            for &v in map.iter() {
                if v != IGNORE_LABEL {
                    assert!(v < 4);
                    seen[v as usize] = true;
                }
            }
        }
        assert!(seen.iter().all(|&s| s), "classes seen: {seen:?}");
    }

    #[test]
    fn same_seed_gives_bit_identical_files() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_synthetic(a.path(), 2, 32, 32, 3, 11).unwrap();
        generate_synthetic(b.path(), 2, 32, 32, 3, 11).unwrap();
        for name in ["images/img_0000.png", "labels/img_0001.png"] {
            let x = fs::read(a.path().join(name)).unwrap();
            let y = fs::read(b.path().join(name)).unwrap();
            assert_eq!(x, y, "{name}");
        }
    }

    #[test]
    fn indivisible_dims_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_synthetic(dir.path(), 1, 60, 64, 3, 0).is_err());
    }

    #[test]
    fn reingest_is_deterministic_and_matches() {
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic(dir.path(), 4, 32, 32, 3, 5).unwrap();
        let a = ingest(dir.path(), Layout::Flat, "train", ResolutionPolicy::Native).unwrap();
        let b = ingest(dir.path(), Layout::Flat, "train", ResolutionPolicy::Native).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn missing_label_pair_is_listed() {
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic(dir.path(), 2, 32, 32, 3, 5).unwrap();
        fs::remove_file(dir.path().join("labels/img_0001.png")).unwrap();
        let err = ingest(dir.path(), Layout::Flat, "train", ResolutionPolicy::Native).unwrap_err();
        assert!(err.to_string().contains("img_0001.png"), "{err}");
    }

    #[test]
    fn empty_directory_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("images")).unwrap();
        assert!(ingest(dir.path(), Layout::Flat, "train", ResolutionPolicy::Native).is_err());
    }

    #[test]
    fn cityscapes_layout_pairs_by_city_and_stem() {
        let dir = tempfile::tempdir().unwrap();
        let img_dir = dir.path().join("leftImg8bit/train/cityA");
        let lab_dir = dir.path().join("gtFine/train/cityA");
        fs::create_dir_all(&img_dir).unwrap();
        fs::create_dir_all(&lab_dir).unwrap();
        let img = image::RgbImage::new(32, 32);
        img.save(img_dir.join("cityA_000001_leftImg8bit.png")).unwrap();
        let map = Array2::from_elem((32, 32), 1u8);
        save_label_map(
            &lab_dir.join("cityA_000001_gtFine_labelTrainIds.png"),
            &map,
        )
        .unwrap();
        let m = ingest(
            dir.path(),
            Layout::Cityscapes,
            "train",
            ResolutionPolicy::Half,
        )
        .unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.load_image(0).unwrap().data.dim(), (3, 16, 16));
        assert_eq!(m.load_label(0).unwrap().dim(), (16, 16));
    }
}
