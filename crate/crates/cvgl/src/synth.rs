//! Synthetic multi-view dataset generator.
//!
//! Produces a miniature dataset in the directory layout the scanner
//! expects, with controllable cross-view correlation: every location gets
//! one distinctive coarse color pattern; the satellite image is a
//! quarter-turn-symmetric rendering of it, street images show the same
//! pattern under a fixed appearance shift, and drone images repeat it at
//! three blur levels standing in for the three altitude bands. Per-image
//! noise keeps samples distinct. Retrieval is therefore learnable — views
//! of one location correlate strongly — while nothing about real imagery
//! is imitated.

use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::Rng;

use crate::augment::blur3;
use crate::data::{Split, View, DRONE_IMAGES_PER_LOCATION, SCENE_GROUP_SIZE};
use crate::error::{Error, Result};
use crate::imageio::PixelImage;
use crate::rng::seeded_rng;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub locations: usize,
    /// Side of the emitted square images in pixels.
    pub image_size: usize,
    /// Side of the coarse random pattern each location is built from.
    pub coarse: usize,
    /// Half-range of the uniform per-pixel noise added to every image.
    pub noise: f64,
    /// Blend factor of the fixed street-view appearance shift (0 = street
    /// pixels equal satellite pixels up to noise; 1 = fully shifted).
    pub street_blend: f64,
    /// Auxiliary street-like images per location for pool mining.
    pub aux_per_location: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            locations: 32,
            image_size: 28,
            coarse: 7,
            noise: 0.05,
            street_blend: 0.3,
            aux_per_location: 2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.locations < 2 {
            return Err(Error::Config("need at least 2 locations".into()));
        }
        if self.coarse < 2 || self.image_size < self.coarse {
            return Err(Error::Config(format!(
                "coarse pattern {} must be ≥ 2 and ≤ image size {}",
                self.coarse, self.image_size
            )));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(Error::Config(format!(
                "noise must be in [0, 0.5], got {}",
                self.noise
            )));
        }
        if !(0.0..=1.0).contains(&self.street_blend) {
            return Err(Error::Config(format!(
                "street_blend must be in [0, 1], got {}",
                self.street_blend
            )));
        }
        Ok(())
    }

    /// Read `synth.*` keys of a flat config file.
    pub fn from_config(cfg: &crate::config::Config) -> Result<Self> {
        let d = SynthConfig::default();
        let config = SynthConfig {
            locations: cfg.usize_or("synth.locations", d.locations)?,
            image_size: cfg.usize_or("synth.image_size", d.image_size)?,
            coarse: cfg.usize_or("synth.coarse", d.coarse)?,
            noise: cfg.f64_or("synth.noise", d.noise)?,
            street_blend: cfg.f64_or("synth.street_blend", d.street_blend)?,
            aux_per_location: cfg.usize_or("synth.aux_per_location", d.aux_per_location)?,
            seed: cfg.u64_or("synth.seed", d.seed)?,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthSummary {
    pub locations: usize,
    pub images_written: usize,
    pub root: PathBuf,
}

/// Directory holding the auxiliary candidate pool, next to the splits.
pub const AUX_DIR: &str = "aux";

fn location_name(i: usize) -> String {
    format!("{i:04}")
}

/// Rotate a square (h, h, 3) array a quarter turn counter-clockwise.
fn rot90_coarse(a: &Array3<f64>) -> Array3<f64> {
    let n = a.shape()[0];
    Array3::from_shape_fn((n, n, 3), |(y, x, c)| a[[x, n - 1 - y, c]])
}

/// The per-location coarse pattern, symmetrized over the four quarter
/// turns so satellite rotation augmentation preserves its identity.
fn satellite_pattern(seed: u64, loc: &str, coarse: usize) -> Array3<f64> {
    let mut rng = seeded_rng(seed, &format!("synth/base/{loc}"));
    let raw = Array3::from_shape_fn((coarse, coarse, 3), |_| rng.random_range(0.1..0.9));
    let r1 = rot90_coarse(&raw);
    let r2 = rot90_coarse(&r1);
    let r3 = rot90_coarse(&r2);
    let mut sym = raw;
    sym += &r1;
    sym += &r2;
    sym += &r3;
    sym.mapv_inplace(|v| v / 4.0);
    sym
}

/// The fixed appearance shift applied to the street branch: mirrored
/// pattern with cycled color channels. The Siamese encoder has to learn
/// invariance to exactly this transform.
fn street_pattern(sat: &Array3<f64>, blend: f64) -> Array3<f64> {
    let n = sat.shape()[0];
    Array3::from_shape_fn((n, n, 3), |(y, x, c)| {
        let shifted = sat[[y, n - 1 - x, (c + 1) % 3]];
        (1.0 - blend) * sat[[y, x, c]] + blend * shifted
    })
}

/// Render a coarse pattern at full resolution with fresh per-pixel noise.
fn render(pattern: &Array3<f64>, size: usize, noise: f64, rng: &mut impl Rng) -> PixelImage {
    let up = PixelImage::new(pattern.clone()).resize(size);
    let mut img = up;
    if noise > 0.0 {
        img.data
            .mapv_inplace(|v| v + rng.random_range(-noise..=noise));
        img.clamp01();
    }
    img
}

fn save(img: &PixelImage, path: &Path, written: &mut usize) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save_png(path)?;
    *written += 1;
    Ok(())
}

/// Generate the dataset tree under `root`:
///
/// ```text
/// root/train/{street,satellite,drone}/<loc>/img_*.png
/// root/test_query/street/<loc>/img_000.png
/// root/test_gallery/satellite/<loc>/img_000.png
/// root/aux/<loc>/img_*.png
/// ```
///
/// Train locations and test locations coincide; the test images carry
/// independent noise draws. Drone directories hold exactly the 54 images
/// the scanner demands, ordered low-to-high altitude (sharpest first).
pub fn generate(root: &Path, config: &SynthConfig) -> Result<SynthSummary> {
    config.validate()?;
    let mut written = 0usize;
    let size = config.image_size;
    for i in 0..config.locations {
        let loc = location_name(i);
        let sat = satellite_pattern(config.seed, &loc, config.coarse);
        let street = street_pattern(&sat, config.street_blend);

        let noise_rng = |split: &str, view: &str, index: usize| {
            seeded_rng(
                config.seed,
                &format!("synth/noise/{split}/{view}/{loc}/{index}"),
            )
        };

        // train: one street and one satellite image per location
        let img = render(&street, size, config.noise, &mut noise_rng("train", "street", 0));
        save(
            &img,
            &root.join("train/street").join(&loc).join("img_000.png"),
            &mut written,
        )?;
        let img = render(&sat, size, config.noise, &mut noise_rng("train", "satellite", 0));
        save(
            &img,
            &root.join("train/satellite").join(&loc).join("img_000.png"),
            &mut written,
        )?;

        // train: 54 drone images, 18 per altitude band, blurrier with height
        let sat_full = PixelImage::new(sat.clone()).resize(size);
        let blur_levels = [sat_full.clone(), blur3(&sat_full), blur3(&blur3(&sat_full))];
        for index in 0..DRONE_IMAGES_PER_LOCATION {
            let band = index / SCENE_GROUP_SIZE;
            let mut img = blur_levels[band].clone();
            let mut rng = noise_rng("train", "drone", index);
            if config.noise > 0.0 {
                img.data
                    .mapv_inplace(|v| v + rng.random_range(-config.noise..=config.noise));
                img.clamp01();
            }
            save(
                &img,
                &root
                    .join("train/drone")
                    .join(&loc)
                    .join(format!("img_{index:03}.png")),
                &mut written,
            )?;
        }

        // test: fresh noise draws of the same patterns
        let img = render(&street, size, config.noise, &mut noise_rng("test_query", "street", 0));
        save(
            &img,
            &root.join("test_query/street").join(&loc).join("img_000.png"),
            &mut written,
        )?;
        let img = render(&sat, size, config.noise, &mut noise_rng("test_gallery", "satellite", 0));
        save(
            &img,
            &root
                .join("test_gallery/satellite")
                .join(&loc)
                .join("img_000.png"),
            &mut written,
        )?;

        // auxiliary pool: more street-like views of the same location
        for index in 0..config.aux_per_location {
            let img = render(&street, size, config.noise, &mut noise_rng("aux", "street", index));
            save(
                &img,
                &root
                    .join(AUX_DIR)
                    .join(&loc)
                    .join(format!("img_{index:03}.png")),
                &mut written,
            )?;
        }
    }
    Ok(SynthSummary {
        locations: config.locations,
        images_written: written,
        root: root.to_path_buf(),
    })
}

/// Scan the auxiliary pool directory into records. Candidate location ids
/// reflect the subdirectory only for bookkeeping — selection ignores them
/// and augmented records inherit their anchor's location.
pub fn scan_aux_pool(root: &Path) -> Result<Vec<crate::data::ImageRecord>> {
    let dir = root.join(AUX_DIR);
    if !dir.is_dir() {
        return Err(Error::Data(format!(
            "auxiliary pool directory {} does not exist",
            dir.display()
        )));
    }
    let mut records = Vec::new();
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    for sub in subdirs {
        let loc = sub
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut files: Vec<PathBuf> = std::fs::read_dir(&sub)
            .map_err(|e| Error::io(&sub, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .map(|e| matches!(e.to_string_lossy().to_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                    .unwrap_or(false)
            })
            .collect();
        files.sort();
        for path in files {
            let name = path.file_name().unwrap_or_default().to_string_lossy();
            let (width_px, height_px) =
                image::image_dimensions(&path).map_err(|e| Error::Image {
                    path: path.clone(),
                    message: e.to_string(),
                })?;
            records.push(crate::data::ImageRecord {
                image_id: format!("{AUX_DIR}/{loc}/{name}"),
                location_id: format!("{AUX_DIR}/{loc}"),
                view: View::Street,
                scale: None,
                source: crate::data::Source::Original,
                path,
                height_px,
                width_px,
            });
        }
    }
    if records.is_empty() {
        return Err(Error::Data(format!("no images under {}", dir.display())));
    }
    Ok(records)
}

/// Convenience wrapper: generate (if absent) and scan the train split.
pub fn ensure_generated(root: &Path, config: &SynthConfig) -> Result<()> {
    if root.join(Split::Train.dir_name()).is_dir() {
        return Ok(());
    }
    generate(root, config)?;
    Ok(())
}
