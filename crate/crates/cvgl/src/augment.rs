//! Stochastic training-time augmentation.
//!
//! The pipeline runs, in order: satellite-only rotation (a uniform quarter
//! turn plus small-angle jitter), JPEG compression, color jitter,
//! blur/sharpen, grid and coarse dropout, and finally the backbone's
//! normalization. Street imagery is never rotated. All randomness comes
//! from the caller's RNG, so a fixed stream reproduces the exact output.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::View;
use crate::error::{Error, Result};
use crate::imageio::{ImageTensor, Normalization, PixelImage};
use crate::rng::seeded_rng;

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    /// JPEG round-trip probability and inclusive quality range.
    pub jpeg_prob: f64,
    pub jpeg_quality: (u8, u8),
    /// Color jitter probability and maximum relative shift per factor.
    pub jitter_prob: f64,
    pub jitter_strength: f64,
    /// Blur-or-sharpen probability (an even coin picks which).
    pub blur_prob: f64,
    /// Grid dropout: probability, grid side, per-cell drop chance.
    pub grid_prob: f64,
    pub grid_cells: usize,
    pub grid_fraction: f64,
    /// Coarse dropout: probability and rectangle side as an image fraction.
    pub coarse_prob: f64,
    pub coarse_fraction: f64,
    /// Satellite-only rotation probability and jitter half-range (degrees).
    pub rotation_prob: f64,
    pub rotation_jitter_deg: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            jpeg_prob: 0.3,
            jpeg_quality: (40, 90),
            jitter_prob: 0.5,
            jitter_strength: 0.3,
            blur_prob: 0.3,
            grid_prob: 0.25,
            grid_cells: 4,
            grid_fraction: 0.25,
            coarse_prob: 0.25,
            coarse_fraction: 0.3,
            rotation_prob: 1.0,
            rotation_jitter_deg: 10.0,
        }
    }
}

impl AugmentConfig {
    /// Identity pipeline: every probability zero.
    pub fn none() -> Self {
        AugmentConfig {
            jpeg_prob: 0.0,
            jitter_prob: 0.0,
            blur_prob: 0.0,
            grid_prob: 0.0,
            coarse_prob: 0.0,
            rotation_prob: 0.0,
            ..AugmentConfig::default()
        }
    }

    /// Read `augment.*` keys of a flat config file; absent keys keep the
    /// defaults above.
    pub fn from_config(cfg: &crate::config::Config) -> Result<Self> {
        let d = AugmentConfig::default();
        let q_lo = cfg.usize_or("augment.jpeg_quality_min", d.jpeg_quality.0 as usize)?;
        let q_hi = cfg.usize_or("augment.jpeg_quality_max", d.jpeg_quality.1 as usize)?;
        if q_lo > 100 || q_hi > 100 {
            return Err(Error::Config(format!(
                "jpeg quality range {q_lo}..={q_hi} out of bounds"
            )));
        }
        let config = AugmentConfig {
            jpeg_prob: cfg.f64_or("augment.jpeg_prob", d.jpeg_prob)?,
            jpeg_quality: (q_lo as u8, q_hi as u8),
            jitter_prob: cfg.f64_or("augment.jitter_prob", d.jitter_prob)?,
            jitter_strength: cfg.f64_or("augment.jitter_strength", d.jitter_strength)?,
            blur_prob: cfg.f64_or("augment.blur_prob", d.blur_prob)?,
            grid_prob: cfg.f64_or("augment.grid_prob", d.grid_prob)?,
            grid_cells: cfg.usize_or("augment.grid_cells", d.grid_cells)?,
            grid_fraction: cfg.f64_or("augment.grid_fraction", d.grid_fraction)?,
            coarse_prob: cfg.f64_or("augment.coarse_prob", d.coarse_prob)?,
            coarse_fraction: cfg.f64_or("augment.coarse_fraction", d.coarse_fraction)?,
            rotation_prob: cfg.f64_or("augment.rotation_prob", d.rotation_prob)?,
            rotation_jitter_deg: cfg.f64_or("augment.rotation_jitter_deg", d.rotation_jitter_deg)?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("jpeg_prob", self.jpeg_prob),
            ("jitter_prob", self.jitter_prob),
            ("blur_prob", self.blur_prob),
            ("grid_prob", self.grid_prob),
            ("coarse_prob", self.coarse_prob),
            ("rotation_prob", self.rotation_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        if self.jpeg_quality.0 > self.jpeg_quality.1 || self.jpeg_quality.1 > 100 {
            return Err(Error::Config(format!(
                "jpeg quality range {:?} invalid",
                self.jpeg_quality
            )));
        }
        if !(0.0..=1.0).contains(&self.grid_fraction)
            || !(0.0..=1.0).contains(&self.coarse_fraction)
        {
            return Err(Error::Config("dropout fractions must be in [0, 1]".into()));
        }
        if self.grid_cells == 0 {
            return Err(Error::Config("grid_cells must be positive".into()));
        }
        if self.jitter_strength < 0.0 || self.rotation_jitter_deg < 0.0 {
            return Err(Error::Config("jitter strengths must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Derive the RNG for one augmentation draw. The stream depends only on
/// (seed, step, image, draw), never on how many draws other images
/// consumed, so data-parallel workers and resumed runs agree.
pub fn draw_rng(seed: u64, step: usize, image_id: &str, draw: char) -> ChaCha8Rng {
    seeded_rng(seed, &format!("augment/{step}/{image_id}/{draw}"))
}

fn gate(rng: &mut impl Rng, p: f64) -> bool {
    // always consume one draw so the stream shape is config-independent
    rng.random::<f64>() < p
}

fn color_jitter(image: &mut PixelImage, rng: &mut impl Rng, strength: f64) {
    let brightness = 1.0 + rng.random_range(-strength..=strength);
    let contrast = 1.0 + rng.random_range(-strength..=strength);
    let saturation = 1.0 + rng.random_range(-strength..=strength);
    let (h, w) = (image.height(), image.width());
    for y in 0..h {
        for x in 0..w {
            let px = [
                image.data[[y, x, 0]],
                image.data[[y, x, 1]],
                image.data[[y, x, 2]],
            ];
            let gray = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
            for (c, &p) in px.iter().enumerate() {
                let mut v = p * brightness;
                v = (v - 0.5) * contrast + 0.5;
                v = gray + (v - gray) * saturation;
                image.data[[y, x, c]] = v.clamp(0.0, 1.0);
            }
        }
    }
}

/// 3×3 binomial blur with clamped borders.
pub(crate) fn blur3(image: &PixelImage) -> PixelImage {
    const K: [[f64; 3]; 3] = [[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]];
    let (h, w) = (image.height(), image.width());
    let mut out = PixelImage::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (dy, row) in K.iter().enumerate() {
                    for (dx, k) in row.iter().enumerate() {
                        let sy = (y + dy).saturating_sub(1).min(h - 1);
                        let sx = (x + dx).saturating_sub(1).min(w - 1);
                        acc += k * image.data[[sy, sx, c]];
                    }
                }
                out.data[[y, x, c]] = acc / 16.0;
            }
        }
    }
    out
}

fn sharpen(image: &PixelImage) -> PixelImage {
    let blurred = blur3(image);
    let mut out = image.clone();
    let (h, w) = (image.height(), image.width());
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = 2.0 * image.data[[y, x, c]] - blurred.data[[y, x, c]];
                out.data[[y, x, c]] = v.clamp(0.0, 1.0);
            }
        }
    }
    out
}

fn grid_dropout(image: &mut PixelImage, rng: &mut impl Rng, cells: usize, fraction: f64) {
    let (h, w) = (image.height(), image.width());
    for gy in 0..cells {
        for gx in 0..cells {
            if rng.random::<f64>() < fraction {
                let y0 = gy * h / cells;
                let y1 = (gy + 1) * h / cells;
                let x0 = gx * w / cells;
                let x1 = (gx + 1) * w / cells;
                for y in y0..y1 {
                    for x in x0..x1 {
                        for c in 0..3 {
                            image.data[[y, x, c]] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

fn coarse_dropout(image: &mut PixelImage, rng: &mut impl Rng, fraction: f64) {
    let (h, w) = (image.height(), image.width());
    let side_y = ((h as f64 * fraction) as usize).max(1).min(h);
    let side_x = ((w as f64 * fraction) as usize).max(1).min(w);
    let y0 = rng.random_range(0..=(h - side_y));
    let x0 = rng.random_range(0..=(w - side_x));
    for y in y0..y0 + side_y {
        for x in x0..x0 + side_x {
            for c in 0..3 {
                image.data[[y, x, c]] = 0.0;
            }
        }
    }
}

/// Apply the stochastic pipeline to an already-resized image and return
/// the normalized tensor. With every probability at zero this is exactly
/// resize + normalize.
pub fn augment(
    image: &PixelImage,
    view: View,
    config: &AugmentConfig,
    normalization: &Normalization,
    rng: &mut impl Rng,
) -> Result<ImageTensor> {
    config.validate()?;
    let mut img = image.clone();

    // geometric stage: satellite only
    if view == View::Satellite && gate(rng, config.rotation_prob) {
        let quarter = rng.random_range(0..4u32) as usize;
        let jitter = rng.random_range(-config.rotation_jitter_deg..=config.rotation_jitter_deg);
        if quarter > 0 {
            img = img.rot90(quarter);
        }
        if jitter.abs() > 1e-9 {
            img = img.rotate_bilinear(jitter);
        }
    }

    if gate(rng, config.jpeg_prob) {
        let q = rng.random_range(config.jpeg_quality.0..=config.jpeg_quality.1);
        img = img.jpeg_roundtrip(q)?;
    }
    if gate(rng, config.jitter_prob) {
        color_jitter(&mut img, rng, config.jitter_strength);
    }
    if gate(rng, config.blur_prob) {
        img = if rng.random::<bool>() {
            blur3(&img)
        } else {
            sharpen(&img)
        };
    }
    if gate(rng, config.grid_prob) {
        grid_dropout(&mut img, rng, config.grid_cells, config.grid_fraction);
    }
    if gate(rng, config.coarse_prob) {
        coarse_dropout(&mut img, rng, config.coarse_fraction);
    }
    Ok(normalization.apply(&img))
}
