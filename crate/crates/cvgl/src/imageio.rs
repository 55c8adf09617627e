//! Image loading and pixel-level operations.
//!
//! Pixels are held as `(H, W, 3)` arrays of `f64` in `[0, 1]`. Backbone
//! normalization produces plain `Array3<f64>` tensors that may leave that
//! range.

use std::io::Cursor;
use std::path::Path;

use image::codecs::jpeg::JpegEncoder;
use image::{ImageReader, RgbImage};
use ndarray::Array3;

use crate::error::{Error, Result};

/// RGB image with float pixels in `[0, 1]`, shape `(H, W, 3)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelImage {
    pub data: Array3<f64>,
}

/// Normalized image tensor passed to a backbone, shape `(H, W, 3)`.
pub type ImageTensor = Array3<f64>;

impl PixelImage {
    pub fn new(data: Array3<f64>) -> Self {
        PixelImage { data }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        PixelImage {
            data: Array3::zeros((height, width, 3)),
        }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = ImageReader::open(path)
            .map_err(|e| Error::io(path, e))?
            .decode()
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let mut data = Array3::zeros((h as usize, w as usize, 3));
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[[y as usize, x as usize, c]] = px.0[c] as f64 / 255.0;
            }
        }
        PixelImage { data }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let (h, w) = (self.height(), self.width());
        let mut img = RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = [
                    to_u8(self.data[[y, x, 0]]),
                    to_u8(self.data[[y, x, 1]]),
                    to_u8(self.data[[y, x, 2]]),
                ];
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        img
    }

    /// Bilinear resize to `size`×`size`. A no-op when dimensions already match.
    pub fn resize(&self, size: usize) -> Self {
        if self.height() == size && self.width() == size {
            return self.clone();
        }
        let (h, w) = (self.height(), self.width());
        let mut out = Array3::zeros((size, size, 3));
        let sy = h as f64 / size as f64;
        let sx = w as f64 / size as f64;
        for y in 0..size {
            // align sample points with pixel centers
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f64;
            for x in 0..size {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - x0 as f64;
                for c in 0..3 {
                    let top = self.data[[y0, x0, c]] * (1.0 - wx) + self.data[[y0, x1, c]] * wx;
                    let bot = self.data[[y1, x0, c]] * (1.0 - wx) + self.data[[y1, x1, c]] * wx;
                    out[[y, x, c]] = top * (1.0 - wy) + bot * wy;
                }
            }
        }
        PixelImage { data: out }
    }

    pub fn hflip(&self) -> Self {
        let (h, w) = (self.height(), self.width());
        let mut out = Array3::zeros((h, w, 3));
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out[[y, x, c]] = self.data[[y, w - 1 - x, c]];
                }
            }
        }
        PixelImage { data: out }
    }

    /// Rotate by `k` quarter turns counter-clockwise. Exact (no resampling).
    pub fn rot90(&self, k: usize) -> Self {
        let mut cur = self.data.clone();
        for _ in 0..(k % 4) {
            let (h, w) = (cur.shape()[0], cur.shape()[1]);
            let mut out = Array3::zeros((w, h, 3));
            for y in 0..h {
                for x in 0..w {
                    for c in 0..3 {
                        out[[w - 1 - x, y, c]] = cur[[y, x, c]];
                    }
                }
            }
            cur = out;
        }
        PixelImage { data: cur }
    }

    /// Rotate by an arbitrary angle (degrees, counter-clockwise) about the
    /// image center with bilinear sampling; out-of-bounds samples are 0.
    pub fn rotate_bilinear(&self, angle_deg: f64) -> Self {
        let (h, w) = (self.height(), self.width());
        let rad = angle_deg.to_radians();
        let (sin, cos) = rad.sin_cos();
        let cy = (h as f64 - 1.0) / 2.0;
        let cx = (w as f64 - 1.0) / 2.0;
        let mut out = Array3::zeros((h, w, 3));
        for y in 0..h {
            for x in 0..w {
                // inverse map: rotate destination coords by -angle
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                let sx = cos * dx + sin * dy + cx;
                let sy = -sin * dx + cos * dy + cy;
                if sx < 0.0 || sy < 0.0 || sx > (w - 1) as f64 || sy > (h - 1) as f64 {
                    continue;
                }
                let x0 = sx.floor() as usize;
                let y0 = sy.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let y1 = (y0 + 1).min(h - 1);
                let wx = sx - x0 as f64;
                let wy = sy - y0 as f64;
                for c in 0..3 {
                    let top = self.data[[y0, x0, c]] * (1.0 - wx) + self.data[[y0, x1, c]] * wx;
                    let bot = self.data[[y1, x0, c]] * (1.0 - wx) + self.data[[y1, x1, c]] * wx;
                    out[[y, x, c]] = top * (1.0 - wy) + bot * wy;
                }
            }
        }
        PixelImage { data: out }
    }

    /// Re-encode through JPEG at the given quality and decode back.
    pub fn jpeg_roundtrip(&self, quality: u8) -> Result<Self> {
        let rgb = self.to_rgb8();
        let mut buf = Vec::new();
        let encoder = JpegEncoder::new_with_quality(Cursor::new(&mut buf), quality);
        rgb.write_with_encoder(encoder).map_err(|e| Error::Image {
            path: "<memory>".into(),
            message: e.to_string(),
        })?;
        let decoded = image::load_from_memory(&buf).map_err(|e| Error::Image {
            path: "<memory>".into(),
            message: e.to_string(),
        })?;
        Ok(Self::from_rgb8(&decoded.to_rgb8()))
    }

    pub fn clamp01(&mut self) {
        self.data.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }

    /// Raw content bytes (8-bit quantized) used for content hashing.
    pub fn content_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|v| to_u8(*v)).collect()
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Per-channel normalization constants for a backbone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    pub fn apply(&self, img: &PixelImage) -> ImageTensor {
        let (h, w) = (img.height(), img.width());
        let mut out = Array3::zeros((h, w, 3));
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out[[y, x, c]] = (img.data[[y, x, c]] - self.mean[c]) / self.std[c];
                }
            }
        }
        out
    }
}
