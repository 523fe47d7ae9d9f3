//! Grayscale raster images and binary masks with physical pixel spacing.
//!
//! All registration math runs on `f64` intensities laid out `[row, col]`.
//! Files are read through the `image` crate (PNG and TIFF, 8 or 16 bit,
//! color collapsed to luma); intensities are kept on a 0..=255 scale
//! regardless of the on-disk bit depth.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma};
use ndarray::Array2;

use crate::error::{Error, Result};

/// Single-channel image with spacing in mm per pixel, `(sx, sy)` being the
/// column and row pitch respectively.
#[derive(Clone, Debug, PartialEq)]
pub struct Image2D {
    data: Array2<f64>,
    spacing_mm: (f64, f64),
}

impl Image2D {
    pub fn new(data: Array2<f64>, spacing_mm: (f64, f64)) -> Self {
        Self { data, spacing_mm }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::new(Array2::zeros((height, width)), (1.0, 1.0))
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        Self::new(Array2::from_shape_fn((height, width), |(r, c)| f(r, c)), (1.0, 1.0))
    }

    pub fn with_spacing(mut self, spacing_mm: (f64, f64)) -> Self {
        self.spacing_mm = spacing_mm;
        self
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    /// `(height, width)`.
    pub fn shape(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn spacing_mm(&self) -> (f64, f64) {
        self.spacing_mm
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array2<f64> {
        &mut self.data
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[(row, col)]
    }

    pub fn min_max(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in self.data.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Snaps every value to what a 16-bit PNG round trip would return, so an
    /// image equal to its own `quantize16` survives save and load bit for
    /// bit.
    pub fn quantize16(&self) -> Self {
        let data = self
            .data
            .mapv(|v| (v / 255.0 * 65535.0).round().clamp(0.0, 65535.0) * 255.0 / 65535.0);
        Self::new(data, self.spacing_mm)
    }

    /// Reads a PNG or TIFF file as grayscale on the 0..=255 scale. Color
    /// input collapses to luma (0.299 R + 0.587 G + 0.114 B); 16-bit input is
    /// rescaled by 255/65535. Spacing starts at 1 mm and is overridden by the
    /// caller from manifest data.
    pub fn load_gray(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| Error::ImageFile {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let data = match img {
            DynamicImage::ImageLuma8(b) => {
                gray_from(b.height(), b.width(), |r, c| b.get_pixel(c, r).0[0] as f64)
            }
            DynamicImage::ImageLuma16(b) => gray_from(b.height(), b.width(), |r, c| {
                b.get_pixel(c, r).0[0] as f64 * 255.0 / 65535.0
            }),
            DynamicImage::ImageLumaA8(b) => {
                gray_from(b.height(), b.width(), |r, c| b.get_pixel(c, r).0[0] as f64)
            }
            DynamicImage::ImageLumaA16(b) => gray_from(b.height(), b.width(), |r, c| {
                b.get_pixel(c, r).0[0] as f64 * 255.0 / 65535.0
            }),
            DynamicImage::ImageRgb8(b) => gray_from(b.height(), b.width(), |r, c| {
                let p = b.get_pixel(c, r).0;
                luma(p[0] as f64, p[1] as f64, p[2] as f64)
            }),
            DynamicImage::ImageRgba8(b) => gray_from(b.height(), b.width(), |r, c| {
                let p = b.get_pixel(c, r).0;
                luma(p[0] as f64, p[1] as f64, p[2] as f64)
            }),
            DynamicImage::ImageRgb16(b) => gray_from(b.height(), b.width(), |r, c| {
                let p = b.get_pixel(c, r).0;
                luma(
                    p[0] as f64 * 255.0 / 65535.0,
                    p[1] as f64 * 255.0 / 65535.0,
                    p[2] as f64 * 255.0 / 65535.0,
                )
            }),
            other => {
                let b = other.to_rgba8();
                gray_from(b.height(), b.width(), |r, c| {
                    let p = b.get_pixel(c, r).0;
                    luma(p[0] as f64, p[1] as f64, p[2] as f64)
                })
            }
        };
        Ok(Self::new(data, (1.0, 1.0)))
    }

    /// Writes a 16-bit grayscale PNG; values are mapped from 0..=255 to the
    /// full 16-bit range and clamped. Encoding is deterministic.
    pub fn save_png16(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let (h, w) = self.shape();
        let mut buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::new(w as u32, h as u32);
        for (r, row) in self.data.outer_iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                let q = (v / 255.0 * 65535.0).round().clamp(0.0, 65535.0) as u16;
                buf.put_pixel(c as u32, r as u32, Luma([q]));
            }
        }
        buf.save(path).map_err(|e| Error::ImageFile {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn save_png8(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let (h, w) = self.shape();
        let mut buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::new(w as u32, h as u32);
        for (r, row) in self.data.outer_iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                buf.put_pixel(c as u32, r as u32, Luma([v.round().clamp(0.0, 255.0) as u8]));
            }
        }
        buf.save(path).map_err(|e| Error::ImageFile {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

fn gray_from(h: u32, w: u32, f: impl Fn(u32, u32) -> f64) -> Array2<f64> {
    Array2::from_shape_fn((h as usize, w as usize), |(r, c)| f(r as u32, c as u32))
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Binary mask sharing the raster conventions of [`Image2D`].
#[derive(Clone, Debug, PartialEq)]
pub struct Mask2D {
    data: Array2<bool>,
    spacing_mm: (f64, f64),
}

impl Mask2D {
    pub fn new(data: Array2<bool>, spacing_mm: (f64, f64)) -> Self {
        Self { data, spacing_mm }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        Self::new(Array2::from_shape_fn((height, width), |(r, c)| f(r, c)), (1.0, 1.0))
    }

    pub fn with_spacing(mut self, spacing_mm: (f64, f64)) -> Self {
        self.spacing_mm = spacing_mm;
        self
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn spacing_mm(&self) -> (f64, f64) {
        self.spacing_mm
    }

    pub fn data(&self) -> &Array2<bool> {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[(row, col)]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| !v)
    }

    /// Strictly positive pixels are foreground, so 0/1, 0/255 and 16-bit
    /// label files all load the same way.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = Image2D::load_gray(path)?;
        Ok(Self::from_image(&img, 0.0))
    }

    /// Foreground where intensity is strictly greater than `threshold`.
    pub fn from_image(img: &Image2D, threshold: f64) -> Self {
        Self::new(img.data().mapv(|v| v > threshold), img.spacing_mm())
    }

    /// 0/255 grayscale view, convenient for warping and saving.
    pub fn to_image(&self) -> Image2D {
        Image2D::new(self.data.mapv(|v| if v { 255.0 } else { 0.0 }), self.spacing_mm)
    }

    pub fn save_png8(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_image().save_png8(path)
    }

    /// Centroid of foreground pixel centers in mm, or an error for an empty
    /// mask.
    pub fn centroid_mm(&self) -> Result<[f64; 2]> {
        let mut n = 0usize;
        let mut sx = 0.0;
        let mut sy = 0.0;
        for ((r, c), &v) in self.data.indexed_iter() {
            if v {
                n += 1;
                sx += (c as f64 + 0.5) * self.spacing_mm.0;
                sy += (r as f64 + 0.5) * self.spacing_mm.1;
            }
        }
        if n == 0 {
            return Err(Error::EmptyMask("centroid of an all-background mask".into()));
        }
        Ok([sx / n as f64, sy / n as f64])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn png16_round_trip_preserves_quantized_values() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("img.png");
        let img = Image2D::from_fn(5, 7, |r, c| (r * 7 + c) as f64 * 255.0 / 34.0);
        img.save_png16(&path).unwrap();
        let back = Image2D::load_gray(&path).unwrap();
        assert_eq!(back.shape(), (5, 7));
        for r in 0..5 {
            for c in 0..7 {
                let err = (back.at(r, c) - img.at(r, c)).abs();
                assert!(err <= 255.0 / 65535.0, "({r},{c}) off by {err}");
            }
        }
    }

    #[test]
    fn mask_load_treats_any_positive_value_as_foreground() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("mask.png");
        let img = Image2D::from_fn(4, 4, |r, c| if r == c { 1.0 } else { 0.0 });
        img.save_png8(&path).unwrap();
        let mask = Mask2D::load(&path).unwrap();
        assert_eq!(mask.count(), 4);
        assert!(mask.get(2, 2));
        assert!(!mask.get(0, 3));
    }

    #[test]
    fn centroid_is_in_mm_with_anisotropic_spacing() {
        let mut mask = Mask2D::from_fn(4, 4, |r, c| r == 1 && c == 2);
        mask = mask.with_spacing((2.0, 0.5));
        let c = mask.centroid_mm().unwrap();
        assert_eq!(c, [2.5 * 2.0, 1.5 * 0.5]);
    }

    #[test]
    fn centroid_of_empty_mask_is_an_error() {
        let mask = Mask2D::from_fn(3, 3, |_, _| false);
        assert!(mask.centroid_mm().is_err());
    }
}
