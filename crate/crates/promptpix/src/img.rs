//! Float RGB image container and lossless 8-bit PNG I/O.
//!
//! All pipeline stages exchange `(H, W, 3)` `f32` data in `[0, 1]`.
//! Quantization to and from 8-bit uses round-to-nearest so that
//! `u8 -> f32 -> u8` is exact, which is what makes corpus rebuilds
//! byte-identical.

use crate::{Error, Result};
use ndarray::{Array2, Array3};
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    data: Array3<f32>,
}

impl Image {
    /// Wraps an `(H, W, 3)` array.
    pub fn new(data: Array3<f32>) -> Image {
        assert_eq!(data.shape()[2], 3, "images are RGB");
        Image { data }
    }

    pub fn zeros(h: usize, w: usize) -> Image {
        Image { data: Array3::zeros((h, w, 3)) }
    }

    /// Builds an image from a per-pixel function returning RGB.
    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Image {
        let mut data = Array3::zeros((h, w, 3));
        for y in 0..h {
            for x in 0..w {
                let px = f(y, x);
                for c in 0..3 {
                    data[[y, x, c]] = px[c];
                }
            }
        }
        Image { data }
    }

    pub fn h(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn w(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f32> {
        &mut self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    pub fn clamp01(&mut self) {
        self.data.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }

    /// BT.601 luma, `(H, W)`.
    pub fn luminance(&self) -> Array2<f32> {
        let (h, w) = (self.h(), self.w());
        Array2::from_shape_fn((h, w), |(y, x)| {
            0.299 * self.data[[y, x, 0]] + 0.587 * self.data[[y, x, 1]] + 0.114 * self.data[[y, x, 2]]
        })
    }

    /// Round-to-nearest 8-bit quantization (row-major RGB bytes).
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_rgb8(bytes: &[u8], h: usize, w: usize) -> Result<Image> {
        if bytes.len() != h * w * 3 {
            return Err(Error::validation(format!(
                "byte length {} does not match {h}x{w} RGB",
                bytes.len()
            )));
        }
        let data = Array3::from_shape_vec(
            (h, w, 3),
            bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        )
        .expect("shape checked above");
        Ok(Image { data })
    }

    /// Channel-first copy `(3, H, W)` for the model boundary.
    pub fn to_chw(&self) -> Array3<f32> {
        let (h, w) = (self.h(), self.w());
        Array3::from_shape_fn((3, h, w), |(c, y, x)| self.data[[y, x, c]])
    }

    pub fn from_chw(chw: &Array3<f32>) -> Image {
        assert_eq!(chw.shape()[0], 3, "expected (3, H, W)");
        let (h, w) = (chw.shape()[1], chw.shape()[2]);
        Image::from_fn(h, w, |y, x| [chw[[0, y, x]], chw[[1, y, x]], chw[[2, y, x]]])
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = image::RgbImage::from_raw(self.w() as u32, self.h() as u32, self.to_rgb8())
            .expect("buffer length matches dimensions");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Io {
                context: format!("writing {}", path.display()),
                source: std::io::Error::other(e),
            })
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path).map_err(|e| Error::Io {
            context: format!("reading {}", path.display()),
            source: std::io::Error::other(e),
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        Image::from_rgb8(rgb.as_raw(), h, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_round_trips_every_8bit_level() {
        let bytes: Vec<u8> = (0..=255u16).map(|v| v as u8).cycle().take(256 * 3).collect();
        let img = Image::from_rgb8(&bytes, 16, 16).unwrap();
        assert_eq!(img.to_rgb8(), bytes);
    }

    #[test]
    fn png_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        let img = Image::from_fn(9, 7, |y, x| {
            [
                (y as f32) / 8.0,
                (x as f32) / 6.0,
                ((y * 7 + x) % 11) as f32 / 10.0,
            ]
        });
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        assert_eq!(back.to_rgb8(), img.to_rgb8());
        assert_eq!((back.h(), back.w()), (9, 7));
    }

    #[test]
    fn luminance_weights_are_bt601() {
        let img = Image::from_fn(1, 3, |_, x| match x {
            0 => [1.0, 0.0, 0.0],
            1 => [0.0, 1.0, 0.0],
            _ => [0.0, 0.0, 1.0],
        });
        let y = img.luminance();
        assert!((y[[0, 0]] - 0.299).abs() < 1e-6);
        assert!((y[[0, 1]] - 0.587).abs() < 1e-6);
        assert!((y[[0, 2]] - 0.114).abs() < 1e-6);
    }

    #[test]
    fn chw_round_trip_preserves_layout() {
        let img = Image::from_fn(4, 5, |y, x| [y as f32, x as f32, 0.5]);
        let chw = img.to_chw();
        assert_eq!(chw[[0, 2, 3]], 2.0);
        assert_eq!(chw[[1, 2, 3]], 3.0);
        assert_eq!(Image::from_chw(&chw), img);
    }

    #[test]
    fn from_rgb8_rejects_wrong_length() {
        assert!(Image::from_rgb8(&[0u8; 10], 2, 2).is_err());
    }
}
