//! Baseline JPEG compression artifacts via an encode/decode round trip.

use crate::img::Image;
use crate::{Error, Result};

/// Encodes to baseline JPEG (8x8 DCT, 4:2:0 chroma) at `quality` in
/// `[1, 100]` and decodes back.
pub fn jpeg_round_trip(img: &Image, quality: u8) -> Result<Image> {
    let rgb = image::RgbImage::from_raw(img.w() as u32, img.h() as u32, img.to_rgb8())
        .expect("buffer length matches dimensions");
    let mut buf = Vec::new();
    let mut enc = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut buf, quality);
    enc.encode_image(&rgb)
        .map_err(|e| Error::validation(format!("jpeg encode failed: {e}")))?;
    let decoded = image::load_from_memory(&buf)
        .map_err(|e| Error::validation(format!("jpeg decode failed: {e}")))?
        .to_rgb8();
    Image::from_rgb8(decoded.as_raw(), img.h(), img.w())
}
