//! Edge-map targets: full Canny (smooth, Sobel, non-maximum suppression,
//! hysteresis) and a normalized Laplacian response.

use super::filt::{conv3x3, gaussian_blur_field};
use crate::img::Image;
use crate::{Error, Result};
use ndarray::Array2;

const SOBEL_X: [f32; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
const SOBEL_Y: [f32; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

/// Canny edges of the luma channel. `low` and `high` are hysteresis
/// thresholds as fractions of the maximum gradient magnitude. The binary
/// map is replicated to 3 channels.
pub fn canny(img: &Image, sigma: f32, low: f32, high: f32) -> Result<Image> {
    if !(low > 0.0 && low < high && high <= 1.0) {
        return Err(Error::validation(format!(
            "canny thresholds need 0 < low < high <= 1, got low={low} high={high}"
        )));
    }
    if sigma <= 0.0 {
        return Err(Error::validation("canny sigma must be positive".to_string()));
    }
    let edges = canny_field(&img.luminance(), sigma, low, high);
    let (h, w) = edges.dim();
    Ok(Image::from_fn(h, w, |y, x| {
        let v = if edges[[y, x]] { 1.0 } else { 0.0 };
        [v, v, v]
    }))
}

fn canny_field(luma: &Array2<f32>, sigma: f32, low: f32, high: f32) -> Array2<bool> {
    let (h, w) = luma.dim();
    let smooth = gaussian_blur_field(luma, sigma);
    let gx = conv3x3(&smooth, &SOBEL_X);
    let gy = conv3x3(&smooth, &SOBEL_Y);
    let mag = Array2::from_shape_fn((h, w), |(y, x)| gx[[y, x]].hypot(gy[[y, x]]));
    let max_mag = mag.iter().cloned().fold(0.0f32, f32::max);
    if max_mag == 0.0 {
        return Array2::from_elem((h, w), false);
    }

    // Non-maximum suppression along the quantized gradient direction.
    // The tie rule (strict > toward the "before" neighbor, >= toward the
    // "after" neighbor) thins the two-pixel plateaus an ideal step edge
    // produces down to a single line.
    let mut nms = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let m = mag[[y, x]];
            if m == 0.0 {
                continue;
            }
            let angle = gy[[y, x]].atan2(gx[[y, x]]).to_degrees();
            let a = ((angle + 180.0) / 45.0).round() as i32 % 4;
            let (dy, dx) = match a {
                0 => (0i64, 1i64),  // horizontal gradient -> vertical edge
                1 => (1, 1),
                2 => (1, 0),
                _ => (1, -1),
            };
            let sample = |yy: i64, xx: i64| -> f32 {
                if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                    0.0
                } else {
                    mag[[yy as usize, xx as usize]]
                }
            };
            let before = sample(y as i64 - dy, x as i64 - dx);
            let after = sample(y as i64 + dy, x as i64 + dx);
            if m > before && m >= after {
                nms[[y, x]] = m;
            }
        }
    }

    let (tl, th) = (low * max_mag, high * max_mag);
    let mut state = Array2::<u8>::zeros((h, w)); // 0 none, 1 weak, 2 strong
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let m = nms[[y, x]];
            if m >= th {
                state[[y, x]] = 2;
                stack.push((y, x));
            } else if m >= tl {
                state[[y, x]] = 1;
            }
        }
    }
    // Hysteresis: weak pixels 8-connected to strong ones survive.
    let mut edges = Array2::from_elem((h, w), false);
    while let Some((y, x)) = stack.pop() {
        if edges[[y, x]] {
            continue;
        }
        edges[[y, x]] = true;
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                    continue;
                }
                let (ny, nx) = (ny as usize, nx as usize);
                if state[[ny, nx]] >= 1 && !edges[[ny, nx]] {
                    stack.push((ny, nx));
                }
            }
        }
    }
    edges
}

/// Raw 4-neighbor Laplacian of each channel (reflect padding); odd in the
/// input: `laplacian_raw(-img) = -laplacian_raw(img)`.
pub fn laplacian_raw(img: &Image) -> Image {
    super::filt::map_channels(img, |ch| {
        conv3x3(ch, &[0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0])
    })
}

/// Laplacian response normalized for storage: `0.5 + L / 2`, clamped.
/// Flat regions map to mid-gray; edges to dark/bright bands.
pub fn laplacian(img: &Image) -> Image {
    let mut out = laplacian_raw(img);
    out.data_mut().mapv_inplace(|v| 0.5 + 0.5 * v);
    out.clamp01();
    out
}
