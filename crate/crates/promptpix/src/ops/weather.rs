//! Synthetic weather degradations: additive rain streaks and haze from an
//! atmospheric scattering model.

use super::filt::{gaussian_blur_field, resize_bilinear};
use crate::img::Image;
use crate::seed;
use ndarray::Array2;
use rand::Rng;

/// Additive oriented rain streaks. `density` is streaks per pixel of
/// area, `angle_deg` the mean streak direction (90 = vertical), `length`
/// the streak length in pixels and `brightness` the additive intensity.
/// `density = 0` is the exact identity.
pub fn rain(
    img: &Image,
    angle_deg: f32,
    length: u32,
    density: f32,
    brightness: f32,
    seed_: u64,
) -> Image {
    let (h, w) = (img.h(), img.w());
    let n_streaks = (density * (h * w) as f32).round() as usize;
    if n_streaks == 0 {
        return img.clone();
    }
    let mut rng = seed::rng(seed_);
    let mut layer = Array2::<f32>::zeros((h, w));
    for _ in 0..n_streaks {
        let ang = (angle_deg + rng.gen_range(-5.0..5.0)).to_radians();
        // Screen direction; y grows downward.
        let (dx, dy) = (ang.cos(), ang.sin());
        let mut px = rng.gen_range(0.0..w as f32);
        let mut py = rng.gen_range(0.0..h as f32);
        let b = brightness * rng.gen_range(0.6..1.0);
        for t in 0..length {
            let (xi, yi) = (px as i64, py as i64);
            if xi >= 0 && yi >= 0 && (xi as usize) < w && (yi as usize) < h {
                // Taper toward both ends.
                let taper = 1.0 - (2.0 * t as f32 / length as f32 - 1.0).abs();
                let cell = &mut layer[[yi as usize, xi as usize]];
                *cell = cell.max(b * (0.4 + 0.6 * taper));
            }
            px += dx;
            py += dy;
        }
    }
    // Slight blur softens aliasing along the streaks.
    let layer = gaussian_blur_field(&layer, 0.5);
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.data_mut()[[y, x, c]] += layer[[y, x]];
            }
        }
    }
    out.clamp01();
    out
}

/// Atmospheric scattering: `I * t + A * (1 - t)` with transmission
/// `t = 1 - strength * field` from a smooth random field, clamped to
/// at least 0.15 so some scene signal always survives.
pub fn haze(img: &Image, airlight: f32, strength: f32, seed_: u64) -> Image {
    let (h, w) = (img.h(), img.w());
    let field = smooth_field(h, w, seed_);
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let t = (1.0 - strength * field[[y, x]]).max(0.15);
            for c in 0..3 {
                let v = &mut out.data_mut()[[y, x, c]];
                *v = *v * t + airlight * (1.0 - t);
            }
        }
    }
    out.clamp01();
    out
}

/// Smooth random field in `[0, 1]`: a coarse uniform grid upsampled
/// bilinearly and lightly blurred.
fn smooth_field(h: usize, w: usize, seed_: u64) -> Array2<f32> {
    let mut rng = seed::rng(seed_);
    let g = 5usize;
    let coarse = Array2::from_shape_simple_fn((g, g), || rng.gen_range(0.0f32..1.0));
    let up = resize_bilinear(&coarse, h, w);
    gaussian_blur_field(&up, (h.min(w) as f32) / 32.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_density_rain_is_the_identity() {
        let img = crate::scene::render(406, 0, 32, 32);
        assert_eq!(rain(&img, 90.0, 12, 0.0, 0.5, 1).to_rgb8(), img.to_rgb8());
    }

    #[test]
    fn rain_only_brightens() {
        let img = crate::scene::render(406, 1, 64, 64);
        let out = rain(&img, 75.0, 16, 0.002, 0.5, 7);
        let mut brightened = 0usize;
        for (&o, &i) in out.data().iter().zip(img.data().iter()) {
            assert!(o >= i - 1e-6, "rain must be additive");
            if o > i + 1e-3 {
                brightened += 1;
            }
        }
        assert!(brightened > 200, "streaks should touch many pixels: {brightened}");
    }

    #[test]
    fn haze_pulls_toward_airlight_and_reduces_contrast() {
        let img = crate::scene::render(406, 2, 64, 64);
        let a = 0.9;
        let out = haze(&img, a, 0.8, 3);
        let spread = |im: &Image| {
            let mn = im.data().iter().cloned().fold(f32::MAX, f32::min);
            let mx = im.data().iter().cloned().fold(f32::MIN, f32::max);
            mx - mn
        };
        assert!(spread(&out) < spread(&img), "haze must compress contrast");
        // Every pixel moves toward the airlight (or stays).
        for (o, i) in out.data().iter().zip(img.data().iter()) {
            assert!((o - a).abs() <= (i - a).abs() + 1e-5);
        }
    }

    #[test]
    fn weather_is_seed_deterministic() {
        let img = crate::scene::render(406, 3, 48, 48);
        assert_eq!(
            rain(&img, 80.0, 12, 0.003, 0.4, 5).to_rgb8(),
            rain(&img, 80.0, 12, 0.003, 0.4, 5).to_rgb8()
        );
        assert_eq!(
            haze(&img, 0.85, 0.6, 5).to_rgb8(),
            haze(&img, 0.85, 0.6, 5).to_rgb8()
        );
        assert_ne!(
            haze(&img, 0.85, 0.6, 5).to_rgb8(),
            haze(&img, 0.85, 0.6, 6).to_rgb8()
        );
    }
}
