//! Gaussian blur and Richardson-Lucy deconvolution artifacts.

use super::filt::{gaussian_blur_rgb, gaussian_kernel1d, map_channels, sep_conv2};
use crate::img::Image;

/// Gaussian blur with `ksize = 2 ceil(3 sigma) + 1` and reflect padding.
/// `sigma = 0` degenerates to the 1-tap delta kernel (exact identity).
pub fn gaussian_blur(img: &Image, sigma: f32) -> Image {
    let mut out = gaussian_blur_rgb(img, sigma);
    out.clamp01();
    out
}

/// Blurs with a Gaussian kernel, then runs `iters` Richardson-Lucy
/// updates with the same (known) kernel. Early-stopped R-L on a clipped,
/// quantization-free observation restores sharpness but introduces the
/// characteristic ringing/overshoot artifacts this task targets.
pub fn rl_artifact(img: &Image, sigma: f32, iters: u32) -> Image {
    let blurred = gaussian_blur_rgb(img, sigma);
    let mut out = richardson_lucy(&blurred, sigma, iters);
    out.clamp01();
    out
}

/// Richardson-Lucy deconvolution of `observed` under a symmetric Gaussian
/// PSF (so correlation equals convolution).
pub fn richardson_lucy(observed: &Image, sigma: f32, iters: u32) -> Image {
    let k = gaussian_kernel1d(sigma);
    map_channels(observed, |obs| {
        let mut est = obs.clone();
        for _ in 0..iters {
            let denom = sep_conv2(&est, &k).mapv(|v| v.max(1e-6));
            let ratio = obs / &denom;
            est = &est * &sep_conv2(&ratio, &k);
        }
        est
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::psnr_images;

    #[test]
    fn zero_sigma_blur_is_the_identity() {
        let img = crate::scene::render(401, 0, 32, 32);
        assert_eq!(gaussian_blur(&img, 0.0).to_rgb8(), img.to_rgb8());
    }

    #[test]
    fn blur_reduces_total_variation() {
        // A 2px checkerboard is almost pure Nyquist energy, which a
        // sigma = 2 Gaussian must nearly erase.
        let img = Image::from_fn(48, 48, |y, x| {
            let v = if (y / 2 + x / 2) % 2 == 0 { 0.2 } else { 0.8 };
            [v, v, v]
        });
        let tv = |im: &Image| -> f32 {
            let mut acc = 0.0;
            for y in 0..im.h() - 1 {
                for x in 0..im.w() - 1 {
                    for c in 0..3 {
                        acc += (im.data()[[y, x + 1, c]] - im.data()[[y, x, c]]).abs()
                            + (im.data()[[y + 1, x, c]] - im.data()[[y, x, c]]).abs();
                    }
                }
            }
            acc
        };
        let blurred = gaussian_blur(&img, 2.0);
        assert!(tv(&blurred) < 0.1 * tv(&img));
    }

    #[test]
    fn richardson_lucy_improves_on_the_blurred_observation() {
        // Efficacy contract: deconvolution with the true kernel must beat
        // the blurred input against the clean image.
        for (scene, sigma) in [(0u64, 1.0f32), (1, 1.5), (2, 2.0)] {
            let clean = crate::scene::render(402, scene, 64, 64);
            let blurred = gaussian_blur_rgb(&clean, sigma);
            let restored = richardson_lucy(&blurred, sigma, 30);
            let p_blur = psnr_images(&blurred, &clean).unwrap();
            let p_rl = psnr_images(&restored, &clean).unwrap();
            assert!(
                p_rl > p_blur,
                "RL should improve: sigma {sigma}, {p_rl:.2} dB vs {p_blur:.2} dB"
            );
        }
    }

    #[test]
    fn rl_artifact_differs_from_both_clean_and_blurred() {
        let clean = crate::scene::render(402, 3, 48, 48);
        let out = rl_artifact(&clean, 1.5, 10);
        assert_ne!(out.to_rgb8(), clean.to_rgb8());
        assert_ne!(out.to_rgb8(), gaussian_blur(&clean, 1.5).to_rgb8());
    }
}
