//! Noise degradations: additive Gaussian, scaled Poisson (shot), and
//! salt-and-pepper impulse noise. All draw from an explicit seeded RNG in
//! row-major pixel order so outputs are reproducible.

use crate::img::Image;
use crate::seed;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};

/// `out = img + N(0, sigma^2)` per element, clamped.
pub fn gaussian_noise(img: &Image, sigma: f32, seed_: u64) -> Image {
    if sigma == 0.0 {
        return img.clone();
    }
    let mut rng = seed::rng(seed_);
    let normal = Normal::new(0.0f32, sigma).expect("sigma validated");
    let mut out = img.clone();
    out.data_mut().mapv_inplace(|v| v + normal.sample(&mut rng));
    out.clamp01();
    out
}

/// Scaled Poisson shot noise: `out = Poisson(img * peak) / peak`.
/// Larger `peak` means more photons, hence less noise.
pub fn poisson_noise(img: &Image, peak: f32, seed_: u64) -> Image {
    let mut rng = seed::rng(seed_);
    let mut out = img.clone();
    out.data_mut().mapv_inplace(|v| {
        let lambda = (v * peak) as f64;
        if lambda <= 0.0 {
            0.0
        } else {
            let draw = Poisson::new(lambda).expect("lambda > 0").sample(&mut rng);
            (draw as f32) / peak
        }
    });
    out.clamp01();
    out
}

/// Each pixel is independently replaced with probability `density`,
/// half by black and half by white (all three channels together).
pub fn salt_pepper(img: &Image, density: f32, seed_: u64) -> Image {
    let mut rng = seed::rng(seed_);
    let mut out = img.clone();
    let (h, w) = (out.h(), out.w());
    for y in 0..h {
        for x in 0..w {
            if rng.gen::<f32>() < density {
                let v = if rng.gen::<bool>() { 1.0 } else { 0.0 };
                for c in 0..3 {
                    out.data_mut()[[y, x, c]] = v;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_img() -> Image {
        crate::scene::render(400, 0, 32, 32)
    }

    #[test]
    fn zero_sigma_is_the_identity() {
        let img = test_img();
        assert_eq!(gaussian_noise(&img, 0.0, 1).to_rgb8(), img.to_rgb8());
    }

    #[test]
    fn gaussian_noise_matches_requested_sigma() {
        // Mean absolute deviation of clipped noise on a mid-gray image
        // approximates sigma * sqrt(2/pi).
        let img = Image::from_fn(64, 64, |_, _| [0.5, 0.5, 0.5]);
        let sigma = 0.05;
        let noisy = gaussian_noise(&img, sigma, 7);
        let mad: f32 = noisy
            .data()
            .iter()
            .zip(img.data().iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f32>()
            / (64.0 * 64.0 * 3.0);
        let expect = sigma * (2.0 / std::f32::consts::PI).sqrt();
        assert!(
            (mad - expect).abs() < 0.15 * expect,
            "mad {mad} vs expected {expect}"
        );
    }

    #[test]
    fn noise_is_seed_deterministic() {
        let img = test_img();
        assert_eq!(
            gaussian_noise(&img, 0.1, 5).to_rgb8(),
            gaussian_noise(&img, 0.1, 5).to_rgb8()
        );
        assert_ne!(
            gaussian_noise(&img, 0.1, 5).to_rgb8(),
            gaussian_noise(&img, 0.1, 6).to_rgb8()
        );
    }

    #[test]
    fn poisson_noise_scales_with_photon_level() {
        let img = Image::from_fn(48, 48, |_, _| [0.5, 0.5, 0.5]);
        let err = |peak: f32| -> f32 {
            let noisy = poisson_noise(&img, peak, 9);
            noisy
                .data()
                .iter()
                .zip(img.data().iter())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f32>()
                / (48.0 * 48.0 * 3.0)
        };
        // Variance of Poisson(v * peak) / peak is v / peak.
        let (e30, e300) = (err(30.0), err(300.0));
        assert!(e30 > 5.0 * e300, "shot noise should shrink with peak: {e30} vs {e300}");
        let mse_expect = 0.5 / 30.0;
        assert!((e30 - mse_expect).abs() < 0.25 * mse_expect);
    }

    #[test]
    fn full_density_salt_pepper_is_binary() {
        let img = test_img();
        let out = salt_pepper(&img, 1.0, 3);
        assert!(out.data().iter().all(|&v| v == 0.0 || v == 1.0));
        // Roughly half salt.
        let salt: usize = out
            .data()
            .iter()
            .step_by(3)
            .filter(|&&v| v == 1.0)
            .count();
        let frac = salt as f32 / (32.0 * 32.0);
        assert!((frac - 0.5).abs() < 0.1);
    }

    #[test]
    fn salt_pepper_density_controls_coverage() {
        let img = Image::from_fn(64, 64, |_, _| [0.5, 0.5, 0.5]);
        let out = salt_pepper(&img, 0.1, 11);
        let hit: usize = (0..64 * 64)
            .filter(|&i| out.data().as_slice().unwrap()[i * 3] != 0.5)
            .count();
        let frac = hit as f32 / (64.0 * 64.0);
        assert!((frac - 0.1).abs() < 0.03, "impulse fraction {frac}");
    }
}
