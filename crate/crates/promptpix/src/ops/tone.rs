//! Tone tasks: synthetic low light, histogram equalization, and
//! Laplacian-pyramid multi-scale tone manipulation.

use super::filt::{gaussian_blur_field, resize_bilinear};
use crate::img::Image;
use crate::seed;
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Darkens by `gain * img^gamma` (gamma > 1 crushes shadows) and adds mild
/// Gaussian read noise, mimicking underexposed captures.
pub fn low_light_synth(img: &Image, gamma: f32, gain: f32, noise_sigma: f32, seed_: u64) -> Image {
    let mut rng = seed::rng(seed_);
    let normal = Normal::new(0.0f32, noise_sigma.max(1e-8)).expect("sigma validated");
    let mut out = img.clone();
    out.data_mut().mapv_inplace(|v| {
        let dark = gain * v.max(0.0).powf(gamma);
        if noise_sigma > 0.0 {
            dark + normal.sample(&mut rng)
        } else {
            dark
        }
    });
    out.clamp01();
    out
}

/// Global histogram equalization of the luma channel; RGB is rescaled by
/// the per-pixel luma ratio so hue is approximately preserved. A constant
/// image maps to itself.
pub fn hist_eq(img: &Image) -> Image {
    let (h, w) = (img.h(), img.w());
    let luma = img.luminance();
    let mut hist = [0u32; 256];
    for &v in luma.iter() {
        hist[(v.clamp(0.0, 1.0) * 255.0).round() as usize] += 1;
    }
    let total: u32 = hist.iter().sum();
    let mut cdf = [0u32; 256];
    let mut acc = 0u32;
    for (i, &c) in hist.iter().enumerate() {
        acc += c;
        cdf[i] = acc;
    }
    let cdf_min = *cdf.iter().find(|&&c| c > 0).expect("non-empty image");
    if cdf_min == total {
        // Single-level histogram: equalization is undefined, keep as is.
        return img.clone();
    }
    let eq: Vec<f32> = cdf
        .iter()
        .map(|&c| (c.saturating_sub(cdf_min)) as f32 / (total - cdf_min) as f32)
        .collect();
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let yv = luma[[y, x]];
            let bin = (yv.clamp(0.0, 1.0) * 255.0).round() as usize;
            let ratio = (eq[bin] / yv.max(1e-4)).clamp(0.0, 8.0);
            for c in 0..3 {
                out.data_mut()[[y, x, c]] *= ratio;
            }
        }
    }
    out.clamp01();
    out
}

/// Multi-scale tone manipulation: a 4-level Laplacian pyramid is rebuilt
/// with per-band gains. All-ones gains reconstruct the input exactly.
pub fn mtm(img: &Image, gains: [f32; 4]) -> Image {
    let mut out = super::filt::map_channels(img, |ch| {
        // Analysis.
        let g0 = ch.clone();
        let g1 = down(&g0);
        let g2 = down(&g1);
        let g3 = down(&g2);
        let b0 = &g0 - &up(&g1, g0.dim());
        let b1 = &g1 - &up(&g2, g1.dim());
        let b2 = &g2 - &up(&g3, g2.dim());
        // Synthesis with gains; band 3 is the low-pass residual.
        let mut r = g3.mapv(|v| v * gains[3]);
        r = up(&r, g2.dim()) + b2.mapv(|v| v * gains[2]);
        r = up(&r, g1.dim()) + b1.mapv(|v| v * gains[1]);
        up(&r, g0.dim()) + b0.mapv(|v| v * gains[0])
    });
    out.clamp01();
    out
}

fn down(f: &Array2<f32>) -> Array2<f32> {
    let blurred = gaussian_blur_field(f, 1.0);
    let (h, w) = f.dim();
    resize_bilinear(&blurred, h.div_ceil(2), w.div_ceil(2))
}

fn up(f: &Array2<f32>, to: (usize, usize)) -> Array2<f32> {
    resize_bilinear(f, to.0, to.1)
}

/// Shared-seed parameter sampling helper used by the corpus: gains in
/// `[0.5, 2.0]` per band.
pub fn sample_mtm_gains(seed_: u64) -> [f32; 4] {
    let mut rng = seed::rng(seed_);
    std::array::from_fn(|_| rng.gen_range(0.5..2.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn low_light_darkens_everything() {
        let img = crate::scene::render(407, 0, 48, 48);
        let out = low_light_synth(&img, 2.2, 0.35, 0.0, 1);
        let mean_in = img.data().mean().unwrap();
        let mean_out = out.data().mean().unwrap();
        assert!(mean_out < 0.5 * mean_in, "{mean_out} vs {mean_in}");
    }

    #[test]
    fn hist_eq_is_identity_on_constant_images() {
        let img = Image::from_fn(16, 16, |_, _| [0.3, 0.3, 0.3]);
        assert_eq!(hist_eq(&img).to_rgb8(), img.to_rgb8());
    }

    #[test]
    fn hist_eq_stretches_low_contrast_luma() {
        // Mid-gray ramp occupying [0.4, 0.6] should spread out.
        let img = Image::from_fn(32, 64, |_, x| {
            let v = 0.4 + 0.2 * x as f32 / 63.0;
            [v, v, v]
        });
        let out = hist_eq(&img);
        let l = out.luminance();
        let mn = l.iter().cloned().fold(f32::MAX, f32::min);
        let mx = l.iter().cloned().fold(f32::MIN, f32::max);
        assert!(mn < 0.05 && mx > 0.95, "stretched to [{mn}, {mx}]");
    }

    #[test]
    fn hist_eq_is_deterministic() {
        let img = crate::scene::render(407, 1, 40, 40);
        assert_eq!(hist_eq(&img).to_rgb8(), hist_eq(&img).to_rgb8());
    }

    #[test]
    fn unit_gains_reconstruct_exactly() {
        let img = crate::scene::render(407, 2, 50, 46); // odd-ish dims on purpose
        let out = mtm(&img, [1.0; 4]);
        for (a, b) in out.data().iter().zip(img.data().iter()) {
            assert!((a - b).abs() < 1e-5, "pyramid must be perfectly reconstructing");
        }
    }

    #[test]
    fn detail_gain_amplifies_high_frequencies() {
        let img = crate::scene::render(407, 3, 64, 64);
        let boosted = mtm(&img, [2.0, 1.0, 1.0, 1.0]);
        let hf_energy = |im: &Image| -> f32 {
            let l = im.luminance();
            let blur = gaussian_blur_field(&l, 1.0);
            (&l - &blur).mapv(|v| v * v).sum()
        };
        assert!(hf_energy(&boosted) > 1.5 * hf_energy(&img));
    }
}
