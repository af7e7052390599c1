//! Inpainting masks: random strokes and rectangles zeroed out of the
//! image until a target coverage fraction is reached.

use crate::img::Image;
use crate::seed;
use ndarray::Array2;
use rand::Rng;

/// Zeroes pixels under randomly placed strokes (thickness 1-5 px) and
/// small rectangles until at least `coverage` of the area is masked.
/// `coverage = 0` is the exact identity.
pub fn inpainting_mask(img: &Image, coverage: f32, seed_: u64) -> Image {
    let (h, w) = (img.h(), img.w());
    let mask = sample_mask(h, w, coverage, seed_);
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] {
                for c in 0..3 {
                    out.data_mut()[[y, x, c]] = 0.0;
                }
            }
        }
    }
    out
}

/// The boolean mask itself (true = hole), exposed for tests.
pub fn sample_mask(h: usize, w: usize, coverage: f32, seed_: u64) -> Array2<bool> {
    let mut mask = Array2::from_elem((h, w), false);
    if coverage <= 0.0 {
        return mask;
    }
    let mut rng = seed::rng(seed_);
    let total = (h * w) as f32;
    let mut masked = 0usize;
    // Alternate strokes and rectangles; bail out after a generous cap in
    // case a tiny image cannot reach the target exactly.
    for round in 0..512 {
        if masked as f32 / total >= coverage {
            break;
        }
        if round % 2 == 0 {
            // Random-walk stroke.
            let thickness = rng.gen_range(1..=5usize);
            let steps = rng.gen_range(8..=40);
            let mut py = rng.gen_range(0..h) as f32;
            let mut px = rng.gen_range(0..w) as f32;
            let mut dir = rng.gen_range(0.0..std::f32::consts::TAU);
            for _ in 0..steps {
                stamp_disc(&mut mask, py, px, thickness as f32 / 2.0, &mut masked);
                dir += rng.gen_range(-0.6..0.6);
                py += dir.sin();
                px += dir.cos();
                if py < 0.0 || px < 0.0 || py >= h as f32 || px >= w as f32 {
                    break;
                }
            }
        } else {
            // Small rectangle.
            let rh = rng.gen_range(h / 16..=(h / 6).max(h / 16 + 1));
            let rw = rng.gen_range(w / 16..=(w / 6).max(w / 16 + 1));
            let y0 = rng.gen_range(0..h.saturating_sub(rh).max(1));
            let x0 = rng.gen_range(0..w.saturating_sub(rw).max(1));
            for y in y0..(y0 + rh).min(h) {
                for x in x0..(x0 + rw).min(w) {
                    if !mask[[y, x]] {
                        mask[[y, x]] = true;
                        masked += 1;
                    }
                }
            }
        }
    }
    mask
}

fn stamp_disc(mask: &mut Array2<bool>, cy: f32, cx: f32, r: f32, masked: &mut usize) {
    let (h, w) = mask.dim();
    let r2 = r * r;
    let y0 = (cy - r).floor().max(0.0) as usize;
    let y1 = ((cy + r).ceil() as usize).min(h.saturating_sub(1));
    let x0 = (cx - r).floor().max(0.0) as usize;
    let x1 = ((cx + r).ceil() as usize).min(w.saturating_sub(1));
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (dy, dx) = (y as f32 - cy, x as f32 - cx);
            if dy * dy + dx * dx <= r2 && !mask[[y, x]] {
                mask[[y, x]] = true;
                *masked += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_coverage_is_the_identity() {
        let img = crate::scene::render(405, 0, 32, 32);
        assert_eq!(inpainting_mask(&img, 0.0, 1).to_rgb8(), img.to_rgb8());
    }

    #[test]
    fn coverage_target_is_reached_without_gross_overshoot() {
        for (cov, seed_) in [(0.1f32, 1u64), (0.2, 2), (0.3, 3)] {
            let mask = sample_mask(128, 128, cov, seed_);
            let frac = mask.iter().filter(|&&m| m).count() as f32 / (128.0 * 128.0);
            assert!(frac >= cov, "coverage {frac} below target {cov}");
            assert!(frac <= cov + 0.1, "coverage {frac} far above target {cov}");
        }
    }

    #[test]
    fn masked_pixels_are_black_and_unmasked_untouched() {
        let img = crate::scene::render(405, 1, 64, 64);
        let out = inpainting_mask(&img, 0.2, 9);
        let mask = sample_mask(64, 64, 0.2, 9);
        for y in 0..64 {
            for x in 0..64 {
                for c in 0..3 {
                    let expect = if mask[[y, x]] { 0.0 } else { img.data()[[y, x, c]] };
                    assert_eq!(out.data()[[y, x, c]], expect);
                }
            }
        }
    }
}
