//! Procedural base scenes.
//!
//! Scenes are rendered from a seed alone: a smooth per-channel gradient
//! plus low-frequency sinusoids, overlaid with solid shapes (rectangles,
//! discs, stripes) that provide the step edges the edge-detection and
//! smoothing tasks need, and finished with an optional fine sinusoidal
//! texture. No file inputs, so any scene regenerates from its id.

use crate::img::Image;
use crate::seed;
use rand::Rng;
use std::f32::consts::TAU;

/// Scene identifier inside a pool; the render seed is derived from
/// `(pool_seed, "scene", id)`.
pub type SceneId = u64;

/// Renders scene `id` of the pool seeded by `pool_seed` at `h` x `w`.
pub fn render(pool_seed: u64, id: SceneId, h: usize, w: usize) -> Image {
    render_seeded(seed::derive(pool_seed, "scene", id), h, w)
}

fn render_seeded(s: u64, h: usize, w: usize) -> Image {
    assert!(h >= 8 && w >= 8, "scenes are at least 8x8");
    let mut rng = seed::rng(s);
    let (hf, wf) = (h as f32, w as f32);

    // Background: per-channel affine ramp plus two low-frequency sinusoids.
    let base: [f32; 3] = [
        rng.gen_range(0.25..0.75),
        rng.gen_range(0.25..0.75),
        rng.gen_range(0.25..0.75),
    ];
    let mut ramps = [[0.0f32; 2]; 3];
    let mut waves = [[0.0f32; 4]; 3]; // fx, fy, phase, amp
    for c in 0..3 {
        ramps[c] = [rng.gen_range(-0.25..0.25), rng.gen_range(-0.25..0.25)];
        waves[c] = [
            rng.gen_range(0.5..2.5),
            rng.gen_range(0.5..2.5),
            rng.gen_range(0.0..TAU),
            rng.gen_range(0.02..0.10),
        ];
    }
    let mut img = Image::from_fn(h, w, |y, x| {
        let (u, v) = (x as f32 / wf, y as f32 / hf);
        let mut px = [0.0f32; 3];
        for c in 0..3 {
            let [ax, ay] = ramps[c];
            let [fx, fy, ph, amp] = waves[c];
            px[c] = base[c]
                + ax * (u - 0.5)
                + ay * (v - 0.5)
                + amp * (TAU * (fx * u + fy * v) + ph).sin();
        }
        px
    });

    // Shapes: solid color with a hard edge.
    let n_shapes = rng.gen_range(4..=9);
    for _ in 0..n_shapes {
        let color: [f32; 3] = [
            rng.gen_range(0.05..0.95),
            rng.gen_range(0.05..0.95),
            rng.gen_range(0.05..0.95),
        ];
        match rng.gen_range(0..3) {
            0 => {
                // Rectangle.
                let rw = rng.gen_range(w / 8..=w / 2);
                let rh = rng.gen_range(h / 8..=h / 2);
                let x0 = rng.gen_range(0..w.saturating_sub(rw).max(1));
                let y0 = rng.gen_range(0..h.saturating_sub(rh).max(1));
                for y in y0..(y0 + rh).min(h) {
                    for x in x0..(x0 + rw).min(w) {
                        for c in 0..3 {
                            img.data_mut()[[y, x, c]] = color[c];
                        }
                    }
                }
            }
            1 => {
                // Disc.
                let r = rng.gen_range((w.min(h) / 10).max(2)..=(w.min(h) / 3));
                let cxp = rng.gen_range(0..w) as i64;
                let cyp = rng.gen_range(0..h) as i64;
                let r2 = (r * r) as i64;
                for y in 0..h as i64 {
                    for x in 0..w as i64 {
                        if (x - cxp) * (x - cxp) + (y - cyp) * (y - cyp) <= r2 {
                            for c in 0..3 {
                                img.data_mut()[[y as usize, x as usize, c]] = color[c];
                            }
                        }
                    }
                }
            }
            _ => {
                // Oriented stripe: |n . p - d| < half-width.
                let theta = rng.gen_range(0.0..TAU);
                let (nx, ny) = (theta.cos(), theta.sin());
                let d = rng.gen_range(-0.3f32..1.3);
                let half = rng.gen_range(0.02f32..0.08);
                for y in 0..h {
                    for x in 0..w {
                        let (u, v) = (x as f32 / wf, y as f32 / hf);
                        if (nx * u + ny * v - d).abs() < half {
                            for c in 0..3 {
                                img.data_mut()[[y, x, c]] = color[c];
                            }
                        }
                    }
                }
            }
        }
    }

    // Optional fine texture over everything.
    if rng.gen_bool(0.6) {
        let fx = rng.gen_range(6.0f32..18.0);
        let fy = rng.gen_range(6.0f32..18.0);
        let ph = rng.gen_range(0.0..TAU);
        let amp = rng.gen_range(0.01f32..0.04);
        for y in 0..h {
            for x in 0..w {
                let (u, v) = (x as f32 / wf, y as f32 / hf);
                let t = amp * (TAU * (fx * u + fy * v) + ph).sin();
                for c in 0..3 {
                    img.data_mut()[[y, x, c]] += t;
                }
            }
        }
    }

    img.clamp01();
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_renders_identical_scenes() {
        let a = render(7, 3, 64, 48);
        let b = render(7, 3, 64, 48);
        assert_eq!(a.to_rgb8(), b.to_rgb8());
    }

    #[test]
    fn different_ids_render_different_scenes() {
        let a = render(7, 0, 64, 64);
        let b = render(7, 1, 64, 64);
        assert_ne!(a.to_rgb8(), b.to_rgb8());
    }

    #[test]
    fn scenes_stay_in_range_and_have_structure() {
        for id in 0..8 {
            let img = render(11, id, 96, 96);
            let data = img.data();
            assert!(data.iter().all(|v| (0.0..=1.0).contains(v)));
            let mean = data.mean().unwrap();
            let var = data.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / data.len() as f32;
            assert!(var.sqrt() > 0.02, "scene {id} is nearly flat");
        }
    }
}
