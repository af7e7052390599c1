//! Relative-total-variation texture smoothing via iteratively reweighted
//! least squares.
//!
//! Each outer iteration freezes pixel-wise weights computed from the
//! current estimate (inherent-variation over windowed-total-variation, in
//! the separable approximation) and solves the resulting linear system
//! `(I + lambda L_w) s = i` per channel with conjugate gradients in `f64`.

use super::filt::gaussian_blur_field;
use crate::img::Image;
use ndarray::Array2;

const SHARPNESS: f32 = 0.02;
const VAREPS: f32 = 1e-3;

/// Smooths texture while keeping dominant structure. `lambda` controls
/// smoothing strength, `sigma` the scale separating texture from
/// structure, `iters` the number of reweighting steps.
pub fn rtv(img: &Image, lambda: f32, sigma: f32, iters: u32) -> Image {
    let (h, w) = (img.h(), img.w());
    let channels: Vec<Array2<f64>> = (0..3)
        .map(|c| Array2::from_shape_fn((h, w), |(y, x)| img.data()[[y, x, c]] as f64))
        .collect();
    let mut s = channels.clone();
    for _ in 0..iters {
        // Weights from the mean channel of the current estimate.
        let mean = Array2::from_shape_fn((h, w), |(y, x)| {
            ((s[0][[y, x]] + s[1][[y, x]] + s[2][[y, x]]) / 3.0) as f32
        });
        let (wx, wy) = texture_weights(&mean, sigma);
        for c in 0..3 {
            s[c] = solve_cg(&channels[c], &wx, &wy, lambda as f64, &s[c]);
        }
    }
    let mut out = Image::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.data_mut()[[y, x, c]] = s[c][[y, x]] as f32;
            }
        }
    }
    out.clamp01();
    out
}

/// Per-edge weights: the product of an inherent-variation term from the
/// raw gradient (floored at `SHARPNESS`) and a windowed-variation term
/// from the Gaussian-blurred gradient (floored at `VAREPS`).
fn texture_weights(mean: &Array2<f32>, sigma: f32) -> (Array2<f64>, Array2<f64>) {
    let (h, w) = mean.dim();
    let fx = dx(mean);
    let fy = dy(mean);
    let blurred = gaussian_blur_field(mean, sigma);
    let gfx = dx(&blurred);
    let gfy = dy(&blurred);
    let mut wx = Array2::<f64>::zeros((h, w));
    let mut wy = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let wto = 1.0 / fx[[y, x]].hypot(fy[[y, x]]).max(SHARPNESS);
            wx[[y, x]] = (wto / gfx[[y, x]].abs().max(VAREPS)) as f64;
            wy[[y, x]] = (wto / gfy[[y, x]].abs().max(VAREPS)) as f64;
        }
    }
    (wx, wy)
}

fn dx(f: &Array2<f32>) -> Array2<f32> {
    let (h, w) = f.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        if x + 1 < w {
            f[[y, x + 1]] - f[[y, x]]
        } else {
            0.0
        }
    })
}

fn dy(f: &Array2<f32>) -> Array2<f32> {
    let (h, w) = f.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        if y + 1 < h {
            f[[y + 1, x]] - f[[y, x]]
        } else {
            0.0
        }
    })
}

/// `A s` with `A = I + lambda (Dx^T Wx Dx + Dy^T Wy Dy)` (Neumann
/// boundaries; the last row/column of each weight field is unused).
fn apply_a(
    s: &Array2<f64>,
    wx: &Array2<f64>,
    wy: &Array2<f64>,
    lambda: f64,
    out: &mut Array2<f64>,
) {
    let (h, w) = s.dim();
    out.assign(s);
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w {
                let d = wx[[y, x]] * (s[[y, x + 1]] - s[[y, x]]);
                out[[y, x]] -= lambda * d;
                out[[y, x + 1]] += lambda * d;
            }
            if y + 1 < h {
                let d = wy[[y, x]] * (s[[y + 1, x]] - s[[y, x]]);
                out[[y, x]] -= lambda * d;
                out[[y + 1, x]] += lambda * d;
            }
        }
    }
}

/// Conjugate gradients from a warm start; the system is symmetric
/// positive definite by construction.
fn solve_cg(
    b: &Array2<f64>,
    wx: &Array2<f64>,
    wy: &Array2<f64>,
    lambda: f64,
    warm: &Array2<f64>,
) -> Array2<f64> {
    let dims = b.dim();
    let mut x = warm.clone();
    let mut ax = Array2::<f64>::zeros(dims);
    apply_a(&x, wx, wy, lambda, &mut ax);
    let mut r = b - &ax;
    let mut p = r.clone();
    let mut rs = r.iter().map(|v| v * v).sum::<f64>();
    let b_norm = b.iter().map(|v| v * v).sum::<f64>().max(1e-30);
    let tol2 = 1e-12 * b_norm;
    let mut ap = Array2::<f64>::zeros(dims);
    for _ in 0..300 {
        if rs <= tol2 {
            break;
        }
        apply_a(&p, wx, wy, lambda, &mut ap);
        let pap: f64 = p.iter().zip(ap.iter()).map(|(a, b)| a * b).sum();
        if pap <= 0.0 {
            break;
        }
        let alpha = rs / pap;
        x.scaled_add(alpha, &p);
        r.scaled_add(-alpha, &ap);
        let rs_new = r.iter().map(|v| v * v).sum::<f64>();
        let beta = rs_new / rs;
        rs = rs_new;
        p.mapv_inplace(|v| v * beta);
        p += &r;
    }
    x
}
