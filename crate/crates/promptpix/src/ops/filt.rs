//! Shared spatial filtering: separable Gaussian, small fixed kernels,
//! reflect indexing, and bilinear resize. All functions are pure and
//! operate on `(H, W)` float fields or whole images channel by channel.

use crate::img::Image;
use ndarray::Array2;

/// Mirror indexing without repeating the border sample, valid for any
/// out-of-range distance.
pub fn reflect101(i: isize, n: usize) -> usize {
    debug_assert!(n > 0);
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Normalized 1-d Gaussian with `ksize = 2 * ceil(3 sigma) + 1`.
/// `sigma <= 0` yields the 1-tap delta kernel (identity filter).
pub fn gaussian_kernel1d(sigma: f32) -> Vec<f32> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f32> = (-radius..=radius)
        .map(|d| (-(d * d) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f32 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable convolution of a field with a symmetric 1-d kernel applied
/// along both axes, reflect-padded.
pub fn sep_conv2(field: &Array2<f32>, k: &[f32]) -> Array2<f32> {
    let (h, w) = field.dim();
    let r = k.len() / 2;
    let mut tmp = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, &kv) in k.iter().enumerate() {
                let sx = reflect101(x as isize + t as isize - r as isize, w);
                acc += kv * field[[y, sx]];
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, &kv) in k.iter().enumerate() {
                let sy = reflect101(y as isize + t as isize - r as isize, h);
                acc += kv * tmp[[sy, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

pub fn gaussian_blur_field(field: &Array2<f32>, sigma: f32) -> Array2<f32> {
    sep_conv2(field, &gaussian_kernel1d(sigma))
}

/// Per-channel Gaussian blur of an RGB image (no clamping).
pub fn gaussian_blur_rgb(img: &Image, sigma: f32) -> Image {
    let k = gaussian_kernel1d(sigma);
    map_channels(img, |ch| sep_conv2(ch, &k))
}

/// Applies a field transform to each channel independently.
pub fn map_channels(img: &Image, mut f: impl FnMut(&Array2<f32>) -> Array2<f32>) -> Image {
    let (h, w) = (img.h(), img.w());
    let mut out = Image::zeros(h, w);
    for c in 0..3 {
        let ch = Array2::from_shape_fn((h, w), |(y, x)| img.data()[[y, x, c]]);
        let fc = f(&ch);
        assert_eq!(fc.dim(), (h, w), "channel transform must preserve size");
        for y in 0..h {
            for x in 0..w {
                out.data_mut()[[y, x, c]] = fc[[y, x]];
            }
        }
    }
    out
}

/// 3x3 convolution of a field with reflect padding; `k` is row-major.
pub fn conv3x3(field: &Array2<f32>, k: &[f32; 9]) -> Array2<f32> {
    let (h, w) = field.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut acc = 0.0;
        for dy in 0..3 {
            for dx in 0..3 {
                let sy = reflect101(y as isize + dy as isize - 1, h);
                let sx = reflect101(x as isize + dx as isize - 1, w);
                acc += k[dy * 3 + dx] * field[[sy, sx]];
            }
        }
        acc
    })
}

/// Bilinear resize of a field to the given size.
pub fn resize_bilinear(field: &Array2<f32>, oh: usize, ow: usize) -> Array2<f32> {
    let (h, w) = field.dim();
    assert!(oh > 0 && ow > 0);
    Array2::from_shape_fn((oh, ow), |(y, x)| {
        // Align pixel centers.
        let fy = ((y as f32 + 0.5) * h as f32 / oh as f32 - 0.5).clamp(0.0, (h - 1) as f32);
        let fx = ((x as f32 + 0.5) * w as f32 / ow as f32 - 0.5).clamp(0.0, (w - 1) as f32);
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (ty, tx) = (fy - y0 as f32, fx - x0 as f32);
        let a = field[[y0, x0]] * (1.0 - tx) + field[[y0, x1]] * tx;
        let b = field[[y1, x0]] * (1.0 - tx) + field[[y1, x1]] * tx;
        a * (1.0 - ty) + b * ty
    })
}
