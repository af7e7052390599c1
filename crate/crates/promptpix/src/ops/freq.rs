//! Ringing artifacts from an ideal circular low-pass filter in the 2-d
//! frequency domain.

use crate::img::Image;
use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// Zeroes all frequencies whose radial distance exceeds `cutoff` times the
/// Nyquist frequency (0.5 cycles/pixel), then inverts. The sharp spectral
/// edge produces Gibbs ringing around image edges.
pub fn ringing(img: &Image, cutoff: f32) -> Image {
    let keep = cutoff * 0.5;
    let mut out = super::filt::map_channels(img, |ch| ideal_lowpass(ch, keep));
    out.clamp01();
    out
}

/// Ideal low-pass of a field: keeps frequencies with radius <= `keep`
/// cycles/pixel.
fn ideal_lowpass(field: &Array2<f32>, keep: f32) -> Array2<f32> {
    let (h, w) = field.dim();
    let mut planner = FftPlanner::<f32>::new();
    let fft_w = planner.plan_fft_forward(w);
    let fft_h = planner.plan_fft_forward(h);
    let ifft_w = planner.plan_fft_inverse(w);
    let ifft_h = planner.plan_fft_inverse(h);

    let mut data: Vec<Complex<f32>> = field.iter().map(|&v| Complex::new(v, 0.0)).collect();
    // Rows, then columns.
    for row in data.chunks_exact_mut(w) {
        fft_w.process(row);
    }
    let mut col = vec![Complex::default(); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = data[y * w + x];
        }
        fft_h.process(&mut col);
        for y in 0..h {
            data[y * w + x] = col[y];
        }
    }

    // Frequency of bin k along an axis of length n, in cycles/pixel.
    let freq = |k: usize, n: usize| -> f32 {
        let k = k.min(n - k); // symmetric spectrum
        k as f32 / n as f32
    };
    let keep2 = keep * keep;
    for y in 0..h {
        let fy = freq(y, h);
        for x in 0..w {
            let fx = freq(x, w);
            if fx * fx + fy * fy > keep2 {
                data[y * w + x] = Complex::default();
            }
        }
    }

    for x in 0..w {
        for y in 0..h {
            col[y] = data[y * w + x];
        }
        ifft_h.process(&mut col);
        for y in 0..h {
            data[y * w + x] = col[y];
        }
    }
    for row in data.chunks_exact_mut(w) {
        ifft_w.process(row);
    }
    let norm = 1.0 / (h * w) as f32;
    Array2::from_shape_fn((h, w), |(y, x)| data[y * w + x].re * norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_passes_unchanged() {
        // DC is always inside the pass band.
        let img = Image::from_fn(32, 32, |_, _| [0.4, 0.6, 0.2]);
        let out = ringing(&img, 0.2);
        for (a, b) in out.data().iter().zip(img.data().iter()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn step_edge_develops_oscillations() {
        // Gibbs phenomenon: the filtered step overshoots on the bright side
        // and undershoots on the dark side near the edge.
        let img = Image::from_fn(64, 64, |_, x| {
            let v = if x < 32 { 0.25 } else { 0.75 };
            [v, v, v]
        });
        let field = Array2::from_shape_fn((64, 64), |(y, x)| img.data()[[y, x, 0]]);
        let out = ideal_lowpass(&field, 0.1);
        let row = out.row(32);
        let max = row.iter().cloned().fold(f32::MIN, f32::max);
        let min = row.iter().cloned().fold(f32::MAX, f32::min);
        assert!(max > 0.78, "overshoot missing: max {max}");
        assert!(min < 0.22, "undershoot missing: min {min}");
    }

    #[test]
    fn smaller_cutoff_removes_more_energy() {
        let img = crate::scene::render(404, 0, 64, 64);
        let dist = |a: &Image| -> f32 {
            a.data()
                .iter()
                .zip(img.data().iter())
                .map(|(x, y)| (x - y).powi(2))
                .sum()
        };
        let d_narrow = dist(&ringing(&img, 0.1));
        let d_wide = dist(&ringing(&img, 0.4));
        assert!(d_narrow > d_wide, "{d_narrow} vs {d_wide}");
    }
}
