//! Metrics and evaluation protocols.
//!
//! This module has two layers. The bottom layer (here) is pure image
//! metrics: PSNR with peak 1.0 capped at 100 dB (the cap stands in for the
//! infinite value of identical images) and MAE on the 0-255 scale; both
//! validate shape agreement instead of broadcasting. The top layer
//! ([`protocol`]) runs those metrics over corpus slices under the four
//! behavioral protocols (per-task quality, prompt sensitivity, mismatch
//! preservation, prompt steering), and [`report`] packages the outcomes
//! into one serializable document.

pub mod protocol;
pub mod report;

pub use protocol::{
    cross_domain_suite, evaluate_task, mismatch_suite, prompt_sensitivity, CopyModel, Infer,
    Metric, MismatchRow, Sensitivity, Steering, SteeringCase, TaskScore,
};
pub use report::{MetricReport, ReportMeta, ReportRow, TaskSummary};

use crate::img::Image;
use crate::{Error, Result};

/// Reported when two images are bit-identical (MSE = 0).
pub const PSNR_CAP_DB: f64 = 100.0;
/// MAE is scaled to 8-bit units.
pub const MAE_SCALE: f64 = 255.0;

fn check_dims(a: &Image, b: &Image) -> Result<()> {
    if a.h() != b.h() || a.w() != b.w() {
        return Err(Error::validation(format!(
            "image size mismatch: {}x{} vs {}x{}",
            a.h(),
            a.w(),
            b.h(),
            b.w()
        )));
    }
    Ok(())
}

pub fn mse_images(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    let n = (a.h() * a.w() * 3) as f64;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| {
            let d = (*x - *y) as f64;
            d * d
        })
        .sum();
    Ok(sum / n)
}

/// Peak signal-to-noise ratio in dB against peak 1.0, capped at
/// [`PSNR_CAP_DB`].
pub fn psnr_images(a: &Image, b: &Image) -> Result<f64> {
    let mse = mse_images(a, b)?;
    if mse <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP_DB))
}

/// Mean absolute error in 8-bit units (`[0, 255]`).
pub fn mae_images(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    let n = (a.h() * a.w() * 3) as f64;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| ((*x - *y) as f64).abs())
        .sum();
    Ok(MAE_SCALE * sum / n)
}

/// Mean L1 distance in `[0, 1]` units, the training objective's scale.
pub fn l1_images(a: &Image, b: &Image) -> Result<f64> {
    Ok(mae_images(a, b)? / MAE_SCALE)
}
