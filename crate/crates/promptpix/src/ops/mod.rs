//! Task operators: the deterministic image transforms that define each
//! task, plus parameter sampling, validation, and dispatch.
//!
//! A [`TaskKind`] names a task; a [`TaskSpec`] couples a kind with the
//! parameter ranges to sample from; a [`TaskParams`] is one concrete,
//! serializable draw. [`apply`] maps `(params, image, seed)` to the task
//! output. Stochastic operators require an explicit seed; nothing reads
//! global RNG state.

pub mod blur;
pub mod edge;
pub mod filt;
pub mod freq;
pub mod jpeg;
pub mod mask;
pub mod noise;
pub mod rtv;
pub mod tone;
pub mod weather;

use crate::img::Image;
use crate::seed;
use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Every implemented task, including the two-operator composition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    GaussianNoise,
    PoissonNoise,
    SaltPepper,
    GaussianBlur,
    Jpeg,
    Ringing,
    RlArtifact,
    InpaintingMask,
    Rain,
    Haze,
    LowLightSynth,
    HistEq,
    Mtm,
    Canny,
    Laplacian,
    Rtv,
    Mixed,
}

pub const ALL_TASKS: [TaskKind; 17] = [
    TaskKind::GaussianNoise,
    TaskKind::PoissonNoise,
    TaskKind::SaltPepper,
    TaskKind::GaussianBlur,
    TaskKind::Jpeg,
    TaskKind::Ringing,
    TaskKind::RlArtifact,
    TaskKind::InpaintingMask,
    TaskKind::Rain,
    TaskKind::Haze,
    TaskKind::LowLightSynth,
    TaskKind::HistEq,
    TaskKind::Mtm,
    TaskKind::Canny,
    TaskKind::Laplacian,
    TaskKind::Rtv,
    TaskKind::Mixed,
];

/// Broad task family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Restoration,
    Enhancement,
    Edge,
    Stylization,
}

/// Which side of a bundle the operator produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Operator corrupts the scene; the clean scene is the target
    /// (restoration-style tasks).
    DegradeInput,
    /// The clean scene is the input; the operator output is the target
    /// (enhancement, edge, stylization tasks).
    SynthesizeTarget,
}

impl TaskKind {
    pub fn id(self) -> &'static str {
        match self {
            TaskKind::GaussianNoise => "gaussian_noise",
            TaskKind::PoissonNoise => "poisson_noise",
            TaskKind::SaltPepper => "salt_pepper",
            TaskKind::GaussianBlur => "gaussian_blur",
            TaskKind::Jpeg => "jpeg",
            TaskKind::Ringing => "ringing",
            TaskKind::RlArtifact => "rl_artifact",
            TaskKind::InpaintingMask => "inpainting_mask",
            TaskKind::Rain => "rain",
            TaskKind::Haze => "haze",
            TaskKind::LowLightSynth => "low_light_synth",
            TaskKind::HistEq => "hist_eq",
            TaskKind::Mtm => "mtm",
            TaskKind::Canny => "canny",
            TaskKind::Laplacian => "laplacian",
            TaskKind::Rtv => "rtv",
            TaskKind::Mixed => "mixed",
        }
    }

    pub fn from_id(id: &str) -> Result<TaskKind> {
        ALL_TASKS
            .into_iter()
            .find(|k| k.id() == id)
            .ok_or_else(|| Error::UnsupportedTask(id.to_string()))
    }

    pub fn category(self) -> Category {
        match self {
            TaskKind::GaussianNoise
            | TaskKind::PoissonNoise
            | TaskKind::SaltPepper
            | TaskKind::GaussianBlur
            | TaskKind::Jpeg
            | TaskKind::Ringing
            | TaskKind::RlArtifact
            | TaskKind::InpaintingMask
            | TaskKind::Rain
            | TaskKind::Haze
            | TaskKind::Mixed => Category::Restoration,
            TaskKind::LowLightSynth | TaskKind::HistEq => Category::Enhancement,
            TaskKind::Canny | TaskKind::Laplacian => Category::Edge,
            TaskKind::Mtm | TaskKind::Rtv => Category::Stylization,
        }
    }

    pub fn direction(self) -> Direction {
        match self {
            TaskKind::HistEq
            | TaskKind::Mtm
            | TaskKind::Canny
            | TaskKind::Laplacian
            | TaskKind::Rtv => Direction::SynthesizeTarget,
            _ => Direction::DegradeInput,
        }
    }

    /// Whether the operator consumes random draws (and so requires a seed).
    pub fn is_stochastic(self) -> bool {
        matches!(
            self,
            TaskKind::GaussianNoise
                | TaskKind::PoissonNoise
                | TaskKind::SaltPepper
                | TaskKind::InpaintingMask
                | TaskKind::Rain
                | TaskKind::Haze
                | TaskKind::LowLightSynth
                | TaskKind::Mixed
        )
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

/// Sampling ranges, `(lo, hi)` inclusive-exclusive for floats. One flat
/// record shared by all kinds; a spec reads only the fields of its task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskRanges {
    pub noise_sigma: (f32, f32),
    pub poisson_peak: (f32, f32),
    pub sp_density: (f32, f32),
    pub blur_sigma: (f32, f32),
    pub jpeg_quality: (u8, u8),
    pub ringing_cutoff: (f32, f32),
    pub rl_sigma: (f32, f32),
    pub rl_iters: (u32, u32),
    pub inpaint_coverage: (f32, f32),
    pub rain_angle: (f32, f32),
    pub rain_length: (u32, u32),
    pub rain_density: (f32, f32),
    pub rain_brightness: (f32, f32),
    pub haze_airlight: (f32, f32),
    pub haze_strength: (f32, f32),
    pub ll_gamma: (f32, f32),
    pub ll_gain: (f32, f32),
    pub ll_noise: (f32, f32),
    pub mtm_gain: (f32, f32),
    pub canny_sigma: (f32, f32),
    pub canny_low: f32,
    pub canny_high: f32,
    pub rtv_lambda: (f32, f32),
    pub rtv_sigma: (f32, f32),
    pub rtv_iters: u32,
}

impl Default for TaskRanges {
    fn default() -> Self {
        TaskRanges {
            noise_sigma: (5.0 / 255.0, 50.0 / 255.0),
            poisson_peak: (30.0, 300.0),
            sp_density: (0.01, 0.1),
            blur_sigma: (1.0, 3.0),
            jpeg_quality: (10, 90),
            ringing_cutoff: (0.1, 0.4),
            rl_sigma: (1.0, 2.0),
            rl_iters: (10, 30),
            inpaint_coverage: (0.1, 0.3),
            rain_angle: (60.0, 120.0),
            rain_length: (8, 24),
            rain_density: (0.001, 0.004),
            rain_brightness: (0.2, 0.8),
            haze_airlight: (0.7, 1.0),
            haze_strength: (0.4, 0.9),
            ll_gamma: (1.5, 3.0),
            ll_gain: (0.2, 0.6),
            ll_noise: (0.005, 0.02),
            mtm_gain: (0.5, 2.0),
            canny_sigma: (1.0, 2.0),
            canny_low: 0.1,
            canny_high: 0.2,
            rtv_lambda: (0.005, 0.02),
            rtv_sigma: (2.0, 4.0),
            rtv_iters: 4,
        }
    }
}

/// A task to build corpus samples for: the kind plus its sampling ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    #[serde(default)]
    pub ranges: TaskRanges,
}

impl TaskSpec {
    pub fn new(kind: TaskKind) -> TaskSpec {
        TaskSpec { kind, ranges: TaskRanges::default() }
    }

    /// Draws one concrete parameter record from the ranges.
    pub fn sample(&self, seed_: u64) -> TaskParams {
        let mut rng = seed::rng(seed_);
        self.sample_with(&mut rng, self.kind)
    }

    fn sample_with(&self, rng: &mut impl Rng, kind: TaskKind) -> TaskParams {
        let r = &self.ranges;
        let unif = |rng: &mut dyn rand::RngCore, (lo, hi): (f32, f32)| -> f32 {
            if lo == hi {
                lo
            } else {
                rng.gen_range(lo..hi)
            }
        };
        match kind {
            TaskKind::GaussianNoise => TaskParams::GaussianNoise { sigma: unif(rng, r.noise_sigma) },
            TaskKind::PoissonNoise => TaskParams::PoissonNoise { peak: unif(rng, r.poisson_peak) },
            TaskKind::SaltPepper => TaskParams::SaltPepper { density: unif(rng, r.sp_density) },
            TaskKind::GaussianBlur => TaskParams::GaussianBlur { sigma: unif(rng, r.blur_sigma) },
            TaskKind::Jpeg => TaskParams::Jpeg {
                quality: rng.gen_range(r.jpeg_quality.0..=r.jpeg_quality.1),
            },
            TaskKind::Ringing => TaskParams::Ringing { cutoff: unif(rng, r.ringing_cutoff) },
            TaskKind::RlArtifact => TaskParams::RlArtifact {
                sigma: unif(rng, r.rl_sigma),
                iters: rng.gen_range(r.rl_iters.0..=r.rl_iters.1),
            },
            TaskKind::InpaintingMask => TaskParams::InpaintingMask {
                coverage: unif(rng, r.inpaint_coverage),
            },
            TaskKind::Rain => TaskParams::Rain {
                angle_deg: unif(rng, r.rain_angle),
                length: rng.gen_range(r.rain_length.0..=r.rain_length.1),
                density: unif(rng, r.rain_density),
                brightness: unif(rng, r.rain_brightness),
            },
            TaskKind::Haze => TaskParams::Haze {
                airlight: unif(rng, r.haze_airlight),
                strength: unif(rng, r.haze_strength),
            },
            TaskKind::LowLightSynth => TaskParams::LowLightSynth {
                gamma: unif(rng, r.ll_gamma),
                gain: unif(rng, r.ll_gain),
                noise_sigma: unif(rng, r.ll_noise),
            },
            TaskKind::HistEq => TaskParams::HistEq,
            TaskKind::Mtm => TaskParams::Mtm {
                gains: std::array::from_fn(|_| unif(rng, r.mtm_gain)),
            },
            TaskKind::Canny => TaskParams::Canny {
                sigma: unif(rng, r.canny_sigma),
                low: r.canny_low,
                high: r.canny_high,
            },
            TaskKind::Laplacian => TaskParams::Laplacian,
            TaskKind::Rtv => TaskParams::Rtv {
                lambda: unif(rng, r.rtv_lambda),
                sigma: unif(rng, r.rtv_sigma),
                iters: r.rtv_iters,
            },
            TaskKind::Mixed => {
                // Two distinct operators from the noise/blur/JPEG subset,
                // in random order.
                let pool = [TaskKind::GaussianNoise, TaskKind::GaussianBlur, TaskKind::Jpeg];
                let a = rng.gen_range(0..3);
                let b = (a + rng.gen_range(1..3)) % 3;
                TaskParams::Mixed {
                    first: Box::new(self.sample_with(rng, pool[a])),
                    second: Box::new(self.sample_with(rng, pool[b])),
                }
            }
        }
    }
}

/// One concrete parameter draw; serialized into manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum TaskParams {
    GaussianNoise { sigma: f32 },
    PoissonNoise { peak: f32 },
    SaltPepper { density: f32 },
    GaussianBlur { sigma: f32 },
    Jpeg { quality: u8 },
    Ringing { cutoff: f32 },
    RlArtifact { sigma: f32, iters: u32 },
    InpaintingMask { coverage: f32 },
    Rain { angle_deg: f32, length: u32, density: f32, brightness: f32 },
    Haze { airlight: f32, strength: f32 },
    LowLightSynth { gamma: f32, gain: f32, noise_sigma: f32 },
    HistEq,
    Mtm { gains: [f32; 4] },
    Canny { sigma: f32, low: f32, high: f32 },
    Laplacian,
    Rtv { lambda: f32, sigma: f32, iters: u32 },
    Mixed { first: Box<TaskParams>, second: Box<TaskParams> },
}

impl TaskParams {
    pub fn kind(&self) -> TaskKind {
        match self {
            TaskParams::GaussianNoise { .. } => TaskKind::GaussianNoise,
            TaskParams::PoissonNoise { .. } => TaskKind::PoissonNoise,
            TaskParams::SaltPepper { .. } => TaskKind::SaltPepper,
            TaskParams::GaussianBlur { .. } => TaskKind::GaussianBlur,
            TaskParams::Jpeg { .. } => TaskKind::Jpeg,
            TaskParams::Ringing { .. } => TaskKind::Ringing,
            TaskParams::RlArtifact { .. } => TaskKind::RlArtifact,
            TaskParams::InpaintingMask { .. } => TaskKind::InpaintingMask,
            TaskParams::Rain { .. } => TaskKind::Rain,
            TaskParams::Haze { .. } => TaskKind::Haze,
            TaskParams::LowLightSynth { .. } => TaskKind::LowLightSynth,
            TaskParams::HistEq => TaskKind::HistEq,
            TaskParams::Mtm { .. } => TaskKind::Mtm,
            TaskParams::Canny { .. } => TaskKind::Canny,
            TaskParams::Laplacian => TaskKind::Laplacian,
            TaskParams::Rtv { .. } => TaskKind::Rtv,
            TaskParams::Mixed { .. } => TaskKind::Mixed,
        }
    }
}

/// Hard validity limits, wider than the default sampling ranges.
pub fn validate(params: &TaskParams) -> Result<()> {
    let bad = |msg: String| Err(Error::validation(msg));
    match params {
        TaskParams::GaussianNoise { sigma } => {
            if !(0.0..=0.5).contains(sigma) {
                return bad(format!("gaussian_noise sigma {sigma} outside [0, 0.5]"));
            }
        }
        TaskParams::PoissonNoise { peak } => {
            if !(1.0..=1e6).contains(peak) {
                return bad(format!("poisson_noise peak {peak} outside [1, 1e6]"));
            }
        }
        TaskParams::SaltPepper { density } => {
            if !(0.0..=1.0).contains(density) {
                return bad(format!("salt_pepper density {density} outside [0, 1]"));
            }
        }
        TaskParams::GaussianBlur { sigma } => {
            if !(0.0..=10.0).contains(sigma) {
                return bad(format!("gaussian_blur sigma {sigma} outside [0, 10]"));
            }
        }
        TaskParams::Jpeg { quality } => {
            if !(1..=100).contains(quality) {
                return bad(format!("jpeg quality {quality} outside [1, 100]"));
            }
        }
        TaskParams::Ringing { cutoff } => {
            if !(*cutoff > 0.0 && *cutoff <= 1.0) {
                return bad(format!("ringing cutoff {cutoff} outside (0, 1]"));
            }
        }
        TaskParams::RlArtifact { sigma, iters } => {
            if !(*sigma > 0.0 && *sigma <= 10.0) {
                return bad(format!("rl_artifact sigma {sigma} outside (0, 10]"));
            }
            if !(1..=200).contains(iters) {
                return bad(format!("rl_artifact iters {iters} outside [1, 200]"));
            }
        }
        TaskParams::InpaintingMask { coverage } => {
            if !(0.0..=0.9).contains(coverage) {
                return bad(format!("inpainting coverage {coverage} outside [0, 0.9]"));
            }
        }
        TaskParams::Rain { angle_deg, length, density, brightness } => {
            if !(0.0..=180.0).contains(angle_deg) {
                return bad(format!("rain angle {angle_deg} outside [0, 180]"));
            }
            if !(1..=100).contains(length) {
                return bad(format!("rain length {length} outside [1, 100]"));
            }
            if !(0.0..=0.05).contains(density) {
                return bad(format!("rain density {density} outside [0, 0.05]"));
            }
            if !(0.0..=1.0).contains(brightness) {
                return bad(format!("rain brightness {brightness} outside [0, 1]"));
            }
        }
        TaskParams::Haze { airlight, strength } => {
            if !(0.0..=1.0).contains(airlight) || !(0.0..=1.0).contains(strength) {
                return bad(format!(
                    "haze airlight {airlight} / strength {strength} outside [0, 1]"
                ));
            }
        }
        TaskParams::LowLightSynth { gamma, gain, noise_sigma } => {
            if !(1.0..=5.0).contains(gamma) {
                return bad(format!("low_light gamma {gamma} outside [1, 5]"));
            }
            if !(*gain > 0.0 && *gain <= 1.0) {
                return bad(format!("low_light gain {gain} outside (0, 1]"));
            }
            if !(0.0..=0.1).contains(noise_sigma) {
                return bad(format!("low_light noise sigma {noise_sigma} outside [0, 0.1]"));
            }
        }
        TaskParams::HistEq | TaskParams::Laplacian => {}
        TaskParams::Mtm { gains } => {
            for g in gains {
                if !(0.0..=4.0).contains(g) {
                    return bad(format!("mtm gain {g} outside [0, 4]"));
                }
            }
        }
        TaskParams::Canny { sigma, low, high } => {
            if !(*sigma > 0.0 && *sigma <= 5.0) {
                return bad(format!("canny sigma {sigma} outside (0, 5]"));
            }
            if !(*low > 0.0 && low < high && *high <= 1.0) {
                return bad(format!("canny needs 0 < low < high <= 1, got {low}, {high}"));
            }
        }
        TaskParams::Rtv { lambda, sigma, iters } => {
            if !(*lambda > 0.0 && *lambda <= 0.1) {
                return bad(format!("rtv lambda {lambda} outside (0, 0.1]"));
            }
            if !(*sigma > 0.0 && *sigma <= 10.0) {
                return bad(format!("rtv sigma {sigma} outside (0, 10]"));
            }
            if !(1..=10).contains(iters) {
                return bad(format!("rtv iters {iters} outside [1, 10]"));
            }
        }
        TaskParams::Mixed { first, second } => {
            for part in [first.as_ref(), second.as_ref()] {
                let k = part.kind();
                if !matches!(
                    k,
                    TaskKind::GaussianNoise | TaskKind::GaussianBlur | TaskKind::Jpeg
                ) {
                    return bad(format!("mixed may only compose noise/blur/jpeg, got {k}"));
                }
                validate(part)?;
            }
        }
    }
    Ok(())
}

/// Applies the operator for `params` to `img`. Stochastic operators
/// require `seed`; deterministic ones ignore it.
pub fn apply(params: &TaskParams, img: &Image, seed_: Option<u64>) -> Result<Image> {
    validate(params)?;
    let kind = params.kind();
    if kind.is_stochastic() && seed_.is_none() {
        return Err(Error::validation(format!(
            "task {kind} is stochastic and requires a seed"
        )));
    }
    let s = seed_.unwrap_or(0);
    Ok(match params {
        TaskParams::GaussianNoise { sigma } => noise::gaussian_noise(img, *sigma, s),
        TaskParams::PoissonNoise { peak } => noise::poisson_noise(img, *peak, s),
        TaskParams::SaltPepper { density } => noise::salt_pepper(img, *density, s),
        TaskParams::GaussianBlur { sigma } => blur::gaussian_blur(img, *sigma),
        TaskParams::Jpeg { quality } => jpeg::jpeg_round_trip(img, *quality)?,
        TaskParams::Ringing { cutoff } => freq::ringing(img, *cutoff),
        TaskParams::RlArtifact { sigma, iters } => blur::rl_artifact(img, *sigma, *iters),
        TaskParams::InpaintingMask { coverage } => mask::inpainting_mask(img, *coverage, s),
        TaskParams::Rain { angle_deg, length, density, brightness } => {
            weather::rain(img, *angle_deg, *length, *density, *brightness, s)
        }
        TaskParams::Haze { airlight, strength } => weather::haze(img, *airlight, *strength, s),
        TaskParams::LowLightSynth { gamma, gain, noise_sigma } => {
            tone::low_light_synth(img, *gamma, *gain, *noise_sigma, s)
        }
        TaskParams::HistEq => tone::hist_eq(img),
        TaskParams::Mtm { gains } => tone::mtm(img, *gains),
        TaskParams::Canny { sigma, low, high } => edge::canny(img, *sigma, *low, *high)?,
        TaskParams::Laplacian => edge::laplacian(img),
        TaskParams::Rtv { lambda, sigma, iters } => rtv::rtv(img, *lambda, *sigma, *iters),
        TaskParams::Mixed { first, second } => {
            let mid = apply(first, img, Some(seed::derive(s, "mixed", 0)))?;
            apply(second, &mid, Some(seed::derive(s, "mixed", 1)))?
        }
    })
}
