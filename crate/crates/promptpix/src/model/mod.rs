//! The prompt-conditioned U-shaped backbone and its conditioning modules.

pub mod blocks;
pub mod cost;
pub mod params;
pub mod prompt;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::img::Image;
use crate::tensor::ops as t;
use crate::tensor::{Ctx, Scalar, Var};
use crate::{Error, Result};
use blocks::{Conv2d, Downsample, TransformerBlock, Upsample};
use params::{Leaves, ParamStore};
use prompt::{ConditionedBlock, Fusion, PromptEncoder, PromptLatents};

/// Architecture hyperparameters. Defaults are the full-scale profile;
/// [`BackboneConfig::toy`] is the CPU desk-scale profile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Channels per level; must double level to level.
    pub channels: [usize; 4],
    /// Blocks per level; one block = channel-attention + spatial-attention
    /// sub-blocks with their feed-forwards.
    pub blocks: [usize; 4],
    pub heads: [usize; 4],
    pub window: usize,
    pub overlap: f64,
    pub ffn_expansion: f64,
    /// Trailing level-4 blocks that receive prompt conditioning.
    pub n_pcab: usize,
    /// Extra blocks after the last decoder level, at 2x level-1 channels.
    pub refinement_blocks: usize,
    /// Prompt-encoder channels for its three residual-block stages; the
    /// encoder ends at `channels[3]` via a final 3x3 projection.
    pub prompt_channels: [usize; 3],
    /// How prompt latents are injected into the conditioned blocks.
    pub fusion: Fusion,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            channels: [48, 96, 192, 384],
            blocks: [2, 4, 4, 4],
            heads: [1, 2, 4, 8],
            window: 8,
            overlap: 0.5,
            ffn_expansion: 2.66,
            n_pcab: 4,
            refinement_blocks: 2,
            prompt_channels: [32, 64, 128],
            fusion: Fusion::Pca,
        }
    }
}

impl BackboneConfig {
    /// Desk-scale profile used by the conditioning experiment.
    pub fn toy() -> Self {
        BackboneConfig {
            channels: [16, 32, 64, 128],
            blocks: [1, 1, 1, 1],
            heads: [1, 2, 4, 8],
            window: 8,
            overlap: 0.5,
            ffn_expansion: 2.66,
            n_pcab: 1,
            refinement_blocks: 0,
            prompt_channels: [16, 32, 64],
            fusion: Fusion::Pca,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..3 {
            if self.channels[i + 1] != 2 * self.channels[i] {
                return Err(Error::config(format!(
                    "channels must double per level, got {:?}",
                    self.channels
                )));
            }
        }
        for i in 0..4 {
            if self.blocks[i] == 0 {
                return Err(Error::config("every level needs at least one block"));
            }
            if self.channels[i] % self.heads[i] != 0 {
                return Err(Error::config(format!(
                    "level {} channels {} not divisible by heads {}",
                    i + 1,
                    self.channels[i],
                    self.heads[i]
                )));
            }
        }
        if self.n_pcab > self.blocks[3] {
            return Err(Error::config(format!(
                "n_pcab {} exceeds level-4 blocks {}",
                self.n_pcab, self.blocks[3]
            )));
        }
        if self.window < 2 {
            return Err(Error::config("window must be at least 2"));
        }
        if self.overlap < 0.0 {
            return Err(Error::config("overlap must be non-negative"));
        }
        if self.ffn_expansion <= 0.0 {
            return Err(Error::config("ffn_expansion must be positive"));
        }
        Ok(())
    }
}

/// The assembled model: U-shaped backbone plus (optionally) the prompt
/// encoder and conditioned bottleneck blocks.
pub struct Model<S: Scalar> {
    pub cfg: BackboneConfig,
    pub store: ParamStore<S>,
    stem: Conv2d,
    enc: [Vec<TransformerBlock>; 3],
    down: [Downsample; 3],
    latent_plain: Vec<TransformerBlock>,
    latent_cond: Vec<ConditionedBlock>,
    up: [Upsample; 3],
    skip_reduce: [Option<Conv2d>; 3],
    dec: [Vec<TransformerBlock>; 3],
    refine: Vec<TransformerBlock>,
    head: Conv2d,
    prompt_encoder: Option<PromptEncoder>,
}

impl<S: Scalar> Model<S> {
    pub fn build(cfg: &BackboneConfig, init_seed: u64) -> Result<Model<S>> {
        cfg.validate()?;
        let mut ps: ParamStore<S> = ParamStore::new(init_seed);
        let [c1, c2, c3, c4] = cfg.channels;
        let mk_level = |ps: &mut ParamStore<S>, prefix: &str, n: usize, c: usize, heads: usize| {
            (0..n)
                .map(|i| {
                    TransformerBlock::new(
                        ps,
                        &format!("{prefix}.block{i}"),
                        c,
                        heads,
                        cfg.window,
                        cfg.overlap,
                        cfg.ffn_expansion,
                    )
                })
                .collect::<Vec<_>>()
        };

        let stem = Conv2d::new(&mut ps, "stem", 3, c1, 3, false);
        let enc = [
            mk_level(&mut ps, "enc1", cfg.blocks[0], c1, cfg.heads[0]),
            mk_level(&mut ps, "enc2", cfg.blocks[1], c2, cfg.heads[1]),
            mk_level(&mut ps, "enc3", cfg.blocks[2], c3, cfg.heads[2]),
        ];
        let down = [
            Downsample::new(&mut ps, "down1", c1),
            Downsample::new(&mut ps, "down2", c2),
            Downsample::new(&mut ps, "down3", c3),
        ];
        let n_plain = cfg.blocks[3] - cfg.n_pcab;
        let latent_plain = mk_level(&mut ps, "latent", n_plain, c4, cfg.heads[3]);
        let latent_cond: Vec<ConditionedBlock> = (0..cfg.n_pcab)
            .map(|i| {
                ConditionedBlock::new(
                    &mut ps,
                    &format!("latent.block{}", n_plain + i),
                    c4,
                    cfg.heads[3],
                    cfg.window,
                    cfg.overlap,
                    cfg.ffn_expansion,
                    cfg.fusion,
                )
            })
            .collect();
        let up = [
            Upsample::new(&mut ps, "up3", c4),
            Upsample::new(&mut ps, "up2", c3),
            Upsample::new(&mut ps, "up1", c2),
        ];
        // Skips concatenate the encoder feature; levels 3 and 2 reduce back
        // to the level width with a 1x1 conv, level 1 keeps the doubled
        // width through to the head (Restormer decoder convention).
        let skip_reduce = [
            Some(Conv2d::new(&mut ps, "skip3", 2 * c3, c3, 1, false)),
            Some(Conv2d::new(&mut ps, "skip2", 2 * c2, c2, 1, false)),
            None,
        ];
        let dec = [
            mk_level(&mut ps, "dec3", cfg.blocks[2], c3, cfg.heads[2]),
            mk_level(&mut ps, "dec2", cfg.blocks[1], c2, cfg.heads[1]),
            mk_level(&mut ps, "dec1", cfg.blocks[0], 2 * c1, cfg.heads[0]),
        ];
        let refine = mk_level(&mut ps, "refine", cfg.refinement_blocks, 2 * c1, cfg.heads[0]);
        let head = Conv2d::new(&mut ps, "head", 2 * c1, 3, 3, false);
        let prompt_encoder = (cfg.n_pcab > 0)
            .then(|| PromptEncoder::new(&mut ps, "prompt_encoder", cfg.prompt_channels, c4));

        // Depth-aware damping: the trunk crosses every block twice on the
        // encoder/decoder sides plus the bottleneck and refinement, with four
        // residual additions per block and one global residual at the head.
        // Scaling each branch projection (and the head) by 1/sqrt(2L) keeps
        // the accumulated stream at the input's scale at init, so early
        // training corrects content instead of amplitude.
        let n_blocks = 2 * (cfg.blocks[0] + cfg.blocks[1] + cfg.blocks[2])
            + cfg.blocks[3]
            + cfg.refinement_blocks;
        let damp = 1.0 / ((2 * (4 * n_blocks + 1)) as f64).sqrt();
        let trunk: Vec<&TransformerBlock> = enc
            .iter()
            .flatten()
            .chain(&latent_plain)
            .chain(dec.iter().flatten())
            .chain(&refine)
            .collect();
        for b in trunk {
            b.damp_residual_branches(&mut ps, damp);
        }
        for b in &latent_cond {
            b.damp_residual_branches(&mut ps, damp);
        }
        ps.rescale(head.w, damp);
        if let Some(pe) = &prompt_encoder {
            let l_prompt = 3 * prompt::RES_BLOCKS_PER_LEVEL;
            pe.damp_residual_branches(&mut ps, 1.0 / ((2 * l_prompt) as f64).sqrt());
        }

        Ok(Model {
            cfg: cfg.clone(),
            store: ps,
            stem,
            enc,
            down,
            latent_plain,
            latent_cond,
            up,
            skip_reduce,
            dec,
            refine,
            head,
            prompt_encoder,
        })
    }

    /// Rebuilds this model's structure over a scalar-cast copy of the
    /// parameters (used for f64 gradient checks of the f32 model).
    pub fn cast<T: Scalar>(&self) -> Model<T> {
        let mut m: Model<T> = Model::build(&self.cfg, 0).expect("validated config");
        m.store = self.store.cast();
        m
    }

    /// Encodes the prompt pair to bottleneck-resolution latents.
    pub fn encode_prompt(
        &self,
        cx: &Ctx<S>,
        lv: &Leaves<S>,
        prompt_src: &Var<S>,
        prompt_tgt: &Var<S>,
    ) -> Result<PromptLatents<S>> {
        let enc = self
            .prompt_encoder
            .as_ref()
            .ok_or_else(|| Error::config("model built with n_pcab = 0 has no prompt encoder"))?;
        if prompt_src.shape() != prompt_tgt.shape() {
            return Err(Error::validation(format!(
                "prompt shapes differ: {:?} vs {:?}",
                prompt_src.shape(),
                prompt_tgt.shape()
            )));
        }
        let src = pad_input(cx, prompt_src);
        let tgt = pad_input(cx, prompt_tgt);
        Ok(PromptLatents {
            z_src: enc.forward(cx, lv, &src),
            z_tgt: enc.forward(cx, lv, &tgt),
        })
    }

    /// Full forward pass. `latents` must be present iff `n_pcab > 0`.
    pub fn forward(
        &self,
        cx: &Ctx<S>,
        lv: &Leaves<S>,
        img: &Var<S>,
        latents: Option<&PromptLatents<S>>,
    ) -> Result<Var<S>> {
        if self.cfg.n_pcab > 0 && latents.is_none() {
            return Err(Error::validation("conditioned model requires prompt latents"));
        }
        let (h, w) = (img.shape()[2], img.shape()[3]);
        let x = pad_input(cx, img);

        let mut f = self.stem.forward(cx, lv, &x);
        let mut skips = Vec::with_capacity(3);
        for (level, dn) in self.enc.iter().zip(&self.down) {
            for b in level {
                f = b.forward(cx, lv, &f);
            }
            skips.push(f.clone());
            f = dn.forward(cx, lv, &f);
        }
        for b in &self.latent_plain {
            f = b.forward(cx, lv, &f);
        }
        if !self.latent_cond.is_empty() {
            let lat = latents.expect("checked above");
            if lat.z_src.shape()[2..] != f.shape()[2..] {
                return Err(Error::validation(format!(
                    "prompt latent spatial {:?} does not match bottleneck {:?}; \
                     prompt images must match the input size",
                    &lat.z_src.shape()[2..],
                    &f.shape()[2..]
                )));
            }
            for b in &self.latent_cond {
                f = b.forward(cx, lv, &f, lat)?;
            }
        }
        for i in 0..3 {
            f = self.up[i].forward(cx, lv, &f);
            let skip = &skips[2 - i];
            f = t::concat_c(cx, &f, skip);
            if let Some(r) = &self.skip_reduce[i] {
                f = r.forward(cx, lv, &f);
            }
            for b in &self.dec[i] {
                f = b.forward(cx, lv, &f);
            }
        }
        for b in &self.refine {
            f = b.forward(cx, lv, &f);
        }
        let out = self.head.forward(cx, lv, &f);
        let out = t::add(cx, &out, &x);
        Ok(t::crop2d(cx, &out, 0, 0, h, w))
    }

    /// Convenience wrapper: encode prompts (if conditioned) and run one
    /// no-grad forward on an `Image`, returning a clamped `Image`.
    pub fn infer(&self, img: &Image, prompts: Option<(&Image, &Image)>) -> Result<Image> {
        let cx = Ctx::<S>::no_grad();
        let lv = self.store.leaves(&cx);
        let x = cx.constant(image_to_nchw(img));
        let latents = match (self.cfg.n_pcab > 0, prompts) {
            (true, Some((src, tgt))) => {
                let ps = cx.constant(image_to_nchw(src));
                let pt = cx.constant(image_to_nchw(tgt));
                Some(self.encode_prompt(&cx, &lv, &ps, &pt)?)
            }
            (true, None) => {
                return Err(Error::validation("conditioned model requires a prompt pair"))
            }
            (false, _) => None,
        };
        let y = self.forward(&cx, &lv, &x, latents.as_ref())?;
        let mut out = nchw_to_image(y.value());
        out.clamp01();
        Ok(out)
    }
}

/// Reflect-pads an NCHW batch so H and W are multiples of 8 (the three
/// 2x downsamplings).
pub fn pad_input<S: Scalar>(cx: &Ctx<S>, x: &Var<S>) -> Var<S> {
    blocks::pad_to_multiple(cx, x, 8)
}

/// (H, W, 3) image to a (1, 3, H, W) tensor.
pub fn image_to_nchw<S: Scalar>(img: &Image) -> ArrayD<S> {
    let (h, w) = (img.h(), img.w());
    let mut out = ArrayD::zeros(IxDyn(&[1, 3, h, w]));
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out[[0, c, y, x]] = S::from_f64(img.data()[[y, x, c]] as f64);
            }
        }
    }
    out
}

/// First batch element of a (N, 3, H, W) tensor to an (H, W, 3) image.
pub fn nchw_to_image<S: Scalar>(x: &ArrayD<S>) -> Image {
    assert_eq!(x.shape()[1], 3, "expected 3-channel tensor");
    let (h, w) = (x.shape()[2], x.shape()[3]);
    Image::from_fn(h, w, |y, xx| {
        [0, 1, 2].map(|c| x[[0, c, y, xx]].to_f64() as f32)
    })
}
