//! Cost accounting: exact parameter counts from a built store, analytic
//! multiply-accumulate estimates per layer, and the closed-form comparison
//! between grid self-attention and prompt cross-attention.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::{BackboneConfig, Model};
use crate::tensor::Scalar;
use crate::Result;

/// True for parameters that belong to the conditioning additions (prompt
/// encoder and fusion modules) rather than the main restoration network.
pub fn is_conditioning_param(name: &str) -> bool {
    name.starts_with("prompt_encoder.")
        || name.contains(".pca.")
        || name.contains(".gfm.")
        || name.contains(".sft.")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostRow {
    pub params: u64,
    pub macs: u64,
}

/// Parameter / MACs table split into the main network and the conditioning
/// additions, mirroring how the budgets are quoted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostTable {
    pub resolution: (usize, usize),
    pub main: CostRow,
    pub conditioning: CostRow,
}

impl CostTable {
    pub fn total(&self) -> CostRow {
        CostRow {
            params: self.main.params + self.conditioning.params,
            macs: self.main.macs + self.conditioning.macs,
        }
    }
}

impl fmt::Display for CostTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (h, w) = self.resolution;
        writeln!(f, "{:<18} {:>14} {:>12}", "part", "params", format!("MACs@{h}x{w}"))?;
        for (label, row) in [
            ("main network", self.main),
            ("prompt+fusion", self.conditioning),
            ("total", self.total()),
        ] {
            writeln!(
                f,
                "{:<18} {:>14} {:>11.2}G",
                label,
                group_digits(row.params),
                row.macs as f64 / 1e9
            )?;
        }
        Ok(())
    }
}

fn group_digits(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::with_capacity(s.len() + s.len() / 3);
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// Splits a built store's scalars into (main, conditioning).
pub fn split_parameters<S: Scalar>(store: &ParamStore<S>) -> (u64, u64) {
    (
        store.n_scalars(|n| !is_conditioning_param(n)) as u64,
        store.n_scalars(is_conditioning_param) as u64,
    )
}

/// Exact learnable-parameter count for a config, as (main, conditioning).
pub fn count_parameters(cfg: &BackboneConfig) -> Result<(u64, u64)> {
    let m: Model<f32> = Model::build(cfg, 0)?;
    Ok(split_parameters(&m.store))
}

/// Analytic multiply-accumulates for one forward pass at the given input
/// resolution (convolutions, projections, and attention matmuls; elementwise
/// work is not counted). Returns (main, conditioning); the conditioning side
/// covers two prompt-encoder passes plus the fusion modules.
pub fn estimate_macs(cfg: &BackboneConfig, resolution: (usize, usize)) -> Result<(u64, u64)> {
    cfg.validate()?;
    let (h, w) = (resolution.0.next_multiple_of(8), resolution.1.next_multiple_of(8));
    let [c1, _, _, c4] = cfg.channels;
    let dims: Vec<(usize, usize, usize)> = (0..4)
        .map(|l| (h >> l, w >> l, cfg.channels[l]))
        .collect();

    let mut main = conv_macs(h, w, 3, c1, 3);
    for lvl in 0..3 {
        let (lh, lw, lc) = dims[lvl];
        main += cfg.blocks[lvl] as u64 * block_macs(cfg, lh, lw, lc, cfg.heads[lvl]);
        main += conv_macs(lh, lw, lc, lc / 2, 3);
    }
    let (bh, bw, bc) = dims[3];
    main += cfg.blocks[3] as u64 * block_macs(cfg, bh, bw, bc, cfg.heads[3]);
    // Decoder: levels 3 and 2 reduce the skip concat back to the level
    // width; level 1 runs at the doubled width through refinement and head.
    for lvl in (0..3).rev() {
        let (uh, uw, uc) = dims[lvl + 1];
        main += conv_macs(uh, uw, uc, 2 * uc, 3);
        let (lh, lw, lc) = dims[lvl];
        let dec_c = if lvl == 0 { 2 * c1 } else { lc };
        if lvl > 0 {
            main += conv_macs(lh, lw, 2 * lc, lc, 1);
        }
        main += cfg.blocks[lvl] as u64 * block_macs(cfg, lh, lw, dec_c, cfg.heads[lvl]);
    }
    main += cfg.refinement_blocks as u64 * block_macs(cfg, h, w, 2 * c1, cfg.heads[0]);
    main += conv_macs(h, w, 2 * c1, 3, 3);

    let mut cond = 0;
    if cfg.n_pcab > 0 {
        cond += 2 * encoder_pass_macs(cfg, h, w);
        cond += cfg.n_pcab as u64 * fusion_macs(cfg, bh, bw, c4);
    }
    Ok((main, cond))
}

/// Exact parameters plus analytic MACs in one table.
pub fn cost_table(cfg: &BackboneConfig, resolution: (usize, usize)) -> Result<CostTable> {
    let (main_p, cond_p) = count_parameters(cfg)?;
    let (main_m, cond_m) = estimate_macs(cfg, resolution)?;
    Ok(CostTable {
        resolution,
        main: CostRow { params: main_p, macs: main_m },
        conditioning: CostRow { params: cond_p, macs: cond_m },
    })
}

fn conv_macs(h: usize, w: usize, cin: usize, cout: usize, k: usize) -> u64 {
    h as u64 * w as u64 * cin as u64 * cout as u64 * (k * k) as u64
}

fn dwconv_macs(h: usize, w: usize, c: usize, k: usize) -> u64 {
    h as u64 * w as u64 * c as u64 * (k * k) as u64
}

fn gdfn_macs(cfg: &BackboneConfig, h: usize, w: usize, c: usize) -> u64 {
    let hidden = ((c as f64) * cfg.ffn_expansion).round() as usize;
    conv_macs(h, w, c, 2 * hidden, 1) + dwconv_macs(h, w, 2 * hidden, 3) + conv_macs(h, w, hidden, c, 1)
}

/// One backbone block: channel attention + FFN + spatial attention + FFN.
fn block_macs(cfg: &BackboneConfig, h: usize, w: usize, c: usize, heads: usize) -> u64 {
    let hw = h as u64 * w as u64;
    // Channel attention: qkv 1x1, depthwise 3x3, two (C/heads)^2 matmuls
    // over HW-length descriptors, output projection.
    let tsa = conv_macs(h, w, c, 3 * c, 1)
        + dwconv_macs(h, w, 3 * c, 3)
        + 2 * hw * (c as u64) * (c as u64) / heads as u64
        + conv_macs(h, w, c, c, 1);
    // Spatial attention: q/kv/proj 1x1 plus two win^2 x win_enlarged^2
    // matmuls per window at the window-padded size.
    let win = cfg.window;
    let we = win + ((win as f64) * cfg.overlap).round() as usize;
    let (hp, wp) = (h.next_multiple_of(win), w.next_multiple_of(win));
    let ssa = conv_macs(h, w, c, 3 * c, 1)
        + 2 * (hp as u64 * wp as u64) * (we * we) as u64 * c as u64
        + conv_macs(h, w, c, c, 1);
    tsa + gdfn_macs(cfg, h, w, c) + ssa + gdfn_macs(cfg, h, w, c)
}

fn fusion_macs(cfg: &BackboneConfig, h: usize, w: usize, c: usize) -> u64 {
    use super::prompt::Fusion;
    let hw = h as u64 * w as u64;
    match cfg.fusion {
        // q/k/v/proj 1x1 plus two HW x HW matmuls.
        Fusion::Pca => 4 * conv_macs(h, w, c, c, 1) + 2 * hw * hw * c as u64,
        // One 1x1 on the pooled (spatial size 1) descriptor pair.
        Fusion::Gfm => conv_macs(1, 1, 2 * c, 2 * c, 1),
        // Two 1x1 maps from the concatenated latents.
        Fusion::Sft => 2 * conv_macs(h, w, 2 * c, c, 1),
    }
}

/// One prompt-encoder pass on an already padded h x w image.
fn encoder_pass_macs(cfg: &BackboneConfig, h: usize, w: usize) -> u64 {
    use super::prompt::RES_BLOCKS_PER_LEVEL;
    let pc = cfg.prompt_channels;
    let mut macs = conv_macs(h, w, 3, pc[0], 3);
    for lvl in 0..3 {
        let (lh, lw, lc) = (h >> lvl, w >> lvl, pc[lvl]);
        macs += RES_BLOCKS_PER_LEVEL as u64 * 2 * conv_macs(lh, lw, lc, lc, 3);
        macs += conv_macs(lh, lw, lc, lc / 2, 3);
    }
    macs + conv_macs(h / 8, w / 8, 2 * pc[2], cfg.channels[3], 3)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionCostMode {
    /// Joint self-attention over the 2x2 grid of four images (input, prompt
    /// pair, output canvas): 4N tokens in every layer.
    GridGlobal,
    /// Cross-attention of N input queries against N prompt keys, only in
    /// the conditioned blocks.
    PromptCross,
}

/// Attention-matmul MACs for a token grid of `resolution` at width `dim`
/// across `layers` attention layers. Both modes count the two matmuls
/// (scores and mixing) and nothing else, so they are directly comparable.
pub fn attention_cost_model(
    resolution: (usize, usize),
    dim: usize,
    layers: usize,
    mode: AttentionCostMode,
) -> u64 {
    let n = (resolution.0 * resolution.1) as u64;
    let tokens = match mode {
        AttentionCostMode::GridGlobal => 4 * n,
        AttentionCostMode::PromptCross => n,
    };
    layers as u64 * 2 * tokens * tokens * dim as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::prompt::Fusion;

    fn enum_cfg() -> BackboneConfig {
        BackboneConfig {
            channels: [8, 16, 32, 64],
            blocks: [1, 1, 1, 1],
            heads: [1, 2, 4, 8],
            window: 4,
            overlap: 0.5,
            ffn_expansion: 2.0,
            n_pcab: 1,
            refinement_blocks: 1,
            prompt_channels: [8, 16, 32],
            fusion: Fusion::Pca,
        }
    }

    /// One block at width c with expansion 2 (hidden = 2c): channel
    /// attention (norm 2c, qkv 3c^2, depthwise 27c, temperature h, proj
    /// c^2), FFN (norm 2c, in 4c^2, depthwise 36c, out 2c^2) twice, spatial
    /// attention (norm 2c, q c^2, kv 2c^2, proj c^2).
    fn block_params(c: u64, h: u64) -> u64 {
        20 * c * c + 107 * c + h
    }

    #[test]
    fn toy_count_matches_hand_enumeration() {
        let cfg = enum_cfg();
        let (main, cond) = count_parameters(&cfg).unwrap();

        let stem = 3 * 8 * 9;
        let downs = 4 * 8 * 9 + 8 * 16 * 9 + 16 * 32 * 9;
        let ups = 128 * 64 * 9 + 64 * 32 * 9 + 32 * 16 * 9;
        let skips = 2 * 32 * 32 + 2 * 16 * 16;
        let head = 3 * 16 * 9;
        let enc_blocks = block_params(8, 1) + block_params(16, 2) + block_params(32, 4);
        let dec_blocks = block_params(32, 4) + block_params(16, 2) + block_params(16, 1);
        let latent = block_params(64, 8);
        let refine = block_params(16, 1);
        assert_eq!(
            main,
            stem + downs + ups + skips + head + enc_blocks + dec_blocks + latent + refine
        );

        // Conditioning: cross-attention (norm 2c + four c^2 projections at
        // c = 64) plus the prompt encoder (stem, 3 stages of 4 residual
        // blocks, 3 downsamples, final 3x3 lift to 64 channels).
        let pca = 2 * 64 + 4 * 64 * 64;
        let res_block = |c: u64| 2 * (c * c * 9 + c);
        let encoder = (8 * 3 * 9 + 8)
            + 4 * res_block(8)
            + 4 * 8 * 9
            + 4 * res_block(16)
            + 8 * 16 * 9
            + 4 * res_block(32)
            + 16 * 32 * 9
            + (64 * 64 * 9 + 64);
        assert_eq!(cond, pca + encoder);
    }

    #[test]
    fn paper_scale_costs_sit_inside_published_bands() {
        let cfg = BackboneConfig::default();
        let (main_p, cond_p) = count_parameters(&cfg).unwrap();
        let (main_m, cond_m) = estimate_macs(&cfg, (256, 256)).unwrap();
        eprintln!(
            "main {main_p} params / {:.2}G MACs; conditioning {cond_p} params / {:.2}G MACs",
            main_m as f64 / 1e9,
            cond_m as f64 / 1e9
        );
        let within = |v: u64, target: f64, tol: f64| {
            (v as f64 - target).abs() <= tol * target
        };
        assert!(within(main_p, 27.6e6, 0.15), "main params {main_p}");
        assert!(within(cond_p, 5.1e6, 0.20), "conditioning params {cond_p}");
        assert!(within(main_m, 166.9e9, 0.20), "main MACs {main_m}");
        assert!(within(cond_m, 35.7e9, 0.20), "conditioning MACs {cond_m}");
    }

    #[test]
    fn unconditioned_config_has_empty_conditioning_bucket() {
        let mut cfg = enum_cfg();
        cfg.n_pcab = 0;
        let (_, cond_p) = count_parameters(&cfg).unwrap();
        let (_, cond_m) = estimate_macs(&cfg, (64, 64)).unwrap();
        assert_eq!(cond_p, 0);
        assert_eq!(cond_m, 0);
    }

    #[test]
    fn macs_estimate_pads_resolution_like_the_model() {
        let cfg = enum_cfg();
        assert_eq!(
            estimate_macs(&cfg, (250, 250)).unwrap(),
            estimate_macs(&cfg, (256, 256)).unwrap()
        );
        let (small, _) = estimate_macs(&cfg, (64, 64)).unwrap();
        let (large, _) = estimate_macs(&cfg, (128, 128)).unwrap();
        assert!(large > small);
    }

    #[test]
    fn attention_cost_ratio_matches_closed_forms() {
        let res = (8, 8);
        let grid = attention_cost_model(res, 32, 1, AttentionCostMode::GridGlobal);
        let cross = attention_cost_model(res, 32, 1, AttentionCostMode::PromptCross);
        assert_eq!(grid, 16 * cross, "(4N)^2 / N^2");
        assert_eq!(attention_cost_model((0, 0), 32, 1, AttentionCostMode::GridGlobal), 0);
        assert_eq!(attention_cost_model((0, 0), 32, 1, AttentionCostMode::PromptCross), 0);

        // ViT-style 24-layer global grid vs. 4 conditioned blocks at the
        // same bottleneck token grid.
        let grid24 = attention_cost_model((32, 32), 384, 24, AttentionCostMode::GridGlobal);
        let pcab4 = attention_cost_model((32, 32), 384, 4, AttentionCostMode::PromptCross);
        assert!(grid24 / pcab4 > 50, "ratio {}", grid24 / pcab4);
    }

    #[test]
    fn table_renders_all_rows() {
        let cfg = enum_cfg();
        let table = cost_table(&cfg, (64, 64)).unwrap();
        let text = table.to_string();
        assert!(text.contains("main network"));
        assert!(text.contains("prompt+fusion"));
        assert!(text.contains("total"));
        assert_eq!(table.total().params, table.main.params + table.conditioning.params);
    }
}
