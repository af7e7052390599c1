//! Backbone building blocks: pre-norm channel attention, overlapping-window
//! spatial attention, the gated depthwise-conv feed-forward, and the small
//! conv/resample layers they are assembled from.

use super::params::{Init, Leaves, ParamId, ParamStore};
use crate::tensor::ops as t;
use crate::tensor::{Ctx, Scalar, Var};

pub const LN_EPS: f64 = 1e-5;

/// Channel-wise layer normalization (statistics over C at each position)
/// with learnable per-channel affine.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar>(ps: &mut ParamStore<S>, name: &str, c: usize) -> Self {
        LayerNorm {
            gamma: ps.register(&format!("{name}.gamma"), &[c], Init::Ones),
            beta: ps.register(&format!("{name}.beta"), &[c], Init::Zeros),
        }
    }

    pub fn forward<S: Scalar>(&self, cx: &Ctx<S>, lv: &Leaves<S>, x: &Var<S>) -> Var<S> {
        t::layer_norm_chan(cx, x, lv.var(self.gamma), lv.var(self.beta), LN_EPS)
    }
}

/// Square same-padding convolution, stride 1, optional bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Conv2d {
    pub fn new<S: Scalar>(
        ps: &mut ParamStore<S>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        bias: bool,
    ) -> Self {
        Self::with_init(ps, name, cin, cout, k, bias, Init::FanInUniform { fan_in: cin * k * k })
    }

    /// Zero-initialized variant for output projections that must start as
    /// the identity contribution (conditioning heads).
    pub fn zeroed<S: Scalar>(
        ps: &mut ParamStore<S>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        bias: bool,
    ) -> Self {
        Self::with_init(ps, name, cin, cout, k, bias, Init::Zeros)
    }

    fn with_init<S: Scalar>(
        ps: &mut ParamStore<S>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        bias: bool,
        init: Init,
    ) -> Self {
        let w = ps.register(&format!("{name}.w"), &[cout, cin, k, k], init);
        let b = bias.then(|| ps.register(&format!("{name}.b"), &[cout], Init::Zeros));
        Conv2d { w, b }
    }

    pub fn forward<S: Scalar>(&self, cx: &Ctx<S>, lv: &Leaves<S>, x: &Var<S>) -> Var<S> {
        let y = t::conv2d(cx, x, lv.var(self.w));
        match self.b {
            Some(b) => t::add_bias_c(cx, &y, lv.var(b)),
            None => y,
        }
    }
}

/// Depthwise square convolution, stride 1, same padding.
#[derive(Clone, Debug)]
pub struct DwConv2d {
    pub w: ParamId,
}

impl DwConv2d {
    pub fn new<S: Scalar>(ps: &mut ParamStore<S>, name: &str, c: usize, k: usize) -> Self {
        DwConv2d {
            w: ps.register(
                &format!("{name}.w"),
                &[c, k, k],
                Init::FanInUniform { fan_in: k * k },
            ),
        }
    }

    pub fn forward<S: Scalar>(&self, cx: &Ctx<S>, lv: &Leaves<S>, x: &Var<S>) -> Var<S> {
        t::dwconv2d(cx, x, lv.var(self.w))
    }
}

/// Pads H and W up to multiples of `m` (bottom/right). Reflect padding when
/// the margin fits inside the feature, zero padding otherwise.
pub fn pad_to_multiple<S: Scalar>(cx: &Ctx<S>, x: &Var<S>, m: usize) -> Var<S> {
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let (pb, pr) = (h.next_multiple_of(m) - h, w.next_multiple_of(m) - w);
    if pb == 0 && pr == 0 {
        return x.clone();
    }
    let mode = if pb < h && pr < w { t::PadMode::Reflect } else { t::PadMode::Zero };
    t::pad2d(cx, x, [0, pb, 0, pr], mode)
}

/// Channel attention: attention over channel descriptors aggregated across
/// all spatial positions, one (C/heads)^2 matrix per head, queries and keys
/// L2-normalized and scaled by a learnable per-head temperature.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub heads: usize,
    norm: LayerNorm,
    qkv: Conv2d,
    qkv_dw: DwConv2d,
    temperature: ParamId,
    proj: Conv2d,
}

impl ChannelAttention {
    pub fn new<S: Scalar>(ps: &mut ParamStore<S>, name: &str, c: usize, heads: usize) -> Self {
        assert_eq!(c % heads, 0, "channels not divisible by heads");
        ChannelAttention {
            heads,
            norm: LayerNorm::new(ps, &format!("{name}.norm"), c),
            qkv: Conv2d::new(ps, &format!("{name}.qkv"), c, 3 * c, 1, false),
            qkv_dw: DwConv2d::new(ps, &format!("{name}.qkv_dw"), 3 * c, 3),
            temperature: ps.register(&format!("{name}.temperature"), &[heads], Init::Ones),
            proj: Conv2d::new(ps, &format!("{name}.proj"), c, c, 1, false),
        }
    }

    /// Pre-norm residual branch; the caller adds it onto the input.
    pub fn forward<S: Scalar>(&self, cx: &Ctx<S>, lv: &Leaves<S>, x: &Var<S>) -> Var<S> {
        self.attend(cx, lv, x).0
    }

    /// Same as `forward` but also returns the attention tensor
    /// `(N*heads, C/heads, C/heads)` for invariant probes.
    pub fn attend<S: Scalar>(
        &self,
        cx: &Ctx<S>,
        lv: &Leaves<S>,
        x: &Var<S>,
    ) -> (Var<S>, Var<S>) {
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let hd = c / self.heads;
        let y = self.norm.forward(cx, lv, x);
        let qkv = self.qkv_dw.forward(cx, lv, &self.qkv.forward(cx, lv, &y));
        let tokens = |v: &Var<S>| t::reshape(cx, v, &[n * self.heads, hd, h * w]);
        let q = tokens(&t::slice_c(cx, &qkv, 0, c));
        let k = tokens(&t::slice_c(cx, &qkv, c, 2 * c));
        let v = tokens(&t::slice_c(cx, &qkv, 2 * c, 3 * c));
        let qn = t::l2_normalize_last(cx, &q);
        let kn = t::l2_normalize_last(cx, &k);
        let scores = t::scale_per_head(cx, &t::bmm_nt(cx, &qn, &kn), lv.var(self.temperature));
        let attn = t::softmax_last(cx, &scores);
        let out = t::reshape(cx, &t::bmm(cx, &attn, &v), &[n, c, h, w]);
        (self.proj.forward(cx, lv, &out), attn)
    }

    /// Scales the branch output projection (build-time depth damping).
    pub fn damp_proj<S: Scalar>(&self, ps: &mut ParamStore<S>, factor: f64) {
        ps.rescale(self.proj.w, factor);
    }
}

/// Windowed spatial attention: queries from non-overlapped `win x win`
/// windows, keys/values gathered from enlarged windows of size
/// `win * (1 + overlap)` with stride `win`.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub heads: usize,
    pub win: usize,
    pub win_enlarged: usize,
    norm: LayerNorm,
    q: Conv2d,
    kv: Conv2d,
    proj: Conv2d,
}

impl SpatialAttention {
    pub fn new<S: Scalar>(
        ps: &mut ParamStore<S>,
        name: &str,
        c: usize,
        heads: usize,
        win: usize,
        overlap: f64,
    ) -> Self {
        assert_eq!(c % heads, 0, "channels not divisible by heads");
        assert!(win >= 2, "window too small");
        assert!(overlap >= 0.0);
        let win_enlarged = win + (win as f64 * overlap).round() as usize;
        SpatialAttention {
            heads,
            win,
            win_enlarged,
            norm: LayerNorm::new(ps, &format!("{name}.norm"), c),
            q: Conv2d::new(ps, &format!("{name}.q"), c, c, 1, false),
            kv: Conv2d::new(ps, &format!("{name}.kv"), c, 2 * c, 1, false),
            proj: Conv2d::new(ps, &format!("{name}.proj"), c, c, 1, false),
        }
    }

    pub fn forward<S: Scalar>(&self, cx: &Ctx<S>, lv: &Leaves<S>, x: &Var<S>) -> Var<S> {
        self.attend(cx, lv, x).0
    }

    /// Residual branch plus the `(blocks, win^2, win_enlarged^2)` attention
    /// tensor.
    pub fn attend<S: Scalar>(
        &self,
        cx: &Ctx<S>,
        lv: &Leaves<S>,
        x: &Var<S>,
    ) -> (Var<S>, Var<S>) {
        let (h, w) = (x.shape()[2], x.shape()[3]);
        let c = x.shape()[1];
        let hd = c / self.heads;
        let y = self.norm.forward(cx, lv, x);
        let q = pad_to_multiple(cx, &self.q.forward(cx, lv, &y), self.win);
        let kv = pad_to_multiple(cx, &self.kv.forward(cx, lv, &y), self.win);
        let k = t::slice_c(cx, &kv, 0, c);
        let v = t::slice_c(cx, &kv, c, 2 * c);
        let grid = t::WindowGrid::of(q.shape(), self.win, self.heads);
        let qt = t::window_split(cx, &q, self.win, self.heads);
        let kt = t::overlap_split(cx, &k, self.win, self.win_enlarged, self.heads);
        let vt = t::overlap_split(cx, &v, self.win, self.win_enlarged, self.heads);
        let scale = S::from_f64(1.0 / (hd as f64).sqrt());
        let attn = t::softmax_last(cx, &t::scale(cx, &t::bmm_nt(cx, &qt, &kt), scale));
        let merged = t::window_merge(cx, &t::bmm(cx, &attn, &vt), grid);
        let cropped = t::crop2d(cx, &merged, 0, 0, h, w);
        (self.proj.forward(cx, lv, &cropped), attn)
    }

    /// Scales the branch output projection (build-time depth damping).
    pub fn damp_proj<S: Scalar>(&self, ps: &mut ParamStore<S>, factor: f64) {
        ps.rescale(self.proj.w, factor);
    }
}

/// Gated depthwise-conv feed-forward: expand to 2*hidden with a 1x1, mix
/// with a 3x3 depthwise, gate one half with GELU of the other, project back.
#[derive(Clone, Debug)]
pub struct Gdfn {
    pub hidden: usize,
    norm: LayerNorm,
    inp: Conv2d,
    dw: DwConv2d,
    out: Conv2d,
}

impl Gdfn {
    pub fn new<S: Scalar>(ps: &mut ParamStore<S>, name: &str, c: usize, expansion: f64) -> Self {
        let hidden = ((c as f64) * expansion).round() as usize;
        Gdfn {
            hidden,
            norm: LayerNorm::new(ps, &format!("{name}.norm"), c),
            inp: Conv2d::new(ps, &format!("{name}.in"), c, 2 * hidden, 1, false),
            dw: DwConv2d::new(ps, &format!("{name}.dw"), 2 * hidden, 3),
            out: Conv2d::new(ps, &format!("{name}.out"), hidden, c, 1, false),
        }
    }

    pub fn forward<S: Scalar>(&self, cx: &Ctx<S>, lv: &Leaves<S>, x: &Var<S>) -> Var<S> {
        let y = self.norm.forward(cx, lv, x);
        let y = self.dw.forward(cx, lv, &self.inp.forward(cx, lv, &y));
        let x1 = t::slice_c(cx, &y, 0, self.hidden);
        let x2 = t::slice_c(cx, &y, self.hidden, 2 * self.hidden);
        let gated = t::mul(cx, &t::gelu(cx, &x1), &x2);
        self.out.forward(cx, lv, &gated)
    }

    /// Scales the branch output projection (build-time depth damping).
    pub fn damp_out<S: Scalar>(&self, ps: &mut ParamStore<S>, factor: f64) {
        ps.rescale(self.out.w, factor);
    }
}

/// One backbone block: channel-attention sub-block then spatial-attention
/// sub-block, each followed by its own feed-forward, all pre-norm residual.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub tsa: ChannelAttention,
    pub ffn_t: Gdfn,
    pub ssa: SpatialAttention,
    pub ffn_s: Gdfn,
}

impl TransformerBlock {
    pub fn new<S: Scalar>(
        ps: &mut ParamStore<S>,
        name: &str,
        c: usize,
        heads: usize,
        win: usize,
        overlap: f64,
        expansion: f64,
    ) -> Self {
        TransformerBlock {
            tsa: ChannelAttention::new(ps, &format!("{name}.tsa"), c, heads),
            ffn_t: Gdfn::new(ps, &format!("{name}.tsa_ffn"), c, expansion),
            ssa: SpatialAttention::new(ps, &format!("{name}.ssa"), c, heads, win, overlap),
            ffn_s: Gdfn::new(ps, &format!("{name}.ssa_ffn"), c, expansion),
        }
    }

    pub fn forward<S: Scalar>(&self, cx: &Ctx<S>, lv: &Leaves<S>, x: &Var<S>) -> Var<S> {
        let x = t::add(cx, x, &self.tsa.forward(cx, lv, x));
        let x = t::add(cx, &x, &self.ffn_t.forward(cx, lv, &x));
        let x = t::add(cx, &x, &self.ssa.forward(cx, lv, &x));
        t::add(cx, &x, &self.ffn_s.forward(cx, lv, &x))
    }

    /// Scales all four residual-branch output projections. With L residual
    /// additions on a path, a factor of 1/sqrt(2L) keeps the accumulated
    /// stream's variance O(1) at init instead of growing linearly in depth.
    pub fn damp_residual_branches<S: Scalar>(&self, ps: &mut ParamStore<S>, factor: f64) {
        self.tsa.damp_proj(ps, factor);
        self.ffn_t.damp_out(ps, factor);
        self.ssa.damp_proj(ps, factor);
        self.ffn_s.damp_out(ps, factor);
    }
}

/// 2x downsampling: 3x3 conv halves channels, pixel-unshuffle doubles them
/// again at half resolution (net C -> 2C, H/2, W/2).
#[derive(Clone, Debug)]
pub struct Downsample {
    conv: Conv2d,
}

impl Downsample {
    pub fn new<S: Scalar>(ps: &mut ParamStore<S>, name: &str, c: usize) -> Self {
        assert_eq!(c % 2, 0);
        Downsample { conv: Conv2d::new(ps, &format!("{name}.conv"), c, c / 2, 3, false) }
    }

    pub fn forward<S: Scalar>(&self, cx: &Ctx<S>, lv: &Leaves<S>, x: &Var<S>) -> Var<S> {
        t::pixel_unshuffle(cx, &self.conv.forward(cx, lv, x), 2)
    }
}

/// 2x upsampling: 3x3 conv doubles channels, pixel-shuffle spends them on
/// resolution (net C -> C/2, 2H, 2W).
#[derive(Clone, Debug)]
pub struct Upsample {
    conv: Conv2d,
}

impl Upsample {
    pub fn new<S: Scalar>(ps: &mut ParamStore<S>, name: &str, c: usize) -> Self {
        Upsample { conv: Conv2d::new(ps, &format!("{name}.conv"), c, 2 * c, 3, false) }
    }

    pub fn forward<S: Scalar>(&self, cx: &Ctx<S>, lv: &Leaves<S>, x: &Var<S>) -> Var<S> {
        t::pixel_shuffle(cx, &self.conv.forward(cx, lv, x), 2)
    }
}

/// Plain residual block (3x3 conv, ReLU, 3x3 conv, skip) for the prompt
/// encoder.
#[derive(Clone, Debug)]
pub struct ResBlock {
    c1: Conv2d,
    c2: Conv2d,
}

impl ResBlock {
    pub fn new<S: Scalar>(ps: &mut ParamStore<S>, name: &str, c: usize) -> Self {
        ResBlock {
            c1: Conv2d::new(ps, &format!("{name}.c1"), c, c, 3, true),
            c2: Conv2d::new(ps, &format!("{name}.c2"), c, c, 3, true),
        }
    }

    pub fn forward<S: Scalar>(&self, cx: &Ctx<S>, lv: &Leaves<S>, x: &Var<S>) -> Var<S> {
        let y = t::relu(cx, &self.c1.forward(cx, lv, x));
        t::add(cx, x, &self.c2.forward(cx, lv, &y))
    }

    /// Scales the residual output conv (build-time depth damping).
    pub fn damp_residual_branch<S: Scalar>(&self, ps: &mut ParamStore<S>, factor: f64) {
        ps.rescale(self.c2.w, factor);
    }
}
