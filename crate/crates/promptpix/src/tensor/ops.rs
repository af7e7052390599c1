//! Differentiable tensor operations.
//!
//! Conventions: feature maps are `(N, C, H, W)`, batched matrices are
//! `(G, M, K)` with the batch axis first, and reductions named `_last`
//! act along the final axis. Every op computes its forward value with
//! plain `ndarray` arithmetic and registers an explicit backward closure;
//! there is no graph-level broadcasting, each op handles exactly the
//! shapes it documents.

use super::{Ctx, Scalar, Var};
use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayD, ArrayView2, ArrayView3, ArrayViewMut3, Axis, Ix1, Ix3, Ix4, IxDyn};
use std::rc::Rc;

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected a 4-d tensor, got shape {shape:?}");
    (shape[0], shape[1], shape[2], shape[3])
}

// ---------------------------------------------------------------------------
// Elementwise and broadcast arithmetic
// ---------------------------------------------------------------------------

pub fn add<S: Scalar>(cx: &Ctx<S>, a: &Var<S>, b: &Var<S>) -> Var<S> {
    assert_eq!(a.shape(), b.shape(), "add shape mismatch");
    let out = a.value() + b.value();
    cx.op(out, &[a, b], move |g, wanted, slots| {
        if wanted[0] {
            slots[0] = Some(g.clone());
        }
        if wanted[1] {
            slots[1] = Some(g.clone());
        }
    })
}

pub fn sub<S: Scalar>(cx: &Ctx<S>, a: &Var<S>, b: &Var<S>) -> Var<S> {
    assert_eq!(a.shape(), b.shape(), "sub shape mismatch");
    let out = a.value() - b.value();
    cx.op(out, &[a, b], move |g, wanted, slots| {
        if wanted[0] {
            slots[0] = Some(g.clone());
        }
        if wanted[1] {
            slots[1] = Some(g.mapv(|v| -v));
        }
    })
}

pub fn mul<S: Scalar>(cx: &Ctx<S>, a: &Var<S>, b: &Var<S>) -> Var<S> {
    assert_eq!(a.shape(), b.shape(), "mul shape mismatch");
    let out = a.value() * b.value();
    let av = a.rc();
    let bv = b.rc();
    cx.op(out, &[a, b], move |g, wanted, slots| {
        if wanted[0] {
            slots[0] = Some(g * &*bv);
        }
        if wanted[1] {
            slots[1] = Some(g * &*av);
        }
    })
}

pub fn scale<S: Scalar>(cx: &Ctx<S>, a: &Var<S>, k: S) -> Var<S> {
    let out = a.value().mapv(|v| v * k);
    cx.op(out, &[a], move |g, wanted, slots| {
        if wanted[0] {
            slots[0] = Some(g.mapv(|v| v * k));
        }
    })
}

pub fn relu<S: Scalar>(cx: &Ctx<S>, a: &Var<S>) -> Var<S> {
    let out = a.value().mapv(|v| v.s_max(S::ZERO));
    let av = a.rc();
    cx.op(out, &[a], move |g, wanted, slots| {
        if wanted[0] {
            let mut gx = g.clone();
            gx.zip_mut_with(&av, |gv, &x| {
                if x <= S::ZERO {
                    *gv = S::ZERO;
                }
            });
            slots[0] = Some(gx);
        }
    })
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

pub fn gelu<S: Scalar>(cx: &Ctx<S>, a: &Var<S>) -> Var<S> {
    let k = S::from_f64(GELU_K);
    let c = S::from_f64(GELU_C);
    let half = S::from_f64(0.5);
    let out = a.value().mapv(|x| {
        let u = k * (x + c * x * x * x);
        half * x * (S::ONE + u.s_tanh())
    });
    let av = a.rc();
    cx.op(out, &[a], move |g, wanted, slots| {
        if wanted[0] {
            let mut gx = g.clone();
            gx.zip_mut_with(&av, |gv, &x| {
                let u = k * (x + c * x * x * x);
                let t = u.s_tanh();
                let du = k * (S::ONE + S::from_f64(3.0) * c * x * x);
                let d = half * (S::ONE + t) + half * x * (S::ONE - t * t) * du;
                *gv = *gv * d;
            });
            slots[0] = Some(gx);
        }
    })
}

pub fn abs<S: Scalar>(cx: &Ctx<S>, a: &Var<S>) -> Var<S> {
    let out = a.value().mapv(|v| v.s_abs());
    let av = a.rc();
    cx.op(out, &[a], move |g, wanted, slots| {
        if wanted[0] {
            let mut gx = g.clone();
            gx.zip_mut_with(&av, |gv, &x| *gv = *gv * x.s_sign0());
            slots[0] = Some(gx);
        }
    })
}

/// Mean over all elements; the output is a 0-d tensor.
pub fn mean_all<S: Scalar>(cx: &Ctx<S>, a: &Var<S>) -> Var<S> {
    let n = a.value().len();
    assert!(n > 0, "mean of an empty tensor");
    let inv = S::ONE / S::from_f64(n as f64);
    let mut acc = S::ZERO;
    for &v in a.value().iter() {
        acc += v;
    }
    let out = ArrayD::from_elem(IxDyn(&[]), acc * inv);
    let shape = a.value().raw_dim();
    cx.op(out, &[a], move |g, wanted, slots| {
        if wanted[0] {
            let gv = *g.first().expect("0-d gradient");
            slots[0] = Some(ArrayD::from_elem(shape.clone(), gv * inv));
        }
    })
}

/// `(N, C, H, W) + (C,)` broadcast bias add.
pub fn add_bias_c<S: Scalar>(cx: &Ctx<S>, x: &Var<S>, b: &Var<S>) -> Var<S> {
    let (n, c, h, w) = dims4(x.shape());
    assert_eq!(b.shape(), [c], "bias shape mismatch");
    let bview = b.value().view().into_dimensionality::<Ix1>().unwrap();
    let mut out = x.value().clone();
    {
        let mut out4 = out.view_mut().into_dimensionality::<Ix4>().unwrap();
        let b4 = bview.into_shape_with_order((1, c, 1, 1)).unwrap();
        out4 += &b4.broadcast((n, c, h, w)).unwrap();
    }
    cx.op(out, &[x, b], move |g, wanted, slots| {
        if wanted[0] {
            slots[0] = Some(g.clone());
        }
        if wanted[1] {
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
            let gb = g4.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
            slots[1] = Some(gb.into_dyn());
        }
    })
}

/// `(N, C, H, W) * (N, C, 1, 1)` broadcast multiply.
pub fn mul_chan<S: Scalar>(cx: &Ctx<S>, x: &Var<S>, s_: &Var<S>) -> Var<S> {
    let (n, c, h, w) = dims4(x.shape());
    assert_eq!(s_.shape(), [n, c, 1, 1], "per-channel scale shape mismatch");
    let s4 = s_.value().view().into_dimensionality::<Ix4>().unwrap();
    let x4 = x.value().view().into_dimensionality::<Ix4>().unwrap();
    let out = (&x4 * &s4.broadcast((n, c, h, w)).unwrap()).into_dyn();
    let xv = x.rc();
    let sv = s_.rc();
    cx.op(out, &[x, s_], move |g, wanted, slots| {
        let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
        if wanted[0] {
            let s4 = sv.view().into_dimensionality::<Ix4>().unwrap();
            slots[0] = Some((&g4 * &s4.broadcast((n, c, h, w)).unwrap()).into_dyn());
        }
        if wanted[1] {
            let x4 = xv.view().into_dimensionality::<Ix4>().unwrap();
            let prod = &g4 * &x4;
            let gs = prod.sum_axis(Axis(3)).sum_axis(Axis(2));
            slots[1] = Some(gs.into_shape_with_order((n, c, 1, 1)).unwrap().into_dyn());
        }
    })
}

/// `(N, C, H, W) + (N, C, 1, 1)` broadcast add.
pub fn add_chan<S: Scalar>(cx: &Ctx<S>, x: &Var<S>, t: &Var<S>) -> Var<S> {
    let (n, c, h, w) = dims4(x.shape());
    assert_eq!(t.shape(), [n, c, 1, 1], "per-channel shift shape mismatch");
    let t4 = t.value().view().into_dimensionality::<Ix4>().unwrap();
    let x4 = x.value().view().into_dimensionality::<Ix4>().unwrap();
    let out = (&x4 + &t4.broadcast((n, c, h, w)).unwrap()).into_dyn();
    cx.op(out, &[x, t], move |g, wanted, slots| {
        if wanted[0] {
            slots[0] = Some(g.clone());
        }
        if wanted[1] {
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
            let gt = g4.sum_axis(Axis(3)).sum_axis(Axis(2));
            slots[1] = Some(gt.into_shape_with_order((n, c, 1, 1)).unwrap().into_dyn());
        }
    })
}

/// Spatial mean: `(N, C, H, W) -> (N, C, 1, 1)`.
pub fn mean_spatial<S: Scalar>(cx: &Ctx<S>, x: &Var<S>) -> Var<S> {
    let (n, c, h, w) = dims4(x.shape());
    let inv = S::ONE / S::from_f64((h * w) as f64);
    let x4 = x.value().view().into_dimensionality::<Ix4>().unwrap();
    let m = x4.sum_axis(Axis(3)).sum_axis(Axis(2)).mapv(|v| v * inv);
    let out = m.into_shape_with_order((n, c, 1, 1)).unwrap().into_dyn();
    cx.op(out, &[x], move |g, wanted, slots| {
        if wanted[0] {
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
            let gx = g4.broadcast((n, c, h, w)).unwrap().mapv(|v| v * inv);
            slots[0] = Some(gx.into_dyn());
        }
    })
}

// ---------------------------------------------------------------------------
// Shape plumbing
// ---------------------------------------------------------------------------

/// Order-preserving reshape (inputs must be standard layout, which every
/// op in this module produces).
pub fn reshape<S: Scalar>(cx: &Ctx<S>, x: &Var<S>, shape: &[usize]) -> Var<S> {
    let out = x
        .value()
        .clone()
        .into_shape_with_order(IxDyn(shape))
        .expect("reshape: size mismatch or non-standard layout");
    let old_shape: Vec<usize> = x.shape().to_vec();
    cx.op(out, &[x], move |g, wanted, slots| {
        if wanted[0] {
            slots[0] = Some(g.clone().into_shape_with_order(IxDyn(&old_shape)).unwrap());
        }
    })
}

/// Swaps the last two axes (copying).
pub fn transpose_last2<S: Scalar>(cx: &Ctx<S>, x: &Var<S>) -> Var<S> {
    fn tr<S: Scalar>(a: &ArrayD<S>) -> ArrayD<S> {
        let nd = a.ndim();
        assert!(nd >= 2);
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 1, nd - 2);
        let mut out = ArrayD::zeros(
            perm.iter().map(|&i| a.shape()[i]).collect::<Vec<_>>(),
        );
        out.assign(&a.view().permuted_axes(IxDyn(&perm)));
        out
    }
    let out = tr(x.value());
    cx.op(out, &[x], move |g, wanted, slots| {
        if wanted[0] {
            slots[0] = Some(tr(g));
        }
    })
}

/// Channel concatenation of two `(N, C_i, H, W)` maps.
pub fn concat_c<S: Scalar>(cx: &Ctx<S>, a: &Var<S>, b: &Var<S>) -> Var<S> {
    let (n, ca, h, w) = dims4(a.shape());
    let (nb, _cb, hb, wb) = dims4(b.shape());
    assert_eq!((n, h, w), (nb, hb, wb), "concat_c spatial/batch mismatch");
    // `concatenate` appends along the channel axis, which leaves that axis
    // outermost in memory; normalize so downstream reshapes stay valid.
    let out = ndarray::concatenate(Axis(1), &[a.value().view(), b.value().view()])
        .expect("concat_c")
        .as_standard_layout()
        .into_owned();
    cx.op(out, &[a, b], move |g, wanted, slots| {
        if wanted[0] {
            slots[0] = Some(g.slice(s![.., ..ca, .., ..]).to_owned().into_dyn());
        }
        if wanted[1] {
            slots[1] = Some(g.slice(s![.., ca.., .., ..]).to_owned().into_dyn());
        }
    })
}

/// Channel slice `[lo, hi)` of an `(N, C, H, W)` map.
pub fn slice_c<S: Scalar>(cx: &Ctx<S>, x: &Var<S>, lo: usize, hi: usize) -> Var<S> {
    let (_, c, _, _) = dims4(x.shape());
    assert!(lo < hi && hi <= c, "slice_c out of range");
    let out = x.value().slice(s![.., lo..hi, .., ..]).to_owned().into_dyn();
    let shape = x.value().raw_dim();
    cx.op(out, &[x], move |g, wanted, slots| {
        if wanted[0] {
            let mut gx = ArrayD::zeros(shape.clone());
            gx.slice_mut(s![.., lo..hi, .., ..]).assign(g);
            slots[0] = Some(gx);
        }
    })
}

// ---------------------------------------------------------------------------
// Normalization and attention primitives
// ---------------------------------------------------------------------------

/// Softmax along the last axis.
pub fn softmax_last<S: Scalar>(cx: &Ctx<S>, x: &Var<S>) -> Var<S> {
    let axis = Axis(x.value().ndim() - 1);
    let mut y = x.value().clone();
    for mut lane in y.lanes_mut(axis).into_iter() {
        let m = lane.iter().copied().fold(S::from_f64(f64::NEG_INFINITY), |a, b| a.s_max(b));
        lane.mapv_inplace(|v| (v - m).s_exp());
        let s_: S = lane.sum();
        lane.mapv_inplace(|v| v / s_);
    }
    let y_rc = Rc::new(y);
    let out_for_bwd = Rc::clone(&y_rc);
    cx.op_shared(y_rc, &[x], move |g, wanted, slots| {
        if wanted[0] {
            let mut gx = g.clone();
            for (mut gl, yl) in gx.lanes_mut(axis).into_iter().zip(out_for_bwd.lanes(axis)) {
                let mut dot = S::ZERO;
                for (gv, yv) in gl.iter().zip(yl.iter()) {
                    dot += *gv * *yv;
                }
                for (gv, yv) in gl.iter_mut().zip(yl.iter()) {
                    *gv = *yv * (*gv - dot);
                }
            }
            slots[0] = Some(gx);
        }
    })
}

/// L2 normalization along the last axis: `y = x / sqrt(sum(x^2) + eps)`.
pub fn l2_normalize_last<S: Scalar>(cx: &Ctx<S>, x: &Var<S>) -> Var<S> {
    let eps = S::from_f64(1e-12);
    let axis = Axis(x.value().ndim() - 1);
    let mut y = x.value().clone();
    for mut lane in y.lanes_mut(axis).into_iter() {
        let mut sq = S::ZERO;
        for &v in lane.iter() {
            sq += v * v;
        }
        let r = (sq + eps).s_sqrt();
        lane.mapv_inplace(|v| v / r);
    }
    let xv = x.rc();
    cx.op(y, &[x], move |g, wanted, slots| {
        if wanted[0] {
            let mut gx = g.clone();
            for (mut gl, xl) in gx.lanes_mut(axis).into_iter().zip(xv.lanes(axis)) {
                let mut sq = S::ZERO;
                let mut dot = S::ZERO;
                for (gv, xv_) in gl.iter().zip(xl.iter()) {
                    sq += *xv_ * *xv_;
                    dot += *gv * *xv_;
                }
                let r = (sq + eps).s_sqrt();
                let r3 = r * r * r;
                for (gv, xv_) in gl.iter_mut().zip(xl.iter()) {
                    *gv = *gv / r - *xv_ * dot / r3;
                }
            }
            slots[0] = Some(gx);
        }
    })
}

/// Channel-wise layer normalization of `(N, C, H, W)`: statistics are taken
/// over C independently at every `(n, h, w)` position.
pub fn layer_norm_chan<S: Scalar>(
    cx: &Ctx<S>,
    x: &Var<S>,
    gamma: &Var<S>,
    beta: &Var<S>,
    eps: f64,
) -> Var<S> {
    let (_n, c, _h, _w) = dims4(x.shape());
    assert_eq!(gamma.shape(), [c], "gamma shape mismatch");
    assert_eq!(beta.shape(), [c], "beta shape mismatch");
    let epss = S::from_f64(eps);
    let inv_c = S::ONE / S::from_f64(c as f64);
    let axis = Axis(1);

    let gm = gamma.value().view().into_dimensionality::<Ix1>().unwrap().to_owned();
    let bt = beta.value().view().into_dimensionality::<Ix1>().unwrap().to_owned();
    let mut y = x.value().clone();
    for mut lane in y.lanes_mut(axis).into_iter() {
        let mut mu = S::ZERO;
        for &v in lane.iter() {
            mu += v;
        }
        mu *= inv_c;
        let mut var = S::ZERO;
        for &v in lane.iter() {
            let d = v - mu;
            var += d * d;
        }
        var *= inv_c;
        let sinv = S::ONE / (var + epss).s_sqrt();
        for (j, v) in lane.iter_mut().enumerate() {
            *v = (*v - mu) * sinv * gm[j] + bt[j];
        }
    }
    let xv = x.rc();
    cx.op(y, &[x, gamma, beta], move |g, wanted, slots| {
        let mut gx = wanted[0].then(|| g.clone());
        let mut ggamma = Array1::<S>::zeros(c);
        let mut gbeta = Array1::<S>::zeros(c);
        let g_lanes = g.lanes(axis);
        let x_lanes = xv.lanes(axis);
        let mut gx_lanes = gx.as_mut().map(|a| a.lanes_mut(axis).into_iter());
        for (gl, xl) in g_lanes.into_iter().zip(x_lanes) {
            let mut mu = S::ZERO;
            for &v in xl.iter() {
                mu += v;
            }
            mu *= inv_c;
            let mut var = S::ZERO;
            for &v in xl.iter() {
                let d = v - mu;
                var += d * d;
            }
            var *= inv_c;
            let sinv = S::ONE / (var + epss).s_sqrt();
            // xhat_j = (x_j - mu) * sinv
            let mut mean_gg = S::ZERO; // mean of gamma .* g
            let mut mean_ggx = S::ZERO; // mean of gamma .* g .* xhat
            for (j, (&gv, &xval)) in gl.iter().zip(xl.iter()).enumerate() {
                let xhat = (xval - mu) * sinv;
                let gg = gm[j] * gv;
                mean_gg += gg;
                mean_ggx += gg * xhat;
                if wanted[1] {
                    ggamma[j] += gv * xhat;
                }
                if wanted[2] {
                    gbeta[j] += gv;
                }
            }
            mean_gg *= inv_c;
            mean_ggx *= inv_c;
            if let Some(lanes) = gx_lanes.as_mut() {
                let mut ol = lanes.next().expect("lane count mismatch");
                for (j, (ov, &xval)) in ol.iter_mut().zip(xl.iter()).enumerate() {
                    let xhat = (xval - mu) * sinv;
                    *ov = (gm[j] * *ov - mean_gg - xhat * mean_ggx) * sinv;
                }
            }
        }
        if wanted[0] {
            slots[0] = gx;
        }
        if wanted[1] {
            slots[1] = Some(ggamma.into_dyn());
        }
        if wanted[2] {
            slots[2] = Some(gbeta.into_dyn());
        }
    })
}

/// Multiplies each batch block of `(G, M, N)` by a per-head scalar from
/// `t: (h,)`, with the head index of block `g` being `g % h`. Used for the
/// learnable attention temperature.
pub fn scale_per_head<S: Scalar>(cx: &Ctx<S>, x: &Var<S>, t: &Var<S>) -> Var<S> {
    let xs = x.shape();
    assert_eq!(xs.len(), 3, "scale_per_head expects (G, M, N)");
    let grp = xs[0];
    let h = t.value().len();
    assert_eq!(t.shape(), [h]);
    assert_eq!(grp % h, 0, "batch blocks not a multiple of heads");
    let tv1 = t.value().view().into_dimensionality::<Ix1>().unwrap().to_owned();
    let mut out = x.value().clone();
    for (gi, mut block) in out.axis_iter_mut(Axis(0)).enumerate() {
        let k = tv1[gi % h];
        block.mapv_inplace(|v| v * k);
    }
    let xv = x.rc();
    cx.op(out, &[x, t], move |g, wanted, slots| {
        if wanted[0] {
            let mut gx = g.clone();
            for (gi, mut block) in gx.axis_iter_mut(Axis(0)).enumerate() {
                let k = tv1[gi % h];
                block.mapv_inplace(|v| v * k);
            }
            slots[0] = Some(gx);
        }
        if wanted[1] {
            let mut gt = Array1::<S>::zeros(h);
            for (gi, (gb, xb)) in g
                .axis_iter(Axis(0))
                .zip(xv.axis_iter(Axis(0)))
                .enumerate()
            {
                let mut acc = S::ZERO;
                for (gv, xv_) in gb.iter().zip(xb.iter()) {
                    acc += *gv * *xv_;
                }
                gt[gi % h] += acc;
            }
            slots[1] = Some(gt.into_dyn());
        }
    })
}

/// Batched matmul: `(G, M, K) x (G, K, N) -> (G, M, N)`.
pub fn bmm<S: Scalar>(cx: &Ctx<S>, x: &Var<S>, y: &Var<S>) -> Var<S> {
    let (g_, m, k) = {
        let s_ = x.shape();
        assert_eq!(s_.len(), 3);
        (s_[0], s_[1], s_[2])
    };
    let (g2, k2, n) = {
        let s_ = y.shape();
        assert_eq!(s_.len(), 3);
        (s_[0], s_[1], s_[2])
    };
    assert_eq!((g_, k), (g2, k2), "bmm shape mismatch");
    let x3 = x.value().view().into_dimensionality::<Ix3>().unwrap();
    let y3 = y.value().view().into_dimensionality::<Ix3>().unwrap();
    let mut out = ndarray::Array3::<S>::zeros((g_, m, n));
    for gi in 0..g_ {
        let o = x3.index_axis(Axis(0), gi).dot(&y3.index_axis(Axis(0), gi));
        out.index_axis_mut(Axis(0), gi).assign(&o);
    }
    let xv = x.rc();
    let yv = y.rc();
    cx.op(out.into_dyn(), &[x, y], move |g, wanted, slots| {
        let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
        if wanted[0] {
            let y3 = yv.view().into_dimensionality::<Ix3>().unwrap();
            let mut gx = ndarray::Array3::<S>::zeros((g_, m, k));
            for gi in 0..g_ {
                let o = g3
                    .index_axis(Axis(0), gi)
                    .dot(&y3.index_axis(Axis(0), gi).t());
                gx.index_axis_mut(Axis(0), gi).assign(&o);
            }
            slots[0] = Some(gx.into_dyn());
        }
        if wanted[1] {
            let x3 = xv.view().into_dimensionality::<Ix3>().unwrap();
            let mut gy = ndarray::Array3::<S>::zeros((g_, k, n));
            for gi in 0..g_ {
                let o = x3
                    .index_axis(Axis(0), gi)
                    .t()
                    .dot(&g3.index_axis(Axis(0), gi));
                gy.index_axis_mut(Axis(0), gi).assign(&o);
            }
            slots[1] = Some(gy.into_dyn());
        }
    })
}

/// Batched matmul with the second operand transposed:
/// `(G, M, K) x (G, N, K) -> (G, M, N)`.
pub fn bmm_nt<S: Scalar>(cx: &Ctx<S>, x: &Var<S>, y: &Var<S>) -> Var<S> {
    let (g_, m, k) = {
        let s_ = x.shape();
        assert_eq!(s_.len(), 3);
        (s_[0], s_[1], s_[2])
    };
    let (g2, n, k2) = {
        let s_ = y.shape();
        assert_eq!(s_.len(), 3);
        (s_[0], s_[1], s_[2])
    };
    assert_eq!((g_, k), (g2, k2), "bmm_nt shape mismatch");
    let x3 = x.value().view().into_dimensionality::<Ix3>().unwrap();
    let y3 = y.value().view().into_dimensionality::<Ix3>().unwrap();
    let mut out = ndarray::Array3::<S>::zeros((g_, m, n));
    for gi in 0..g_ {
        let o = x3
            .index_axis(Axis(0), gi)
            .dot(&y3.index_axis(Axis(0), gi).t());
        out.index_axis_mut(Axis(0), gi).assign(&o);
    }
    let xv = x.rc();
    let yv = y.rc();
    cx.op(out.into_dyn(), &[x, y], move |g, wanted, slots| {
        let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
        if wanted[0] {
            let y3 = yv.view().into_dimensionality::<Ix3>().unwrap();
            let mut gx = ndarray::Array3::<S>::zeros((g_, m, k));
            for gi in 0..g_ {
                let o = g3
                    .index_axis(Axis(0), gi)
                    .dot(&y3.index_axis(Axis(0), gi));
                gx.index_axis_mut(Axis(0), gi).assign(&o);
            }
            slots[0] = Some(gx.into_dyn());
        }
        if wanted[1] {
            let x3 = xv.view().into_dimensionality::<Ix3>().unwrap();
            let mut gy = ndarray::Array3::<S>::zeros((g_, n, k));
            for gi in 0..g_ {
                let o = g3
                    .index_axis(Axis(0), gi)
                    .t()
                    .dot(&x3.index_axis(Axis(0), gi));
                gy.index_axis_mut(Axis(0), gi).assign(&o);
            }
            slots[1] = Some(gy.into_dyn());
        }
    })
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

fn im2col<S: Scalar>(
    x: &ArrayView3<S>, // (Cin, H, W)
    col: &mut Array2<S>, // (Cin*kh*kw, H*W)
    kh: usize,
    kw: usize,
    pad: usize,
) {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    col.fill(S::ZERO);
    for ci in 0..cin {
        for a in 0..kh {
            for b in 0..kw {
                let row_idx = (ci * kh + a) * kw + b;
                let i_lo = pad.saturating_sub(a);
                let i_hi = (h + pad).saturating_sub(a).min(h);
                let j_lo = pad.saturating_sub(b);
                let j_hi = (w + pad).saturating_sub(b).min(w);
                if i_lo >= i_hi || j_lo >= j_hi {
                    continue;
                }
                let mut row = col
                    .row_mut(row_idx)
                    .into_shape_with_order((h, w))
                    .unwrap();
                let src = x.slice(s![
                    ci,
                    (i_lo + a - pad)..(i_hi + a - pad),
                    (j_lo + b - pad)..(j_hi + b - pad)
                ]);
                row.slice_mut(s![i_lo..i_hi, j_lo..j_hi]).assign(&src);
            }
        }
    }
}

fn col2im<S: Scalar>(
    gcol: &Array2<S>, // (Cin*kh*kw, H*W)
    gx: &mut ArrayViewMut3<S>, // (Cin, H, W), accumulated into
    kh: usize,
    kw: usize,
    pad: usize,
) {
    let (cin, h, w) = (gx.shape()[0], gx.shape()[1], gx.shape()[2]);
    for ci in 0..cin {
        for a in 0..kh {
            for b in 0..kw {
                let row_idx = (ci * kh + a) * kw + b;
                let i_lo = pad.saturating_sub(a);
                let i_hi = (h + pad).saturating_sub(a).min(h);
                let j_lo = pad.saturating_sub(b);
                let j_hi = (w + pad).saturating_sub(b).min(w);
                if i_lo >= i_hi || j_lo >= j_hi {
                    continue;
                }
                let row = gcol.row(row_idx).into_shape_with_order((h, w)).unwrap();
                let mut dst = gx.slice_mut(s![
                    ci,
                    (i_lo + a - pad)..(i_hi + a - pad),
                    (j_lo + b - pad)..(j_hi + b - pad)
                ]);
                dst += &row.slice(s![i_lo..i_hi, j_lo..j_hi]);
            }
        }
    }
}

fn conv2d_fwd<S: Scalar>(x: &ArrayD<S>, w: &ArrayD<S>, pad: usize) -> ArrayD<S> {
    let (n, cin, h, wd) = dims4(x.shape());
    let (cout, cin2, kh, kw) = dims4(w.shape());
    assert_eq!(cin, cin2, "conv2d channel mismatch");
    assert_eq!(pad, kh / 2, "conv2d is same-padded");
    assert_eq!(kh, kw, "square kernels only");
    let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
    let wmat = w
        .view()
        .into_shape_with_order((cout, cin * kh * kw))
        .unwrap();
    let hw = h * wd;
    let mut out = ndarray::Array4::<S>::zeros((n, cout, h, wd));
    if kh == 1 {
        for ni in 0..n {
            let xn = x4
                .index_axis(Axis(0), ni)
                .into_shape_with_order((cin, hw))
                .unwrap();
            let on = wmat.dot(&xn);
            out.index_axis_mut(Axis(0), ni)
                .into_shape_with_order((cout, hw))
                .unwrap()
                .assign(&on);
        }
    } else {
        let mut col = Array2::<S>::zeros((cin * kh * kw, hw));
        for ni in 0..n {
            im2col(&x4.index_axis(Axis(0), ni), &mut col, kh, kw, pad);
            let on = wmat.dot(&col);
            out.index_axis_mut(Axis(0), ni)
                .into_shape_with_order((cout, hw))
                .unwrap()
                .assign(&on);
        }
    }
    out.into_dyn()
}

/// Same-padded, stride-1 convolution: `(N, Cin, H, W) * (Cout, Cin, k, k)`.
/// Bias is a separate op ([`add_bias_c`]).
pub fn conv2d<S: Scalar>(cx: &Ctx<S>, x: &Var<S>, w: &Var<S>) -> Var<S> {
    let (n, cin, h, wd) = dims4(x.shape());
    let (cout, _, kh, kw) = dims4(w.shape());
    let pad = kh / 2;
    let out = conv2d_fwd(x.value(), w.value(), pad);
    let xv = x.rc();
    let wv = w.rc();
    cx.op(out, &[x, w], move |g, wanted, slots| {
        let hw = h * wd;
        let k = cin * kh * kw;
        let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
        let x4 = xv.view().into_dimensionality::<Ix4>().unwrap();
        let wmat = wv.view().into_shape_with_order((cout, k)).unwrap();
        let mut gw = wanted[1].then(|| Array2::<S>::zeros((cout, k)));
        let mut gx = wanted[0].then(|| ndarray::Array4::<S>::zeros((n, cin, h, wd)));
        if kh == 1 {
            for ni in 0..n {
                let gn = g4
                    .index_axis(Axis(0), ni)
                    .into_shape_with_order((cout, hw))
                    .unwrap();
                if let Some(gw) = gw.as_mut() {
                    let xn = x4
                        .index_axis(Axis(0), ni)
                        .into_shape_with_order((cin, hw))
                        .unwrap();
                    general_mat_mul(S::ONE, &gn, &xn.t(), S::ONE, &mut gw.view_mut());
                }
                if let Some(gx) = gx.as_mut() {
                    let gxn = wmat.t().dot(&gn);
                    gx.index_axis_mut(Axis(0), ni)
                        .into_shape_with_order((cin, hw))
                        .unwrap()
                        .assign(&gxn);
                }
            }
        } else {
            let mut col = Array2::<S>::zeros((k, hw));
            for ni in 0..n {
                let gn = g4
                    .index_axis(Axis(0), ni)
                    .into_shape_with_order((cout, hw))
                    .unwrap();
                if gw.is_some() || gx.is_some() {
                    im2col(&x4.index_axis(Axis(0), ni), &mut col, kh, kw, pad);
                }
                if let Some(gw) = gw.as_mut() {
                    general_mat_mul(S::ONE, &gn, &col.t(), S::ONE, &mut gw.view_mut());
                }
                if let Some(gx) = gx.as_mut() {
                    let gcol = wmat.t().dot(&gn);
                    col2im(
                        &gcol,
                        &mut gx.index_axis_mut(Axis(0), ni),
                        kh,
                        kw,
                        pad,
                    );
                }
            }
        }
        if let Some(gx) = gx {
            slots[0] = Some(gx.into_dyn());
        }
        if let Some(gw) = gw {
            slots[1] = Some(
                gw.into_shape_with_order((cout, cin, kh, kw))
                    .unwrap()
                    .into_dyn(),
            );
        }
    })
}

fn dw_pad<S: Scalar>(xc: &ArrayView2<S>, pad: usize) -> Array2<S> {
    let (h, w) = (xc.shape()[0], xc.shape()[1]);
    let mut p = Array2::<S>::zeros((h + 2 * pad, w + 2 * pad));
    p.slice_mut(s![pad..pad + h, pad..pad + w]).assign(xc);
    p
}

/// Depthwise same-padded, stride-1 convolution:
/// `(N, C, H, W) * (C, k, k)`; channel `c` of the input convolves only
/// with kernel `c`.
pub fn dwconv2d<S: Scalar>(cx: &Ctx<S>, x: &Var<S>, w: &Var<S>) -> Var<S> {
    let (n, c, h, wd) = dims4(x.shape());
    let ws = w.shape();
    assert_eq!(ws.len(), 3, "depthwise kernel is (C, k, k)");
    assert_eq!(ws[0], c, "depthwise channel mismatch");
    let (kh, kw) = (ws[1], ws[2]);
    assert_eq!(kh, kw, "square kernels only");
    let pad = kh / 2;
    let x4 = x.value().view().into_dimensionality::<Ix4>().unwrap();
    let w3 = w.value().view().into_dimensionality::<Ix3>().unwrap();
    let mut out = ndarray::Array4::<S>::zeros((n, c, h, wd));
    for ni in 0..n {
        for ci in 0..c {
            let xp = dw_pad(&x4.slice(s![ni, ci, .., ..]), pad);
            let mut oc = out.slice_mut(s![ni, ci, .., ..]);
            for a in 0..kh {
                for b in 0..kw {
                    oc.scaled_add(w3[[ci, a, b]], &xp.slice(s![a..a + h, b..b + wd]));
                }
            }
        }
    }
    let xv = x.rc();
    let wv = w.rc();
    cx.op(out.into_dyn(), &[x, w], move |g, wanted, slots| {
        let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
        let x4 = xv.view().into_dimensionality::<Ix4>().unwrap();
        let w3 = wv.view().into_dimensionality::<Ix3>().unwrap();
        let mut gx = wanted[0].then(|| ndarray::Array4::<S>::zeros((n, c, h, wd)));
        let mut gwk = wanted[1].then(|| ndarray::Array3::<S>::zeros((c, kh, kw)));
        for ni in 0..n {
            for ci in 0..c {
                // Pad the output gradient once; both input and kernel
                // gradients read shifted views of it or of the input.
                let gp = dw_pad(&g4.slice(s![ni, ci, .., ..]), pad);
                if let Some(gx) = gx.as_mut() {
                    let mut gc = gx.slice_mut(s![ni, ci, .., ..]);
                    for a in 0..kh {
                        for b in 0..kw {
                            // d x[i, j] sums w[a, b] * g[i - a + pad, j - b + pad]
                            gc.scaled_add(
                                w3[[ci, a, b]],
                                &gp.slice(s![
                                    (2 * pad - a)..(2 * pad - a + h),
                                    (2 * pad - b)..(2 * pad - b + wd)
                                ]),
                            );
                        }
                    }
                }
                if let Some(gwk) = gwk.as_mut() {
                    let xp = dw_pad(&x4.slice(s![ni, ci, .., ..]), pad);
                    let gc = g4.slice(s![ni, ci, .., ..]);
                    for a in 0..kh {
                        for b in 0..kw {
                            let xs = xp.slice(s![a..a + h, b..b + wd]);
                            let mut acc = S::ZERO;
                            ndarray::Zip::from(&gc).and(&xs).for_each(|&gv, &xv_| {
                                acc += gv * xv_;
                            });
                            gwk[[ci, a, b]] += acc;
                        }
                    }
                }
            }
        }
        if let Some(gx) = gx {
            slots[0] = Some(gx.into_dyn());
        }
        if let Some(gwk) = gwk {
            slots[1] = Some(gwk.into_dyn());
        }
    })
}

// ---------------------------------------------------------------------------
// Resampling and padding
// ---------------------------------------------------------------------------

/// `(N, C, H, W) -> (N, C*r^2, H/r, W/r)`; channel `c*r^2 + a*r + b` of the
/// output holds input channel `c` at sub-pixel offset `(a, b)`.
pub fn pixel_unshuffle_arr<S: Scalar>(x: &ArrayD<S>, r: usize) -> ArrayD<S> {
    let (n, c, h, w) = dims4(x.shape());
    assert!(h % r == 0 && w % r == 0, "spatial dims not divisible by {r}");
    let mut out = ArrayD::zeros(IxDyn(&[n, c * r * r, h / r, w / r]));
    for a in 0..r {
        for b in 0..r {
            out.slice_mut(s![.., (a * r + b)..; r * r, .., ..])
                .assign(&x.slice(s![.., .., a..; r, b..; r]));
        }
    }
    out
}

/// Inverse of [`pixel_unshuffle_arr`].
pub fn pixel_shuffle_arr<S: Scalar>(x: &ArrayD<S>, r: usize) -> ArrayD<S> {
    let (n, c, h, w) = dims4(x.shape());
    assert_eq!(c % (r * r), 0, "channels not divisible by {}", r * r);
    let mut out = ArrayD::zeros(IxDyn(&[n, c / (r * r), h * r, w * r]));
    for a in 0..r {
        for b in 0..r {
            out.slice_mut(s![.., .., a..; r, b..; r])
                .assign(&x.slice(s![.., (a * r + b)..; r * r, .., ..]));
        }
    }
    out
}

pub fn pixel_unshuffle<S: Scalar>(cx: &Ctx<S>, x: &Var<S>, r: usize) -> Var<S> {
    let out = pixel_unshuffle_arr(x.value(), r);
    cx.op(out, &[x], move |g, wanted, slots| {
        if wanted[0] {
            slots[0] = Some(pixel_shuffle_arr(g, r));
        }
    })
}

pub fn pixel_shuffle<S: Scalar>(cx: &Ctx<S>, x: &Var<S>, r: usize) -> Var<S> {
    let out = pixel_shuffle_arr(x.value(), r);
    cx.op(out, &[x], move |g, wanted, slots| {
        if wanted[0] {
            slots[0] = Some(pixel_unshuffle_arr(g, r));
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    /// Edge replication.
    Replicate,
    /// Mirror without repeating the edge sample; requires pad < dim.
    Reflect,
}

/// Maps an output index to its source index, or `None` for zero padding.
fn pad_src(i: isize, n: usize, mode: PadMode) -> Option<usize> {
    let nn = n as isize;
    match mode {
        PadMode::Zero => (0..nn).contains(&i).then_some(i as usize),
        PadMode::Replicate => Some(i.clamp(0, nn - 1) as usize),
        PadMode::Reflect => {
            let j = if i < 0 {
                -i
            } else if i >= nn {
                2 * (nn - 1) - i
            } else {
                i
            };
            assert!((0..nn).contains(&j), "reflect pad wider than the axis");
            Some(j as usize)
        }
    }
}

/// Spatial padding of `(N, C, H, W)`; `pads = [top, bottom, left, right]`.
pub fn pad2d<S: Scalar>(cx: &Ctx<S>, x: &Var<S>, pads: [usize; 4], mode: PadMode) -> Var<S> {
    let (n, c, h, w) = dims4(x.shape());
    let [pt, pb, pl, pr] = pads;
    let (oh, ow) = (h + pt + pb, w + pl + pr);
    let row_src: Vec<Option<usize>> = (0..oh)
        .map(|i| pad_src(i as isize - pt as isize, h, mode))
        .collect();
    let col_src: Vec<Option<usize>> = (0..ow)
        .map(|j| pad_src(j as isize - pl as isize, w, mode))
        .collect();
    let x4 = x.value().view().into_dimensionality::<Ix4>().unwrap();
    let mut out = ndarray::Array4::<S>::zeros((n, c, oh, ow));
    for ni in 0..n {
        for ci in 0..c {
            let src = x4.slice(s![ni, ci, .., ..]);
            let mut dst = out.slice_mut(s![ni, ci, .., ..]);
            for (i, rs) in row_src.iter().enumerate() {
                let Some(si) = rs else { continue };
                for (j, cs) in col_src.iter().enumerate() {
                    if let Some(sj) = cs {
                        dst[[i, j]] = src[[*si, *sj]];
                    }
                }
            }
        }
    }
    cx.op(out.into_dyn(), &[x], move |g, wanted, slots| {
        if wanted[0] {
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
            let mut gx = ndarray::Array4::<S>::zeros((n, c, h, w));
            for ni in 0..n {
                for ci in 0..c {
                    let gsrc = g4.slice(s![ni, ci, .., ..]);
                    let mut dst = gx.slice_mut(s![ni, ci, .., ..]);
                    for (i, rs) in row_src.iter().enumerate() {
                        let Some(si) = rs else { continue };
                        for (j, cs) in col_src.iter().enumerate() {
                            if let Some(sj) = cs {
                                dst[[*si, *sj]] += gsrc[[i, j]];
                            }
                        }
                    }
                }
            }
            slots[0] = Some(gx.into_dyn());
        }
    })
}

/// Spatial crop of `(N, C, H, W)` to `(oh, ow)` starting at `(top, left)`.
pub fn crop2d<S: Scalar>(cx: &Ctx<S>, x: &Var<S>, top: usize, left: usize, oh: usize, ow: usize) -> Var<S> {
    let (_n, _c, h, w) = dims4(x.shape());
    assert!(top + oh <= h && left + ow <= w, "crop out of range");
    let out = x
        .value()
        .slice(s![.., .., top..top + oh, left..left + ow])
        .to_owned()
        .into_dyn();
    let shape = x.value().raw_dim();
    cx.op(out, &[x], move |g, wanted, slots| {
        if wanted[0] {
            let mut gx = ArrayD::zeros(shape.clone());
            gx.slice_mut(s![.., .., top..top + oh, left..left + ow])
                .assign(g);
            slots[0] = Some(gx);
        }
    })
}

// ---------------------------------------------------------------------------
// Window gather/scatter for spatial attention
// ---------------------------------------------------------------------------

/// Geometry shared by the window ops.
#[derive(Clone, Copy, Debug)]
pub struct WindowGrid {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub win: usize,
    pub heads: usize,
}

impl WindowGrid {
    pub fn of(shape: &[usize], win: usize, heads: usize) -> WindowGrid {
        let (n, c, h, w) = dims4(shape);
        assert!(h % win == 0 && w % win == 0, "dims must be window-divisible");
        assert_eq!(c % heads, 0, "channels not divisible by heads");
        WindowGrid { n, c, h, w, win, heads }
    }

    pub fn blocks(&self) -> usize {
        self.n * (self.h / self.win) * (self.w / self.win) * self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.c / self.heads
    }
}

fn window_gather<S: Scalar>(x: &ArrayD<S>, grid: &WindowGrid) -> ArrayD<S> {
    let WindowGrid { n, c, h, w, win, heads } = *grid;
    let (nh, nw, hd) = (h / win, w / win, c / heads);
    let mut out = ArrayD::zeros(IxDyn(&[grid.blocks(), win * win, hd]));
    let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
    let mut o3 = out.view_mut().into_dimensionality::<Ix3>().unwrap();
    for ni in 0..n {
        for wi in 0..nh {
            for wj in 0..nw {
                for he in 0..heads {
                    let blk = (((ni * nh + wi) * nw + wj) * heads) + he;
                    for a in 0..win {
                        for b in 0..win {
                            let t = a * win + b;
                            for j in 0..hd {
                                o3[[blk, t, j]] =
                                    x4[[ni, he * hd + j, wi * win + a, wj * win + b]];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn window_scatter<S: Scalar>(t: &ArrayD<S>, grid: &WindowGrid) -> ArrayD<S> {
    let WindowGrid { n, c, h, w, win, heads } = *grid;
    let (nh, nw, hd) = (h / win, w / win, c / heads);
    let mut out = ArrayD::zeros(IxDyn(&[n, c, h, w]));
    let t3 = t.view().into_dimensionality::<Ix3>().unwrap();
    let mut o4 = out.view_mut().into_dimensionality::<Ix4>().unwrap();
    for ni in 0..n {
        for wi in 0..nh {
            for wj in 0..nw {
                for he in 0..heads {
                    let blk = (((ni * nh + wi) * nw + wj) * heads) + he;
                    for a in 0..win {
                        for b in 0..win {
                            let tok = a * win + b;
                            for j in 0..hd {
                                o4[[ni, he * hd + j, wi * win + a, wj * win + b]] =
                                    t3[[blk, tok, j]];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Partitions `(N, C, H, W)` into non-overlapping `win x win` windows per
/// head: output `(N*nwin*heads, win^2, C/heads)`.
pub fn window_split<S: Scalar>(cx: &Ctx<S>, x: &Var<S>, win: usize, heads: usize) -> Var<S> {
    let grid = WindowGrid::of(x.shape(), win, heads);
    let out = window_gather(x.value(), &grid);
    cx.op(out, &[x], move |g, wanted, slots| {
        if wanted[0] {
            slots[0] = Some(window_scatter(g, &grid));
        }
    })
}

/// Inverse of [`window_split`]: tokens back to `(N, C, H, W)`.
pub fn window_merge<S: Scalar>(cx: &Ctx<S>, t: &Var<S>, grid: WindowGrid) -> Var<S> {
    assert_eq!(
        t.shape(),
        [grid.blocks(), grid.win * grid.win, grid.head_dim()],
        "window token shape mismatch"
    );
    let out = window_scatter(t.value(), &grid);
    cx.op(out, &[t], move |g, wanted, slots| {
        if wanted[0] {
            slots[0] = Some(window_gather(g, &grid));
        }
    })
}

/// Gathers enlarged `we x we` windows centered on each `win x win` query
/// window (stride `win`), zero-padding outside the feature map: output
/// `(N*nwin*heads, we^2, C/heads)`. Adjacent enlarged windows overlap, so
/// the backward pass accumulates.
pub fn overlap_split<S: Scalar>(
    cx: &Ctx<S>,
    x: &Var<S>,
    win: usize,
    we: usize,
    heads: usize,
) -> Var<S> {
    assert!(we >= win, "enlarged window smaller than query window");
    let grid = WindowGrid::of(x.shape(), win, heads);
    let pad_lo = (we - win) / 2;
    let WindowGrid { n, c, h, w, .. } = grid;
    let (nh, nw, hd) = (h / win, w / win, c / heads);
    let x4v = x.value().view().into_dimensionality::<Ix4>().unwrap();
    let mut out = ArrayD::zeros(IxDyn(&[grid.blocks(), we * we, hd]));
    {
        let mut o3 = out.view_mut().into_dimensionality::<Ix3>().unwrap();
        for ni in 0..n {
            for wi in 0..nh {
                for wj in 0..nw {
                    for he in 0..heads {
                        let blk = (((ni * nh + wi) * nw + wj) * heads) + he;
                        for a in 0..we {
                            let row = (wi * win + a) as isize - pad_lo as isize;
                            if row < 0 || row >= h as isize {
                                continue;
                            }
                            for b in 0..we {
                                let col = (wj * win + b) as isize - pad_lo as isize;
                                if col < 0 || col >= w as isize {
                                    continue;
                                }
                                let tok = a * we + b;
                                for j in 0..hd {
                                    o3[[blk, tok, j]] =
                                        x4v[[ni, he * hd + j, row as usize, col as usize]];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    cx.op(out, &[x], move |g, wanted, slots| {
        if wanted[0] {
            let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
            let mut gx = ndarray::Array4::<S>::zeros((n, c, h, w));
            for ni in 0..n {
                for wi in 0..nh {
                    for wj in 0..nw {
                        for he in 0..heads {
                            let blk = (((ni * nh + wi) * nw + wj) * heads) + he;
                            for a in 0..we {
                                let row = (wi * win + a) as isize - pad_lo as isize;
                                if row < 0 || row >= h as isize {
                                    continue;
                                }
                                for b in 0..we {
                                    let col = (wj * win + b) as isize - pad_lo as isize;
                                    if col < 0 || col >= w as isize {
                                        continue;
                                    }
                                    let tok = a * we + b;
                                    for j in 0..hd {
                                        gx[[ni, he * hd + j, row as usize, col as usize]] +=
                                            g3[[blk, tok, j]];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            slots[0] = Some(gx.into_dyn());
        }
    })
}
