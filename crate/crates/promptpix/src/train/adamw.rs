//! Adaptive-moment optimizer with decoupled weight decay.
//!
//! Moments are kept per parameter in store order. The learning rate is
//! passed per update so schedules stay outside the optimizer; everything
//! else (betas, decay, bias-correction counter) is state that checkpoints
//! must capture for exact resumption.

use ndarray::ArrayD;

use crate::model::params::{ParamId, ParamStore};

pub const ADAM_EPS: f64 = 1e-8;

pub struct AdamW {
    pub betas: (f64, f64),
    pub weight_decay: f64,
    /// Completed update count; drives bias correction.
    pub t: u64,
    m: Vec<ArrayD<f32>>,
    v: Vec<ArrayD<f32>>,
}

impl AdamW {
    pub fn new(store: &ParamStore<f32>, betas: (f64, f64), weight_decay: f64) -> AdamW {
        let zeros: Vec<ArrayD<f32>> =
            store.iter().map(|(_, _, val)| ArrayD::zeros(val.raw_dim())).collect();
        AdamW { betas, weight_decay, t: 0, m: zeros.clone(), v: zeros }
    }

    /// Rebuilds the optimizer from checkpointed state. Moment vectors must
    /// be in the same parameter order they were saved in.
    pub fn from_state(
        betas: (f64, f64),
        weight_decay: f64,
        t: u64,
        m: Vec<ArrayD<f32>>,
        v: Vec<ArrayD<f32>>,
    ) -> AdamW {
        assert_eq!(m.len(), v.len(), "moment vectors must pair up");
        AdamW { betas, weight_decay, t, m, v }
    }

    pub fn moments(&self) -> (&[ArrayD<f32>], &[ArrayD<f32>]) {
        (&self.m, &self.v)
    }

    /// One update over the whole store. `grads[i]` pairs with parameter id
    /// `i`; parameters without a gradient are left untouched (their moments
    /// stay zero and no decay is applied, so absent subgraphs cannot drift).
    pub fn apply(&mut self, store: &mut ParamStore<f32>, grads: &[Option<ArrayD<f32>>], lr: f64) {
        assert_eq!(grads.len(), self.m.len(), "gradient count must match parameter count");
        self.t += 1;
        let (b1, b2) = (self.betas.0 as f32, self.betas.1 as f32);
        let bc1 = (1.0 - self.betas.0.powi(self.t as i32)) as f32;
        let bc2 = (1.0 - self.betas.1.powi(self.t as i32)) as f32;
        let (lr, wd, eps) = (lr as f32, self.weight_decay as f32, ADAM_EPS as f32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            debug_assert_eq!(g.shape(), store.value(ParamId(i)).shape());
            self.m[i].zip_mut_with(g, |m, &gv| *m = b1 * *m + (1.0 - b1) * gv);
            self.v[i].zip_mut_with(g, |v, &gv| *v = b2 * *v + (1.0 - b2) * gv * gv);
            let mut p = store.value(ParamId(i)).clone();
            ndarray::Zip::from(&mut p).and(&self.m[i]).and(&self.v[i]).for_each(|p, &m, &v| {
                let step = (m / bc1) / ((v / bc2).sqrt() + eps);
                *p -= lr * (step + wd * *p);
            });
            store.set(ParamId(i), p);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::Init;
    use crate::tensor::ops as t;
    use crate::tensor::{Ctx, Tape};
    use ndarray::IxDyn;

    fn store_with(name: &str, vals: &[f32]) -> (ParamStore<f32>, ParamId) {
        let mut s: ParamStore<f32> = ParamStore::new(0);
        let id = s.register(name, &[vals.len()], Init::Zeros);
        s.set(id, ArrayD::from_shape_vec(IxDyn(&[vals.len()]), vals.to_vec()).unwrap());
        (s, id)
    }

    #[test]
    fn first_update_matches_closed_form() {
        // At t = 1 the bias-corrected moments collapse to mhat = g and
        // vhat = g^2, so the step is lr * (g / (|g| + eps) + wd * p).
        let (mut s, id) = store_with("w", &[1.0, -2.0, 0.5]);
        let mut opt = AdamW::new(&s, (0.9, 0.99), 0.1);
        let g = ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.3f32, -0.2, 0.0]).unwrap();
        opt.apply(&mut s, &[Some(g)], 0.01);
        let p = s.value(id);
        let expect = [
            1.0 - 0.01 * (1.0 + 0.1 * 1.0),
            -2.0 - 0.01 * (-1.0 + 0.1 * -2.0),
            0.5 - 0.01 * (0.0 + 0.1 * 0.5),
        ];
        for (a, e) in p.iter().zip(expect) {
            assert!((a - e).abs() < 1e-5, "got {a}, expected {e}");
        }
        assert_eq!(opt.t, 1);
    }

    #[test]
    fn decay_is_decoupled_from_the_gradient() {
        // A zero gradient produces a zero moment step, so the only movement
        // is the decay term; with decay off the parameter must not move.
        let (mut s, id) = store_with("w", &[2.0]);
        let mut opt = AdamW::new(&s, (0.9, 0.99), 0.5);
        opt.apply(&mut s, &[Some(ArrayD::zeros(IxDyn(&[1])))], 0.1);
        let shrunk = s.value(id)[[0]];
        assert!((shrunk - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-6);

        let (mut s0, id0) = store_with("w", &[2.0]);
        let mut opt0 = AdamW::new(&s0, (0.9, 0.99), 0.0);
        opt0.apply(&mut s0, &[Some(ArrayD::zeros(IxDyn(&[1])))], 0.1);
        assert_eq!(s0.value(id0)[[0]], 2.0);
    }

    #[test]
    fn absent_gradient_leaves_parameter_and_moments_alone() {
        let (mut s, id) = store_with("w", &[3.0, -3.0]);
        let mut opt = AdamW::new(&s, (0.9, 0.99), 0.9);
        opt.apply(&mut s, &[None], 0.5);
        assert_eq!(s.value(id).as_slice().unwrap(), &[3.0, -3.0]);
        assert!(opt.moments().0[0].iter().all(|&m| m == 0.0));
    }

    #[test]
    fn converges_on_a_quadratic() {
        let (mut s, id) = store_with("w", &[4.0, -3.0, 0.0, 7.0]);
        let target = [1.0f32, -1.0, 2.0, -2.0];
        let mut opt = AdamW::new(&s, (0.9, 0.99), 0.0);
        for _ in 0..400 {
            let tape = Tape::new();
            let cx = Ctx::with_tape(&tape);
            let lv = s.leaves(&cx);
            let c = cx.constant(ArrayD::from_shape_vec(IxDyn(&[4]), target.to_vec()).unwrap());
            let d = t::sub(&cx, lv.var(id), &c);
            let loss = t::mean_all(&cx, &t::mul(&cx, &d, &d));
            let grads = tape.backward(&loss);
            let g = lv.grad(&grads, id).unwrap().clone();
            opt.apply(&mut s, &[Some(g)], 0.05);
        }
        for (a, e) in s.value(id).iter().zip(target) {
            assert!((a - e).abs() < 0.05, "got {a}, expected {e}");
        }
    }

    #[test]
    fn state_round_trip_continues_identically() {
        let grad_at = |k: u64| {
            let vals: Vec<f32> = (0..3).map(|i| ((k * 3 + i) as f32 * 0.37).sin()).collect();
            ArrayD::from_shape_vec(IxDyn(&[3]), vals).unwrap()
        };
        let (mut sa, ida) = store_with("w", &[1.0, 2.0, 3.0]);
        let mut a = AdamW::new(&sa, (0.9, 0.99), 1e-2);
        for k in 0..5 {
            a.apply(&mut sa, &[Some(grad_at(k))], 0.02);
        }
        let (m, v) = a.moments();
        let mut b = AdamW::from_state(a.betas, a.weight_decay, a.t, m.to_vec(), v.to_vec());
        let (mut sb, idb) = store_with("w", &[0.0; 3]);
        sb.set(idb, sa.value(ida).clone());
        for k in 5..10 {
            a.apply(&mut sa, &[Some(grad_at(k))], 0.02);
            b.apply(&mut sb, &[Some(grad_at(k))], 0.02);
        }
        assert_eq!(sa.value(ida), sb.value(idb), "restored state must continue bit-identically");
    }
}
