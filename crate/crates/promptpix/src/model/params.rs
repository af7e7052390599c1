//! Named parameter storage shared by every model module.
//!
//! Parameters are registered once at model build time in a deterministic
//! order; initial values depend only on `(init_seed, parameter name)`, so a
//! rebuilt model is bit-identical regardless of registration order changes
//! elsewhere. For each training step the store is projected onto a tape as
//! leaf variables, and gradients are read back per parameter.

use std::collections::HashMap;
use std::rc::Rc;

use ndarray::ArrayD;
use rand::Rng;

use crate::seed::{derive, rng};
use crate::tensor::{Ctx, Grads, Scalar, Var};
use crate::{Error, Result};

/// Index of one parameter inside a `ParamStore`, stable for the lifetime of
/// the model that registered it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// How a parameter is filled at registration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Fan-in uniform: U(-sqrt(3/fan_in), sqrt(3/fan_in)), i.e. unit gain
    /// (Var = 1/fan_in). Every attention/FFN branch is LayerNorm-led, so a
    /// neutral gain keeps activations at the input scale instead of
    /// compounding through the residual stream.
    FanInUniform { fan_in: usize },
}

#[derive(Clone, Debug)]
pub struct ParamStore<S: Scalar> {
    names: Vec<String>,
    values: Vec<Rc<ArrayD<S>>>,
    index: HashMap<String, usize>,
    init_seed: u64,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new(init_seed: u64) -> Self {
        ParamStore { names: Vec::new(), values: Vec::new(), index: HashMap::new(), init_seed }
    }

    /// Registers a parameter. Names must be unique; they double as the
    /// checkpoint keys and the cost-accounting bucket keys.
    pub fn register(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "parameter {name} registered twice"
        );
        let n: usize = shape.iter().product();
        let data: Vec<S> = match init {
            Init::Zeros => vec![S::ZERO; n],
            Init::Ones => vec![S::ONE; n],
            Init::FanInUniform { fan_in } => {
                let bound = (3.0 / fan_in.max(1) as f64).sqrt();
                let mut r = rng(derive(self.init_seed, name, 0));
                (0..n).map(|_| S::from_f64(r.gen_range(-bound..bound))).collect()
            }
        };
        let arr = ArrayD::from_shape_vec(shape.to_vec(), data).expect("shape/len mismatch");
        let id = ParamId(self.values.len());
        self.names.push(name.to_string());
        self.values.push(Rc::new(arr));
        self.index.insert(name.to_string(), id.0);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<S> {
        &self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: ArrayD<S>) {
        assert_eq!(self.values[id.0].shape(), value.shape(), "shape change for {}", self.names[id.0]);
        self.values[id.0] = Rc::new(value);
    }

    /// Multiplies one parameter in place. Model builders use this for
    /// depth-aware damping of residual-branch output projections.
    pub fn rescale(&mut self, id: ParamId, factor: f64) {
        let f = S::from_f64(factor);
        self.values[id.0] = Rc::new(self.values[id.0].mapv(|v| v * f));
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &ArrayD<S>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v.as_ref()))
    }

    /// Total scalar count, optionally restricted by a name filter.
    pub fn n_scalars(&self, filter: impl Fn(&str) -> bool) -> usize {
        self.iter().filter(|(_, n, _)| filter(n)).map(|(_, _, v)| v.len()).sum()
    }

    /// Projects every parameter onto the context as a leaf variable.
    pub fn leaves<'t>(&self, cx: &Ctx<'t, S>) -> Leaves<S> {
        Leaves { vars: self.values.iter().map(|v| cx.leaf_rc(Rc::clone(v))).collect() }
    }

    /// All values in id order (cloned), e.g. as gradient-check inputs.
    pub fn export(&self) -> Vec<ArrayD<S>> {
        self.values.iter().map(|v| v.as_ref().clone()).collect()
    }

    /// Rebuilds this store with every value converted scalar-by-scalar.
    /// Used to run an f32 model's exact structure in f64 gradient checks.
    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|v| Rc::new(v.mapv(|x| T::from_f64(x.to_f64()))))
                .collect(),
            index: self.index.clone(),
            init_seed: self.init_seed,
        }
    }

    /// Replaces values from a named map (checkpoint load). Every registered
    /// parameter must be present with the right shape.
    pub fn load_named(&mut self, named: &HashMap<String, ArrayD<S>>) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let v = named.get(name).ok_or_else(|| {
                Error::checkpoint(format!("missing parameter {name} in checkpoint"))
            })?;
            if v.shape() != self.values[i].shape() {
                return Err(Error::checkpoint(format!(
                    "parameter {name} shape {:?} does not match model {:?}",
                    v.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = Rc::new(v.clone());
        }
        Ok(())
    }
}

/// The per-tape projection of a `ParamStore`: one leaf `Var` per parameter.
pub struct Leaves<S: Scalar> {
    vars: Vec<Var<S>>,
}

impl<S: Scalar> Leaves<S> {
    /// Wraps externally created variables (one per parameter, in id order).
    /// Gradient checks use this to probe parameters as ordinary inputs.
    pub fn from_vars(vars: Vec<Var<S>>) -> Leaves<S> {
        Leaves { vars }
    }

    pub fn var(&self, id: ParamId) -> &Var<S> {
        &self.vars[id.0]
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Gradient of one parameter after a backward pass, if it received any.
    pub fn grad<'g>(&self, grads: &'g Grads<S>, id: ParamId) -> Option<&'g ArrayD<S>> {
        grads.of(&self.vars[id.0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn init_depends_on_name_not_order() {
        let mut a: ParamStore<f32> = ParamStore::new(7);
        let ka = a.register("w1", &[4, 3], Init::FanInUniform { fan_in: 3 });
        a.register("w2", &[2, 2], Init::FanInUniform { fan_in: 4 });

        let mut b: ParamStore<f32> = ParamStore::new(7);
        b.register("w2", &[2, 2], Init::FanInUniform { fan_in: 4 });
        let kb = b.register("w1", &[4, 3], Init::FanInUniform { fan_in: 3 });

        assert_eq!(a.value(ka), b.value(kb));
        assert_ne!(a.value(ka), a.value(a.id_of("w2").unwrap()));
    }

    #[test]
    fn uniform_bound_respected_and_zeros_ones() {
        let mut s: ParamStore<f64> = ParamStore::new(0);
        let w = s.register("w", &[64, 64], Init::FanInUniform { fan_in: 64 });
        let bound = (3.0f64 / 64.0).sqrt();
        assert!(s.value(w).iter().all(|v| v.abs() < bound));
        let z = s.register("z", &[3], Init::Zeros);
        let o = s.register("o", &[3], Init::Ones);
        assert!(s.value(z).iter().all(|&v| v == 0.0));
        assert!(s.value(o).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn leaves_receive_gradients() {
        let mut s: ParamStore<f64> = ParamStore::new(1);
        let w = s.register("w", &[2, 2], Init::Ones);
        let tape = Tape::new();
        let cx = Ctx::with_tape(&tape);
        let leaves = s.leaves(&cx);
        let y = crate::tensor::ops::mean_all(&cx, leaves.var(w));
        let grads = tape.backward(&y);
        let g = leaves.grad(&grads, w).unwrap();
        assert!(g.iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn rescale_multiplies_in_place() {
        let mut s: ParamStore<f32> = ParamStore::new(0);
        let w = s.register("w", &[4], Init::Ones);
        s.rescale(w, 0.25);
        assert!(s.value(w).iter().all(|&v| v == 0.25));
    }

    #[test]
    fn cast_preserves_values() {
        let mut s: ParamStore<f32> = ParamStore::new(3);
        let w = s.register("w", &[5], Init::FanInUniform { fan_in: 5 });
        let t: ParamStore<f64> = s.cast();
        for (a, b) in s.value(w).iter().zip(t.value(ParamId(0)).iter()) {
            assert_eq!(*a as f64, *b);
        }
    }

    #[test]
    fn load_named_checks_presence_and_shape() {
        let mut s: ParamStore<f32> = ParamStore::new(0);
        s.register("w", &[2], Init::Zeros);
        let mut named = HashMap::new();
        named.insert("w".to_string(), ArrayD::from_shape_vec(vec![3], vec![0.0; 3]).unwrap());
        assert!(s.load_named(&named).is_err());
        named.insert("w".to_string(), ArrayD::from_shape_vec(vec![2], vec![1.0, 2.0]).unwrap());
        s.load_named(&named).unwrap();
        assert_eq!(s.value(ParamId(0)).as_slice().unwrap(), &[1.0, 2.0]);
        let empty = HashMap::new();
        assert!(s.load_named(&empty).is_err());
    }
}
