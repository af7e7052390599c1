//! The tape, tracked variables, and the backward pass.

use super::Scalar;
use ndarray::ArrayD;
use std::cell::RefCell;
use std::rc::Rc;

pub type NodeId = usize;

/// Backward function of a node: receives the output gradient and a sink
/// accepting `(parent_node, contribution)` pairs.
type BackwardFn<S> = Box<dyn Fn(&ArrayD<S>, &mut dyn FnMut(NodeId, ArrayD<S>))>;

struct Node<S> {
    /// `None` marks a leaf: gradients accumulate there and are kept.
    backward: Option<BackwardFn<S>>,
}

/// Reverse-mode tape. Ops append nodes during the forward pass.
#[derive(Default)]
pub struct Tape<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
}

/// A tensor tracked by at most one tape. Cloning is cheap: the payload is
/// reference-counted and immutable once built.
#[derive(Clone)]
pub struct Var<S: Scalar> {
    value: Rc<ArrayD<S>>,
    node: Option<NodeId>,
}

impl<S: Scalar> Var<S> {
    pub fn constant(value: ArrayD<S>) -> Self {
        Var { value: Rc::new(value), node: None }
    }

    pub fn value(&self) -> &ArrayD<S> {
        &self.value
    }

    pub fn rc(&self) -> Rc<ArrayD<S>> {
        Rc::clone(&self.value)
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    /// The same value, severed from the tape.
    pub fn detach(&self) -> Var<S> {
        Var { value: self.rc(), node: None }
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, backward: Option<BackwardFn<S>>) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { backward });
        nodes.len() - 1
    }

    /// Runs the backward pass from `root`, which is seeded with ones.
    ///
    /// Interior gradients are freed as soon as their node has been
    /// processed; leaf gradients are kept and returned.
    pub fn backward(&self, root: &Var<S>) -> Grads<S> {
        let root_id = root.node.expect("backward requires a tape-tracked variable");
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<ArrayD<S>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root_id] = Some(ArrayD::ones(root.value.raw_dim()));
        for id in (0..=root_id).rev() {
            if grads[id].is_none() {
                continue;
            }
            let Some(backward) = nodes[id].backward.as_ref() else {
                continue; // leaf: keep its gradient
            };
            let g = grads[id].take().expect("checked above");
            backward(&g, &mut |pid, contrib| {
                debug_assert!(pid < id, "node {pid} is not a parent of {id}");
                match &mut grads[pid] {
                    Some(acc) => *acc += &contrib,
                    slot @ None => *slot = Some(contrib),
                }
            });
        }
        Grads { grads }
    }
}

/// Leaf gradients left over after a backward pass.
pub struct Grads<S: Scalar> {
    grads: Vec<Option<ArrayD<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn of(&self, v: &Var<S>) -> Option<&ArrayD<S>> {
        v.node.and_then(|n| self.by_node(n))
    }

    pub fn by_node(&self, node: NodeId) -> Option<&ArrayD<S>> {
        self.grads.get(node).and_then(|g| g.as_ref())
    }

    pub fn take_node(&mut self, node: NodeId) -> Option<ArrayD<S>> {
        self.grads.get_mut(node).and_then(|g| g.take())
    }
}

/// Forward-pass context: either records onto a tape or runs gradient-free.
///
/// In gradient-free mode ops skip node construction entirely, so closures
/// and their captured `Rc`s are never allocated and activations free as
/// soon as the last `Var` referencing them drops.
pub struct Ctx<'t, S: Scalar> {
    tape: Option<&'t Tape<S>>,
}

impl<'t, S: Scalar> Ctx<'t, S> {
    pub fn with_tape(tape: &'t Tape<S>) -> Self {
        Ctx { tape: Some(tape) }
    }

    pub fn no_grad() -> Ctx<'static, S> {
        Ctx { tape: None }
    }

    pub fn grad_enabled(&self) -> bool {
        self.tape.is_some()
    }

    /// A gradient-accumulating input (parameters, or inputs under check).
    pub fn leaf(&self, value: ArrayD<S>) -> Var<S> {
        self.leaf_rc(Rc::new(value))
    }

    pub fn leaf_rc(&self, value: Rc<ArrayD<S>>) -> Var<S> {
        let node = self.tape.map(|t| t.push(None));
        Var { value, node }
    }

    /// A value gradients never flow into.
    pub fn constant(&self, value: ArrayD<S>) -> Var<S> {
        Var::constant(value)
    }

    /// Records an op node. `parents` lists the input vars in slot order;
    /// `backward(g, wanted, slots)` fills `slots[i]` with the gradient
    /// contribution for parent `i` whenever `wanted[i]` is true.
    pub(crate) fn op<F>(&self, value: ArrayD<S>, parents: &[&Var<S>], backward: F) -> Var<S>
    where
        F: Fn(&ArrayD<S>, &[bool], &mut [Option<ArrayD<S>>]) + 'static,
    {
        self.op_shared(Rc::new(value), parents, backward)
    }

    /// [`Ctx::op`] for values already behind an `Rc`, so a backward closure
    /// can capture the op's own output without copying it.
    pub(crate) fn op_shared<F>(
        &self,
        value: Rc<ArrayD<S>>,
        parents: &[&Var<S>],
        backward: F,
    ) -> Var<S>
    where
        F: Fn(&ArrayD<S>, &[bool], &mut [Option<ArrayD<S>>]) + 'static,
    {
        let Some(tape) = self.tape else {
            return Var { value, node: None };
        };
        let pids: Vec<Option<NodeId>> = parents.iter().map(|v| v.node).collect();
        if pids.iter().all(|p| p.is_none()) {
            return Var { value, node: None };
        }
        let wanted: Vec<bool> = pids.iter().map(|p| p.is_some()).collect();
        let n = pids.len();
        let bk: BackwardFn<S> = Box::new(move |g, push| {
            let mut slots: Vec<Option<ArrayD<S>>> = (0..n).map(|_| None).collect();
            backward(g, &wanted, &mut slots);
            for (i, slot) in slots.into_iter().enumerate() {
                match (pids[i], slot) {
                    (Some(pid), Some(contrib)) => push(pid, contrib),
                    (Some(_), None) => panic!("backward produced no gradient for wanted parent {i}"),
                    _ => {}
                }
            }
        });
        Var { value, node: Some(tape.push(Some(bk))) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;
    use ndarray::{ArrayD, IxDyn};

    fn arr(vals: &[f64]) -> ArrayD<f64> {
        ArrayD::from_shape_vec(IxDyn(&[vals.len()]), vals.to_vec()).unwrap()
    }

    #[test]
    fn backward_through_shared_subexpression_accumulates() {
        // y = (a + a) + a  =>  dy/da = 3 per element.
        let tape = Tape::new();
        let cx = Ctx::with_tape(&tape);
        let a = cx.leaf(arr(&[1.0, -2.0]));
        let s = ops::add(&cx, &a, &a);
        let y = ops::add(&cx, &s, &a);
        let loss = ops::mean_all(&cx, &y);
        let grads = tape.backward(&loss);
        let ga = grads.of(&a).unwrap();
        assert_eq!(ga.as_slice().unwrap(), &[1.5, 1.5]); // 3 / n with n = 2
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let cx = Ctx::with_tape(&tape);
        let a = cx.leaf(arr(&[2.0]));
        let c = cx.constant(arr(&[5.0]));
        let y = ops::mul(&cx, &a, &c);
        let loss = ops::mean_all(&cx, &y);
        let grads = tape.backward(&loss);
        assert!(grads.of(&a).is_some());
        assert!(grads.of(&c).is_none());
    }

    #[test]
    fn no_grad_context_tracks_nothing() {
        let cx = Ctx::<f64>::no_grad();
        let a = cx.leaf(arr(&[1.0]));
        let y = ops::add(&cx, &a, &a);
        assert!(y.node().is_none());
        assert!(!cx.grad_enabled());
    }

    #[test]
    fn detach_blocks_gradient_flow() {
        let tape = Tape::new();
        let cx = Ctx::with_tape(&tape);
        let a = cx.leaf(arr(&[3.0]));
        let d = a.detach();
        let y = ops::mul(&cx, &d, &d);
        assert!(y.node().is_none());
    }
}
