//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] is an append-only arena of recorded operations. Operations on
//! tracked [`Var`]s push a node; operations whose inputs are all constants
//! are evaluated eagerly and never touch a tape. Because nodes are appended in
//! evaluation order, reverse id order is a valid topological order and the
//! backward sweep visits each node once.
//!
//! Backward rules are written in terms of `Var` operations themselves. With
//! `create_graph` the gradient computation is recorded on the same tape, so a
//! gradient can be differentiated again (Hessian-vector products through a
//! flow's log-density). Custom operations provide first-order rules only.
//!
//! Tapes are `Rc`-based and confined to the thread that created them; build a
//! fresh tape per optimization step and drop it after `backward`.

pub mod gradcheck;
mod ops;

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use smallvec::SmallVec;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use ops::CustomOp;
pub(crate) use ops::Op;

struct Input<S> {
    id: Option<usize>,
    value: Tensor<S>,
}

struct Node<S: Real> {
    op: Op<S>,
    inputs: SmallVec<[Input<S>; 2]>,
    output: Tensor<S>,
}

#[derive(Clone)]
pub struct Tape<S: Real = f32> {
    nodes: Rc<RefCell<Vec<Node<S>>>>,
}

impl<S: Real> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> fmt::Debug for Tape<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.len())
    }
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Rc::new(RefCell::new(Vec::new())),
        }
    }

    /// A differentiable leaf holding `value`.
    pub fn leaf(&self, value: Tensor<S>) -> Var<S> {
        let id = self.push(Node {
            op: Op::Leaf,
            inputs: SmallVec::new(),
            output: value.clone(),
        });
        Var {
            value,
            node: Some(NodeRef {
                tape: self.clone(),
                id,
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<S>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    fn same(&self, other: &Self) -> bool {
        Rc::ptr_eq(&self.nodes, &other.nodes)
    }
}

#[derive(Clone)]
struct NodeRef<S: Real> {
    tape: Tape<S>,
    id: usize,
}

/// A tensor value, optionally tracked on a [`Tape`].
#[derive(Clone)]
pub struct Var<S: Real = f32> {
    value: Tensor<S>,
    node: Option<NodeRef<S>>,
}

impl<S: Real> fmt::Debug for Var<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.node {
            Some(n) => write!(f, "Var#{}({:?})", n.id, self.value),
            None => write!(f, "Const({:?})", self.value),
        }
    }
}

impl<S: Real> From<Tensor<S>> for Var<S> {
    fn from(value: Tensor<S>) -> Self {
        Var::constant(value)
    }
}

impl<S: Real> Var<S> {
    pub fn constant(value: Tensor<S>) -> Self {
        Self { value, node: None }
    }

    pub fn scalar(v: S) -> Self {
        Self::constant(Tensor::scalar(v))
    }

    pub fn value(&self) -> &Tensor<S> {
        &self.value
    }

    pub fn into_value(self) -> Tensor<S> {
        self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn item(&self) -> Result<S> {
        self.value.item()
    }

    /// Whether gradients can flow into this value.
    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn detach(&self) -> Self {
        Self::constant(self.value.clone())
    }

    pub fn tape(&self) -> Option<&Tape<S>> {
        self.node.as_ref().map(|n| &n.tape)
    }

    fn id(&self) -> Option<usize> {
        self.node.as_ref().map(|n| n.id)
    }

    pub(crate) fn record(op: Op<S>, inputs: &[&Var<S>], output: Tensor<S>) -> Result<Self> {
        let mut tape: Option<&Tape<S>> = None;
        for v in inputs {
            if let Some(n) = &v.node {
                match tape {
                    None => tape = Some(&n.tape),
                    Some(t) if !t.same(&n.tape) => return Err(Error::DetachedTape),
                    Some(_) => {}
                }
            }
        }
        let Some(tape) = tape else {
            return Ok(Self::constant(output));
        };
        let tape = tape.clone();
        let node = Node {
            op,
            inputs: inputs
                .iter()
                .map(|v| Input {
                    id: v.id(),
                    value: v.value.clone(),
                })
                .collect(),
            output: output.clone(),
        };
        let id = tape.push(node);
        Ok(Self {
            value: output,
            node: Some(NodeRef { tape, id }),
        })
    }
}

/// Gradients of a scalar root with respect to every tracked leaf on its tape.
#[derive(Debug, Clone, Default)]
pub struct Gradients<S: Real = f32> {
    by_leaf: HashMap<usize, Tensor<S>>,
}

impl<S: Real> Gradients<S> {
    /// Total adjoint of `leaf`; `None` for constants or leaves of other tapes.
    pub fn get(&self, leaf: &Var<S>) -> Option<&Tensor<S>> {
        leaf.id().and_then(|id| self.by_leaf.get(&id))
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

fn check_root<S: Real>(root: &Var<S>) -> Result<()> {
    if root.len() != 1 {
        return Err(Error::NonScalarRoot(root.shape().to_vec()));
    }
    Ok(())
}

/// Differentiates a scalar `root` into every leaf of its tape.
pub fn backward<S: Real>(root: &Var<S>) -> Result<Gradients<S>> {
    check_root(root)?;
    let Some(node) = &root.node else {
        return Ok(Gradients::default());
    };
    let leaves: Vec<usize> = {
        let nodes = node.tape.nodes.borrow();
        (0..=node.id)
            .filter(|&i| matches!(nodes[i].op, Op::Leaf))
            .collect()
    };
    let grads = sweep(root, &leaves, false)?;
    let mut by_leaf = HashMap::with_capacity(leaves.len());
    for (id, g) in leaves.into_iter().zip(grads) {
        let shape = node.tape.nodes.borrow()[id].output.shape().to_vec();
        by_leaf.insert(
            id,
            g.map(Var::into_value).unwrap_or_else(|| Tensor::zeros(shape)),
        );
    }
    Ok(Gradients { by_leaf })
}

/// Gradients of a scalar `root` with respect to `wrt`, which may be any
/// tracked values (not only leaves). With `create_graph` the returned
/// gradients are themselves tracked and can be differentiated again.
pub fn grad<S: Real>(root: &Var<S>, wrt: &[&Var<S>], create_graph: bool) -> Result<Vec<Var<S>>> {
    check_root(root)?;
    let zeros = |v: &Var<S>| Var::constant(Tensor::zeros(v.shape().to_vec()));
    let Some(node) = &root.node else {
        return Ok(wrt.iter().map(|v| zeros(v)).collect());
    };
    let mut ids = Vec::with_capacity(wrt.len());
    for v in wrt {
        match &v.node {
            Some(n) if !n.tape.same(&node.tape) => return Err(Error::DetachedTape),
            Some(n) => ids.push(n.id),
            None => ids.push(usize::MAX),
        }
    }
    let grads = sweep(root, &ids, create_graph)?;
    Ok(grads
        .into_iter()
        .zip(wrt)
        .map(|(g, v)| g.unwrap_or_else(|| zeros(v)))
        .collect())
}

fn sweep<S: Real>(root: &Var<S>, targets: &[usize], create_graph: bool) -> Result<Vec<Option<Var<S>>>> {
    let root_ref = root.node.as_ref().expect("tracked root");
    let tape = &root_ref.tape;
    let root_id = root_ref.id;

    // Only nodes downstream of some target carry useful adjoints.
    let mut needed = vec![false; root_id + 1];
    for &t in targets {
        if t <= root_id {
            needed[t] = true;
        }
    }
    {
        let nodes = tape.nodes.borrow();
        for i in 0..=root_id {
            if !needed[i] {
                needed[i] = nodes[i]
                    .inputs
                    .iter()
                    .any(|inp| inp.id.is_some_and(|p| needed[p]));
            }
        }
    }

    let mut adjoints: Vec<Option<Var<S>>> = vec![None; root_id + 1];
    adjoints[root_id] = Some(Var::constant(Tensor::ones(root.shape().to_vec())));

    let rebuild = |id: Option<usize>, value: &Tensor<S>| -> Var<S> {
        match id {
            Some(id) if create_graph => Var {
                value: value.clone(),
                node: Some(NodeRef {
                    tape: tape.clone(),
                    id,
                }),
            },
            _ => Var::constant(value.clone()),
        }
    };

    for i in (0..=root_id).rev() {
        if !needed[i] {
            continue;
        }
        let Some(g) = adjoints[i].take() else {
            continue;
        };
        let (op, inputs, output) = {
            let nodes = tape.nodes.borrow();
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) {
                adjoints[i] = Some(g);
                continue;
            }
            let inputs: SmallVec<[(Option<usize>, Var<S>); 2]> = node
                .inputs
                .iter()
                .map(|inp| (inp.id, rebuild(inp.id, &inp.value)))
                .collect();
            (node.op.clone(), inputs, rebuild(Some(i), &node.output))
        };
        let g = if create_graph { g } else { g.detach() };
        let parent_vars: SmallVec<[&Var<S>; 2]> = inputs.iter().map(|(_, v)| v).collect();
        let parent_grads = op.backward(&parent_vars, &output, &g, create_graph)?;
        for ((pid, _), pg) in inputs.iter().zip(parent_grads) {
            let (Some(pid), Some(pg)) = (pid, pg) else {
                continue;
            };
            if !needed[*pid] {
                continue;
            }
            adjoints[*pid] = Some(match adjoints[*pid].take() {
                Some(acc) => acc.add(&pg)?,
                None => pg,
            });
        }
        adjoints[i] = Some(g);
    }

    Ok(targets
        .iter()
        .map(|&t| {
            if t > root_id {
                return None;
            }
            adjoints[t].clone().map(|g| if create_graph { g } else { g.detach() })
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64([data.len()], data).unwrap()
    }

    #[test]
    fn sum_of_squares() {
        let tape = Tape::new();
        let x = tape.leaf(t64(&[1.0, 2.0, 3.0]));
        let y = x.square().unwrap().sum().unwrap();
        let g = backward(&y).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constant_root_gives_zero_gradients() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[1.0, 2.0]));
        let c = Var::constant(t64(&[5.0])).sum().unwrap();
        let g = grad(&c, &[&x], false).unwrap();
        assert_eq!(g[0].value().data(), &[0.0, 0.0]);
        // a tracked root that never touches x
        let other = tape.leaf(t64(&[3.0]));
        let r = other.mul_scalar(2.0).unwrap().sum().unwrap();
        let all = backward(&r).unwrap();
        assert_eq!(all.get(&x).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(all.get(&other).unwrap().data(), &[2.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[1.0, 2.0]));
        assert!(matches!(backward(&x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn mixing_tapes_is_an_error() {
        let a = Tape::<f64>::new().leaf(t64(&[1.0]));
        let b = Tape::<f64>::new().leaf(t64(&[2.0]));
        assert!(matches!(a.add(&b), Err(Error::DetachedTape)));
        let r = a.sum().unwrap();
        assert!(matches!(grad(&r, &[&b], false), Err(Error::DetachedTape)));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // y = x*x + x  => dy/dx = 2x + 1
        let tape = Tape::new();
        let x = tape.leaf(t64(&[3.0]));
        let y = x.mul(&x).unwrap().add(&x).unwrap().sum().unwrap();
        assert_eq!(backward(&y).unwrap().get(&x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn broadcast_gradient_reduces_to_parent_shape() {
        let tape = Tape::new();
        let m = tape.leaf(Tensor::<f64>::ones([3, 2]));
        let b = tape.leaf(t64(&[1.0, 2.0]));
        let y = m.mul(&b).unwrap().sum().unwrap();
        let g = backward(&y).unwrap();
        assert_eq!(g.get(&b).unwrap().data(), &[3.0, 3.0]);
        assert_eq!(g.get(&m).unwrap().data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn second_derivative_through_create_graph() {
        // f = sum(x^3); grad = 3x^2; d/dx sum(grad * v) = 6 x v
        let tape = Tape::new();
        let x = tape.leaf(t64(&[1.0, -2.0, 0.5]));
        let f = x.powf(3.0).unwrap().sum().unwrap();
        let g = grad(&f, &[&x], true).unwrap().remove(0);
        assert!(g.requires_grad());
        let v = Var::constant(t64(&[1.0, 1.0, 2.0]));
        let gv = g.mul(&v).unwrap().sum().unwrap();
        let h = grad(&gv, &[&x], false).unwrap().remove(0);
        assert_eq!(h.value().data(), &[6.0, -12.0, 6.0]);
    }

    #[test]
    fn grad_with_respect_to_intermediate() {
        let tape = Tape::new();
        let x = tape.leaf(t64(&[2.0]));
        let u = x.exp().unwrap();
        let y = u.mul_scalar(3.0).unwrap().sum().unwrap();
        let g = grad(&y, &[&u], false).unwrap();
        assert_eq!(g[0].value().data(), &[3.0]);
    }
}
