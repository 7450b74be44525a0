//! Reverse-mode differentiable computation over dense f64 arrays.
//!
//! A [`Graph`] records eagerly-evaluated ops over shaped buffers; [`Graph::backward`]
//! replays the tape in reverse and accumulates gradients additively. Trainable
//! state lives in a [`ParamStore`]; frozen parameters never receive gradient.
//!
//! Everything is single-threaded and deterministic: identical inputs produce
//! bit-identical values on the same platform and build configuration.

mod checkpoint;
mod gradcheck;
mod ops;

pub use checkpoint::{load_checkpoint, restore_into, save_checkpoint};
pub use gradcheck::{finite_difference_check, finite_difference_check_multi, FdReport};
pub use ops::CustomOp;
pub(crate) use ops::Op;

use std::collections::HashMap;
use std::rc::Rc;

pub type NodeId = usize;

/// A dense multi-dimensional value participating in differentiation.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffArray {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl DiffArray {
    pub fn new(shape: impl Into<Vec<usize>>, values: Vec<f64>) -> Self {
        let shape = shape.into();
        assert_eq!(
            values.len(),
            shape.iter().product::<usize>(),
            "DiffArray: {} values for shape {:?}",
            values.len(),
            shape
        );
        DiffArray {
            shape,
            values,
            requires_grad: true,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        DiffArray::new(vec![1], vec![v])
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        DiffArray::new(shape, vec![0.0; n])
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

/// A named trainable (or frozen) array.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Rc<Vec<f64>>,
    pub frozen: bool,
    /// Accumulated gradient; zeroed explicitly between optimizer steps.
    pub grad: Vec<f64>,
}

impl Parameter {
    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Flat registry of parameters, addressable by id or by name path.
#[derive(Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> ParamId {
        let name = name.into();
        assert_eq!(
            values.len(),
            shape.iter().product::<usize>(),
            "parameter {name}: {} values for shape {:?}",
            values.len(),
            shape
        );
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.params.len();
        let n = values.len();
        self.params.push(Parameter {
            name: name.clone(),
            shape,
            values: Rc::new(values),
            frozen: false,
            grad: vec![0.0; n],
        });
        self.by_name.insert(name, id);
        ParamId(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            for g in &mut p.grad {
                *g = 0.0;
            }
        }
    }

    /// Sets frozen flags for every parameter whose name starts with `prefix`.
    pub fn set_frozen_by_prefix(&mut self, prefix: &str, frozen: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.frozen = frozen;
            }
        }
    }

    pub fn total_params(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn trainable_params(&self) -> usize {
        self.params
            .iter()
            .filter(|p| !p.frozen)
            .map(|p| p.numel())
            .sum()
    }

    /// Adds graph-computed gradients into parameter `.grad` buffers.
    /// Frozen parameters are skipped.
    pub fn accumulate(&mut self, graph: &Graph, grads: &Grads) {
        for (id, node) in graph.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(pid) } = node.op {
                if let Some(g) = grads.get(id) {
                    let p = &mut self.params[pid.0];
                    if p.frozen {
                        continue;
                    }
                    debug_assert_eq!(g.len(), p.grad.len());
                    for (dst, src) in p.grad.iter_mut().zip(g) {
                        *dst += src;
                    }
                }
            }
        }
    }
}

pub(crate) struct Node {
    pub shape: Vec<usize>,
    pub values: Rc<Vec<f64>>,
    pub requires_grad: bool,
    pub op: Op,
}

/// Eager evaluation tape.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Grads {
    slots: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&Vec<f64>> {
        self.slots.get(id).and_then(|s| s.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Vec<f64>> {
        self.slots.get_mut(id).and_then(|s| s.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn values(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].values
    }

    pub fn numel(&self, id: NodeId) -> usize {
        self.nodes[id].values.len()
    }

    /// The value of a scalar (single-element) node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        assert_eq!(self.numel(id), 1, "scalar_value on non-scalar node");
        self.nodes[id].values[0]
    }

    pub(crate) fn push(
        &mut self,
        shape: Vec<usize>,
        values: Vec<f64>,
        requires_grad: bool,
        op: Op,
    ) -> NodeId {
        debug_assert_eq!(values.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            shape,
            values: Rc::new(values),
            requires_grad,
            op,
        });
        self.nodes.len() - 1
    }

    /// A non-differentiable constant leaf.
    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, values: Vec<f64>) -> NodeId {
        let shape = shape.into();
        assert_eq!(values.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            shape,
            values: Rc::new(values),
            requires_grad: false,
            op: Op::Leaf { param: None },
        });
        self.nodes.len() - 1
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(vec![1], vec![v])
    }

    /// A differentiable leaf from a [`DiffArray`].
    pub fn input(&mut self, arr: &DiffArray) -> NodeId {
        self.nodes.push(Node {
            shape: arr.shape.clone(),
            values: Rc::new(arr.values.clone()),
            requires_grad: arr.requires_grad,
            op: Op::Leaf { param: None },
        });
        self.nodes.len() - 1
    }

    /// A leaf bound to a stored parameter. Frozen parameters do not require grad.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let p = store.get(id);
        self.nodes.push(Node {
            shape: p.shape.clone(),
            values: Rc::clone(&p.values),
            requires_grad: !p.frozen,
            op: Op::Leaf { param: Some(id) },
        });
        self.nodes.len() - 1
    }

    /// Reverse pass from a scalar loss. Gradients accumulate additively per node.
    pub fn backward(&self, loss: NodeId) -> Grads {
        assert_eq!(
            self.numel(loss),
            1,
            "backward requires a scalar loss, got shape {:?}",
            self.shape(loss)
        );
        let mut slots: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[loss] = Some(vec![1.0]);
        for id in (0..=loss).rev() {
            if !self.nodes[id].requires_grad {
                slots[id] = None;
                continue;
            }
            let Some(g) = slots[id].take() else { continue };
            ops::backward_into(self, id, &g, &mut slots);
            // leaves keep their gradient for later retrieval
            if matches!(self.nodes[id].op, Op::Leaf { .. }) {
                slots[id] = Some(g);
            }
        }
        Grads { slots }
    }
}

pub(crate) fn acc_into(slot: &mut Option<Vec<f64>>, n: usize, f: impl FnOnce(&mut [f64])) {
    if slot.is_none() {
        *slot = Some(vec![0.0; n]);
    }
    f(slot.as_mut().unwrap());
}
