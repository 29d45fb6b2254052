use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Backward rule: given the output gradient and which parents need one,
/// return one optional gradient per parent.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

/// A single-use computation tape. Build one per forward pass; it is not
/// `Sync`, so parallel workers each build their own.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<String, usize>>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    pub(crate) graph: &'g Graph,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Node {
            value,
            requires_grad: false,
            parents: Vec::new(),
            backward: None,
        })
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Node {
            value,
            requires_grad: true,
            parents: Vec::new(),
            backward: None,
        })
    }

    /// Bind a named trainable parameter. Repeated calls with the same name
    /// return the same leaf, so shared weights accumulate one gradient.
    pub fn param(&self, store: &ParamStore, name: &str) -> Var<'_> {
        if let Some(&id) = self.params.borrow().get(name) {
            return Var { graph: self, id };
        }
        let value = store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .clone();
        let v = self.leaf(value);
        self.params.borrow_mut().insert(name.to_string(), v.id);
        v
    }

    /// Bind a named tensor as a constant (frozen weights).
    pub fn frozen(&self, store: &ParamStore, name: &str) -> Var<'_> {
        let value = store
            .get(name)
            .unwrap_or_else(|| panic!("unknown frozen tensor `{name}`"))
            .clone();
        self.constant(value)
    }

    pub(crate) fn record(
        &self,
        value: Tensor,
        parents: &[Var<'_>],
        backward: impl Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    ) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        if !requires_grad {
            return self.constant(value);
        }
        self.push(Node {
            value,
            requires_grad,
            parents: parents.iter().map(|p| p.id).collect(),
            backward: Some(Box::new(backward)),
        })
    }

    pub(crate) fn value_of(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse-mode sweep from a scalar output.
    pub fn backward(&self, output: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let out_value = &nodes[output.id].value;
        assert_eq!(out_value.numel(), 1, "backward() needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        if nodes[output.id].requires_grad {
            grads[output.id] = Some(Tensor::ones(out_value.shape().to_vec()));
        }
        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(bw) = &node.backward {
                let needs: Vec<bool> = node
                    .parents
                    .iter()
                    .map(|&p| nodes[p].requires_grad)
                    .collect();
                let parent_grads = bw(&g, &needs);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                    let Some(pg) = pg else { continue };
                    if !need {
                        continue;
                    }
                    debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "grad shape for node {p}");
                    match &mut grads[p] {
                        Some(acc) => acc.accumulate(&pg),
                        slot => *slot = Some(pg),
                    }
                }
            }
            if node.backward.is_none() {
                grads[id] = Some(g);
            }
        }
        let params = self
            .params
            .borrow()
            .iter()
            .map(|(k, &v)| (k.clone(), v))
            .collect();
        Gradients { grads, params }
    }
}

/// Gradients of every leaf reached by a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<String, usize>,
}

impl Gradients {
    pub fn wrt(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient for a named parameter; zeros are not materialized, so an
    /// unused parameter yields `None`.
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params
            .get(name)
            .and_then(|&id| self.grads[id].as_ref())
    }

    /// All parameter gradients, keyed by name.
    pub fn into_param_map(mut self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, id) in std::mem::take(&mut self.params) {
            if let Some(g) = self.grads[id].take() {
                out.insert(name, g);
            }
        }
        out
    }
}

impl<'g> Var<'g> {
    pub fn value(&self) -> Tensor {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.graph.nodes.borrow()[self.id].value.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }
}
