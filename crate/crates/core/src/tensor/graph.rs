use std::collections::HashMap;

use super::ops::Backward;
use super::{Element, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// A named learned tensor together with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T: Element = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Non-trainable entries hold state such as batch-norm running statistics.
    pub trainable: bool,
}

/// Ordered, name-addressable collection of parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Element = f32> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a parameter. Panics if the name is already taken.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let grad = Tensor::zeros(value.shape());
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Parameter {
            name,
            value,
            grad,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of scalar weights in trainable parameters.
    pub fn trainable_elements(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds the gradients computed by the last [`Graph::backward`] call onto
    /// the stored gradients of every trainable parameter the graph used.
    pub fn accumulate(&mut self, graph: &Graph<T>) {
        for node in &graph.nodes {
            if let Some(pid) = node.param {
                if !self.params[pid.0].trainable {
                    continue;
                }
                if let Some(g) = &graph.grads[node.id] {
                    self.params[pid.0].grad.add_assign(g);
                }
            }
        }
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

pub(crate) struct Node<T: Element> {
    pub(crate) id: usize,
    pub(crate) kind: &'static str,
    pub(crate) value: Tensor<T>,
    pub(crate) inputs: Vec<NodeId>,
    pub(crate) op: Option<Box<dyn Backward<T>>>,
    pub(crate) param: Option<ParamId>,
    pub(crate) requires_grad: bool,
}

/// Batch-norm statistics source.
#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a, T> {
    /// Normalize with the per-channel statistics of the input itself.
    Train,
    /// Normalize with externally supplied running statistics.
    Infer { mean: &'a [T], var: &'a [T] },
}

pub struct BatchNormOutput<T> {
    pub node: NodeId,
    /// Per-channel batch mean and (biased) variance; present in train mode.
    pub batch_stats: Option<(Vec<T>, Vec<T>)>,
}

/// Topologically ordered computation record. Each op appends a node whose
/// inputs are strictly earlier nodes, so a reverse sweep is a valid
/// backward schedule.
pub struct Graph<T: Element = f32> {
    pub(crate) nodes: Vec<Node<T>>,
    pub(crate) grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(
        &mut self,
        kind: &'static str,
        value: Tensor<T>,
        inputs: Vec<NodeId>,
        op: Option<Box<dyn Backward<T>>>,
        param: Option<ParamId>,
        requires_grad: bool,
    ) -> NodeId {
        let id = self.nodes.len();
        debug_assert!(inputs.iter().all(|i| i.0 < id));
        let requires_grad = requires_grad || inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            id,
            kind,
            value,
            inputs,
            op,
            param,
            requires_grad,
        });
        self.grads.push(None);
        NodeId(id)
    }

    /// Constant input; no gradient is propagated into it.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push("input", value, Vec::new(), None, None, false)
    }

    /// Free leaf whose gradient is recorded (for probing gradients of inputs).
    pub fn variable(&mut self, value: Tensor<T>) -> NodeId {
        self.push("variable", value, Vec::new(), None, None, true)
    }

    /// Leaf holding a copy of a stored parameter.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        let p = store.get(id);
        self.push("param", p.value.clone(), Vec::new(), None, Some(id), p.trainable)
    }

    pub fn param_by_name(&mut self, store: &ParamStore<T>, name: &str) -> Option<NodeId> {
        store.id(name).map(|id| self.param(store, id))
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn kind(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].kind
    }

    /// Gradient of the last backward's loss with respect to a node.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn custom(&mut self, kind: &'static str, inputs: &[NodeId], value: Tensor<T>, op: Box<dyn Backward<T>>) -> NodeId {
        self.push(kind, value, inputs.to_vec(), Some(op), None, false)
    }

    /// Reverse sweep from a scalar loss. Node gradients are recomputed from
    /// scratch on every call; use [`ParamStore::accumulate`] to add them onto
    /// parameter gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        let loss_shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(Tensor::ones(&loss_shape));
        for idx in (0..=loss.0).rev() {
            let Some(grad) = self.grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if let Some(op) = &node.op {
                if node.requires_grad {
                    let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|i| &self.nodes[i.0].value).collect();
                    let needs: Vec<bool> = node.inputs.iter().map(|i| self.nodes[i.0].requires_grad).collect();
                    let input_grads = op.backward(&inputs, &node.value, &grad, &needs);
                    debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", node.kind);
                    let targets = node.inputs.clone();
                    for (target, g) in targets.into_iter().zip(input_grads) {
                        let Some(g) = g else { continue };
                        if !self.nodes[target.0].requires_grad {
                            continue;
                        }
                        match &mut self.grads[target.0] {
                            Some(acc) => acc.add_assign(&g),
                            slot @ None => *slot = Some(g),
                        }
                    }
                }
            }
            self.grads[idx] = Some(grad);
        }
        Ok(())
    }

    /// Backward followed by accumulation into the parameter store.
    pub fn backward_into(&mut self, loss: NodeId, params: &mut ParamStore<T>) -> Result<(), TensorError> {
        self.backward(loss)?;
        params.accumulate(self);
        Ok(())
    }
}
