use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use crate::{Float, Group, ParamId, ParamStore, Tensor};

/// Backward rule: receives the gradient of the node output and a mask of
/// which parents need a gradient, returns one optional gradient per parent.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    param: Option<ParamId>,
}

/// Records a computation for reverse-mode differentiation.
///
/// Parameters enter through [`Tape::param`]; only parameters whose group
/// was passed to [`Tape::new`] require gradients. Everything else is a
/// constant, so ops that touch no trainable input store no backward rule.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<ParamId, usize>>,
    trainable: Vec<Group>,
}

/// A value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

/// Parameter gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Grads<T> {
    by_param: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Float> Grads<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.by_param.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.by_param.values().all(|g| g.all_finite())
    }
}

impl<T: Float> Tape<T> {
    pub fn new(trainable: &[Group]) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            trainable: trainable.to_vec(),
        }
    }

    /// A tape on which nothing requires gradients.
    pub fn inference() -> Self {
        Self::new(&[])
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(Rc::new(value), false, None)
    }

    pub fn scalar(&self, value: f64) -> Var<'_, T> {
        self.constant(Tensor::scalar(T::lit(value)))
    }

    /// Leaf for a stored parameter. Repeated calls with the same id return
    /// the same node, so shared weights accumulate one gradient.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        if let Some(&node) = self.params.borrow().get(&id) {
            return Var { tape: self, id: node };
        }
        let requires = self.trainable.contains(&store.group(id));
        let var = self.leaf(Rc::new(store.get(id).clone()), requires, Some(id));
        self.params.borrow_mut().insert(id, var.id);
        var
    }

    fn leaf(&self, value: Rc<Tensor<T>>, requires_grad: bool, param: Option<ParamId>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            parents: Vec::new(),
            backward: None,
            param,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Record an op result. The backward rule is dropped when no parent
    /// requires a gradient.
    pub(crate) fn push<F>(&self, value: Tensor<T>, parents: &[usize], backward: F) -> Var<'_, T>
    where
        F: Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    {
        self.push_rc(Rc::new(value), parents, backward)
    }

    pub(crate) fn push_rc<F>(&self, value: Rc<Tensor<T>>, parents: &[usize], backward: F) -> Var<'_, T>
    where
        F: Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        let backward: Option<BackwardFn<T>> = if requires_grad { Some(Box::new(backward)) } else { None };
        nodes.push(Node {
            value,
            requires_grad,
            parents: parents.to_vec(),
            backward,
            param: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Gradients of a scalar `loss` with respect to every trainable
    /// parameter that contributed to it.
    pub fn backward(&self, loss: Var<'_, T>) -> Grads<T> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        assert_eq!(root.value.numel(), 1, "backward() needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(Tensor::full(root.value.shape(), T::one()));
        let mut out = Grads::default();
        for i in (0..=loss.id).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Some(bw) = &node.backward {
                let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
                let pgrads = bw(&g, &needs);
                debug_assert_eq!(pgrads.len(), node.parents.len());
                for ((&p, pg), need) in node.parents.iter().zip(pgrads).zip(&needs) {
                    let Some(pg) = pg else { continue };
                    if !need {
                        continue;
                    }
                    debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "grad shape for node {p}");
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&pg),
                        slot => *slot = Some(pg),
                    }
                }
            }
            if let Some(pid) = node.param {
                out.by_param.insert(pid, g);
            }
        }
        out
    }
}

impl<'t, T: Float> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> T {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Same value, cut from the gradient graph.
    pub fn detach(&self) -> Var<'t, T> {
        let value = self.value();
        self.tape.leaf(value, false, None)
    }
}
