//! Named trainable parameters and their binding onto a tape.

use alloc::collections::BTreeMap;
use alloc::rc::Rc;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named tensor owned by a model. `trainable == false` marks buffers such
/// as batch-norm running statistics and frozen parameters.
#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Rc<Tensor<T>>,
    pub grad: Option<Tensor<T>>,
    pub trainable: bool,
}

/// Insertion-ordered parameter collection with unique names.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: BTreeMap<String, usize>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), by_name: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        self.params.push(Parameter { name: name.to_string(), value: Rc::new(value), grad: None, trainable });
        self.by_name.insert(name.to_string(), self.params.len() - 1);
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    /// Replaces a value, keeping the shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch { op: "ParamStore::set_value", lhs: p.value.shape().to_vec(), rhs: value.shape().to_vec() });
        }
        p.value = Rc::new(value);
        Ok(())
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Rc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    /// Total element count of trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    /// Records every parameter as a leaf; trainable ones receive gradients.
    pub fn bind<'g>(&self, graph: &'g Graph<T>) -> Bound<'g, T> {
        self.bind_with(graph, true)
    }

    /// Records every parameter as a constant leaf.
    pub fn bind_frozen<'g>(&self, graph: &'g Graph<T>) -> Bound<'g, T> {
        self.bind_with(graph, false)
    }

    fn bind_with<'g>(&self, graph: &'g Graph<T>, grads: bool) -> Bound<'g, T> {
        let vars = self.params.iter().map(|p| graph.leaf_rc(Rc::clone(&p.value), grads && p.trainable)).collect();
        Bound { vars }
    }

    /// Adds the gradients found for `bound` into each parameter's `grad`.
    pub fn accumulate(&mut self, bound: &Bound<'_, T>, grads: &Gradients<T>) {
        for (p, &var) in self.params.iter_mut().zip(&bound.vars) {
            if !p.trainable {
                continue;
            }
            if let Some(g) = grads.get(var) {
                match &mut p.grad {
                    Some(acc) => acc.add_assign(g),
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }
}

/// A [`ParamStore`] recorded on one tape.
pub struct Bound<'g, T: Element> {
    vars: Vec<Var<'g, T>>,
}

impl<'g, T: Element> Bound<'g, T> {
    /// Binds caller-provided variables in store order, e.g. to differentiate
    /// with respect to parameters in a gradient check.
    pub fn from_vars(store: &ParamStore<T>, vars: Vec<Var<'g, T>>) -> Result<Self> {
        if vars.len() != store.len() {
            return Err(Error::Config(alloc::format!("{} variables for {} parameters", vars.len(), store.len())));
        }
        for (p, v) in store.params.iter().zip(&vars) {
            if v.shape() != p.value.shape() {
                return Err(Error::ShapeMismatch { op: "bind", lhs: p.value.shape().to_vec(), rhs: v.shape() });
            }
        }
        Ok(Bound { vars })
    }

    pub fn var(&self, id: ParamId) -> Var<'g, T> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'g, T>] {
        &self.vars
    }
}

impl<'g, T: Element> core::ops::Index<ParamId> for Bound<'g, T> {
    type Output = Var<'g, T>;

    fn index(&self, id: ParamId) -> &Var<'g, T> {
        &self.vars[id.0]
    }
}
