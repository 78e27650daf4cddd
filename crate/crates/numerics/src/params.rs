use std::cell::RefCell;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable tensor and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

/// All parameters of a model, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Parameter { name, value, grad: None });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    /// Adds `scale · grad` into the parameter's gradient buffer.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor<T>, scale: T) -> Result<()> {
        let p = &mut self.params[id.0];
        if grad.shape() != p.value.shape() {
            return Err(Error::ShapeMismatch {
                op: "accumulate_grad",
                lhs: p.value.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        match &mut p.grad {
            Some(acc) => acc.data_mut().iter_mut().zip(grad.data()).for_each(|(a, &g)| *a = *a + scale * g),
            None => p.grad = Some(grad.map(|g| g * scale)),
        }
        Ok(())
    }

    /// Euclidean norm over all gradient buffers.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.data().iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Copy of every value converted to another precision; gradients dropped.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter { name: p.name.clone(), value: p.value.cast(), grad: None })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Binds the parameters of a store into one graph. Each parameter becomes a
/// leaf on first use; later uses share the same leaf so gradients from every
/// use accumulate.
pub struct Session<'g, 's, T: Scalar> {
    graph: &'g Graph<T>,
    store: &'s ParamStore<T>,
    bound: RefCell<Vec<Option<Var<'g, T>>>>,
    track: bool,
}

impl<'g, 's, T: Scalar> Session<'g, 's, T> {
    /// Session whose parameters are differentiated.
    pub fn new(graph: &'g Graph<T>, store: &'s ParamStore<T>) -> Self {
        Self::with_tracking(graph, store, true)
    }

    /// Session for inference: parameters enter the graph as constants.
    pub fn frozen(graph: &'g Graph<T>, store: &'s ParamStore<T>) -> Self {
        Self::with_tracking(graph, store, false)
    }

    fn with_tracking(graph: &'g Graph<T>, store: &'s ParamStore<T>, track: bool) -> Self {
        Self { graph, store, bound: RefCell::new(vec![None; store.len()]), track }
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Var<'g, T> {
        let mut bound = self.bound.borrow_mut();
        *bound[id.0].get_or_insert_with(|| self.graph.leaf(self.store.value(id).clone(), self.track))
    }

    pub fn input(&self, value: Tensor<T>) -> Var<'g, T> {
        self.graph.constant(value)
    }

    /// Gradient of every parameter that took part in the graph.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<(ParamId, Tensor<T>)> {
        self.bound
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.and_then(|v| grads.get(v)).map(|g| (ParamId(i), g.clone())))
            .collect()
    }
}
