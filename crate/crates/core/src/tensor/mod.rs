//! Dense `f64` tensors with a reverse-mode gradient tape.
//!
//! Parameters live outside the tape as [`Tensor`]s grouped in a [`ParamSet`].
//! A forward pass binds them onto a [`Tape`], records every operation, and
//! [`Tape::backward`] replays the adjoints once, returning [`Gradients`] that
//! can be accumulated back into the parameter tensors.

mod adam;
mod conv;
mod tape;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use conv::{conv1d_out_len, conv2d_out_len, conv_transpose1d_out_len, Conv1dOpts, Conv2dOpts};
pub use tape::{Gradients, Tape, Var};

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// An owned n-dimensional array with an optional gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::dim(format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Self::full([1], value)
    }

    /// Zero-mean normal initialisation.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(shape);
        let normal = Normal::new(0.0, std).expect("finite std");
        t.data.iter_mut().for_each(|v| *v = normal.sample(rng));
        t
    }

    /// Marks the tensor trainable and allocates a zeroed gradient.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self.grad = Some(vec![0.0; self.data.len()]);
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        let Some(acc) = self.grad.as_mut() else {
            return Err(Error::Contract("tensor does not require grad".into()));
        };
        if acc.len() != g.len() {
            return Err(Error::dim(format!("gradient length {} != {}", g.len(), acc.len())));
        }
        acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// Splits into (params, grad) for in-place optimiser updates.
    pub(crate) fn data_and_grad_mut(&mut self) -> (&mut [f64], Option<&[f64]>) {
        (&mut self.data, self.grad.as_deref())
    }
}

/// An ordered, named collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        let tensor = if tensor.requires_grad { tensor } else { tensor.with_grad() };
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = tensor;
        } else {
            self.index.insert(name.clone(), self.names.len());
            self.names.push(name);
            self.tensors.push(tensor);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    /// Total scalar parameter count.
    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Records every tensor as a leaf on `tape`, trainable.
    pub fn bind(&self, tape: &mut Tape) -> Bound<'_> {
        self.bind_with(tape, true)
    }

    /// Records every tensor as a constant leaf; gradients still flow through
    /// the ops that consume them but are not collected for the tensors.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound<'_> {
        self.bind_with(tape, false)
    }

    fn bind_with(&self, tape: &mut Tape, trainable: bool) -> Bound<'_> {
        let vars = self
            .tensors
            .iter()
            .map(|t| tape.leaf(t.shape.clone(), t.data.clone(), trainable))
            .collect();
        Bound { set: self, vars }
    }

    /// Adds the gradients recorded for `bound` into each tensor's accumulator.
    pub fn accumulate(&mut self, bound: &[Var], grads: &Gradients) -> Result<()> {
        if bound.len() != self.tensors.len() {
            return Err(Error::Contract("bound variables do not match parameter set".into()));
        }
        for (t, &v) in self.tensors.iter_mut().zip(bound) {
            if let Some(g) = grads.get(v) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

/// A parameter set recorded on a tape.
#[derive(Debug)]
pub struct Bound<'a> {
    set: &'a ParamSet,
    vars: Vec<Var>,
}

impl Bound<'_> {
    /// Looks up the tape variable for a named parameter.
    ///
    /// Parameter names are fixed by the model constructors, so a missing name
    /// is a programming error.
    pub fn var(&self, name: &str) -> Var {
        match self.set.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("unknown parameter `{name}`"),
        }
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.set.index.get(name).map(|&i| self.vars[i])
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn into_vars(self) -> Vec<Var> {
        self.vars
    }
}
