//! Named parameter tensors and their binding onto a tape.

use rand::Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a parameter and returns its index.
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter on `tape`, tracked for gradients iff `track`.
    pub fn bind(&self, tape: &mut Tape, track: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if track {
                    tape.param(t.clone())
                } else {
                    tape.leaf(t.clone())
                }
            })
            .collect()
    }

    /// Gradients for vars produced by [`ParamSet::bind`]; parameters that did
    /// not reach the root get zeros.
    pub fn collect_grads(&self, grads: &mut Gradients, vars: &[Var]) -> Vec<Tensor> {
        self.tensors
            .iter()
            .zip(vars)
            .map(|(t, &v)| {
                grads
                    .take(v)
                    .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
            })
            .collect()
    }

    /// Replaces the values of parameters that share names with `other`,
    /// requiring every name of `self` to be present with the same shape.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let i = other
                .index_of(name)
                .ok_or_else(|| Error::invalid(format!("missing parameter {name:?}")))?;
            let src = other.get(i);
            if src.shape() != t.shape() {
                return Err(Error::shape("load parameter", t.shape(), src.shape()));
            }
            *t = src.clone();
        }
        Ok(())
    }
}

/// Sums gradients over several backward passes until explicitly zeroed.
#[derive(Clone, Debug)]
pub struct GradBuffer {
    grads: Vec<Tensor>,
}

impl GradBuffer {
    pub fn for_params(params: &ParamSet) -> Self {
        GradBuffer {
            grads: params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect(),
        }
    }

    pub fn accumulate(&mut self, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.grads.len() {
            return Err(Error::invalid(format!(
                "expected {} gradients, got {}",
                self.grads.len(),
                grads.len()
            )));
        }
        for (acc, g) in self.grads.iter_mut().zip(grads) {
            acc.add_assign(g)?;
        }
        Ok(())
    }

    pub fn zero(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(0.0));
    }

    pub fn grads(&self) -> &[Tensor] {
        &self.grads
    }
}

/// Uniform initialisation in `±sqrt(6 / fan_in)`.
pub fn uniform_fan_in(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
    )
    .expect("shape product matches")
}
