//! Named learnable parameters and their tape binding.

use super::tape::Tape;
use super::tensor::{DiffTensor, Scalar};
use crate::degrade::DeterministicRng;

/// One named weight buffer. Parameters live as plain values between steps
/// and are bound onto a fresh tape as leaves for each forward/backward pass.
#[derive(Clone, Debug)]
pub struct Param<F: Scalar> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Scalar> Param<F> {
    pub fn zeros(name: &str, shape: &[usize]) -> Self {
        Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: vec![F::zero(); shape.iter().product()],
        }
    }

    /// Kaiming-style uniform init in ±sqrt(6 / fan_in).
    pub fn uniform(name: &str, shape: &[usize], fan_in: usize, rng: &mut DeterministicRng) -> Self {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let data = (0..shape.iter().product())
            .map(|_| F::from_f64(rng.uniform_in(-bound, bound)))
            .collect();
        Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Registers this parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<F>) -> DiffTensor<F> {
        tape.leaf(&self.shape, self.data.clone())
    }

    pub fn cast<T: Scalar>(&self) -> Param<T> {
        Param {
            name: self.name.clone(),
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.as_f64())).collect(),
        }
    }
}

/// Anything holding an ordered collection of named parameters.
///
/// The visitation order is a stable part of each implementation's contract:
/// optimizers align their per-parameter state with it.
pub trait ParamSet<F: Scalar> {
    fn visit(&self, f: &mut dyn FnMut(&Param<F>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.len());
        n
    }

    fn flat_params(&self) -> Vec<Param<F>> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push(p.clone()));
        out
    }
}
