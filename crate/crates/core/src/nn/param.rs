use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};

use super::Scalar;

/// A trainable tensor with its gradient accumulator and momentum slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
    pub velocity: ArrayD<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: ArrayD<T>) -> Self {
        let shape = value.shape().to_vec();
        Self {
            value,
            grad: ArrayD::zeros(IxDyn(&shape)),
            velocity: ArrayD::zeros(IxDyn(&shape)),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Anything that owns parameters. Names are dotted paths, stable across runs.
pub trait Module<T: Scalar> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>);
    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>);

    fn params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        self.collect_params("", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = Vec::new();
        self.collect_params_mut("", &mut out);
        out
    }

    fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    /// SHA-256 over parameter values (not gradients or momentum).
    fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for (name, p) in self.params() {
            h.update(name.as_bytes());
            buf.clear();
            for &v in p.value.iter() {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        hex::encode(h.finalize())
    }

    fn grad_norm(&self) -> f64 {
        self.params()
            .iter()
            .flat_map(|(_, p)| p.grad.iter())
            .map(|g| g.as_f64().powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
