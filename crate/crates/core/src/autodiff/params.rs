//! Named traversal over the stored tensors of a model.

use super::tape::Gradients;
use super::tensor::Tensor;
use crate::error::Result;
use crate::scalar::Scalar;

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Anything owning weight tensors.
pub trait Parameters<S: Scalar> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>));

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>));

    fn named_params(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name, t)));
        out
    }

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, t| t.zero_grad());
    }

    fn set_trainable(&mut self, flag: bool) {
        self.visit_mut("", &mut |_, t| t.set_requires_grad(flag));
    }

    fn accumulate_grads(&mut self, grads: &Gradients<S>) -> Result<()> {
        let mut result = Ok(());
        self.visit_mut("", &mut |_, t| {
            if result.is_ok() {
                result = grads.accumulate_into(t);
            }
        });
        result
    }

    /// `(trainable, total)` scalar counts.
    fn param_counts(&self) -> (usize, usize) {
        let (mut trainable, mut total) = (0, 0);
        self.visit("", &mut |_, t| {
            total += t.len();
            if t.requires_grad() {
                trainable += t.len();
            }
        });
        (trainable, total)
    }
}

impl<S: Scalar, P: Parameters<S>> Parameters<S> for Option<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        if let Some(p) = self {
            p.visit(prefix, f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        if let Some(p) = self {
            p.visit_mut(prefix, f);
        }
    }
}

impl<S: Scalar, P: Parameters<S>> Parameters<S> for Vec<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

impl<S: Scalar> Parameters<S> for Tensor<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        f(prefix.to_string(), self);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        f(prefix.to_string(), self);
    }
}
