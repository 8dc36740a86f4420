use rand::Rng;

use super::params::{join, Parameters};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Affine map `y = x·Wᵀ + b` over row vectors. `weight` is `[out, in]`.
#[derive(Debug, Clone)]
pub struct LinearLayer<S> {
    pub weight: Tensor<S>,
    pub bias: Option<Tensor<S>>,
}

impl<S: Scalar> LinearLayer<S> {
    /// Uniform init in `[-1/√in, 1/√in]` for weight and bias.
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, bias: bool, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let weight = Tensor::uniform(&[output, input], bound, rng).with_requires_grad(true);
        let bias = bias.then(|| Tensor::uniform(&[output], bound, rng).with_requires_grad(true));
        Self { weight, bias }
    }

    pub fn from_parts(weight: Tensor<S>, bias: Option<Tensor<S>>) -> Result<Self> {
        if weight.dims().len() != 2 {
            return Err(Error::shape(format!(
                "linear weight must be 2-D, got {:?}",
                weight.dims()
            )));
        }
        if let Some(b) = &bias {
            if b.dims() != [weight.rows()] {
                return Err(Error::shape(format!(
                    "bias {:?} does not match weight {:?}",
                    b.dims(),
                    weight.dims()
                )));
            }
        }
        Ok(Self { weight, bias })
    }

    pub fn in_features(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_features(&self) -> usize {
        self.weight.rows()
    }

    pub fn trainable(&self) -> bool {
        self.weight.requires_grad()
    }

    pub fn set_trainable(&mut self, flag: bool) {
        self.weight.set_requires_grad(flag);
        if let Some(b) = &mut self.bias {
            b.set_requires_grad(flag);
        }
    }

    pub fn zero_bias(&mut self) {
        if let Some(b) = &mut self.bias {
            b.data_mut().iter_mut().for_each(|v| *v = S::zero());
        }
    }

    /// Untracked forward on a plain `[n, in]` tensor.
    pub fn apply(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        if x.dims().len() != 2 || x.cols() != self.in_features() {
            return Err(Error::shape(format!(
                "linear expects width {}, got {:?}",
                self.in_features(),
                x.dims()
            )));
        }
        let (n, out) = (x.rows(), self.out_features());
        let mut y = vec![S::zero(); n * out];
        super::kernels::matmul_nt_acc(
            x.data(),
            self.weight.data(),
            &mut y,
            n,
            self.in_features(),
            out,
        );
        if let Some(b) = &self.bias {
            for row in y.chunks_exact_mut(out) {
                row.iter_mut()
                    .zip(b.data())
                    .for_each(|(v, &bv)| *v = *v + bv);
            }
        }
        Tensor::new(&[n, out], y, false)
    }

    pub fn forward<'t>(&self, tape: &'t Tape<S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        if x.cols() != self.in_features() {
            return Err(Error::shape(format!(
                "linear expects width {}, got {:?}",
                self.in_features(),
                x.dims()
            )));
        }
        let y = x.matmul_nt(tape.param(&self.weight))?;
        match &self.bias {
            Some(b) => y.add(tape.param(b)),
            None => Ok(y),
        }
    }
}

impl<S: Scalar> Parameters<S> for LinearLayer<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}
