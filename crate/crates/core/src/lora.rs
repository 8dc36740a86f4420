//! Low-rank adapters on frozen linear projections: `h = W0·x + B·A·x`.

use rand::Rng;

use crate::autodiff::params::join;
use crate::autodiff::{LinearLayer, Parameters, Tape, Tensor, Var};
use crate::backbone::Attention;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Frozen base projection plus trainable `A [r, k_in]`, `B [d, r]`.
#[derive(Debug, Clone)]
pub struct LoraLinear<S> {
    pub w0: LinearLayer<S>,
    pub a: Tensor<S>,
    pub b: Tensor<S>,
    pub rank: usize,
    /// Multiplier on the adapter path; 1 unless an `α/r` scaling is configured.
    pub scale: S,
}

impl<S: Scalar> LoraLinear<S> {
    /// Freezes `w0`; `B` starts at zero and `A` is uniform in `±1/√k_in`.
    pub fn wrap<R: Rng + ?Sized>(mut w0: LinearLayer<S>, rank: usize, rng: &mut R) -> Result<Self> {
        let (d, k_in) = (w0.out_features(), w0.in_features());
        if rank == 0 || rank >= d.min(k_in) {
            return Err(Error::Rank(format!(
                "adapter rank {rank} must lie in 1..{}",
                d.min(k_in)
            )));
        }
        w0.set_trainable(false);
        let bound = 1.0 / (k_in as f64).sqrt();
        Ok(Self {
            w0,
            a: Tensor::uniform(&[rank, k_in], bound, rng).with_requires_grad(true),
            b: Tensor::zeros(&[d, rank]).with_requires_grad(true),
            rank,
            scale: S::one(),
        })
    }

    pub fn from_parts(mut w0: LinearLayer<S>, a: Tensor<S>, b: Tensor<S>) -> Result<Self> {
        let (d, k_in) = (w0.out_features(), w0.in_features());
        let rank = a.dims()[0];
        if a.dims() != [rank, k_in] || b.dims() != [d, rank] {
            return Err(Error::shape(format!(
                "adapter factors {:?}, {:?} do not fit [{d}, {k_in}]",
                a.dims(),
                b.dims()
            )));
        }
        w0.set_trainable(false);
        Ok(Self {
            w0,
            a: a.with_requires_grad(true),
            b: b.with_requires_grad(true),
            rank,
            scale: S::one(),
        })
    }

    /// Uses `α/r` as the adapter multiplier.
    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.scale = S::lit(alpha / self.rank as f64);
        self
    }

    pub fn forward<'t>(&self, tape: &'t Tape<S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        let base = self.w0.forward(tape, x)?;
        let low = x.matmul_nt(tape.param(&self.a))?;
        let mut delta = low.matmul_nt(tape.param(&self.b))?;
        if self.scale != S::one() {
            delta = delta.scale(self.scale);
        }
        base.add(delta)
    }
}

impl<S: Scalar> Parameters<S> for LoraLinear<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        self.w0.visit(prefix, f);
        f(join(prefix, "lora_a"), &self.a);
        f(join(prefix, "lora_b"), &self.b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        self.w0.visit_mut(prefix, f);
        f(join(prefix, "lora_a"), &mut self.a);
        f(join(prefix, "lora_b"), &mut self.b);
    }
}

/// A projection that may or may not carry an adapter. Checkpoint names of
/// the base weights are the same in both cases.
#[derive(Debug, Clone)]
pub enum Projection<S> {
    Plain(LinearLayer<S>),
    Lora(LoraLinear<S>),
}

impl<S: Scalar> Projection<S> {
    pub fn base(&self) -> &LinearLayer<S> {
        match self {
            Self::Plain(l) => l,
            Self::Lora(l) => &l.w0,
        }
    }

    pub fn is_wrapped(&self) -> bool {
        matches!(self, Self::Lora(_))
    }

    pub fn forward<'t>(&self, tape: &'t Tape<S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        match self {
            Self::Plain(l) => l.forward(tape, x),
            Self::Lora(l) => l.forward(tape, x),
        }
    }

    pub fn wrap<R: Rng + ?Sized>(
        &mut self,
        rank: usize,
        alpha: Option<f64>,
        rng: &mut R,
    ) -> Result<()> {
        let base = self.base().clone();
        let mut lora = LoraLinear::wrap(base, rank, rng)?;
        if let Some(a) = alpha {
            lora = lora.with_alpha(a);
        }
        *self = Self::Lora(lora);
        Ok(())
    }
}

impl<S: Scalar> Parameters<S> for Projection<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        match self {
            Self::Plain(l) => l.visit(prefix, f),
            Self::Lora(l) => l.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        match self {
            Self::Plain(l) => l.visit_mut(prefix, f),
            Self::Lora(l) => l.visit_mut(prefix, f),
        }
    }
}

/// Puts an adapter of rank `r` on the query, key, value and output
/// projections. All four are validated before any is replaced.
pub fn wrap_attention<S: Scalar, R: Rng + ?Sized>(
    attn: &mut Attention<S>,
    rank: usize,
    alpha: Option<f64>,
    rng: &mut R,
) -> Result<()> {
    for p in attn.projections() {
        let b = p.base();
        if rank == 0 || rank >= b.out_features().min(b.in_features()) {
            return Err(Error::Rank(format!(
                "adapter rank {rank} must lie in 1..{}",
                b.out_features().min(b.in_features())
            )));
        }
    }
    for p in attn.projections_mut() {
        p.wrap(rank, alpha, rng)?;
    }
    Ok(())
}

/// `(trainable, total, trainable / total)` scalar counts.
pub fn trainable_params<S: Scalar, M: Parameters<S> + ?Sized>(model: &M) -> (usize, usize, f64) {
    let (trainable, total) = model.param_counts();
    let ratio = if total == 0 {
        0.0
    } else {
        trainable as f64 / total as f64
    };
    (trainable, total, ratio)
}
