use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Identity of a stored tensor; gradients computed on a tape are keyed by it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TensorId(u64);

impl TensorId {
    fn fresh() -> Self {
        TensorId(NEXT_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// Dense row-major array owned outside any tape (weights, frames, inputs).
#[derive(Debug, Clone)]
pub struct Tensor<S> {
    id: TensorId,
    dims: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

impl<S> PartialEq for Tensor<S>
where
    S: PartialEq,
{
    /// Value equality: dims and data, ignoring identity and gradient state.
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims && self.data == other.data
    }
}

pub(crate) fn checked_len(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() {
        return Err(Error::Size("tensor needs at least one extent".into()));
    }
    if let Some(pos) = dims.iter().position(|&d| d == 0) {
        return Err(Error::Size(format!("extent {pos} is zero in {dims:?}")));
    }
    Ok(dims.iter().product())
}

impl<S: Scalar> Tensor<S> {
    pub fn new(dims: &[usize], values: Vec<S>, requires_grad: bool) -> Result<Self> {
        let len = checked_len(dims)?;
        if len != values.len() {
            return Err(Error::Size(format!(
                "dims {dims:?} hold {len} values, got {}",
                values.len()
            )));
        }
        Ok(Self {
            id: TensorId::fresh(),
            dims: dims.to_vec(),
            data: values,
            requires_grad,
            grad: None,
        })
    }

    pub fn from_slice(dims: &[usize], values: &[S]) -> Result<Self> {
        Self::new(dims, values.to_vec(), false)
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let len = checked_len(dims).expect("non-empty positive dims");
        Self::new(dims, vec![S::zero(); len], false).expect("length matches")
    }

    pub fn full(dims: &[usize], value: S) -> Self {
        let len = checked_len(dims).expect("non-empty positive dims");
        Self::new(dims, vec![value; len], false).expect("length matches")
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = S::one();
        }
        t
    }

    /// Uniform samples in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(dims: &[usize], bound: f64, rng: &mut R) -> Self {
        let len = checked_len(dims).expect("non-empty positive dims");
        let values = (0..len)
            .map(|_| S::lit(rng.gen_range(-bound..=bound)))
            .collect();
        Self::new(dims, values, false).expect("length matches")
    }

    pub fn from_f64(dims: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(dims, values.iter().map(|&v| S::lit(v)).collect(), false)
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64_lossy()).collect()
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn id(&self) -> TensorId {
        self.id
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    /// Mutable access to the values. Extents stay fixed.
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the stored gradient, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[S]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::shape(format!(
                "gradient of length {} for tensor of length {}",
                g.len(),
                self.data.len()
            )));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.dims[0]
    }

    /// Trailing extent of a 2-D tensor.
    pub fn cols(&self) -> usize {
        *self.dims.last().expect("non-empty dims")
    }

    pub fn at2(&self, i: usize, j: usize) -> S {
        self.data[i * self.dims[1] + j]
    }

    pub fn at3(&self, c: usize, i: usize, j: usize) -> S {
        self.data[(c * self.dims[1] + i) * self.dims[2] + j]
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Self> {
        let len = checked_len(dims)?;
        if len != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {dims:?}",
                self.dims
            )));
        }
        Self::new(dims, self.data.clone(), self.requires_grad)
    }

    /// Copy of the value with a new identity and no gradient.
    pub fn detached(&self) -> Self {
        Self::new(&self.dims, self.data.clone(), false).expect("same dims")
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs().to_f64_lossy())
            .fold(0.0, f64::max)
    }

    /// Plain (untracked) matrix product, used by oracles and inference helpers.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.dims.len() != 2 || other.dims.len() != 2 || self.dims[1] != other.dims[0] {
            return Err(Error::shape(format!(
                "matmul of {:?} and {:?}",
                self.dims, other.dims
            )));
        }
        let (m, k, n) = (self.dims[0], self.dims[1], other.dims[1]);
        let mut out = vec![S::zero(); m * n];
        crate::autodiff::kernels::matmul_acc(&self.data, &other.data, &mut out, m, k, n);
        Self::new(&[m, n], out, false)
    }
}
