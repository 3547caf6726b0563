//! Dense row-major tensors of rank 1 to 4.
//!
//! Storage is generic over [`Element`] so the same kernels run in `f32` for
//! training and in `f64` for gradient-check shadow evaluation. Reductions
//! always accumulate in `f64`.

pub(crate) mod broadcast;
pub mod kernels;

use std::fmt::{Debug, Display};

use num_traits::Float;

use crate::error::{Result, SvtrError};

pub const MAX_RANK: usize = 4;

/// Scalar storage type of a tensor.
pub trait Element: Float + Default + Debug + Display + Send + Sync + 'static {
    const DTYPE: &'static str;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Element for f32 {
    const DTYPE: &'static str = "f32";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    const DTYPE: &'static str = "f64";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(SvtrError::Shape(format!(
            "rank must be in 1..={MAX_RANK}, got shape {shape:?}"
        )));
    }
    if shape.contains(&0) {
        return Err(SvtrError::Shape(format!(
            "dimensions must be positive, got {shape:?}"
        )));
    }
    Ok(())
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape(shape)?;
        if data.len() != numel(shape) {
            return Err(SvtrError::Shape(format!(
                "shape {shape:?} needs {} elements, got {}",
                numel(shape),
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Panics on an invalid shape; for shapes computed by the library itself.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::new(shape, vec![value; numel(shape)]).expect("valid shape")
    }

    pub fn scalar(value: T) -> Self {
        Self::new(&[1], vec![value]).expect("valid shape")
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let data = (0..numel(shape)).map(&mut f).collect();
        Self::new(shape, data).expect("valid shape")
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<T>>) -> Result<()> {
        if let Some(g) = &grad {
            if g.len() != self.data.len() {
                return Err(SvtrError::Shape(format!(
                    "grad has {} elements, tensor has {}",
                    g.len(),
                    self.data.len()
                )));
            }
        }
        self.grad = grad;
        Ok(())
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        if numel(shape) != self.numel() {
            return Err(SvtrError::Dimension {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
            requires_grad: self.requires_grad,
            grad: None,
        })
    }

    /// Converts storage precision; gradient state is dropped.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Square boolean matrix, `true` where a query row may attend to a key column.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoolMask {
    n: usize,
    allowed: Vec<bool>,
}

impl BoolMask {
    pub fn new(n: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != n * n {
            return Err(SvtrError::Shape(format!(
                "mask of side {n} needs {} entries, got {}",
                n * n,
                allowed.len()
            )));
        }
        Ok(Self { n, allowed })
    }

    pub fn full(n: usize) -> Self {
        Self {
            n,
            allowed: vec![true; n * n],
        }
    }

    pub fn side(&self) -> usize {
        self.n
    }

    pub fn get(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.n + key]
    }

    pub fn row(&self, query: usize) -> &[bool] {
        &self.allowed[query * self.n..(query + 1) * self.n]
    }

    pub fn degree(&self, query: usize) -> usize {
        self.row(query).iter().filter(|&&a| a).count()
    }
}
