//! Tape-based reverse-mode differentiation over dense row-major tensors.
//!
//! Only the operations the conversion networks need are provided:
//! kernel-3 convolution, instance normalization, ReLU, the two losses, and a
//! few structural helpers. Every operation is generic over [`Real`] so the
//! same code path trains at `f32` and is gradient-checked at `f64`.

mod adam;
pub mod check;
mod graph;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, SubAssign};

use num_traits::{Float, FromPrimitive};
use thiserror::Error;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use graph::{Graph, Var};

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("loss is not connected to any differentiable tensor of this graph")]
    DetachedGraph,
    #[error("parameter {0} has no gradient")]
    MissingGradient(usize),
}

/// Scalar type usable by the engine.
pub trait Real:
    Float + FromPrimitive + Default + Debug + AddAssign + SubAssign + Sum + Send + Sync + 'static
{
    /// `C ← α·A·B + β·C` with arbitrary row/column strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m×k`, `k×n` and `m×n`
    /// matrices; `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }
}

impl Real for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Dense tensor with an optional gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub shape: Vec<usize>,
    pub values: Vec<F>,
    pub grad: Option<Vec<F>>,
    pub requires_grad: bool,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, values: Vec<F>) -> Result<Self, AutodiffError> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || numel != values.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {shape:?} with {} values", values.len()),
            });
        }
        Ok(Self {
            shape,
            values,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            values: vec![F::zero(); numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(v: F) -> Self {
        Self {
            shape: vec![1],
            values: vec![v],
            grad: None,
            requires_grad: false,
        }
    }

    /// Mark as a trainable parameter.
    pub fn param(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn accumulate_grad(&mut self, g: &[F]) {
        debug_assert_eq!(g.len(), self.values.len());
        match &mut self.grad {
            Some(existing) => existing.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = F::zero());
        }
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        let conv = |v: &[F]| v.iter().map(|x| G::lit(x.to_f64().unwrap())).collect();
        Tensor {
            shape: self.shape.clone(),
            values: conv(&self.values),
            grad: self.grad.as_deref().map(conv),
            requires_grad: self.requires_grad,
        }
    }
}
