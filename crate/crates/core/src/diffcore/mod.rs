//! Dense row-major tensors with a reverse-mode tape.
//!
//! A [`Graph`] records every primitive applied during one forward pass;
//! [`Graph::backward`] walks it in reverse and returns exact gradients for
//! every leaf that requires them. Parameters live outside the tape in a
//! [`ParamStore`] and are pulled in per step, so one graph corresponds to one
//! training step. Double backward is not supported.
//!
//! Everything is generic over [`Real`]: `f32` for training, `f64` for
//! finite-difference verification.

pub mod gradcheck;
mod graph;
mod kernels;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, OpKind, Var};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

use num_traits::{Float, FromPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;
use thiserror::Error;

pub trait Real:
    Float + FromPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite constant")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("real converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for size {size}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("{op}: nothing to reduce over")]
    EmptyReduction { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("duplicate parameter name {0}")]
    DuplicateParameter(String),
}
