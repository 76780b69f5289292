//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Computations are written once against the [`Backend`] trait and run on
//! either of two backends:
//!
//! - [`Tape`] records every primitive and can run a reverse pass from a
//!   scalar output to all registered parameters.
//! - [`Eager`] evaluates the same primitives without recording, for
//!   simulation and evaluation where no gradient is needed.
//!
//! Both call the same numeric kernels, so forward values agree bit for bit.

mod kernels;
mod params;
mod prim;
mod tape;
mod tensor;

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub use params::{ParamId, ParamStore};
pub use prim::Prim;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;


/// Elementwise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Sigmoid,
    Softplus,
}

/// A place where primitives are evaluated.
pub trait Backend {
    type Value: Clone;

    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor;

    fn constant(&mut self, t: Tensor) -> Self::Value;

    fn param(&self, id: ParamId) -> Self::Value;

    fn apply(&mut self, prim: Prim, inputs: &[&Self::Value]) -> Result<Self::Value>;

    /// `x · wᵀ + b`, with `w: [n_out, n_in]` and `b: [n_out]`.
    fn affine(&mut self, x: &Self::Value, w: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.apply(Prim::Affine, &[x, w, b])
    }

    /// `x · wᵀ` without a bias.
    fn linear(&mut self, x: &Self::Value, w: &Self::Value) -> Result<Self::Value> {
        self.apply(Prim::Linear, &[x, w])
    }

    /// Fused `act(x · wᵀ + b)`; keeps only the activated output.
    fn dense(
        &mut self,
        x: &Self::Value,
        w: &Self::Value,
        b: &Self::Value,
        act: Activation,
    ) -> Result<Self::Value> {
        self.apply(Prim::Dense(act), &[x, w, b])
    }

    fn activation(&mut self, kind: Activation, x: &Self::Value) -> Result<Self::Value> {
        self.apply(Prim::Act(kind), &[x])
    }

    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.apply(Prim::Add, &[a, b])
    }

    fn sub(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.apply(Prim::Sub, &[a, b])
    }

    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.apply(Prim::Mul, &[a, b])
    }

    fn div(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.apply(Prim::Div, &[a, b])
    }

    fn scale(&mut self, a: &Self::Value, c: f64) -> Result<Self::Value> {
        self.apply(Prim::Scale(c), &[a])
    }

    fn add_scalar(&mut self, a: &Self::Value, c: f64) -> Result<Self::Value> {
        self.apply(Prim::AddScalar(c), &[a])
    }

    fn square(&mut self, a: &Self::Value) -> Result<Self::Value> {
        self.apply(Prim::Square, &[a])
    }

    fn exp(&mut self, a: &Self::Value) -> Result<Self::Value> {
        self.apply(Prim::Exp, &[a])
    }

    fn ln(&mut self, a: &Self::Value) -> Result<Self::Value> {
        self.apply(Prim::Ln, &[a])
    }

    fn sqrt(&mut self, a: &Self::Value) -> Result<Self::Value> {
        self.apply(Prim::Sqrt, &[a])
    }

    /// Sum of all entries, as a scalar.
    fn sum(&mut self, a: &Self::Value) -> Result<Self::Value> {
        self.apply(Prim::Sum, &[a])
    }

    /// `[rows, cols] -> [rows, 1]`.
    fn row_sum(&mut self, a: &Self::Value) -> Result<Self::Value> {
        self.apply(Prim::RowSum, &[a])
    }

    /// Euclidean norm of each row, `[rows, cols] -> [rows, 1]`.
    fn row_norm(&mut self, a: &Self::Value) -> Result<Self::Value> {
        self.apply(Prim::RowNorm, &[a])
    }

    fn concat_cols(&mut self, parts: &[&Self::Value]) -> Result<Self::Value> {
        self.apply(Prim::ConcatCols, parts)
    }

    fn slice_cols(&mut self, a: &Self::Value, start: usize, len: usize) -> Result<Self::Value> {
        self.apply(Prim::SliceCols { start, len }, &[a])
    }
}

/// Non-recording backend.
pub struct Eager {
    params: Vec<Rc<Tensor>>,
}

impl Eager {
    pub fn new(store: &ParamStore) -> Self {
        Eager {
            params: store.tensors().iter().cloned().map(Rc::new).collect(),
        }
    }

    /// A backend with no parameters, for pure tensor arithmetic.
    pub fn detached() -> Self {
        Eager { params: Vec::new() }
    }
}

impl Backend for Eager {
    type Value = Rc<Tensor>;

    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor {
        v
    }

    fn constant(&mut self, t: Tensor) -> Self::Value {
        Rc::new(t)
    }

    fn param(&self, id: ParamId) -> Self::Value {
        Rc::clone(&self.params[id.index()])
    }

    fn apply(&mut self, prim: Prim, inputs: &[&Self::Value]) -> Result<Self::Value> {
        let tensors: Vec<&Tensor> = inputs.iter().map(|v| v.as_ref()).collect();
        prim.forward(&tensors).map(Rc::new)
    }
}
