//! A forward-computation interface shared by the recording tape and a
//! plain evaluator that keeps nothing beyond the live values.

use std::rc::Rc;
use std::sync::Arc;

use super::ops;
use super::tape::{AttentionLayout, Tape, Var};
use super::tensor::{Real, Tensor};
use super::NumError;

/// The operations a network forward pass needs.
pub trait Graph<T: Real> {
    type Node: Clone;

    fn constant(&mut self, value: Tensor<T>) -> Self::Node;
    fn param(&mut self, value: Tensor<T>) -> Self::Node;
    fn value<'a>(&'a self, node: &'a Self::Node) -> &'a Tensor<T>;

    fn matmul(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node, NumError>;
    fn add(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node, NumError>;
    fn mul(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node, NumError>;
    fn add_row_bias(&mut self, x: &Self::Node, bias: &Self::Node) -> Result<Self::Node, NumError>;
    fn layer_norm(
        &mut self,
        x: &Self::Node,
        gain: &Self::Node,
        bias: &Self::Node,
        eps: T,
    ) -> Result<Self::Node, NumError>;
    fn gelu(&mut self, x: &Self::Node) -> Self::Node;
    fn gather_rows(&mut self, x: &Self::Node, rows: Vec<usize>) -> Result<Self::Node, NumError>;
    fn attention(
        &mut self,
        q: &Self::Node,
        k: &Self::Node,
        v: &Self::Node,
        sink: Option<(&Self::Node, &Self::Node)>,
        layout: Arc<AttentionLayout>,
        heads: usize,
    ) -> Result<Self::Node, NumError>;
}

impl<T: Real> Graph<T> for Tape<T> {
    type Node = Var;

    fn constant(&mut self, value: Tensor<T>) -> Var {
        Tape::constant(self, value)
    }
    fn param(&mut self, value: Tensor<T>) -> Var {
        Tape::param(self, value)
    }
    fn value<'a>(&'a self, node: &'a Var) -> &'a Tensor<T> {
        Tape::value(self, *node)
    }
    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var, NumError> {
        Tape::matmul(self, *a, *b)
    }
    fn add(&mut self, a: &Var, b: &Var) -> Result<Var, NumError> {
        Tape::add(self, *a, *b)
    }
    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var, NumError> {
        Tape::mul(self, *a, *b)
    }
    fn add_row_bias(&mut self, x: &Var, bias: &Var) -> Result<Var, NumError> {
        Tape::add_row_bias(self, *x, *bias)
    }
    fn layer_norm(&mut self, x: &Var, gain: &Var, bias: &Var, eps: T) -> Result<Var, NumError> {
        Tape::layer_norm(self, *x, *gain, *bias, eps)
    }
    fn gelu(&mut self, x: &Var) -> Var {
        Tape::gelu(self, *x)
    }
    fn gather_rows(&mut self, x: &Var, rows: Vec<usize>) -> Result<Var, NumError> {
        Tape::gather_rows(self, *x, rows)
    }
    fn attention(
        &mut self,
        q: &Var,
        k: &Var,
        v: &Var,
        sink: Option<(&Var, &Var)>,
        layout: Arc<AttentionLayout>,
        heads: usize,
    ) -> Result<Var, NumError> {
        Tape::attention(self, *q, *k, *v, sink.map(|(a, b)| (*a, *b)), layout, heads)
    }
}

/// Evaluates immediately; intermediates are freed as soon as the caller
/// drops their handles.
#[derive(Default)]
pub struct Eager;

impl<T: Real> Graph<T> for Eager {
    type Node = Rc<Tensor<T>>;

    fn constant(&mut self, value: Tensor<T>) -> Self::Node {
        Rc::new(value)
    }
    fn param(&mut self, value: Tensor<T>) -> Self::Node {
        Rc::new(value)
    }
    fn value<'a>(&'a self, node: &'a Self::Node) -> &'a Tensor<T> {
        node
    }
    fn matmul(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node, NumError> {
        ops::matmul(a, b).map(Rc::new)
    }
    fn add(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node, NumError> {
        ops::add(a, b).map(Rc::new)
    }
    fn mul(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node, NumError> {
        ops::mul(a, b).map(Rc::new)
    }
    fn add_row_bias(&mut self, x: &Self::Node, bias: &Self::Node) -> Result<Self::Node, NumError> {
        ops::add_row_bias(x, bias).map(Rc::new)
    }
    fn layer_norm(
        &mut self,
        x: &Self::Node,
        gain: &Self::Node,
        bias: &Self::Node,
        eps: T,
    ) -> Result<Self::Node, NumError> {
        ops::layer_norm(x, gain, bias, eps).map(Rc::new)
    }
    fn gelu(&mut self, x: &Self::Node) -> Self::Node {
        Rc::new(ops::gelu_tensor(x))
    }
    fn gather_rows(&mut self, x: &Self::Node, rows: Vec<usize>) -> Result<Self::Node, NumError> {
        ops::gather_rows(x, &rows).map(Rc::new)
    }
    fn attention(
        &mut self,
        q: &Self::Node,
        k: &Self::Node,
        v: &Self::Node,
        sink: Option<(&Self::Node, &Self::Node)>,
        layout: Arc<AttentionLayout>,
        heads: usize,
    ) -> Result<Self::Node, NumError> {
        let sink = sink.map(|(a, b)| (a.as_ref(), b.as_ref()));
        let (out, _) = ops::attention(q, k, v, sink, &layout, heads, false)?;
        Ok(Rc::new(out))
    }
}
