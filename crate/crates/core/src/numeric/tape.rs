//! Reverse-mode recording of a forward computation.
//!
//! A [`Tape`] stores every intermediate value; [`Tape::backward`] replays the
//! records in reverse to produce gradients for every recorded node. Leaves
//! may borrow their values so parameters are not copied per evaluation.

use std::borrow::Cow;
use std::sync::atomic::{AtomicU64, Ordering};

use super::ops::{self, Unary};
use super::{NumericError, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Var },
    Unary(Unary, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Sum(Var),
}

struct Node<'a> {
    op: Op,
    value: Cow<'a, Tensor>,
}

pub struct Tape<'a> {
    id: u64,
    nodes: Vec<Node<'a>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, op: Op, value: Cow<'a, Tensor>) -> Var {
        self.nodes.push(Node { op, value });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn node(&self, v: Var) -> Result<&Node<'a>, NumericError> {
        if v.tape != self.id {
            return Err(NumericError::MissingForwardRecord);
        }
        self.nodes.get(v.index).ok_or(NumericError::MissingForwardRecord)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, Cow::Owned(value))
    }

    pub fn leaf_ref(&mut self, value: &'a Tensor) -> Var {
        self.push(Op::Leaf, Cow::Borrowed(value))
    }

    pub fn value(&self, v: Var) -> Result<&Tensor, NumericError> {
        Ok(&self.node(v)?.value)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var, NumericError> {
        let out = ops::conv2d(self.value(input)?, self.value(kernel)?, self.value(bias)?)?;
        Ok(self.push(Op::Conv2d { input, kernel, bias }, Cow::Owned(out)))
    }

    pub fn unary(&mut self, kind: Unary, x: Var) -> Result<Var, NumericError> {
        let out = ops::unary(kind, self.value(x)?);
        Ok(self.push(Op::Unary(kind, x), Cow::Owned(out)))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NumericError> {
        self.unary(Unary::Relu, x)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let out = ops::add(self.value(a)?, self.value(b)?)?;
        Ok(self.push(Op::Add(a, b), Cow::Owned(out)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let out = ops::sub(self.value(a)?, self.value(b)?)?;
        Ok(self.push(Op::Sub(a, b), Cow::Owned(out)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, NumericError> {
        let out = ops::scale(self.value(a)?, s);
        Ok(self.push(Op::Scale(a, s), Cow::Owned(out)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumericError> {
        let s = self.value(a)?.sum();
        Ok(self.push(Op::Sum(a), Cow::Owned(Tensor::full(&[], s))))
    }

    /// Propagates `grad_out` (the gradient of a scalar loss with respect to
    /// `output`) back through every record that `output` depends on.
    pub fn backward(&self, output: Var, grad_out: &Tensor) -> Result<Gradients, NumericError> {
        let out_value = self.value(output)?;
        grad_out.expect_shape("backward seed", out_value.shape())?;

        let mut grads: Vec<Option<Tensor>> = vec![None; output.index + 1];
        grads[output.index] = Some(grad_out.clone());

        for index in (0..=output.index).rev() {
            let Some(g) = grads[index].take() else { continue };
            let contributions: Vec<(Var, Tensor)> = match self.nodes[index].op {
                Op::Leaf => {
                    grads[index] = Some(g);
                    continue;
                }
                Op::Conv2d { input, kernel, bias } => {
                    let cg = ops::conv2d_backward(self.value(input)?, self.value(kernel)?, &g)?;
                    vec![(input, cg.input), (kernel, cg.kernel), (bias, cg.bias)]
                }
                Op::Unary(kind, x) => vec![(x, ops::unary_backward(kind, self.value(x)?, &g)?)],
                Op::Add(a, b) => vec![(a, g.clone()), (b, g)],
                Op::Sub(a, b) => vec![(a, g.clone()), (b, ops::scale(&g, -1.0))],
                Op::Scale(a, s) => vec![(a, ops::scale(&g, s))],
                Op::Sum(a) => {
                    let shape = self.value(a)?.shape().to_vec();
                    vec![(a, Tensor::full(&shape, g.data()[0]))]
                }
            };
            for (var, contribution) in contributions {
                match &mut grads[var.index] {
                    Some(acc) => acc.add_assign(&contribution)?,
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(Gradients { tape: self.id, grads })
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.index).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_tensor(data: &[f64]) -> Tensor {
        Tensor::new(&[data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec_tensor(&[0.3, -2.0, 5.0]));
        let s = tape.sum(x).unwrap();
        let grads = tape.backward(s, &Tensor::full(&[], 1.0)).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn relu_sum_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec_tensor(&[-1.0, 2.0]));
        let r = tape.relu(x).unwrap();
        let s = tape.sum(r).unwrap();
        let grads = tape.backward(s, &Tensor::full(&[], 1.0)).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn shared_input_accumulates() {
        // loss = sum(x + 3x - x) = 3 sum(x)
        let mut tape = Tape::new();
        let x = tape.leaf(vec_tensor(&[1.0, 2.0]));
        let three = tape.scale(x, 3.0).unwrap();
        let a = tape.add(x, three).unwrap();
        let b = tape.sub(a, x).unwrap();
        let s = tape.sum(b).unwrap();
        let grads = tape.backward(s, &Tensor::full(&[], 1.0)).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn backward_from_foreign_var_is_rejected() {
        let mut other = Tape::new();
        let foreign = other.leaf(vec_tensor(&[1.0]));
        let tape = Tape::new();
        assert!(matches!(
            tape.backward(foreign, &vec_tensor(&[1.0])),
            Err(NumericError::MissingForwardRecord)
        ));
    }

    #[test]
    fn backward_seed_shape_is_checked() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec_tensor(&[1.0, 2.0]));
        assert!(tape.backward(x, &vec_tensor(&[1.0])).is_err());
    }

    #[test]
    fn unused_leaf_gets_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec_tensor(&[1.0]));
        let unused = tape.leaf(vec_tensor(&[2.0]));
        let s = tape.sum(x).unwrap();
        let grads = tape.backward(s, &Tensor::full(&[], 1.0)).unwrap();
        assert!(grads.get(unused).is_none());
    }
}
