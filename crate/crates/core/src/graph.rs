//! Reverse-mode automatic differentiation over a dynamically recorded tape.
//!
//! A [`Graph`] owns every value produced during one forward pass. Operations
//! append a node holding the output value, the input handles and a backward
//! rule. Nodes are only ever appended, so the tape is topologically ordered
//! by construction and [`Graph::backward`] walks it once in reverse.
//!
//! Parameters enter the tape as leaves ([`Graph::leaf`]); values that must
//! never receive gradient enter as constants ([`Graph::constant`]) or are cut
//! off with [`Graph::detach`].

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one recorded operation.
///
/// Given the gradient flowing into the op's output, return one gradient per
/// input, or `None` for inputs the rule does not reach.
pub trait Backward<T: Real> {
    fn backward(
        &self,
        upstream: &Tensor<T>,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>>;

    fn name(&self) -> &'static str;
}

/// Backward rule built from a closure; see [`Graph::custom`].
pub struct FnBackward<F> {
    name: &'static str,
    f: F,
}

impl<T, F> Backward<T> for FnBackward<F>
where
    T: Real,
    F: Fn(&Tensor<T>, &[&Tensor<T>], &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>>,
{
    fn backward(
        &self,
        upstream: &Tensor<T>,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        (self.f)(upstream, inputs, output)
    }

    fn name(&self) -> &'static str {
        self.name
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    inputs: Vec<Var>,
    rule: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
    retain: bool,
}

/// One recording tape. Single-writer: a training step owns its graph.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> fmt::Debug for Graph<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .finish()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node<T>) -> Var {
        self.nodes.push(node);
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input (a parameter or a probed activation).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(Node {
            value,
            inputs: Vec::new(),
            rule: None,
            requires_grad: true,
            retain: true,
        })
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Node {
            value,
            inputs: Vec::new(),
            rule: None,
            requires_grad: false,
            retain: false,
        })
    }

    /// Copy of `v`'s value cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// Record an operation. The node only participates in backward if some
    /// input does.
    pub fn record(
        &mut self,
        inputs: &[Var],
        value: Tensor<T>,
        rule: Box<dyn Backward<T>>,
    ) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Node {
            value,
            inputs: inputs.to_vec(),
            rule: requires_grad.then_some(rule),
            requires_grad,
            retain: false,
        })
    }

    /// Inject an operation with a caller-supplied forward value and backward
    /// rule. The closure receives `(upstream, input values, output value)`.
    pub fn custom<F>(&mut self, name: &'static str, inputs: &[Var], value: Tensor<T>, f: F) -> Var
    where
        F: Fn(&Tensor<T>, &[&Tensor<T>], &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> + 'static,
    {
        self.record(inputs, value, Box::new(FnBackward { name, f }))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Keep the gradient of an intermediate value after backward. Leaves
    /// always keep theirs.
    pub fn retain_grad(&mut self, v: Var) {
        self.nodes[v.0].retain = true;
    }

    /// Accumulated gradient of the last [`backward`](Self::backward) calls.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    /// Backpropagate from a scalar loss. Gradients accumulate across calls
    /// until [`zero_grad`](Self::zero_grad).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::contract("loss does not depend on any leaf"));
        }
        let mut local: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        local[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));

        for id in (0..=loss.0).rev() {
            let Some(upstream) = local[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if let Some(rule) = &node.rule {
                let inputs: Vec<&Tensor<T>> =
                    node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let input_grads = rule.backward(&upstream, &inputs, &node.value)?;
                if input_grads.len() != node.inputs.len() {
                    return Err(Error::dim(format!(
                        "`{}` backward returned {} gradients for {} inputs",
                        rule.name(),
                        input_grads.len(),
                        node.inputs.len()
                    )));
                }
                for (input, g) in node.inputs.iter().zip(input_grads) {
                    let Some(g) = g else { continue };
                    let target = &self.nodes[input.0];
                    if !target.requires_grad {
                        continue;
                    }
                    if g.shape() != target.value.shape() {
                        return Err(Error::dim(format!(
                            "`{}` backward produced gradient {:?} for input {:?}",
                            rule.name(),
                            g.shape(),
                            target.value.shape()
                        )));
                    }
                    match &mut local[input.0] {
                        Some(acc) => acc.add_assign(&g)?,
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            if self.nodes[id].retain {
                match &mut self.grads[id] {
                    Some(acc) => acc.add_assign(&upstream)?,
                    slot @ None => *slot = Some(upstream),
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_forward_with_doubled_backward() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap());
        let value = g.value(x).clone();
        let y = g.custom("double_grad", &[x], value, |up, _, _| Ok(vec![Some(up.scale(2.0))]));
        let w = g.constant(Tensor::from_f64(&[3], &[0.3, 0.7, -1.1]).unwrap());
        let prod = g.mul(y, w).unwrap();
        let loss = g.sum(prod);
        g.backward(loss).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let expected: Vec<f64> = [0.3, 0.7, -1.1].iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.grad(x).unwrap().data(), expected.as_slice());
    }

    #[test]
    fn zero_backward_leaves_input_untouched() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::ones(&[2]));
        let value = g.value(x).clone();
        let y = g.custom("zero_grad", &[x], value, |_, _, _| Ok(vec![None]));
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn badly_shaped_custom_backward_is_a_dimension_error() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::ones(&[2]));
        let value = g.value(x).clone();
        let y = g.custom("bad", &[x], value, |_, _, _| Ok(vec![Some(Tensor::ones(&[3]))]));
        let loss = g.sum(y);
        assert!(matches!(g.backward(loss), Err(Error::Dimension(_))));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::ones(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0]);
        g.zero_grad();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn detached_values_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        let d = g.detach(x);
        let p = g.mul(x, d).unwrap();
        let loss = g.sum(p);
        g.backward(loss).unwrap();
        assert!(g.grad(d).is_none());
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 2.0]);
    }
}
