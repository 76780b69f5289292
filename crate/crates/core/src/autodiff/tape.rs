use super::params::{ParamId, ParamStore};
use super::prim::Prim;
use super::{Backend, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    value: Tensor,
    prim: Option<Prim>,
    inputs: Vec<usize>,
    requires_grad: bool,
    slot: Option<usize>,
}

/// Define-by-run record of primitives.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and the reverse pass is a single backward sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    slots: Vec<usize>,
}

/// Gradients of a scalar output with respect to every registered parameter,
/// in registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.index()]
    }

    pub fn slot(&self, k: usize) -> &Tensor {
        &self.grads[k]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn as_slice(&self) -> &[Tensor] {
        &self.grads
    }

    pub fn into_vec(self) -> Vec<Tensor> {
        self.grads
    }

    /// Global Euclidean norm over all gradients.
    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose parameter slots are the tensors of `store`, in order, so
    /// that slot `k` corresponds to `ParamId(k)`.
    pub fn with_params(store: &ParamStore) -> Self {
        let mut tape = Tape::new();
        for t in store.tensors() {
            tape.parameter(t.clone());
        }
        tape
    }

    /// Registers a differentiable leaf and returns its handle.
    pub fn parameter(&mut self, t: Tensor) -> Var {
        let slot = self.slots.len();
        self.slots.push(self.nodes.len());
        self.push(Node {
            value: t,
            prim: None,
            inputs: Vec::new(),
            requires_grad: true,
            slot: Some(slot),
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn num_parameters(&self) -> usize {
        self.slots.len()
    }

    pub fn get(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar node. Does not modify the tape, so it can be
    /// repeated.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = &self.nodes[output.0];
        if out.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                out.value.shape()
            )));
        }
        let mut result: Vec<Option<Vec<f64>>> = vec![None; self.slots.len()];
        let mut grads: Vec<Option<Vec<f64>>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(vec![1.0]);

        for i in (0..=output.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(slot) = node.slot {
                result[slot] = Some(gy);
                continue;
            }
            let Some(prim) = node.prim else { continue };

            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let mut buffers: Vec<Option<Vec<f64>>> = Vec::with_capacity(node.inputs.len());
            for (k, &j) in node.inputs.iter().enumerate() {
                if !self.nodes[j].requires_grad {
                    buffers.push(None);
                } else if node.inputs[..k].contains(&j) {
                    buffers.push(Some(vec![0.0; self.nodes[j].value.len()]));
                } else {
                    let len = self.nodes[j].value.len();
                    buffers.push(Some(grads[j].take().unwrap_or_else(|| vec![0.0; len])));
                }
            }
            {
                let mut views: Vec<Option<&mut [f64]>> =
                    buffers.iter_mut().map(|b| b.as_deref_mut()).collect();
                prim.backward(&inputs, &node.value, &gy, &mut views);
            }
            for (k, (&j, buf)) in node.inputs.iter().zip(buffers).enumerate() {
                let Some(buf) = buf else { continue };
                if node.inputs[..k].contains(&j) {
                    let target = grads[j].as_mut().expect("first occurrence restored earlier");
                    for (t, b) in target.iter_mut().zip(&buf) {
                        *t += b;
                    }
                } else {
                    grads[j] = Some(buf);
                }
            }
        }

        let grads = result
            .into_iter()
            .zip(&self.slots)
            .map(|(g, &node)| {
                let shape = self.nodes[node].value.shape().to_vec();
                match g {
                    Some(data) => Tensor::from_parts(shape, data),
                    None => Tensor::zeros(shape),
                }
            })
            .collect();
        Ok(Gradients { grads })
    }
}

impl Backend for Tape {
    type Value = Var;

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        &self.nodes[v.0].value
    }

    fn constant(&mut self, t: Tensor) -> Var {
        self.push(Node {
            value: t,
            prim: None,
            inputs: Vec::new(),
            requires_grad: false,
            slot: None,
        })
    }

    fn param(&self, id: ParamId) -> Var {
        Var(self.slots[id.index()])
    }

    fn apply(&mut self, prim: Prim, inputs: &[&Var]) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let value = prim.forward(&values)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(Node {
            value,
            prim: Some(prim),
            inputs: inputs.iter().map(|v| v.0).collect(),
            requires_grad,
            slot: None,
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Activation;

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.parameter(Tensor::scalar(3.0));
        let y = tape.mul(&x, &x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.slot(0).item().unwrap(), 6.0);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut tape = Tape::new();
        let x = tape.parameter(Tensor::scalar(0.0));
        let y = tape.activation(Activation::Sigmoid, &x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.slot(0).item().unwrap(), 0.25);
    }

    #[test]
    fn unused_leaf_gets_zero() {
        let mut tape = Tape::new();
        let x = tape.parameter(Tensor::scalar(2.0));
        let _unused = tape.parameter(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.square(&x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.slot(1), &Tensor::zeros(vec![2]));
    }

    #[test]
    fn non_scalar_output_rejected() {
        let mut tape = Tape::new();
        let x = tape.parameter(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.square(&x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_is_repeatable() {
        let mut tape = Tape::new();
        let x = tape.parameter(Tensor::vector(vec![0.3, -1.2]));
        let t = tape.activation(Activation::Tanh, &x).unwrap();
        let s = tape.mul(&t, &x).unwrap();
        let y = tape.sum(&s).unwrap();
        assert_eq!(tape.backward(y).unwrap(), tape.backward(y).unwrap());
    }

    #[test]
    fn constants_receive_no_gradient_slot() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(5.0));
        let x = tape.parameter(Tensor::scalar(2.0));
        let y = tape.mul(&c, &x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.slot(0).item().unwrap(), 5.0);
    }
}
