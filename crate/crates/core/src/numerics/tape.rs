use crate::error::{Error, Result};

use super::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a backward closure sees: the upstream gradient plus the forward values.
pub struct BackwardCtx<'a> {
    pub grad_out: &'a [f64],
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    /// `needs[i]` is false when input `i` does not require a gradient; the
    /// closure may return `None` for it.
    pub needs: Vec<bool>,
}

/// Vector-Jacobian product of one recorded op, one entry per input.
pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>>>;

struct Node {
    op: &'static str,
    value: Tensor,
    inputs: Vec<usize>,
    backward: Option<BackwardFn>,
}

/// Dynamic reverse-mode tape. Ops are appended during the forward pass and
/// replayed in exact reverse order by [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Its `requires_grad` flag decides whether gradients reach it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: "leaf",
            value,
            inputs: Vec::new(),
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that requires a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_requires_grad(true))
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    /// Appends the result of an op. The output requires a gradient iff any
    /// input does; otherwise the backward closure is dropped.
    pub fn record(
        &mut self,
        op: &'static str,
        value: Tensor,
        inputs: &[Var],
        backward: BackwardFn,
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires = inputs.iter().any(|v| self.nodes[v.0].value.requires_grad());
        self.nodes.push(Node {
            op,
            value: value.with_requires_grad(requires),
            inputs: inputs.iter().map(|v| v.0).collect(),
            backward: requires.then_some(backward),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Backpropagates from a scalar.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_from(loss, vec![1.0])
    }

    /// Backpropagates an explicit upstream gradient `seed` from `root`.
    pub fn backward_from(&mut self, root: Var, seed: Vec<f64>) -> Result<()> {
        if seed.len() != self.value(root).numel() {
            return Err(Error::Dimension(format!(
                "seed gradient of length {} for shape {:?}",
                seed.len(),
                self.shape(root)
            )));
        }
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(seed);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(backward) = &node.backward {
                let ctx = BackwardCtx {
                    grad_out: &g,
                    inputs: node.inputs.iter().map(|&j| &self.nodes[j].value).collect(),
                    output: &node.value,
                    needs: node
                        .inputs
                        .iter()
                        .map(|&j| self.nodes[j].value.requires_grad())
                        .collect(),
                };
                let contributions = backward(&ctx);
                debug_assert_eq!(contributions.len(), node.inputs.len());
                for (&j, c) in node.inputs.iter().zip(contributions) {
                    let Some(c) = c else { continue };
                    if !self.nodes[j].value.requires_grad() {
                        continue;
                    }
                    match &mut grads[j] {
                        Some(acc) => {
                            for (a, v) in acc.iter_mut().zip(&c) {
                                *a += v;
                            }
                        }
                        slot @ None => *slot = Some(c),
                    }
                }
            }
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    op: self.nodes[i].op,
                });
            }
            self.nodes[i].value.set_grad(g)?;
        }
        Ok(())
    }
}
