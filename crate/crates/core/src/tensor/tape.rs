use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Everything a backward rule gets to look at.
pub struct BackwardCtx<'a> {
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    /// Gradient of the loss with respect to `output`.
    pub grad: &'a [f64],
    /// Which inputs need a gradient; rules may skip the others.
    pub needs: Vec<bool>,
}

/// Backward rules return one optional contribution per input, in input order.
pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>>>;

struct Node {
    op: &'static str,
    value: Tensor,
    inputs: Vec<Var>,
    tracks_grad: bool,
    backward: Option<BackwardFn>,
}

/// Deliberate corruption of one op's backward rule, used to prove that the
/// gradient checker notices a broken rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fault {
    pub op: &'static str,
    pub factor: f64,
}

/// Eager recording of differentiable operations.
///
/// Every op evaluates immediately and appends a node. Nodes whose inputs
/// do not need gradients keep no backward rule.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<Fault>,
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    visited: Vec<usize>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Node indices whose backward rule ran, in execution order.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
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

    /// Scale every gradient contribution produced by `op` by `factor`.
    pub fn inject_fault(&mut self, op: &'static str, factor: f64) {
        self.fault = Some(Fault { op, factor });
    }

    /// Records a leaf. Gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let tracks = t.requires_grad();
        self.nodes.push(Node {
            op: "leaf",
            value: t,
            inputs: Vec::new(),
            tracks_grad: tracks,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    pub fn tracks_grad(&self, v: Var) -> bool {
        self.nodes[v.0].tracks_grad
    }

    /// Appends an op result. This is the extension point for fused ops
    /// defined outside this module.
    pub fn push<F>(&mut self, op: &'static str, inputs: &[Var], value: Tensor, backward: F) -> Result<Var>
    where
        F: Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> + 'static,
    {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let tracks = inputs.iter().any(|v| self.nodes[v.0].tracks_grad);
        self.nodes.push(Node {
            op,
            value,
            inputs: inputs.to_vec(),
            tracks_grad: tracks,
            backward: if tracks { Some(Box::new(backward)) } else { None },
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut visited = Vec::new();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(rule) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            visited.push(i);
            let ctx = BackwardCtx {
                inputs: node.inputs.iter().map(|v| &self.nodes[v.0].value).collect(),
                output: &node.value,
                grad: &g,
                needs: node.inputs.iter().map(|v| self.nodes[v.0].tracks_grad).collect(),
            };
            let contributions = rule(&ctx);
            debug_assert_eq!(contributions.len(), node.inputs.len(), "op {}", node.op);
            let scale = match self.fault {
                Some(f) if f.op == node.op => Some(f.factor),
                _ => None,
            };
            for (input, contrib) in node.inputs.iter().zip(contributions) {
                let Some(mut c) = contrib else { continue };
                if !self.nodes[input.0].tracks_grad {
                    continue;
                }
                if let Some(s) = scale {
                    c.iter_mut().for_each(|v| *v *= s);
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(c),
                }
            }
            // keep the loss gradient around for inspection
            if i == loss.0 {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads, visited })
    }
}
