use std::cell::Cell;
use std::collections::HashMap;

use super::Tensor;
use crate::error::{Error, Result};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Whether forward kernels currently record tape nodes on this thread.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(Cell::get)
}

/// Disables tape recording until dropped.
pub struct NoGradGuard {
    previous: bool,
}

impl NoGradGuard {
    pub fn new() -> Self {
        let previous = GRAD_ENABLED.with(|g| g.replace(false));
        NoGradGuard { previous }
    }
}

impl Default for NoGradGuard {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.previous));
    }
}

/// Run `f` without recording tape nodes.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let _guard = NoGradGuard::new();
    f()
}

/// Vector-Jacobian product of one forward kernel.
///
/// `backward` receives the parents, the forward output and the gradient of
/// the loss w.r.t. that output, and returns one gradient per parent (`None`
/// for parents that do not require one). Anything else the rule needs is
/// saved inside the implementing struct.
pub trait BackwardOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[Tensor], output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>>;
}

pub(crate) struct TapeNode {
    op: Box<dyn BackwardOp>,
    inputs: Vec<Tensor>,
}

impl TapeNode {
    pub(crate) fn new(op: Box<dyn BackwardOp>, inputs: Vec<Tensor>) -> Self {
        TapeNode { op, inputs }
    }

    pub(crate) fn op_name(&self) -> &'static str {
        self.op.name()
    }
}

/// Post-order over the tracked subgraph ending at `root`.
fn topological_order(root: &Tensor) -> Result<Vec<Tensor>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        Active,
        Done,
    }
    let mut marks: HashMap<usize, Mark> = HashMap::new();
    let mut order = Vec::new();
    let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
    marks.insert(root.id(), Mark::Active);
    while let Some((t, next)) = stack.pop() {
        let parents = t.node().map(|n| n.inputs.as_slice()).unwrap_or(&[]);
        if let Some(i) = (next..parents.len()).find(|&i| parents[i].requires_grad()) {
            let parent = parents[i].clone();
            stack.push((t.clone(), i + 1));
            match marks.get(&parent.id()) {
                Some(Mark::Active) => {
                    return Err(Error::Internal(format!(
                        "cycle in tape through tensor {}",
                        parent.id()
                    )))
                }
                Some(Mark::Done) => {}
                None => {
                    marks.insert(parent.id(), Mark::Active);
                    stack.push((parent.clone(), 0));
                }
            }
        } else {
            marks.insert(t.id(), Mark::Done);
            order.push(t);
        }
    }
    Ok(order)
}

pub(crate) fn backward(loss: &Tensor) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::Contract(format!(
            "backward needs a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    if !loss.requires_grad() {
        return Err(Error::Contract(
            "loss does not depend on any tensor that requires a gradient".into(),
        ));
    }
    let order = topological_order(loss)?;
    let mut pending: HashMap<usize, Vec<f64>> = HashMap::new();
    pending.insert(loss.id(), vec![1.0]);
    for t in order.iter().rev() {
        let Some(grad) = pending.remove(&t.id()) else {
            continue;
        };
        let Some(node) = t.node() else {
            t.accumulate_grad(&grad);
            continue;
        };
        let parent_grads = node.op.backward(&node.inputs, t, &grad);
        debug_assert_eq!(parent_grads.len(), node.inputs.len(), "{}", node.op.name());
        for (parent, g) in node.inputs.iter().zip(parent_grads) {
            let Some(g) = g else { continue };
            if !parent.requires_grad() {
                continue;
            }
            debug_assert_eq!(g.len(), parent.numel(), "{}", node.op.name());
            match pending.get_mut(&parent.id()) {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => {
                    pending.insert(parent.id(), g);
                }
            }
        }
    }
    Ok(())
}
