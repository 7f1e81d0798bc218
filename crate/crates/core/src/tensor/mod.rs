//! Dense row-major tensors with reverse-mode gradient tracking.
//!
//! A [`Tensor`] is a cheap handle (`Arc`) to an immutable shape, a data
//! buffer and, when it was produced by a differentiable operation while
//! gradient recording is enabled, a [`tape::TapeNode`] linking it to its
//! parents. Leaves created with [`Tensor::param`] accumulate gradients in
//! their own `grad` buffer when [`Tensor::backward`] runs.

mod tape;

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, RwLock, RwLockReadGuard, RwLockWriteGuard};

use crate::error::{Error, Result};

pub use tape::BackwardOp;
pub(crate) use tape::TapeNode;
pub use tape::{grad_enabled, no_grad, NoGradGuard};

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

struct Inner {
    id: usize,
    shape: Vec<usize>,
    data: RwLock<Vec<f64>>,
    grad: Mutex<Option<Vec<f64>>>,
    requires_grad: bool,
    node: Option<TapeNode>,
}

/// Shared handle to an N-dimensional array of `f64`.
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = self.inner.node.as_ref().map(|n| n.op_name());
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .field("op", &op)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
        node: Option<TapeNode>,
    ) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RwLock::new(data),
                grad: Mutex::new(None),
                requires_grad,
                node,
            }),
        }
    }

    /// Constant tensor (never receives gradients).
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Self::check_len(&data, shape)?;
        Ok(Self::build(data, shape.to_vec(), false, None))
    }

    /// Trainable leaf: gradients accumulate into it on [`Tensor::backward`].
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Self::check_len(&data, shape)?;
        Ok(Self::build(data, shape.to_vec(), true, None))
    }

    fn check_len(data: &[f64], shape: &[usize]) -> Result<()> {
        if shape.contains(&0) {
            return Err(Error::dim(
                "tensor",
                format!("zero extent in shape {shape:?}"),
            ));
        }
        if numel(shape) != data.len() {
            return Err(Error::dim(
                "tensor",
                format!(
                    "shape {shape:?} needs {} values, got {}",
                    numel(shape),
                    data.len()
                ),
            ));
        }
        Ok(())
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Self::build(vec![value; numel(shape)], shape.to_vec(), false, None)
    }

    pub fn scalar(value: f64) -> Tensor {
        Self::build(vec![value], vec![1], false, None)
    }

    /// Output of a forward kernel. Records a tape node when recording is on
    /// and any input requires a gradient. Rejects non-finite results.
    ///
    /// This is also the extension point for operators defined outside the
    /// crate: implement [`BackwardOp`] and wrap the forward result here.
    pub fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        inputs: Vec<Tensor>,
        op: impl BackwardOp + 'static,
    ) -> Result<Tensor> {
        if numel(&shape) != data.len() {
            return Err(Error::Dimension {
                op: op.name(),
                detail: format!("{} values for shape {shape:?}", data.len()),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                op: op.name(),
                index,
            });
        }
        let track = grad_enabled() && inputs.iter().any(Tensor::requires_grad);
        if track {
            let node = TapeNode::new(Box::new(op), inputs);
            Ok(Self::build(data, shape, true, Some(node)))
        } else {
            Ok(Self::build(data, shape, false, None))
        }
    }

    pub fn id(&self) -> usize {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel(&self.inner.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.node.is_none()
    }

    pub(crate) fn node(&self) -> Option<&TapeNode> {
        self.inner.node.as_ref()
    }

    /// Read access to the values.
    pub fn data(&self) -> RwLockReadGuard<'_, Vec<f64>> {
        self.inner.data.read().unwrap_or_else(|e| e.into_inner())
    }

    fn data_mut(&self) -> RwLockWriteGuard<'_, Vec<f64>> {
        self.inner.data.write().unwrap_or_else(|e| e.into_inner())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::dim(
                "item",
                format!("shape {:?} is not a scalar", self.shape()),
            ));
        }
        Ok(self.data()[0])
    }

    /// Overwrite values in place (parameter loading, optimizer steps).
    /// Only leaves may be mutated.
    pub fn set_data(&self, values: &[f64]) -> Result<()> {
        if !self.is_leaf() {
            return Err(Error::Contract("cannot overwrite a non-leaf tensor".into()));
        }
        if values.len() != self.numel() {
            return Err(Error::dim(
                "set_data",
                format!("tensor {:?} vs {} values", self.shape(), values.len()),
            ));
        }
        self.data_mut().copy_from_slice(values);
        Ok(())
    }

    /// In-place update of a leaf's values.
    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) -> Result<()> {
        if !self.is_leaf() {
            return Err(Error::Contract("cannot overwrite a non-leaf tensor".into()));
        }
        f(&mut self.data_mut());
        Ok(())
    }

    fn grad_lock(&self) -> MutexGuard<'_, Option<Vec<f64>>> {
        self.inner.grad.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Accumulated gradient. `None` iff the tensor does not require one;
    /// zeros before any backward pass has reached it.
    pub fn grad(&self) -> Option<Vec<f64>> {
        if !self.requires_grad() {
            return None;
        }
        Some(
            self.grad_lock()
                .clone()
                .unwrap_or_else(|| vec![0.0; self.numel()]),
        )
    }

    pub fn zero_grad(&self) {
        *self.grad_lock() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.grad_lock();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Copy of the values as a constant tensor, cut from the tape.
    pub fn detach(&self) -> Tensor {
        Self::build(self.to_vec(), self.shape().to_vec(), false, None)
    }

    /// Fresh trainable leaf holding a copy of the values.
    pub fn detach_param(&self) -> Tensor {
        Self::build(self.to_vec(), self.shape().to_vec(), true, None)
    }

    pub fn ensure_shape(&self, op: &'static str, expected: &[usize]) -> Result<()> {
        if self.shape() != expected {
            return Err(Error::dim(
                op,
                format!("expected shape {expected:?}, got {:?}", self.shape()),
            ));
        }
        Ok(())
    }

    pub fn backward(&self) -> Result<()> {
        tape::backward(self)
    }
}
