use crate::error::{Error, Result};
use crate::tensor::{BackwardOp, Tensor};

/// Additive mask value for excluded attention logits.
pub const MASK_VALUE: f64 = -1e9;

#[derive(Clone, Copy)]
struct Lanes {
    outer: usize,
    len: usize,
    inner: usize,
}

impl Lanes {
    fn of(shape: &[usize], axis: usize) -> Self {
        Lanes {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }

    /// Flat offsets of every lane along the softmax axis.
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        for o in 0..self.outer {
            for i in 0..self.inner {
                f(o * self.len * self.inner + i, self.inner);
            }
        }
    }
}

struct SoftmaxBackward(Lanes);

impl BackwardOp for SoftmaxBackward {
    fn name(&self) -> &'static str {
        "softmax"
    }
    fn backward(&self, _: &[Tensor], output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let y = output.data();
        let mut gx = vec![0.0; grad.len()];
        let len = self.0.len;
        self.0.for_each(|start, step| {
            let dot: f64 = (0..len)
                .map(|j| grad[start + j * step] * y[start + j * step])
                .sum();
            for j in 0..len {
                let k = start + j * step;
                gx[k] = y[k] * (grad[k] - dot);
            }
        });
        vec![Some(gx)]
    }
}

/// Numerically stable softmax along `axis` (max subtracted per lane).
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::dim(
            "softmax",
            format!("axis {axis} for shape {:?}", x.shape()),
        ));
    }
    let lanes = Lanes::of(x.shape(), axis);
    let mut y = x.to_vec();
    let len = lanes.len;
    lanes.for_each(|start, step| {
        let max = (0..len)
            .map(|j| y[start + j * step])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for j in 0..len {
            let k = start + j * step;
            y[k] = (y[k] - max).exp();
            total += y[k];
        }
        for j in 0..len {
            y[start + j * step] /= total;
        }
    });
    Tensor::from_op(
        y,
        x.shape().to_vec(),
        vec![x.clone()],
        SoftmaxBackward(lanes),
    )
}
