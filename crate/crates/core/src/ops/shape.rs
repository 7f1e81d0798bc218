//! Layout operations. Everything that only moves values around is a
//! [`gather`] with a precomputed index, so a single backward rule
//! (scatter-add) serves permutes, padding, rolls and window partitions.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{numel, BackwardOp, Tensor};

/// Index sentinel: the output element is zero (padding).
pub const ZERO_FILL: usize = usize::MAX;

struct GatherBackward {
    index: Arc<[usize]>,
}

impl BackwardOp for GatherBackward {
    fn name(&self) -> &'static str {
        "gather"
    }
    fn backward(&self, inputs: &[Tensor], _: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mut gx = vec![0.0; inputs[0].numel()];
        for (g, &j) in grad.iter().zip(self.index.iter()) {
            if j != ZERO_FILL {
                gx[j] += g;
            }
        }
        vec![Some(gx)]
    }
}

/// `out[i] = x[index[i]]`, or zero where `index[i] == ZERO_FILL`.
pub fn gather(x: &Tensor, index: Arc<[usize]>, shape: &[usize]) -> Result<Tensor> {
    if index.len() != numel(shape) {
        return Err(Error::dim(
            "gather",
            format!("index has {} entries for output {shape:?}", index.len()),
        ));
    }
    let n = x.numel();
    if let Some(bad) = index.iter().find(|&&j| j != ZERO_FILL && j >= n) {
        return Err(Error::dim(
            "gather",
            format!("index {bad} out of range for input {:?}", x.shape()),
        ));
    }
    let data = {
        let xd = x.data();
        index
            .iter()
            .map(|&j| if j == ZERO_FILL { 0.0 } else { xd[j] })
            .collect()
    };
    Tensor::from_op(
        data,
        shape.to_vec(),
        vec![x.clone()],
        GatherBackward { index },
    )
}

struct ReshapeBackward;

impl BackwardOp for ReshapeBackward {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, _: &[Tensor], _: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(grad.to_vec())]
    }
}

pub fn reshape(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if numel(shape) != x.numel() {
        return Err(Error::dim(
            "reshape",
            format!("cannot view {:?} as {shape:?}", x.shape()),
        ));
    }
    Tensor::from_op(x.to_vec(), shape.to_vec(), vec![x.clone()], ReshapeBackward)
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Index for an axis permutation: output axis `i` is input axis `axes[i]`.
pub fn permute_index(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut seen = vec![false; shape.len()];
    if axes.len() != shape.len()
        || axes
            .iter()
            .any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
    {
        return Err(Error::dim(
            "permute",
            format!("axes {axes:?} are not a permutation for shape {shape:?}"),
        ));
    }
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let total = numel(shape);
    let mut index = Vec::with_capacity(total);
    let mut coord = vec![0usize; shape.len()];
    for _ in 0..total {
        index.push(
            coord
                .iter()
                .zip(axes)
                .map(|(&c, &a)| c * in_strides[a])
                .sum(),
        );
        for d in (0..coord.len()).rev() {
            coord[d] += 1;
            if coord[d] < out_shape[d] {
                break;
            }
            coord[d] = 0;
        }
    }
    Ok((index, out_shape))
}

pub fn permute(x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let (index, shape) = permute_index(x.shape(), axes)?;
    gather(x, index.into(), &shape)
}

struct ConcatBackward {
    axis: usize,
}

impl BackwardOp for ConcatBackward {
    fn name(&self) -> &'static str {
        "concat"
    }
    fn backward(&self, inputs: &[Tensor], output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let shape = output.shape();
        let outer: usize = shape[..self.axis].iter().product();
        let inner: usize = shape[self.axis + 1..].iter().product();
        let out_row = shape[self.axis] * inner;
        let mut offset = 0;
        inputs
            .iter()
            .map(|t| {
                let row = t.shape()[self.axis] * inner;
                let g = t.requires_grad().then(|| {
                    let mut g = Vec::with_capacity(t.numel());
                    for o in 0..outer {
                        let start = o * out_row + offset;
                        g.extend_from_slice(&grad[start..start + row]);
                    }
                    g
                });
                offset += row;
                g
            })
            .collect()
    }
}

/// Concatenate along `axis`; all other extents must agree.
pub fn concat(tensors: &[Tensor], axis: usize) -> Result<Tensor> {
    let first = tensors
        .first()
        .ok_or_else(|| Error::dim("concat", "no inputs"))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(Error::dim("concat", format!("axis {axis} for rank {rank}")));
    }
    for t in tensors {
        let ok =
            t.rank() == rank && (0..rank).all(|d| d == axis || t.shape()[d] == first.shape()[d]);
        if !ok {
            let shapes: Vec<_> = tensors.iter().map(|t| t.shape().to_vec()).collect();
            return Err(Error::dim(
                "concat",
                format!("incompatible shapes {shapes:?} on axis {axis}"),
            ));
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = tensors.iter().map(|t| t.shape()[axis]).sum();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(numel(&shape));
    let guards: Vec<_> = tensors.iter().map(|t| t.data()).collect();
    for o in 0..outer {
        for (t, d) in tensors.iter().zip(&guards) {
            let row = t.shape()[axis] * inner;
            data.extend_from_slice(&d[o * row..(o + 1) * row]);
        }
    }
    drop(guards);
    Tensor::from_op(data, shape, tensors.to_vec(), ConcatBackward { axis })
}

pub(crate) fn dims3(shape: &[usize], op: &'static str) -> Result<(usize, usize, [usize; 3])> {
    match *shape {
        [n, c, d, h, w] => Ok((n, c, [d, h, w])),
        _ => Err(Error::dim(op, format!("expected N×C×D×H×W, got {shape:?}"))),
    }
}

/// `[N, C, D, H, W]` → `[N, D·H·W, C]` (tokens in D-major, then H, then W order).
pub fn volume_to_tokens(x: &Tensor) -> Result<Tensor> {
    let (n, c, [d, h, w]) = dims3(x.shape(), "volume_to_tokens")?;
    let v = reshape(x, &[n, c, d * h * w])?;
    permute(&v, &[0, 2, 1])
}

/// `[N, T, C]` → `[N, C, D, H, W]`; requires `T == D·H·W`.
pub fn tokens_to_volume(x: &Tensor, dims: [usize; 3]) -> Result<Tensor> {
    let (n, t, c) = match *x.shape() {
        [n, t, c] => (n, t, c),
        _ => {
            return Err(Error::dim(
                "tokens_to_volume",
                format!("expected N×T×C, got {:?}", x.shape()),
            ))
        }
    };
    if t != dims.iter().product::<usize>() {
        return Err(Error::dim(
            "tokens_to_volume",
            format!("{t} tokens cannot fill a {dims:?} volume"),
        ));
    }
    let v = permute(x, &[0, 2, 1])?;
    reshape(&v, &[n, c, dims[0], dims[1], dims[2]])
}

/// Zero-pad (or crop) the trailing side of each spatial axis of a volume.
pub fn resize_volume(x: &Tensor, target: [usize; 3]) -> Result<Tensor> {
    let (n, c, dims) = dims3(x.shape(), "resize_volume")?;
    if dims == target {
        return Ok(x.clone());
    }
    let [td, th, tw] = target;
    let mut index = Vec::with_capacity(n * c * td * th * tw);
    for nc in 0..n * c {
        for z in 0..td {
            for y in 0..th {
                for xx in 0..tw {
                    index.push(if z < dims[0] && y < dims[1] && xx < dims[2] {
                        ((nc * dims[0] + z) * dims[1] + y) * dims[2] + xx
                    } else {
                        ZERO_FILL
                    });
                }
            }
        }
    }
    gather(x, index.into(), &[n, c, td, th, tw])
}
