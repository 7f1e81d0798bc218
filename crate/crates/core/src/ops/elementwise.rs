use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{BackwardOp, Tensor};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            format!("lhs {:?} vs rhs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

struct AddBackward;

impl BackwardOp for AddBackward {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, _: &[Tensor], _: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(grad.to_vec()), Some(grad.to_vec())]
    }
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| x + y)
        .collect();
    Tensor::from_op(
        data,
        a.shape().to_vec(),
        vec![a.clone(), b.clone()],
        AddBackward,
    )
}

struct SubBackward;

impl BackwardOp for SubBackward {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(&self, _: &[Tensor], _: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(grad.to_vec()), Some(grad.iter().map(|g| -g).collect())]
    }
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("sub", a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| x - y)
        .collect();
    Tensor::from_op(
        data,
        a.shape().to_vec(),
        vec![a.clone(), b.clone()],
        SubBackward,
    )
}

struct MulBackward;

impl BackwardOp for MulBackward {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, inputs: &[Tensor], _: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (&inputs[0], &inputs[1]);
        let ga = a.requires_grad().then(|| {
            grad.iter()
                .zip(b.data().iter())
                .map(|(g, y)| g * y)
                .collect()
        });
        let gb = b.requires_grad().then(|| {
            grad.iter()
                .zip(a.data().iter())
                .map(|(g, x)| g * x)
                .collect()
        });
        vec![ga, gb]
    }
}

/// Elementwise product of equally shaped tensors.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| x * y)
        .collect();
    Tensor::from_op(
        data,
        a.shape().to_vec(),
        vec![a.clone(), b.clone()],
        MulBackward,
    )
}

struct ScaleBackward(f64);

impl BackwardOp for ScaleBackward {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, _: &[Tensor], _: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(grad.iter().map(|g| g * self.0).collect())]
    }
}

pub fn scale(a: &Tensor, factor: f64) -> Result<Tensor> {
    let data = a.data().iter().map(|x| x * factor).collect();
    Tensor::from_op(
        data,
        a.shape().to_vec(),
        vec![a.clone()],
        ScaleBackward(factor),
    )
}

struct SumBackward(f64);

impl BackwardOp for SumBackward {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, inputs: &[Tensor], _: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(vec![grad[0] * self.0; inputs[0].numel()])]
    }
}

/// Sum of all elements, as a one-element tensor.
pub fn sum(a: &Tensor) -> Result<Tensor> {
    let total = a.data().iter().sum();
    Tensor::from_op(vec![total], vec![1], vec![a.clone()], SumBackward(1.0))
}

pub fn mean(a: &Tensor) -> Result<Tensor> {
    let n = a.numel() as f64;
    let total: f64 = a.data().iter().sum();
    Tensor::from_op(
        vec![total / n],
        vec![1],
        vec![a.clone()],
        SumBackward(1.0 / n),
    )
}

struct AddIndexedBackward {
    index: Arc<[usize]>,
}

impl BackwardOp for AddIndexedBackward {
    fn name(&self) -> &'static str {
        "add_indexed"
    }
    fn backward(&self, inputs: &[Tensor], _: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let gb = inputs[1].requires_grad().then(|| {
            let mut gb = vec![0.0; inputs[1].numel()];
            for (g, &j) in grad.iter().zip(self.index.iter()) {
                gb[j] += g;
            }
            gb
        });
        vec![Some(grad.to_vec()), gb]
    }
}

/// `out[i] = a[i] + b[index[i]]`: a broadcast add through an explicit lookup.
///
/// Gradients reach `b` by scatter-add, which makes this the differentiable
/// gather used for relative position bias tables.
pub fn add_indexed(a: &Tensor, b: &Tensor, index: Arc<[usize]>) -> Result<Tensor> {
    if index.len() != a.numel() {
        return Err(Error::dim(
            "add_indexed",
            format!("index has {} entries for lhs {:?}", index.len(), a.shape()),
        ));
    }
    if let Some(bad) = index.iter().find(|&&j| j >= b.numel()) {
        return Err(Error::dim(
            "add_indexed",
            format!("index {bad} out of range for rhs {:?}", b.shape()),
        ));
    }
    let data = {
        let (ad, bd) = (a.data(), b.data());
        ad.iter()
            .zip(index.iter())
            .map(|(x, &j)| x + bd[j])
            .collect()
    };
    Tensor::from_op(
        data,
        a.shape().to_vec(),
        vec![a.clone(), b.clone()],
        AddIndexedBackward { index },
    )
}
