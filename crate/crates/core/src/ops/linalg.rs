use crate::error::{Error, Result};
use crate::tensor::{BackwardOp, Tensor};

/// Strided view of a row-major matrix.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Mat {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    /// `rows × cols` view whose rows start `rs` elements apart.
    pub fn strided(data: &'a [f64], rows: usize, cols: usize, rs: usize) -> Self {
        Mat {
            data,
            rows,
            cols,
            rs,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Mat {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn span(&self) -> usize {
        (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
    }
}

/// `c = alpha·a·b + beta·c`, with `c` row-major `a.rows × b.cols`.
pub(crate) fn gemm(alpha: f64, a: Mat<'_>, b: Mat<'_>, beta: f64, c: &mut [f64]) {
    gemm_ld(alpha, a, b, beta, c, b.cols);
}

/// [`gemm`] writing rows of `c` that start `ldc` elements apart.
pub(crate) fn gemm_ld(alpha: f64, a: Mat<'_>, b: Mat<'_>, beta: f64, c: &mut [f64], ldc: usize) {
    assert_eq!(a.cols, b.rows, "gemm inner extents");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!(
        ldc >= n && c.len() >= (m - 1) * ldc + n,
        "gemm output too small"
    );
    if k == 0 {
        for row in 0..m {
            c[row * ldc..row * ldc + n]
                .iter_mut()
                .for_each(|v| *v *= beta);
        }
        return;
    }
    assert!(
        a.span() <= a.data.len() && b.span() <= b.data.len(),
        "gemm operand too small"
    );
    // SAFETY: the asserts above bound every element matrixmultiply touches
    // within the three slices; `c` does not alias `a` or `b` (&mut borrow).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

struct LinearBackward {
    rows: usize,
    din: usize,
    dout: usize,
}

impl BackwardOp for LinearBackward {
    fn name(&self) -> &'static str {
        "linear"
    }
    fn backward(&self, inputs: &[Tensor], _: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (x, w) = (&inputs[0], &inputs[1]);
        let (m, din, dout) = (self.rows, self.din, self.dout);
        let gy = Mat::new(grad, m, dout);
        let gx = x.requires_grad().then(|| {
            let mut gx = vec![0.0; m * din];
            gemm(1.0, gy, Mat::new(&w.data(), dout, din), 0.0, &mut gx);
            gx
        });
        let gw = w.requires_grad().then(|| {
            let mut gw = vec![0.0; dout * din];
            gemm(1.0, gy.t(), Mat::new(&x.data(), m, din), 0.0, &mut gw);
            gw
        });
        let mut out = vec![gx, gw];
        if let Some(b) = inputs.get(2) {
            out.push(b.requires_grad().then(|| {
                let mut gb = vec![0.0; dout];
                for row in grad.chunks_exact(dout) {
                    gb.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                }
                gb
            }));
        }
        out
    }
}

/// Affine map over the last axis: `y = x·Wᵀ + b`, `W` is `[Dout, Din]`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (dout, din) = match *weight.shape() {
        [o, i] => (o, i),
        _ => {
            return Err(Error::dim(
                "linear",
                format!("weight must be 2-D, got {:?}", weight.shape()),
            ))
        }
    };
    let last = *x.shape().last().unwrap_or(&0);
    if last != din {
        return Err(Error::dim(
            "linear",
            format!("input {:?} vs weight {:?}", x.shape(), weight.shape()),
        ));
    }
    if let Some(b) = bias {
        b.ensure_shape("linear bias", &[dout])?;
    }
    let rows = x.numel() / din;
    let mut y = vec![0.0; rows * dout];
    if let Some(b) = bias {
        let bd = b.data();
        for row in y.chunks_exact_mut(dout) {
            row.copy_from_slice(&bd);
        }
    }
    gemm(
        1.0,
        Mat::new(&x.data(), rows, din),
        Mat::new(&weight.data(), dout, din).t(),
        if bias.is_some() { 1.0 } else { 0.0 },
        &mut y,
    );
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = dout;
    let mut inputs = vec![x.clone(), weight.clone()];
    inputs.extend(bias.cloned());
    Tensor::from_op(y, shape, inputs, LinearBackward { rows, din, dout })
}

struct BmmBackward {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    transpose_b: bool,
}

impl BackwardOp for BmmBackward {
    fn name(&self) -> &'static str {
        "bmm"
    }
    fn backward(&self, inputs: &[Tensor], _: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (&inputs[0], &inputs[1]);
        let (m, k, n) = (self.m, self.k, self.n);
        let ad = a.data();
        let bd = b.data();
        let mut ga = a.requires_grad().then(|| vec![0.0; a.numel()]);
        let mut gb = b.requires_grad().then(|| vec![0.0; b.numel()]);
        for i in 0..self.batch {
            let gc = Mat::new(&grad[i * m * n..(i + 1) * m * n], m, n);
            let am = Mat::new(&ad[i * m * k..(i + 1) * m * k], m, k);
            let bs = &bd[i * k * n..(i + 1) * k * n];
            // op(B) is k × n
            let opb = if self.transpose_b {
                Mat::new(bs, n, k).t()
            } else {
                Mat::new(bs, k, n)
            };
            if let Some(ga) = ga.as_mut() {
                gemm(1.0, gc, opb.t(), 0.0, &mut ga[i * m * k..(i + 1) * m * k]);
            }
            if let Some(gb) = gb.as_mut() {
                let dst = &mut gb[i * k * n..(i + 1) * k * n];
                if self.transpose_b {
                    // C = A·Bᵀ  ⇒  dB = dCᵀ·A  (n × k)
                    gemm(1.0, gc.t(), am, 0.0, dst);
                } else {
                    gemm(1.0, am.t(), gc, 0.0, dst);
                }
            }
        }
        vec![ga, gb]
    }
}

fn bmm_impl(a: &Tensor, b: &Tensor, transpose_b: bool) -> Result<Tensor> {
    let err = || {
        Error::dim(
            "bmm",
            format!(
                "lhs {:?} vs rhs {:?} (transpose_b = {transpose_b})",
                a.shape(),
                b.shape()
            ),
        )
    };
    let (batch, m, k) = match *a.shape() {
        [bt, m, k] => (bt, m, k),
        _ => return Err(err()),
    };
    let n = match (b.shape(), transpose_b) {
        (&[bt, n, kk], true) if bt == batch && kk == k => n,
        (&[bt, kk, n], false) if bt == batch && kk == k => n,
        _ => return Err(err()),
    };
    let mut c = vec![0.0; batch * m * n];
    {
        let (ad, bd) = (a.data(), b.data());
        for i in 0..batch {
            let am = Mat::new(&ad[i * m * k..(i + 1) * m * k], m, k);
            let bs = &bd[i * k * n..(i + 1) * k * n];
            let opb = if transpose_b {
                Mat::new(bs, n, k).t()
            } else {
                Mat::new(bs, k, n)
            };
            gemm(1.0, am, opb, 0.0, &mut c[i * m * n..(i + 1) * m * n]);
        }
    }
    Tensor::from_op(
        c,
        vec![batch, m, n],
        vec![a.clone(), b.clone()],
        BmmBackward {
            batch,
            m,
            k,
            n,
            transpose_b,
        },
    )
}

/// Batched product `[B, M, K] · [B, K, N] → [B, M, N]`.
pub fn bmm(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    bmm_impl(a, b, false)
}

/// Batched product with the second operand transposed:
/// `[B, M, K] · [B, N, K]ᵀ → [B, M, N]`.
pub fn bmm_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    bmm_impl(a, b, true)
}
