use super::conv::ConvGeometry;
use super::shape::dims3;
use crate::error::Result;
use crate::tensor::{BackwardOp, Tensor};

/// For every output voxel: flat input offsets of its in-bounds window.
fn windows(g: &ConvGeometry) -> Vec<Vec<usize>> {
    let [id, ih, iw] = g.input;
    let mut out = Vec::with_capacity(g.out_len());
    let axis = |o: usize, n: usize| {
        let start = (o * g.stride) as isize - g.padding as isize;
        (start..start + g.kernel as isize)
            .filter(move |&i| i >= 0 && (i as usize) < n)
            .map(|i| i as usize)
    };
    for z in 0..g.output[0] {
        for y in 0..g.output[1] {
            for x in 0..g.output[2] {
                let mut taps = Vec::new();
                for iz in axis(z, id) {
                    for iy in axis(y, ih) {
                        for ix in axis(x, iw) {
                            taps.push((iz * ih + iy) * iw + ix);
                        }
                    }
                }
                out.push(taps);
            }
        }
    }
    out
}

struct AvgPoolBackward {
    geom: ConvGeometry,
    planes: usize,
}

impl BackwardOp for AvgPoolBackward {
    fn name(&self) -> &'static str {
        "avg_pool3d"
    }
    fn backward(&self, _: &[Tensor], _: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (in_len, out_len) = (self.geom.in_len(), self.geom.out_len());
        let taps = windows(&self.geom);
        let mut gx = vec![0.0; self.planes * in_len];
        for p in 0..self.planes {
            let dst = &mut gx[p * in_len..(p + 1) * in_len];
            for (o, window) in taps.iter().enumerate() {
                let share = grad[p * out_len + o] / window.len() as f64;
                for &i in window {
                    dst[i] += share;
                }
            }
        }
        vec![Some(gx)]
    }
}

/// Windowed mean over `k³` neighbourhoods. Padding is excluded from the
/// divisor, so border windows average only their in-bounds voxels.
pub fn avg_pool3d(input: &Tensor, kernel: usize, stride: usize, padding: usize) -> Result<Tensor> {
    let (n, c, dims) = dims3(input.shape(), "avg_pool3d")?;
    let g = ConvGeometry::new(dims, kernel, stride, padding)?;
    let (in_len, out_len) = (g.in_len(), g.out_len());
    let taps = windows(&g);
    let mut y = Vec::with_capacity(n * c * out_len);
    {
        let xd = input.data();
        for p in 0..n * c {
            let src = &xd[p * in_len..(p + 1) * in_len];
            y.extend(
                taps.iter()
                    .map(|w| w.iter().map(|&i| src[i]).sum::<f64>() / w.len() as f64),
            );
        }
    }
    Tensor::from_op(
        y,
        vec![n, c, g.output[0], g.output[1], g.output[2]],
        vec![input.clone()],
        AvgPoolBackward {
            geom: g,
            planes: n * c,
        },
    )
}
