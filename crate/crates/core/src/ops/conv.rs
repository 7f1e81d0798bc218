//! 3D convolution and transposed convolution via im2col + GEMM.

use super::linalg::{gemm, gemm_ld, Mat};
use super::shape::dims3;
use crate::error::{Error, Result};
use crate::tensor::{BackwardOp, Tensor};

/// Cubic-kernel convolution geometry over one spatial volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub input: [usize; 3],
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub output: [usize; 3],
}

impl ConvGeometry {
    pub fn new(input: [usize; 3], kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::config(format!(
                "convolution needs kernel >= 1 and stride >= 1 (got k = {kernel}, stride = {stride})"
            )));
        }
        let mut output = [0; 3];
        for a in 0..3 {
            let span = input[a] + 2 * padding;
            if span < kernel {
                return Err(Error::dim(
                    "conv3d",
                    format!("kernel {kernel} exceeds padded extent {span} of input {input:?}"),
                ));
            }
            output[a] = (span - kernel) / stride + 1;
        }
        Ok(ConvGeometry {
            input,
            kernel,
            stride,
            padding,
            output,
        })
    }

    pub fn in_len(&self) -> usize {
        self.input.iter().product()
    }

    pub fn out_len(&self) -> usize {
        self.output.iter().product()
    }

    fn taps(&self) -> usize {
        self.kernel.pow(3)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    /// Output positions `o` along one axis with `o·stride + tap − pad` inside the input.
    fn valid(&self, axis: usize, tap: usize) -> std::ops::Range<usize> {
        let (s, p, n) = (
            self.stride as isize,
            self.padding as isize,
            self.input[axis] as isize,
        );
        let t = tap as isize;
        // o·s + t − p >= 0  and  o·s + t − p < n
        let lo = (p - t + s - 1).div_euclid(s).max(0);
        let hi = ((n - 1 + p - t).div_euclid(s) + 1).clamp(0, self.output[axis] as isize);
        lo as usize..(hi.max(lo)) as usize
    }
}

/// Output `(z, y)` rows gathered per GEMM call, sized so the column tile
/// stays around a megabyte.
fn tile_rows(g: &ConvGeometry, rows: usize) -> usize {
    const TILE_ELEMS: usize = 1 << 17;
    (TILE_ELEMS / (rows * g.output[2]).max(1)).clamp(1, g.output[0] * g.output[1])
}

/// Walks the in-bounds taps of output rows `tile` (flattened `(z, y)`),
/// calling `f(channel volume offset, column offset, len)` per contiguous run.
fn for_each_run(
    channels: usize,
    g: &ConvGeometry,
    tile: std::ops::Range<usize>,
    mut f: impl FnMut(usize, usize, usize, usize),
) {
    let k = g.kernel;
    let [id, ih, iw] = g.input;
    let [_, oh, ow] = g.output;
    let width = tile.len() * ow;
    let (s, p) = (g.stride, g.padding);
    for c in 0..channels {
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let rw = g.valid(2, kw);
                    if rw.is_empty() {
                        continue;
                    }
                    let row = ((c * k + kd) * k + kh) * k + kw;
                    for (t, r) in tile.clone().enumerate() {
                        let (z, y) = (r / oh, r % oh);
                        let (iz, iy) = (z * s + kd, y * s + kh);
                        if iz < p || iz - p >= id || iy < p || iy - p >= ih {
                            continue;
                        }
                        let src = c * g.in_len() + ((iz - p) * ih + iy - p) * iw;
                        let dst = row * width + t * ow;
                        f(src + rw.start * s + kw - p, dst + rw.start, rw.len(), s);
                    }
                }
            }
        }
    }
}

/// Unfold output rows `tile` of `channels` input volumes into a
/// `[channels·k³, tile.len()·W']` column matrix.
pub(crate) fn im2col_tile(
    x: &[f64],
    channels: usize,
    g: &ConvGeometry,
    tile: std::ops::Range<usize>,
    col: &mut [f64],
) {
    let len = channels * g.taps() * tile.len() * g.output[2];
    col[..len].iter_mut().for_each(|v| *v = 0.0);
    for_each_run(channels, g, tile, |src, dst, n, s| {
        if s == 1 {
            col[dst..dst + n].copy_from_slice(&x[src..src + n]);
        } else {
            for i in 0..n {
                col[dst + i] = x[src + i * s];
            }
        }
    });
}

/// Adjoint of [`im2col_tile`]: scatter-add columns back into `channels` volumes.
pub(crate) fn col2im_tile(
    col: &[f64],
    channels: usize,
    g: &ConvGeometry,
    tile: std::ops::Range<usize>,
    x: &mut [f64],
) {
    for_each_run(channels, g, tile, |src, dst, n, s| {
        for i in 0..n {
            x[src + i * s] += col[dst + i];
        }
    });
}

fn all_rows(g: &ConvGeometry) -> std::ops::Range<usize> {
    0..g.output[0] * g.output[1]
}

/// Unfold `channels` input volumes into a `[channels·k³, out_len]` matrix.
pub(crate) fn im2col(x: &[f64], channels: usize, g: &ConvGeometry, col: &mut [f64]) {
    im2col_tile(x, channels, g, all_rows(g), col)
}

/// Adjoint of [`im2col`]: scatter-add columns back into `channels` volumes.
pub(crate) fn col2im(col: &[f64], channels: usize, g: &ConvGeometry, x: &mut [f64]) {
    col2im_tile(col, channels, g, all_rows(g), x)
}

struct Conv3dBackward {
    geom: ConvGeometry,
    batch: usize,
    cin: usize,
    cout: usize,
    groups: usize,
}

impl BackwardOp for Conv3dBackward {
    fn name(&self) -> &'static str {
        "conv3d"
    }

    fn backward(&self, inputs: &[Tensor], _: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let g = &self.geom;
        let (x, w) = (&inputs[0], &inputs[1]);
        let (cin_g, cout_g) = (self.cin / self.groups, self.cout / self.groups);
        let rows = cin_g * g.taps();
        let (in_len, out_len) = (g.in_len(), g.out_len());
        let xd = x.data();
        let wd = w.data();
        let mut gx = x.requires_grad().then(|| vec![0.0; x.numel()]);
        let mut gw = w.requires_grad().then(|| vec![0.0; w.numel()]);
        let tile = tile_rows(g, rows);
        let ow = g.output[2];
        let mut col = if g.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; rows * tile * ow]
        };
        let mut dcol = if g.is_pointwise() || gx.is_none() {
            Vec::new()
        } else {
            vec![0.0; rows * tile * ow]
        };
        for n in 0..self.batch {
            for grp in 0..self.groups {
                let xs = &xd[(n * self.cin + grp * cin_g) * in_len..][..cin_g * in_len];
                let gys = &grad[(n * self.cout + grp * cout_g) * out_len..][..cout_g * out_len];
                let wg = Mat::new(&wd[grp * cout_g * rows..][..cout_g * rows], cout_g, rows);
                let gw = gw
                    .as_mut()
                    .map(|gw| &mut gw[grp * cout_g * rows..][..cout_g * rows]);
                let gx = gx
                    .as_mut()
                    .map(|gx| &mut gx[(n * self.cin + grp * cin_g) * in_len..][..cin_g * in_len]);
                if g.is_pointwise() {
                    let gy = Mat::new(gys, cout_g, out_len);
                    if let Some(gw) = gw {
                        gemm(1.0, gy, Mat::new(xs, rows, out_len).t(), 1.0, gw);
                    }
                    if let Some(gx) = gx {
                        gemm(1.0, wg.t(), gy, 1.0, gx);
                    }
                    continue;
                }
                let (mut gw, mut gx) = (gw, gx);
                let total = g.output[0] * g.output[1];
                for r0 in (0..total).step_by(tile) {
                    let r1 = (r0 + tile).min(total);
                    let width = (r1 - r0) * ow;
                    let gy = Mat::strided(&gys[r0 * ow..], cout_g, width, out_len);
                    if let Some(gw) = gw.as_deref_mut() {
                        im2col_tile(xs, cin_g, g, r0..r1, &mut col);
                        gemm(
                            1.0,
                            gy,
                            Mat::new(&col[..rows * width], rows, width).t(),
                            1.0,
                            gw,
                        );
                    }
                    if let Some(gx) = gx.as_deref_mut() {
                        gemm(1.0, wg.t(), gy, 0.0, &mut dcol[..rows * width]);
                        col2im_tile(&dcol[..rows * width], cin_g, g, r0..r1, gx);
                    }
                }
            }
        }
        let mut out = vec![gx, gw];
        if let Some(b) = inputs.get(2) {
            out.push(
                b.requires_grad()
                    .then(|| channel_sums(grad, self.batch, self.cout, out_len)),
            );
        }
        out
    }
}

fn channel_sums(grad: &[f64], batch: usize, channels: usize, len: usize) -> Vec<f64> {
    let mut gb = vec![0.0; channels];
    for n in 0..batch {
        for (c, acc) in gb.iter_mut().enumerate() {
            *acc += grad[(n * channels + c) * len..][..len].iter().sum::<f64>();
        }
    }
    gb
}

/// Grouped 3D cross-correlation with zero padding.
///
/// `input` is `[N, Cin, D, H, W]`, `weight` is `[Cout, Cin/groups, k, k, k]`.
pub fn conv3d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor> {
    let (batch, cin, dims) = dims3(input.shape(), "conv3d")?;
    let (cout, wcin, k) = match *weight.shape() {
        [o, i, a, b, c] if a == b && b == c => (o, i, a),
        _ => {
            return Err(Error::dim(
                "conv3d",
                format!("weight {:?} is not [Cout, Cin, k, k, k]", weight.shape()),
            ))
        }
    };
    if groups == 0 || cin % groups != 0 || cout % groups != 0 || wcin * groups != cin {
        return Err(Error::dim(
            "conv3d",
            format!(
                "input {:?} vs weight {:?} with {groups} groups",
                input.shape(),
                weight.shape()
            ),
        ));
    }
    if let Some(b) = bias {
        b.ensure_shape("conv3d bias", &[cout])?;
    }
    let g = ConvGeometry::new(dims, k, stride, padding)?;
    let (cin_g, cout_g) = (cin / groups, cout / groups);
    let rows = cin_g * g.taps();
    let (in_len, out_len) = (g.in_len(), g.out_len());
    let mut y = vec![0.0; batch * cout * out_len];
    {
        let xd = input.data();
        let wd = weight.data();
        let tile = tile_rows(&g, rows);
        let ow = g.output[2];
        let mut col = if g.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; rows * tile * ow]
        };
        for n in 0..batch {
            for grp in 0..groups {
                let xs = &xd[(n * cin + grp * cin_g) * in_len..][..cin_g * in_len];
                let wg = Mat::new(&wd[grp * cout_g * rows..][..cout_g * rows], cout_g, rows);
                let ys = &mut y[(n * cout + grp * cout_g) * out_len..][..cout_g * out_len];
                if g.is_pointwise() {
                    gemm(1.0, wg, Mat::new(xs, rows, out_len), 0.0, ys);
                    continue;
                }
                let total = g.output[0] * g.output[1];
                for r0 in (0..total).step_by(tile) {
                    let r1 = (r0 + tile).min(total);
                    let width = (r1 - r0) * ow;
                    im2col_tile(xs, cin_g, &g, r0..r1, &mut col);
                    let cols = Mat::new(&col[..rows * width], rows, width);
                    gemm_ld(1.0, wg, cols, 0.0, &mut ys[r0 * ow..], out_len);
                }
            }
        }
        if let Some(b) = bias {
            add_channel_bias(&mut y, &b.data(), batch, out_len);
        }
    }
    let mut inputs = vec![input.clone(), weight.clone()];
    inputs.extend(bias.cloned());
    Tensor::from_op(
        y,
        vec![batch, cout, g.output[0], g.output[1], g.output[2]],
        inputs,
        Conv3dBackward {
            geom: g,
            batch,
            cin,
            cout,
            groups,
        },
    )
}

fn add_channel_bias(y: &mut [f64], bias: &[f64], batch: usize, len: usize) {
    let channels = bias.len();
    for n in 0..batch {
        for (c, b) in bias.iter().enumerate() {
            y[(n * channels + c) * len..][..len]
                .iter_mut()
                .for_each(|v| *v += b);
        }
    }
}

struct ConvTranspose3dBackward {
    geom: ConvGeometry,
    batch: usize,
    cin: usize,
    cout: usize,
}

impl BackwardOp for ConvTranspose3dBackward {
    fn name(&self) -> &'static str {
        "conv_transpose3d"
    }

    fn backward(&self, inputs: &[Tensor], _: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        // `geom` is the forward convolution this op is the adjoint of:
        // its input is our output and vice versa.
        let g = &self.geom;
        let (x, w) = (&inputs[0], &inputs[1]);
        let rows = self.cout * g.taps();
        let (small, big) = (g.out_len(), g.in_len());
        let xd = x.data();
        let wd = w.data();
        let wm = Mat::new(&wd, self.cin, rows);
        let mut gx = x.requires_grad().then(|| vec![0.0; x.numel()]);
        let mut gw = w.requires_grad().then(|| vec![0.0; w.numel()]);
        let mut col = vec![0.0; rows * small];
        for n in 0..self.batch {
            im2col(
                &grad[n * self.cout * big..][..self.cout * big],
                self.cout,
                g,
                &mut col,
            );
            let cm = Mat::new(&col, rows, small);
            if let Some(gx) = gx.as_mut() {
                gemm(
                    1.0,
                    wm,
                    cm,
                    0.0,
                    &mut gx[n * self.cin * small..][..self.cin * small],
                );
            }
            if let Some(gw) = gw.as_mut() {
                let xm = Mat::new(
                    &xd[n * self.cin * small..][..self.cin * small],
                    self.cin,
                    small,
                );
                gemm(1.0, xm, cm.t(), 1.0, gw);
            }
        }
        let mut out = vec![gx, gw];
        if let Some(b) = inputs.get(2) {
            out.push(
                b.requires_grad()
                    .then(|| channel_sums(grad, self.batch, self.cout, big)),
            );
        }
        out
    }
}

/// Transposed 3D convolution without padding: output extent `(D−1)·stride + k`.
///
/// `weight` is `[Cin, Cout, k, k, k]`. With `k == stride == 2` every spatial
/// extent doubles exactly.
pub fn conv_transpose3d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
) -> Result<Tensor> {
    let (batch, cin, dims) = dims3(input.shape(), "conv_transpose3d")?;
    let (wcin, cout, k) = match *weight.shape() {
        [i, o, a, b, c] if a == b && b == c => (i, o, a),
        _ => {
            return Err(Error::dim(
                "conv_transpose3d",
                format!("weight {:?} is not [Cin, Cout, k, k, k]", weight.shape()),
            ))
        }
    };
    if k == 0 || stride == 0 {
        return Err(Error::config(format!(
            "unsupported transposed convolution: kernel {k}, stride {stride}"
        )));
    }
    if wcin != cin {
        return Err(Error::dim(
            "conv_transpose3d",
            format!("input {:?} vs weight {:?}", input.shape(), weight.shape()),
        ));
    }
    if let Some(b) = bias {
        b.ensure_shape("conv_transpose3d bias", &[cout])?;
    }
    let out_dims = dims.map(|d| (d - 1) * stride + k);
    let g = ConvGeometry::new(out_dims, k, stride, 0)?;
    debug_assert_eq!(g.output, dims);
    let rows = cout * g.taps();
    let (small, big) = (g.out_len(), g.in_len());
    let mut y = vec![0.0; batch * cout * big];
    {
        let xd = input.data();
        let wd = weight.data();
        let wm = Mat::new(&wd, cin, rows);
        let mut col = vec![0.0; rows * small];
        for n in 0..batch {
            let xm = Mat::new(&xd[n * cin * small..][..cin * small], cin, small);
            gemm(1.0, wm.t(), xm, 0.0, &mut col);
            col2im(&col, cout, &g, &mut y[n * cout * big..][..cout * big]);
        }
        if let Some(b) = bias {
            add_channel_bias(&mut y, &b.data(), batch, big);
        }
    }
    let mut inputs = vec![input.clone(), weight.clone()];
    inputs.extend(bias.cloned());
    Tensor::from_op(
        y,
        vec![batch, cout, out_dims[0], out_dims[1], out_dims[2]],
        inputs,
        ConvTranspose3dBackward {
            geom: g,
            batch,
            cin,
            cout,
        },
    )
}
