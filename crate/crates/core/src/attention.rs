//! 3D window partitioning, cyclic shifts, shifted-window masks, relative
//! position bias, and windowed multi-head self-attention.
//!
//! Feature maps are split into non-overlapping cubes of `w³` voxels and
//! attention runs inside each cube. Shifted blocks first roll the map by
//! `shift` voxels on every axis so that the new windows straddle the old
//! boundaries; the attention mask keeps tokens that were only brought
//! together by the wrap-around from attending to each other.
//!
//! When a feature map is no larger than the window along some axis, that
//! axis uses a single window spanning the whole extent and is not shifted.
//! Other extents are zero-padded up to a multiple of the window.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nn::{Init, Linear, VarBuilder};
use crate::ops::{self, MASK_VALUE, ZERO_FILL};
use crate::tensor::Tensor;

/// Window edge and cyclic shift, in voxels, shared by all three axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub window: usize,
    pub shift: usize,
}

impl WindowSpec {
    pub fn regular(window: usize) -> Self {
        WindowSpec { window, shift: 0 }
    }

    /// Half-window shift used by every other block.
    pub fn shifted(window: usize) -> Self {
        WindowSpec {
            window,
            shift: window / 2,
        }
    }

    /// Block `index` within a stage: even blocks regular, odd blocks shifted.
    pub fn for_block(window: usize, index: usize) -> Self {
        if index.is_multiple_of(2) {
            Self::regular(window)
        } else {
            Self::shifted(window)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.shift >= self.window {
            return Err(Error::config(format!(
                "window spec needs 0 <= shift < window, got window {} shift {}",
                self.window, self.shift
            )));
        }
        Ok(())
    }
}

/// Concrete window layout of one feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowGrid {
    pub dims: [usize; 3],
    pub window: [usize; 3],
    pub shift: [usize; 3],
    pub padded: [usize; 3],
}

impl WindowGrid {
    pub fn new(dims: [usize; 3], spec: WindowSpec) -> Result<Self> {
        spec.validate()?;
        let mut window = [0; 3];
        let mut shift = [0; 3];
        let mut padded = [0; 3];
        for a in 0..3 {
            if dims[a] == 0 {
                return Err(Error::dim(
                    "window grid",
                    format!("empty extent in {dims:?}"),
                ));
            }
            if dims[a] <= spec.window {
                window[a] = dims[a];
                shift[a] = 0;
            } else {
                window[a] = spec.window;
                shift[a] = spec.shift;
            }
            padded[a] = dims[a].div_ceil(window[a]) * window[a];
        }
        Ok(WindowGrid {
            dims,
            window,
            shift,
            padded,
        })
    }

    /// Grid over already-divisible extents, with no reduction or shift.
    fn exact(dims: [usize; 3], window: usize, op: &'static str) -> Result<Self> {
        if window == 0 || dims.iter().any(|&d| d % window != 0) {
            return Err(Error::dim(
                op,
                format!("extents {dims:?} are not multiples of window {window}; pad first"),
            ));
        }
        Ok(WindowGrid {
            dims,
            window: [window; 3],
            shift: [0; 3],
            padded: dims,
        })
    }

    pub fn counts(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.padded[a] / self.window[a])
    }

    pub fn num_windows(&self) -> usize {
        self.counts().iter().product()
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window.iter().product()
    }

    pub fn is_shifted(&self) -> bool {
        self.shift.iter().any(|&s| s > 0)
    }

    /// Position in the (padded, shifted) frame of token `t` of window `wid`.
    pub fn slot(&self, wid: usize, t: usize) -> [usize; 3] {
        let [_, ch, cw] = self.counts();
        let [_, wh, ww] = self.window;
        let origin = [wid / (ch * cw), (wid / cw) % ch, wid % cw];
        let offset = [t / (wh * ww), (t / ww) % wh, t % ww];
        [0, 1, 2].map(|a| origin[a] * self.window[a] + offset[a])
    }

    /// Window id and in-window offset holding shifted-frame position `q`.
    pub fn locate(&self, q: [usize; 3]) -> (usize, usize) {
        let [_, ch, cw] = self.counts();
        let [_, wh, ww] = self.window;
        let w = [0, 1, 2].map(|a| q[a] / self.window[a]);
        let o = [0, 1, 2].map(|a| q[a] % self.window[a]);
        (
            (w[0] * ch + w[1]) * cw + w[2],
            (o[0] * wh + o[1]) * ww + o[2],
        )
    }

    /// Original voxel shown at shifted-frame position `q`; `None` for padding.
    pub fn source(&self, q: [usize; 3]) -> Option<[usize; 3]> {
        let p = [0, 1, 2].map(|a| (q[a] + self.shift[a]) % self.padded[a]);
        (0..3).all(|a| p[a] < self.dims[a]).then_some(p)
    }

    /// Shifted-frame position of original voxel `p`.
    pub fn target(&self, p: [usize; 3]) -> [usize; 3] {
        [0, 1, 2].map(|a| (p[a] + self.padded[a] - self.shift[a]) % self.padded[a])
    }

    fn flat(&self, p: [usize; 3]) -> usize {
        (p[0] * self.dims[1] + p[1]) * self.dims[2] + p[2]
    }

    /// Gather index `[N, T, C]` tokens → `[N·nw, n, C]` windows (pad + shift + partition).
    pub fn partition_tokens_index(&self, batch: usize, channels: usize) -> Vec<usize> {
        let (nw, n) = (self.num_windows(), self.tokens_per_window());
        let tokens: usize = self.dims.iter().product();
        let mut index = Vec::with_capacity(batch * nw * n * channels);
        for b in 0..batch {
            for wid in 0..nw {
                for t in 0..n {
                    match self.source(self.slot(wid, t)) {
                        Some(p) => {
                            let base = (b * tokens + self.flat(p)) * channels;
                            index.extend(base..base + channels);
                        }
                        None => index.extend(std::iter::repeat_n(ZERO_FILL, channels)),
                    }
                }
            }
        }
        index
    }

    /// Gather index `[N·nw, n, C]` windows → `[N, T, C]` tokens (reverse + unshift + crop).
    pub fn reverse_tokens_index(&self, batch: usize, channels: usize) -> Vec<usize> {
        let (nw, n) = (self.num_windows(), self.tokens_per_window());
        let [d, h, w] = self.dims;
        let mut index = Vec::with_capacity(batch * d * h * w * channels);
        for b in 0..batch {
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        let (wid, t) = self.locate(self.target([z, y, x]));
                        let base = ((b * nw + wid) * n + t) * channels;
                        index.extend(base..base + channels);
                    }
                }
            }
        }
        index
    }

    /// Region label of a shifted-frame position: tokens in one window may
    /// attend to each other only when their labels agree.
    fn region(&self, q: [usize; 3]) -> usize {
        (0..3).fold(0, |acc, a| {
            let (p, w, s) = (self.padded[a], self.window[a], self.shift[a]);
            let label = if s == 0 || q[a] < p - w {
                0
            } else if q[a] < p - s {
                1
            } else {
                2
            };
            acc * 3 + label
        })
    }

    /// Flattened `[nw, n, n]` additive mask (0 or [`MASK_VALUE`]).
    pub fn mask_values(&self) -> Vec<f64> {
        let (nw, n) = (self.num_windows(), self.tokens_per_window());
        let mut mask = Vec::with_capacity(nw * n * n);
        for wid in 0..nw {
            let labels: Vec<usize> = (0..n).map(|t| self.region(self.slot(wid, t))).collect();
            for i in 0..n {
                for j in 0..n {
                    mask.push(if labels[i] == labels[j] {
                        0.0
                    } else {
                        MASK_VALUE
                    });
                }
            }
        }
        mask
    }
}

fn volume_partition_index(n: usize, c: usize, grid: &WindowGrid) -> Vec<usize> {
    let (nw, tw) = (grid.num_windows(), grid.tokens_per_window());
    let vol: usize = grid.dims.iter().product();
    let mut index = Vec::with_capacity(n * nw * tw * c);
    for b in 0..n {
        for wid in 0..nw {
            for t in 0..tw {
                let p = grid.flat(grid.slot(wid, t));
                index.extend((0..c).map(|ch| (b * c + ch) * vol + p));
            }
        }
    }
    index
}

/// `[N, C, D, H, W]` → `[N·nw, w³, C]`. Extents must be multiples of `window`.
pub fn window_partition(x: &Tensor, window: usize) -> Result<Tensor> {
    let (n, c, dims) = ops::dims3(x.shape(), "window_partition")?;
    let grid = WindowGrid::exact(dims, window, "window_partition")?;
    let index = volume_partition_index(n, c, &grid);
    ops::gather(
        x,
        index.into(),
        &[n * grid.num_windows(), grid.tokens_per_window(), c],
    )
}

/// Inverse of [`window_partition`]: `[N·nw, w³, C]` → `[N, C, D, H, W]`.
pub fn window_reverse(windows: &Tensor, dims: [usize; 3], window: usize) -> Result<Tensor> {
    let grid = WindowGrid::exact(dims, window, "window_reverse")?;
    let (nw, tw) = (grid.num_windows(), grid.tokens_per_window());
    let (bn, c) = match *windows.shape() {
        [bn, t, c] if t == tw && bn % nw == 0 => (bn, c),
        _ => {
            return Err(Error::dim(
                "window_reverse",
                format!(
                    "windows {:?} do not tile {dims:?} with window {window}",
                    windows.shape()
                ),
            ))
        }
    };
    let n = bn / nw;
    let forward = volume_partition_index(n, c, &grid);
    let mut index = vec![0; forward.len()];
    for (i, &src) in forward.iter().enumerate() {
        index[src] = i;
    }
    ops::gather(windows, index.into(), &[n, c, dims[0], dims[1], dims[2]])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShiftDirection {
    /// Roll by `−s`: `out[i] = x[(i + s) mod L]`.
    Forward,
    /// Roll by `+s`, undoing [`ShiftDirection::Forward`].
    Reverse,
}

/// Circular roll of every spatial axis of `[N, C, D, H, W]` by `shift`.
pub fn cyclic_shift(x: &Tensor, shift: usize, direction: ShiftDirection) -> Result<Tensor> {
    let (n, c, [d, h, w]) = ops::dims3(x.shape(), "cyclic_shift")?;
    if shift >= d.min(h).min(w) && shift > 0 {
        return Err(Error::dim(
            "cyclic_shift",
            format!(
                "shift {shift} must be smaller than every extent of {:?}",
                x.shape()
            ),
        ));
    }
    let src = |i: usize, len: usize| match direction {
        ShiftDirection::Forward => (i + shift) % len,
        ShiftDirection::Reverse => (i + len - shift) % len,
    };
    let mut index = Vec::with_capacity(x.numel());
    for plane in 0..n * c {
        for z in 0..d {
            for y in 0..h {
                for xx in 0..w {
                    index.push(((plane * d + src(z, d)) * h + src(y, h)) * w + src(xx, w));
                }
            }
        }
    }
    ops::gather(x, index.into(), x.shape())
}

/// Additive `[nw, n, n]` mask for a feature map of extent `dims`.
/// All zeros when the grid is not shifted.
pub fn build_attention_mask(dims: [usize; 3], spec: WindowSpec) -> Result<Tensor> {
    let grid = WindowGrid::new(dims, spec)?;
    let (nw, n) = (grid.num_windows(), grid.tokens_per_window());
    let values = if grid.is_shifted() {
        grid.mask_values()
    } else {
        vec![0.0; nw * n * n]
    };
    Tensor::from_vec(values, &[nw, n, n])
}

/// Row of the `(2w−1)³` bias table for every token pair of a window with
/// per-axis extents `extent` (each `<= base`).
pub fn relative_position_index(base: usize, extent: [usize; 3]) -> Vec<usize> {
    let span = 2 * base - 1;
    let coords: Vec<[usize; 3]> = (0..extent.iter().product::<usize>())
        .map(|t| {
            let [_, h, w] = extent;
            [t / (h * w), (t / w) % h, t % w]
        })
        .collect();
    let mut index = Vec::with_capacity(coords.len() * coords.len());
    for ci in &coords {
        for cj in &coords {
            let off = |a: usize| ci[a] + base - 1 - cj[a];
            index.push((off(0) * span + off(1)) * span + off(2));
        }
    }
    index
}

/// Windowed multi-head self-attention parameters and forward pass.
#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub qkv: Linear,
    pub proj: Linear,
    /// `[(2w−1)³, heads]`, absent when relative position bias is disabled.
    pub rel_table: Option<Tensor>,
    pub heads: usize,
    pub dim: usize,
    pub window: usize,
}

impl WindowAttention {
    pub fn new(
        vb: &VarBuilder,
        dim: usize,
        heads: usize,
        window: usize,
        rel_bias: bool,
        qkv_bias: bool,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "channels {dim} not divisible by {heads} heads"
            )));
        }
        if window == 0 {
            return Err(Error::config("window must be at least 1"));
        }
        let span = 2 * window - 1;
        Ok(WindowAttention {
            qkv: Linear::new(&vb.pp("qkv"), dim, 3 * dim, qkv_bias),
            proj: Linear::new(&vb.pp("proj"), dim, dim, true),
            rel_table: rel_bias.then(|| {
                vb.param(
                    "relative_position_bias_table",
                    &[span * span * span, heads],
                    Init::TruncNormal(0.02),
                )
            }),
            heads,
            dim,
            window,
        })
    }

    /// `[h, n, n]` bias for a full `w³` window, gathered from the table.
    pub fn relative_position_bias(&self) -> Result<Option<Tensor>> {
        let Some(table) = &self.rel_table else {
            return Ok(None);
        };
        let w = self.window;
        let n = w * w * w;
        let rel = relative_position_index(w, [w; 3]);
        let h = self.heads;
        let mut index = Vec::with_capacity(h * n * n);
        for head in 0..h {
            index.extend(rel.iter().map(|&r| r * h + head));
        }
        ops::gather(table, index.into(), &[h, n, n]).map(Some)
    }

    /// Attention over tokens `[N, T, C]` of a `dims` feature map.
    pub fn forward_tokens(&self, x: &Tensor, dims: [usize; 3], spec: WindowSpec) -> Result<Tensor> {
        let (batch, tokens, c) = match *x.shape() {
            [b, t, c] => (b, t, c),
            _ => {
                return Err(Error::dim(
                    "w_mhsa",
                    format!("expected N×T×C, got {:?}", x.shape()),
                ))
            }
        };
        if c != self.dim || tokens != dims.iter().product::<usize>() {
            return Err(Error::dim(
                "w_mhsa",
                format!(
                    "input {:?} vs dims {dims:?} and {} channels",
                    x.shape(),
                    self.dim
                ),
            ));
        }
        if spec.window != self.window {
            return Err(Error::config(format!(
                "attention built for window {} used with window {}",
                self.window, spec.window
            )));
        }
        let grid = WindowGrid::new(dims, spec)?;
        let (nw, n) = (grid.num_windows(), grid.tokens_per_window());
        let (h, d) = (self.heads, c / self.heads);
        let bw = batch * nw;

        let windows = ops::gather(x, grid.partition_tokens_index(batch, c).into(), &[bw, n, c])?;
        let qkv = self.qkv.forward(&windows)?;
        let split = |part: usize| -> Result<Tensor> {
            let mut index = Vec::with_capacity(bw * h * n * d);
            for b in 0..bw {
                for head in 0..h {
                    for t in 0..n {
                        let base = (b * n + t) * 3 * c + part * c + head * d;
                        index.extend(base..base + d);
                    }
                }
            }
            ops::gather(&qkv, index.into(), &[bw * h, n, d])
        };
        let (q, k, v) = (split(0)?, split(1)?, split(2)?);
        let mut scores = ops::scale(&ops::bmm_nt(&q, &k)?, 1.0 / (d as f64).sqrt())?;
        if let Some(table) = &self.rel_table {
            let rel = relative_position_index(self.window, grid.window);
            let mut index = Vec::with_capacity(bw * h * n * n);
            for _ in 0..bw {
                for head in 0..h {
                    index.extend(rel.iter().map(|&r| r * h + head));
                }
            }
            scores = ops::add_indexed(&scores, table, index.into())?;
        }
        if grid.is_shifted() {
            let mask = Tensor::from_vec(grid.mask_values(), &[nw, n, n])?;
            let per_window = n * n;
            let mut index = Vec::with_capacity(bw * h * per_window);
            for b in 0..bw {
                let base = (b % nw) * per_window;
                for _ in 0..h {
                    index.extend(base..base + per_window);
                }
            }
            scores = ops::add_indexed(&scores, &mask, index.into())?;
        }
        let attn = ops::softmax(&scores, 2)?;
        let out = ops::bmm(&attn, &v)?;
        let mut merge = Vec::with_capacity(bw * n * c);
        for b in 0..bw {
            for t in 0..n {
                for head in 0..h {
                    let base = ((b * h + head) * n + t) * d;
                    merge.extend(base..base + d);
                }
            }
        }
        let merged = ops::gather(&out, merge.into(), &[bw, n, c])?;
        let projected = self.proj.forward(&merged)?;
        let reverse: Arc<[usize]> = grid.reverse_tokens_index(batch, c).into();
        ops::gather(&projected, reverse, &[batch, tokens, c])
    }

    /// Attention over a `[N, C, D, H, W]` volume; shape-preserving.
    pub fn forward(&self, x: &Tensor, spec: WindowSpec) -> Result<Tensor> {
        let (_, _, dims) = ops::dims3(x.shape(), "w_mhsa")?;
        let tokens = ops::volume_to_tokens(x)?;
        let y = self.forward_tokens(&tokens, dims, spec)?;
        ops::tokens_to_volume(&y, dims)
    }
}

/// (Shifted) windowed multi-head self-attention on a volume.
pub fn w_mhsa(x: &Tensor, params: &WindowAttention, spec: WindowSpec) -> Result<Tensor> {
    params.forward(x, spec)
}
