//! Brute-force oracles shared by the kernel, attention, and acceptance tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swinception::attention::{WindowAttention, WindowSpec};
use swinception::nn::ParamStore;
use swinception::ops::MASK_VALUE;
use swinception::Tensor;

/// Uniform values in [-1, 1) from a seeded stream.
pub fn random(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[allow(clippy::too_many_arguments)]
pub fn conv3d_oracle(
    x: &[f64],
    [n, cin, d, h, w]: [usize; 5],
    wt: &[f64],
    cout: usize,
    k: usize,
    bias: &[f64],
    stride: usize,
    pad: usize,
    groups: usize,
) -> (Vec<f64>, [usize; 5]) {
    let o = |e: usize| (e + 2 * pad - k) / stride + 1;
    let (od, oh, ow) = (o(d), o(h), o(w));
    let (gi, go) = (cin / groups, cout / groups);
    let mut out = vec![0.0; n * cout * od * oh * ow];
    for b in 0..n {
        for co in 0..cout {
            let g = co / go;
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = bias.get(co).copied().unwrap_or(0.0);
                        for ci in 0..gi {
                            for a in 0..k {
                                for bb in 0..k {
                                    for c in 0..k {
                                        let (iz, iy, ix) = (
                                            (z * stride + a) as isize - pad as isize,
                                            (y * stride + bb) as isize - pad as isize,
                                            (xx * stride + c) as isize - pad as isize,
                                        );
                                        if iz < 0
                                            || iy < 0
                                            || ix < 0
                                            || iz >= d as isize
                                            || iy >= h as isize
                                            || ix >= w as isize
                                        {
                                            continue;
                                        }
                                        let ch = g * gi + ci;
                                        let xi = (((b * cin + ch) * d + iz as usize) * h
                                            + iy as usize)
                                            * w
                                            + ix as usize;
                                        let wi = (((co * gi + ci) * k + a) * k + bb) * k + c;
                                        acc += x[xi] * wt[wi];
                                    }
                                }
                            }
                        }
                        out[(((b * cout + co) * od + z) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
    }
    (out, [n, cout, od, oh, ow])
}

/// Zero-stuff by `stride`, pad by `k − 1`, and correlate with the flipped,
/// channel-transposed kernel.
pub fn conv_transpose3d_oracle(
    x: &[f64],
    [n, cin, d, h, w]: [usize; 5],
    wt: &[f64],
    cout: usize,
    k: usize,
    bias: &[f64],
    stride: usize,
) -> (Vec<f64>, [usize; 5]) {
    let s = |e: usize| (e - 1) * stride + 1;
    let (sd, sh, sw) = (s(d), s(h), s(w));
    let mut stuffed = vec![0.0; n * cin * sd * sh * sw];
    for b in 0..n {
        for c in 0..cin {
            for z in 0..d {
                for y in 0..h {
                    for xx in 0..w {
                        stuffed[(((b * cin + c) * sd + z * stride) * sh + y * stride) * sw
                            + xx * stride] = x[(((b * cin + c) * d + z) * h + y) * w + xx];
                    }
                }
            }
        }
    }
    let mut flipped = vec![0.0; cout * cin * k * k * k];
    for ci in 0..cin {
        for co in 0..cout {
            for a in 0..k {
                for bb in 0..k {
                    for c in 0..k {
                        flipped[(((co * cin + ci) * k + a) * k + bb) * k + c] =
                            wt[(((ci * cout + co) * k + (k - 1 - a)) * k + (k - 1 - bb)) * k
                                + (k - 1 - c)];
                    }
                }
            }
        }
    }
    conv3d_oracle(
        &stuffed,
        [n, cin, sd, sh, sw],
        &flipped,
        cout,
        k,
        bias,
        1,
        k - 1,
        1,
    )
}

pub fn avg_pool_oracle(
    x: &[f64],
    [n, c, d, h, w]: [usize; 5],
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let o = |e: usize| (e + 2 * pad - k) / stride + 1;
    let (od, oh, ow) = (o(d), o(h), o(w));
    let mut out = Vec::new();
    for b in 0..n {
        for ch in 0..c {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let (mut sum, mut count) = (0.0, 0usize);
                        for a in 0..k {
                            for bb in 0..k {
                                for cc in 0..k {
                                    let iz = (z * stride + a) as isize - pad as isize;
                                    let iy = (y * stride + bb) as isize - pad as isize;
                                    let ix = (xx * stride + cc) as isize - pad as isize;
                                    if (0..d as isize).contains(&iz)
                                        && (0..h as isize).contains(&iy)
                                        && (0..w as isize).contains(&ix)
                                    {
                                        sum += x[(((b * c + ch) * d + iz as usize) * h
                                            + iy as usize)
                                            * w
                                            + ix as usize];
                                        count += 1;
                                    }
                                }
                            }
                        }
                        out.push(sum / count as f64);
                    }
                }
            }
        }
    }
    out
}

/// Per-axis window, shift, and padded extent under the shrink rule.
pub fn axis_layout(extent: usize, spec: WindowSpec) -> (usize, usize, usize) {
    if extent <= spec.window {
        (extent, 0, extent)
    } else {
        (
            spec.window,
            spec.shift,
            extent.div_ceil(spec.window) * spec.window,
        )
    }
}

/// Mask built the classic way: label slices `[0, P−w)`, `[P−w, P−s)`,
/// `[P−s, P)` of the shifted frame, partition the label image, compare labels.
pub fn label_image_mask(dims: [usize; 3], spec: WindowSpec) -> Vec<f64> {
    let lay = dims.map(|e| axis_layout(e, spec));
    let [(wd, _, pd), (wh, _, ph), (ww, _, pw)] = lay;
    let mut image = vec![0usize; pd * ph * pw];
    let mut cnt = 0;
    let slices = |a: usize| -> Vec<(usize, usize)> {
        let (w, s, p) = lay[a];
        if s == 0 {
            vec![(0, p)]
        } else {
            vec![(0, p - w), (p - w, p - s), (p - s, p)]
        }
    };
    for &(z0, z1) in &slices(0) {
        for &(y0, y1) in &slices(1) {
            for &(x0, x1) in &slices(2) {
                for z in z0..z1 {
                    for y in y0..y1 {
                        for x in x0..x1 {
                            image[(z * ph + y) * pw + x] = cnt;
                        }
                    }
                }
                cnt += 1;
            }
        }
    }
    let mut mask = Vec::new();
    for cz in 0..pd / wd {
        for cy in 0..ph / wh {
            for cx in 0..pw / ww {
                let mut labels = Vec::new();
                for z in 0..wd {
                    for y in 0..wh {
                        for x in 0..ww {
                            labels
                                .push(image[((cz * wd + z) * ph + cy * wh + y) * pw + cx * ww + x]);
                        }
                    }
                }
                for &a in &labels {
                    for &b in &labels {
                        mask.push(if a == b { 0.0 } else { MASK_VALUE });
                    }
                }
            }
        }
    }
    mask
}

pub struct AttnWeights {
    pub wqkv: Vec<f64>,
    pub bqkv: Option<Vec<f64>>,
    pub wproj: Vec<f64>,
    pub bproj: Vec<f64>,
    pub table: Option<Vec<f64>>,
}

impl AttnWeights {
    pub fn of(a: &WindowAttention) -> Self {
        AttnWeights {
            wqkv: a.qkv.weight.to_vec(),
            bqkv: a.qkv.bias.as_ref().map(Tensor::to_vec),
            wproj: a.proj.weight.to_vec(),
            bproj: a.proj.bias.as_ref().unwrap().to_vec(),
            table: a.rel_table.as_ref().map(Tensor::to_vec),
        }
    }
}

/// Dense per-voxel attention: every output voxel scans the whole padded,
/// shifted volume for keys sharing its window and wrap status on every axis.
pub fn attention_oracle(
    x: &[f64],
    [n, c, d, h, w]: [usize; 5],
    heads: usize,
    spec: WindowSpec,
    p: &AttnWeights,
) -> Vec<f64> {
    let dims = [d, h, w];
    let lay = dims.map(|e| axis_layout(e, spec));
    let padded = lay.map(|l| l.2);
    let hd = c / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let span = 2 * spec.window - 1;
    let vol = d * h * w;
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        let feature = |q: [usize; 3]| -> Vec<f64> {
            if (0..3).any(|a| q[a] >= dims[a]) {
                return vec![0.0; c];
            }
            let v = (q[0] * h + q[1]) * w + q[2];
            (0..c).map(|ch| x[(b * c + ch) * vol + v]).collect()
        };
        let qkv_of = |q: [usize; 3]| -> Vec<f64> {
            let f = feature(q);
            (0..3 * c)
                .map(|o| {
                    let bias = p.bqkv.as_ref().map_or(0.0, |bb| bb[o]);
                    bias + (0..c).map(|i| p.wqkv[o * c + i] * f[i]).sum::<f64>()
                })
                .collect()
        };
        // shifted-frame position r shows original voxel (r + s) mod P
        let origin = |r: [usize; 3]| [0, 1, 2].map(|a| (r[a] + lay[a].1) % padded[a]);
        let wrapped = |r: [usize; 3], a: usize| r[a] + lay[a].1 >= padded[a];
        for z in 0..d {
            for y in 0..h {
                for xx in 0..w {
                    let q = [z, y, xx];
                    let r = [0, 1, 2].map(|a| (q[a] + padded[a] - lay[a].1) % padded[a]);
                    let qv = qkv_of(q);
                    let mut keys = Vec::new();
                    for r0 in 0..padded[0] {
                        for r1 in 0..padded[1] {
                            for r2 in 0..padded[2] {
                                let rk = [r0, r1, r2];
                                let same = (0..3).all(|a| {
                                    rk[a] / lay[a].0 == r[a] / lay[a].0
                                        && (lay[a].1 == 0 || wrapped(rk, a) == wrapped(r, a))
                                });
                                if same {
                                    keys.push(rk);
                                }
                            }
                        }
                    }
                    let kvs: Vec<Vec<f64>> = keys.iter().map(|&rk| qkv_of(origin(rk))).collect();
                    let mut merged = vec![0.0; c];
                    for head in 0..heads {
                        let off = head * hd;
                        let scores: Vec<f64> = keys
                            .iter()
                            .zip(&kvs)
                            .map(|(rk, kv)| {
                                let dot: f64 = (0..hd).map(|i| qv[off + i] * kv[c + off + i]).sum();
                                let bias = p.table.as_ref().map_or(0.0, |t| {
                                    let rel = |a: usize| {
                                        r[a] % lay[a].0 + spec.window - 1 - rk[a] % lay[a].0
                                    };
                                    t[((rel(0) * span + rel(1)) * span + rel(2)) * heads + head]
                                });
                                dot * scale + bias
                            })
                            .collect();
                        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                        let z: f64 = e.iter().sum();
                        for (j, kv) in kvs.iter().enumerate() {
                            for i in 0..hd {
                                merged[off + i] += e[j] / z * kv[2 * c + off + i];
                            }
                        }
                    }
                    let v = (z * h + y) * w + xx;
                    for o in 0..c {
                        let s: f64 = (0..c).map(|i| p.wproj[o * c + i] * merged[i]).sum();
                        out[(b * c + o) * vol + v] = s + p.bproj[o];
                    }
                }
            }
        }
    }
    out
}

pub fn make_attention(
    seed: u64,
    dim: usize,
    heads: usize,
    window: usize,
    rel: bool,
    qkv_bias: bool,
) -> WindowAttention {
    let store = ParamStore::new(seed);
    let a = WindowAttention::new(&store.root(), dim, heads, window, rel, qkv_bias).unwrap();
    if let Some(t) = &a.rel_table {
        // larger than the default init so the bias visibly matters
        t.set_data(&random(seed ^ 0xb1a5, t.numel())).unwrap();
    }
    a
}
