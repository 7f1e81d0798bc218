//! Soft Dice plus cross-entropy over softmax probabilities, as one fused op.

use crate::error::{Error, Result};
use crate::tensor::{BackwardOp, Tensor};

/// Smoothing added to the numerator and denominator of the soft Dice.
pub const DICE_SMOOTH: f64 = 1e-5;

/// The two terms of [`dice_ce_loss`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    /// Mean voxel cross-entropy.
    pub ce: f64,
    /// `1 − mean soft Dice` over samples and classes (background included).
    pub dice: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.ce + self.dice
    }
}

struct Softmaxed {
    n: usize,
    k: usize,
    vol: usize,
    probs: Vec<f64>,
}

fn softmax_channels(logits: &Tensor, labels: &[usize]) -> Result<Softmaxed> {
    let shape = logits.shape();
    if shape.len() < 3 {
        return Err(Error::dim(
            "dice_ce_loss",
            format!("logits {shape:?} need [N, K, ...]"),
        ));
    }
    let (n, k) = (shape[0], shape[1]);
    let vol: usize = shape[2..].iter().product();
    if labels.len() != n * vol {
        return Err(Error::dim(
            "dice_ce_loss",
            format!("{} labels for logits {shape:?}", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::dim(
            "dice_ce_loss",
            format!("label {bad} outside {k} classes"),
        ));
    }
    let z = logits.data();
    let mut probs = vec![0.0; z.len()];
    for b in 0..n {
        for v in 0..vol {
            let at = |c: usize| (b * k + c) * vol + v;
            let max = (0..k).map(|c| z[at(c)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for c in 0..k {
                let e = (z[at(c)] - max).exp();
                probs[at(c)] = e;
                total += e;
            }
            for c in 0..k {
                probs[at(c)] /= total;
            }
        }
    }
    Ok(Softmaxed { n, k, vol, probs })
}

/// Per `(sample, class)`: `(Σ p·y, Σ p + Σ y)`.
fn overlaps(s: &Softmaxed, labels: &[usize]) -> Vec<(f64, f64)> {
    let mut out = vec![(0.0, 0.0); s.n * s.k];
    for b in 0..s.n {
        for c in 0..s.k {
            let p = &s.probs[(b * s.k + c) * s.vol..][..s.vol];
            let y = &labels[b * s.vol..][..s.vol];
            let (mut inter, mut sum) = (0.0, 0.0);
            for (pv, &l) in p.iter().zip(y) {
                let t = (l == c) as u8 as f64;
                inter += pv * t;
                sum += pv + t;
            }
            out[b * s.k + c] = (inter, sum);
        }
    }
    out
}

fn terms(s: &Softmaxed, labels: &[usize], ov: &[(f64, f64)]) -> LossTerms {
    let mut ce = 0.0;
    for b in 0..s.n {
        for v in 0..s.vol {
            let l = labels[b * s.vol + v];
            ce -= s.probs[(b * s.k + l) * s.vol + v]
                .max(f64::MIN_POSITIVE)
                .ln();
        }
    }
    ce /= (s.n * s.vol) as f64;
    let mean_dice = ov
        .iter()
        .map(|&(i, u)| (2.0 * i + DICE_SMOOTH) / (u + DICE_SMOOTH))
        .sum::<f64>()
        / ov.len() as f64;
    LossTerms {
        ce,
        dice: 1.0 - mean_dice,
    }
}

/// The loss terms without building a graph.
pub fn dice_ce_terms(logits: &Tensor, labels: &[usize]) -> Result<LossTerms> {
    let s = softmax_channels(logits, labels)?;
    let ov = overlaps(&s, labels);
    Ok(terms(&s, labels, &ov))
}

struct DiceCeBackward {
    labels: Vec<usize>,
    probs: Vec<f64>,
    overlaps: Vec<(f64, f64)>,
    n: usize,
    k: usize,
    vol: usize,
}

impl BackwardOp for DiceCeBackward {
    fn name(&self) -> &'static str {
        "dice_ce_loss"
    }

    fn backward(&self, _: &[Tensor], _: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (n, k, vol) = (self.n, self.k, self.vol);
        let ce_scale = grad[0] / (n * vol) as f64;
        let dice_scale = grad[0] / (n * k) as f64;
        let mut gz = vec![0.0; self.probs.len()];
        let mut gp = vec![0.0; k];
        for b in 0..n {
            for v in 0..vol {
                let l = self.labels[b * vol + v];
                let at = |c: usize| (b * k + c) * vol + v;
                // dL_dice/dp for every class at this voxel.
                let mut dot = 0.0;
                for (c, g) in gp.iter_mut().enumerate() {
                    let (i, u) = self.overlaps[b * k + c];
                    let y = (l == c) as u8 as f64;
                    let den = u + DICE_SMOOTH;
                    let dd = (2.0 * y * den - (2.0 * i + DICE_SMOOTH)) / (den * den);
                    *g = -dice_scale * dd;
                    dot += *g * self.probs[at(c)];
                }
                for c in 0..k {
                    let p = self.probs[at(c)];
                    let y = (l == c) as u8 as f64;
                    gz[at(c)] = p * (gp[c] - dot) + ce_scale * (p - y);
                }
            }
        }
        vec![Some(gz)]
    }
}

/// `CE + (1 − soft Dice)` for logits `[N, K, ...]` and flat labels `[N, ...]`.
pub fn dice_ce_loss(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let s = softmax_channels(logits, labels)?;
    let ov = overlaps(&s, labels);
    let value = terms(&s, labels, &ov).total();
    Tensor::from_op(
        vec![value],
        vec![1],
        vec![logits.clone()],
        DiceCeBackward {
            labels: labels.to_vec(),
            probs: s.probs,
            overlaps: ov,
            n: s.n,
            k: s.k,
            vol: s.vol,
        },
    )
}
