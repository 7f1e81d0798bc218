//! Jacobian influence probing: which input voxels reach a given output voxel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

/// Gradient magnitudes at or below this count as no influence.
pub const INFLUENCE_THRESHOLD: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Influence {
    pub dims: [usize; 3],
    pub source: [usize; 3],
    /// `D·H·W` flags, D-major.
    pub mask: Vec<bool>,
    /// Largest Chebyshev distance from `source` to a flagged voxel.
    pub radius: usize,
}

impl Influence {
    pub fn coords(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        let [_, h, w] = self.dims;
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(move |(i, _)| [i / (h * w), (i / w) % h, i % w])
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Whether every flagged voxel lies in the axis-aligned box `[lo, hi)`.
    pub fn within(&self, lo: [usize; 3], hi: [usize; 3]) -> bool {
        self.coords()
            .all(|c| (0..3).all(|a| c[a] >= lo[a] && c[a] < hi[a]))
    }
}

/// Chebyshev distance between voxels.
pub fn chebyshev(a: [usize; 3], b: [usize; 3]) -> usize {
    (0..3).map(|i| a[i].abs_diff(b[i])).max().unwrap_or(0)
}

/// Backpropagates the channel sum of output voxel `source` (sample 0) of
/// `fragment` applied to a seeded random `input_shape` volume, and flags
/// every input voxel whose gradient, summed in magnitude over channels,
/// exceeds [`INFLUENCE_THRESHOLD`].
///
/// `fragment` maps `[N, C, D, H, W]` to `[N, C', D, H, W]`.
pub fn receptive_field_probe<F>(
    fragment: F,
    input_shape: &[usize],
    source: [usize; 3],
    seed: u64,
) -> Result<Influence>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let (n, c, dims) = ops::dims3(input_shape, "receptive_field_probe")?;
    if (0..3).any(|a| source[a] >= dims[a]) {
        return Err(Error::dim(
            "receptive_field_probe",
            format!("source {source:?} outside {dims:?}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..n * c * dims.iter().product::<usize>())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let x = Tensor::param(values, input_shape)?;
    let y = fragment(&x)?;
    let (_, cy, ydims) = ops::dims3(y.shape(), "receptive_field_probe")?;
    if ydims != dims {
        return Err(Error::dim(
            "receptive_field_probe",
            format!("fragment changed extents {dims:?} → {ydims:?}"),
        ));
    }
    let vol: usize = dims.iter().product();
    let at = (source[0] * dims[1] + source[1]) * dims[2] + source[2];
    let mut select = vec![0.0; y.numel()];
    for ch in 0..cy {
        select[ch * vol + at] = 1.0;
    }
    let select = Tensor::from_vec(select, y.shape())?;
    ops::sum(&ops::mul(&y, &select)?)?.backward()?;
    let grad = x.grad().expect("probe input requires grad");
    let mut mask = vec![false; vol];
    for (v, flag) in mask.iter_mut().enumerate() {
        let total: f64 = (0..c).map(|ch| grad[ch * vol + v].abs()).sum();
        *flag = total > INFLUENCE_THRESHOLD;
    }
    let mut influence = Influence {
        dims,
        source,
        mask,
        radius: 0,
    };
    influence.radius = influence
        .coords()
        .map(|p| chebyshev(p, source))
        .max()
        .unwrap_or(0);
    Ok(influence)
}
