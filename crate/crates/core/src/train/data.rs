//! Seeded synthetic segmentation volumes: spheres and boxes on a noisy background.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Sphere,
    Box,
}

/// A solid sphere (`half` = radius) or axis-aligned cube (`half` = half edge),
/// in voxel units with voxel `i` centred at `i + 0.5`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub center: [f64; 3],
    pub half: f64,
}

impl Shape {
    pub fn contains_voxel(&self, v: [usize; 3]) -> bool {
        let d = [0, 1, 2].map(|a| v[a] as f64 + 0.5 - self.center[a]);
        match self.kind {
            ShapeKind::Sphere => d.iter().map(|x| x * x).sum::<f64>() <= self.half * self.half,
            ShapeKind::Box => d.iter().all(|x| x.abs() <= self.half),
        }
    }

    /// Writes `label` into every covered voxel of an `edge³` label map.
    pub fn paint(&self, labels: &mut [usize], edge: usize, label: usize) {
        let lo = self
            .center
            .map(|c| (c - self.half - 1.0).floor().max(0.0) as usize);
        let hi = self
            .center
            .map(|c| ((c + self.half + 1.0).ceil() as usize).min(edge));
        for z in lo[0]..hi[0] {
            for y in lo[1]..hi[1] {
                for x in lo[2]..hi[2] {
                    if self.contains_voxel([z, y, x]) {
                        labels[(z * edge + y) * edge + x] = label;
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub edge: usize,
    /// Background plus `num_classes − 1` shape classes.
    pub num_classes: usize,
    /// Shapes per volume, inclusive range; at least one per foreground class.
    pub shapes: (usize, usize),
    /// Radius or half edge, inclusive range in voxels.
    pub size: (f64, f64),
    pub kinds: Vec<ShapeKind>,
    /// Mean intensity per class, background first.
    pub intensities: Vec<f64>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            edge: 32,
            num_classes: 3,
            shapes: (2, 4),
            size: (4.0, 8.0),
            kinds: vec![ShapeKind::Sphere, ShapeKind::Box],
            intensities: vec![0.0, 1.0, 2.0],
            noise_sigma: 0.25,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.edge == 0 || self.num_classes < 2 {
            return Err(Error::config(
                "synthetic data needs edge >= 1 and at least 2 classes",
            ));
        }
        if self.intensities.len() != self.num_classes {
            return Err(Error::config(format!(
                "{} intensities for {} classes",
                self.intensities.len(),
                self.num_classes
            )));
        }
        let (lo, hi) = self.size;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::config(format!(
                "invalid shape size range {lo}..={hi}"
            )));
        }
        if 2.0 * hi > self.edge as f64 {
            return Err(Error::config(format!(
                "shapes of size {hi} do not fit in a volume of edge {}",
                self.edge
            )));
        }
        if self.shapes.0 > self.shapes.1 || self.shapes.1 < self.num_classes - 1 {
            return Err(Error::config(format!(
                "shape count range {:?} cannot hold one shape per foreground class",
                self.shapes
            )));
        }
        if self.kinds.is_empty() {
            return Err(Error::config("no shape kinds enabled"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise sigma must be finite and non-negative"));
        }
        Ok(())
    }
}

/// One volume and its voxel labels, both `edge³` in D-major order.
#[derive(Clone, Debug)]
pub struct SegSample {
    /// `[1, D, H, W]`.
    pub volume: Tensor,
    pub labels: Vec<usize>,
    pub dims: [usize; 3],
}

fn sample_shape(rng: &mut ChaCha8Rng, spec: &SyntheticSpec) -> Shape {
    let (lo, hi) = spec.size;
    let half = if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    };
    let edge = spec.edge as f64;
    let center = [0; 3].map(|_| {
        if edge - half > half {
            rng.random_range(half..=edge - half)
        } else {
            half
        }
    });
    let kind = spec.kinds[rng.random_range(0..spec.kinds.len())];
    Shape { kind, center, half }
}

/// `n` samples, reproducible from `spec.seed`.
pub fn gen_dataset(spec: &SyntheticSpec, n: usize) -> Result<Vec<SegSample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::config(format!("noise distribution: {e}")))?;
    let e = spec.edge;
    (0..n)
        .map(|_| {
            let count = rng.random_range(spec.shapes.0.max(spec.num_classes - 1)..=spec.shapes.1);
            let mut classes: Vec<usize> = (1..spec.num_classes).collect();
            while classes.len() < count {
                classes.push(rng.random_range(1..spec.num_classes));
            }
            classes.shuffle(&mut rng);
            let mut labels = vec![0; e * e * e];
            for &class in &classes {
                sample_shape(&mut rng, spec).paint(&mut labels, e, class);
            }
            let volume = labels
                .iter()
                .map(|&l| {
                    let base = spec.intensities[l];
                    if spec.noise_sigma > 0.0 {
                        base + noise.sample(&mut rng)
                    } else {
                        base
                    }
                })
                .collect();
            Ok(SegSample {
                volume: Tensor::from_vec(volume, &[1, e, e, e])?,
                labels,
                dims: [e; 3],
            })
        })
        .collect()
}

/// Stacks samples into a `[N, 1, D, H, W]` batch and concatenated labels.
pub fn collate(samples: &[&SegSample]) -> Result<(Tensor, Vec<usize>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::config("empty batch"))?;
    let dims = first.dims;
    let mut data = Vec::with_capacity(samples.len() * first.labels.len());
    let mut labels = Vec::with_capacity(data.capacity());
    for s in samples {
        if s.dims != dims {
            return Err(Error::dim("collate", format!("{:?} vs {:?}", s.dims, dims)));
        }
        data.extend_from_slice(&s.volume.data());
        labels.extend_from_slice(&s.labels);
    }
    let x = Tensor::from_vec(data, &[samples.len(), 1, dims[0], dims[1], dims[2]])?;
    Ok((x, labels))
}
