//! Binary tensor container: model checkpoints and synthetic datasets.
//!
//! Layout, little-endian throughout:
//! `b"SWNC"`, version `u16`, entry count `u32`, then per entry the name
//! length `u16`, the UTF-8 name, rank `u8`, one `u32` per extent, and the
//! values as `f32`. Values are stored in single precision whatever the
//! compute precision, so saving an `f64` model is lossy once; reloading and
//! saving again reproduces the file byte for byte.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;
use crate::train::data::SegSample;

pub const MAGIC: &[u8; 4] = b"SWNC";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

impl Entry {
    pub fn new(name: impl Into<String>, shape: &[usize], values: &[f64]) -> Self {
        Entry {
            name: name.into(),
            shape: shape.to_vec(),
            values: values.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::from_vec(self.values.iter().map(|&v| v as f64).collect(), &self.shape)
    }
}

/// Ordered named tensors; names are unique.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
}

/// Outcome of loading a checkpoint into a parameter store.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    /// In the store but absent from the checkpoint; left at their current values.
    pub missing: Vec<String>,
    /// In the checkpoint but absent from the store.
    pub unexpected: Vec<String>,
    /// Present in both with different shapes: `(name, store shape, checkpoint shape)`.
    pub mismatched: Vec<(String, Vec<usize>, Vec<usize>)>,
}

impl LoadReport {
    pub fn is_exact(&self) -> bool {
        self.missing.is_empty() && self.unexpected.is_empty() && self.mismatched.is_empty()
    }

    /// One line per skipped tensor.
    pub fn problems(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .missing
            .iter()
            .map(|n| format!("missing from checkpoint: {n}"))
            .collect();
        out.extend(self.unexpected.iter().map(|n| format!("not in model: {n}")));
        out.extend(self.mismatched.iter().map(|(n, model, ckpt)| {
            format!("shape mismatch: {n} model {model:?} checkpoint {ckpt:?}")
        }));
        out
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "truncated while reading {what} at byte {}",
                    self.at
                ))
            })?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("exact length"))
    }
}

impl Checkpoint {
    pub fn push(&mut self, entry: Entry) -> Result<()> {
        if self.get(&entry.name).is_some() {
            return Err(Error::Format(format!("duplicate entry {}", entry.name)));
        }
        if entry.shape.iter().product::<usize>() != entry.values.len() {
            return Err(Error::Format(format!(
                "entry {} has shape {:?} but {} values",
                entry.name,
                entry.shape,
                entry.values.len()
            )));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Every parameter and buffer of `store`, in creation order.
    pub fn from_store(store: &ParamStore) -> Self {
        let entries = store
            .entries()
            .into_iter()
            .map(|e| Entry::new(e.name, e.tensor.shape(), &e.tensor.data()))
            .collect();
        Checkpoint { entries }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = u32::try_from(self.entries.len())
            .map_err(|_| Error::Format("too many entries".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for e in &self.entries {
            let name_len = u16::try_from(e.name.len())
                .map_err(|_| Error::Format(format!("name longer than 65535 bytes: {}", e.name)))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            let rank = u8::try_from(e.shape.len())
                .map_err(|_| Error::Format(format!("rank too large: {}", e.name)))?;
            out.push(rank);
            for &d in &e.shape {
                let d = u32::try_from(d)
                    .map_err(|_| Error::Format(format!("extent too large: {}", e.name)))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &e.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format("bad magic, expected SWNC".into()));
        }
        let version = u16::from_le_bytes(r.array("version")?);
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        let count = u32::from_le_bytes(r.array("entry count")?) as usize;
        let mut ckpt = Checkpoint::default();
        for _ in 0..count {
            let len = u16::from_le_bytes(r.array("name length")?) as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1, "rank")?[0] as usize;
            let shape = (0..rank)
                .map(|_| Ok(u32::from_le_bytes(r.array("extent")?) as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("extents of {name} overflow")))?;
            let raw = r.take(
                n.checked_mul(4)
                    .ok_or_else(|| Error::Format("entry too large".into()))?,
                "values",
            )?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            ckpt.push(Entry {
                name,
                shape,
                values,
            })?;
        }
        if r.at != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                bytes.len() - r.at
            )));
        }
        Ok(ckpt)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Copies entries into `store` by name. Strict loading requires an exact
    /// name and shape match and changes nothing on failure; non-strict
    /// loading copies what matches and reports the rest.
    pub fn load_into(&self, store: &ParamStore, strict: bool) -> Result<LoadReport> {
        let mut report = LoadReport::default();
        let mut pending = Vec::new();
        let targets = store.entries();
        for t in &targets {
            match self.get(&t.name) {
                None => report.missing.push(t.name.clone()),
                Some(e) if e.shape != t.tensor.shape() => report.mismatched.push((
                    t.name.clone(),
                    t.tensor.shape().to_vec(),
                    e.shape.clone(),
                )),
                Some(e) => pending.push((t, e)),
            }
        }
        report.unexpected = self
            .entries
            .iter()
            .filter(|e| targets.iter().all(|t| t.name != e.name))
            .map(|e| e.name.clone())
            .collect();
        if strict && !report.is_exact() {
            return Err(Error::Mismatch(report.problems()));
        }
        for (t, e) in pending {
            let values: Vec<f64> = e.values.iter().map(|&v| v as f64).collect();
            t.tensor.set_data(&values)?;
            report.loaded.push(t.name.clone());
        }
        Ok(report)
    }
}

/// One container per split with entries `vol_i` (`[1, D, H, W]`) and
/// `lab_i` (`[D, H, W]`, class indices stored as floats).
pub fn dataset_to_checkpoint(samples: &[SegSample]) -> Result<Checkpoint> {
    let mut ckpt = Checkpoint::default();
    for (i, s) in samples.iter().enumerate() {
        ckpt.push(Entry::new(
            format!("vol_{i}"),
            s.volume.shape(),
            &s.volume.data(),
        ))?;
        let labels: Vec<f64> = s.labels.iter().map(|&l| l as f64).collect();
        ckpt.push(Entry::new(format!("lab_{i}"), &s.dims, &labels))?;
    }
    Ok(ckpt)
}

pub fn dataset_from_checkpoint(ckpt: &Checkpoint) -> Result<Vec<SegSample>> {
    let mut out = Vec::new();
    for i in 0.. {
        let (Some(vol), Some(lab)) = (ckpt.get(&format!("vol_{i}")), ckpt.get(&format!("lab_{i}")))
        else {
            break;
        };
        let dims: [usize; 3] =
            lab.shape.as_slice().try_into().map_err(|_| {
                Error::Format(format!("lab_{i} must have rank 3, got {:?}", lab.shape))
            })?;
        if vol.shape[..] != [1, dims[0], dims[1], dims[2]] {
            return Err(Error::Format(format!(
                "vol_{i} shape {:?} does not match lab_{i} {dims:?}",
                vol.shape
            )));
        }
        let labels = lab
            .values
            .iter()
            .map(|&v| {
                (v >= 0.0 && v.fract() == 0.0)
                    .then_some(v as usize)
                    .ok_or_else(|| Error::Format(format!("lab_{i} holds non-label value {v}")))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(SegSample {
            volume: vol.to_tensor()?,
            labels,
            dims,
        });
    }
    if out.len() * 2 != ckpt.entries.len() {
        return Err(Error::Format(
            "dataset entries must be vol_i/lab_i pairs numbered from 0".into(),
        ));
    }
    Ok(out)
}
