//! Dice overlap between label maps.

use crate::error::{Error, Result};

/// Per-class Dice, background included at index 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub per_class: Vec<f64>,
}

impl Metrics {
    /// Mean over foreground classes (index 0 excluded).
    pub fn mean_foreground(&self) -> f64 {
        let fg = &self.per_class[1.min(self.per_class.len())..];
        if fg.is_empty() {
            return 1.0;
        }
        fg.iter().sum::<f64>() / fg.len() as f64
    }

    /// Class-wise mean of per-volume scores.
    pub fn average(all: &[Metrics]) -> Result<Metrics> {
        let first = all
            .first()
            .ok_or_else(|| Error::config("no metrics to average"))?;
        let k = first.per_class.len();
        if all.iter().any(|m| m.per_class.len() != k) {
            return Err(Error::dim("metrics", "class counts differ"));
        }
        let per_class = (0..k)
            .map(|c| all.iter().map(|m| m.per_class[c]).sum::<f64>() / all.len() as f64)
            .collect();
        Ok(Metrics { per_class })
    }
}

/// `2|P ∩ T| / (|P| + |T|)` per class; a class absent from both scores 1.
pub fn dice_score(pred: &[usize], truth: &[usize], num_classes: usize) -> Result<Metrics> {
    if pred.len() != truth.len() {
        return Err(Error::dim(
            "dice_score",
            format!("{} predicted vs {} true labels", pred.len(), truth.len()),
        ));
    }
    let mut inter = vec![0usize; num_classes];
    let mut p_count = vec![0usize; num_classes];
    let mut t_count = vec![0usize; num_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= num_classes || t >= num_classes {
            return Err(Error::dim(
                "dice_score",
                format!("label {} outside {num_classes} classes", p.max(t)),
            ));
        }
        p_count[p] += 1;
        t_count[t] += 1;
        if p == t {
            inter[p] += 1;
        }
    }
    let per_class = (0..num_classes)
        .map(|c| match p_count[c] + t_count[c] {
            0 => 1.0,
            total => 2.0 * inter[c] as f64 / total as f64,
        })
        .collect();
    Ok(Metrics { per_class })
}
