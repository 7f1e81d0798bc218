//! Seeded toy-training loop on synthetic volumes with periodic held-out evaluation.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::SegmentationModel;

use super::data::{collate, gen_dataset, SegSample, SyntheticSpec};
use super::loss::dice_ce_loss;
use super::metrics::{dice_score, Metrics};
use super::optim::{AdamW, AdamWConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub data: SyntheticSpec,
    pub optimizer: AdamWConfig,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub steps: usize,
    pub batch: usize,
    /// Linear learning-rate warmup length; 0 disables warmup.
    pub warmup_steps: usize,
    pub eval_every: usize,
    /// Stop after an evaluation whose mean foreground Dice reaches this value.
    pub target_dice: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::toy(),
            data: SyntheticSpec::default(),
            optimizer: AdamWConfig::default(),
            train_samples: 16,
            eval_samples: 4,
            steps: 500,
            batch: 2,
            warmup_steps: 0,
            eval_every: 25,
            target_dice: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        if self.model.num_classes != self.data.num_classes {
            return Err(Error::Config(format!(
                "model has {} classes, data has {}",
                self.model.num_classes, self.data.num_classes
            )));
        }
        if self.batch == 0 || self.train_samples < self.batch {
            return Err(Error::Config(format!(
                "batch {} needs 1 ≤ batch ≤ train_samples ({})",
                self.batch, self.train_samples
            )));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate for 1-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step <= self.warmup_steps && self.warmup_steps > 0 {
            self.optimizer.lr * step as f64 / self.warmup_steps as f64
        } else {
            self.optimizer.lr
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub step: usize,
    /// Mean training loss since the previous row.
    pub loss: f64,
    pub metrics: Metrics,
}

pub struct TrainReport {
    pub model: SegmentationModel,
    /// Training loss of every step, in order.
    pub losses: Vec<f64>,
    pub evals: Vec<EvalRow>,
}

impl TrainReport {
    pub fn final_dice(&self) -> Option<f64> {
        self.evals.last().map(|r| r.metrics.mean_foreground())
    }

    pub fn best_dice(&self) -> Option<f64> {
        self.evals
            .iter()
            .map(|r| r.metrics.mean_foreground())
            .reduce(f64::max)
    }

    /// `step,loss,dice_mean,dice_c1,...` with one row per evaluation.
    pub fn csv(&self, num_classes: usize) -> String {
        let mut out = metrics_csv_header(num_classes);
        for row in &self.evals {
            write!(
                out,
                "{},{:.6},{:.6}",
                row.step,
                row.loss,
                row.metrics.mean_foreground()
            )
            .unwrap();
            for c in 1..num_classes {
                write!(out, ",{:.6}", row.metrics.per_class[c]).unwrap();
            }
            out.push('\n');
        }
        out
    }
}

pub fn metrics_csv_header(num_classes: usize) -> String {
    let mut out = String::from("step,loss,dice_mean");
    for c in 1..num_classes {
        write!(out, ",dice_c{c}").unwrap();
    }
    out.push('\n');
    out
}

/// Per-sample Dice averaged over `samples`, in eval mode.
pub fn evaluate(model: &SegmentationModel, samples: &[SegSample]) -> Result<Metrics> {
    let k = model.config.num_classes;
    let scores = samples
        .iter()
        .map(|s| {
            let (x, labels) = collate(&[s])?;
            dice_score(&model.predict(&x)?, &labels, k)
        })
        .collect::<Result<Vec<_>>>()?;
    Metrics::average(&scores)
}

/// Training and held-out splits drawn from one seeded stream.
pub fn make_splits(config: &TrainConfig) -> Result<(Vec<SegSample>, Vec<SegSample>)> {
    let mut all = gen_dataset(&config.data, config.train_samples + config.eval_samples)?;
    let held_out = all.split_off(config.train_samples);
    Ok((all, held_out))
}

/// Trains a fresh model; `progress` sees each evaluation row as it is produced.
pub fn train(config: &TrainConfig, mut progress: impl FnMut(&EvalRow)) -> Result<TrainReport> {
    config.validate()?;
    let (train_set, eval_set) = make_splits(config)?;
    let model = SegmentationModel::new(config.model.clone(), config.seed)?;
    let mut optim = AdamW::new(
        model
            .store
            .trainable()
            .into_iter()
            .map(|e| e.tensor)
            .collect(),
        config.optimizer,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x7a11));
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(config.steps);
    let mut evals = Vec::new();
    let mut since_eval = 0.0;
    for step in 1..=config.steps {
        if order.len() < config.batch {
            let mut epoch: Vec<usize> = (0..train_set.len()).collect();
            epoch.shuffle(&mut rng);
            order.extend(epoch);
        }
        let picked: Vec<&SegSample> = order.drain(..config.batch).map(|i| &train_set[i]).collect();
        let (x, labels) = collate(&picked)?;
        optim.zero_grad();
        let loss = dice_ce_loss(&model.forward(&x, true)?, &labels)?;
        loss.backward()?;
        optim.config.lr = config.lr_at(step);
        optim.step()?;
        let value = loss.item()?;
        losses.push(value);
        since_eval += value;
        if step % config.eval_every == 0 || step == config.steps {
            let window = (step - 1) % config.eval_every + 1;
            let row = EvalRow {
                step,
                loss: since_eval / window as f64,
                metrics: evaluate(&model, &eval_set)?,
            };
            since_eval = 0.0;
            progress(&row);
            let done = config
                .target_dice
                .is_some_and(|t| row.metrics.mean_foreground() >= t);
            evals.push(row);
            if done {
                break;
            }
        }
    }
    Ok(TrainReport {
        model,
        losses,
        evals,
    })
}
