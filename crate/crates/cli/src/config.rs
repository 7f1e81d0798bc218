//! Run configuration: TOML file sections overlaid on defaults, then flag overrides.

use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use swinception::blocks::FfKind;
use swinception::train::data::{ShapeKind, SyntheticSpec};
use swinception::train::optim::AdamWConfig;
use swinception::train::trainer::TrainConfig;
use swinception::{DecoderKind, MergeKind, ModelConfig};
use toml::{Table, Value};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub in_channels: usize,
    pub base_dim: usize,
    pub depths: [usize; 4],
    pub heads: [usize; 4],
    pub window: usize,
    /// `inception`, `mlp`, or `depthwise`.
    pub ff_kind: String,
    pub branch_ratios: [f64; 4],
    pub bottleneck_ratio: f64,
    pub mlp_ratio: f64,
    /// `linear` or `conv`.
    pub merge_kind: String,
    /// `swinception` or `swinunetr`.
    pub decoder_kind: String,
    pub num_classes: usize,
    pub use_rel_bias: bool,
    pub qkv_bias: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub edge: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub min_size: f64,
    pub max_size: f64,
    /// Any of `sphere`, `box`.
    pub kinds: Vec<String>,
    /// Mean intensity per class, background first.
    pub intensities: Vec<f64>,
    pub noise_sigma: f64,
    pub train_samples: usize,
    pub eval_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch: usize,
    pub eval_every: usize,
    /// Early-stopping threshold on held-out mean foreground Dice; 0 disables.
    pub target_dice: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    /// Output directory for checkpoints, metrics, and datasets.
    pub out_dir: PathBuf,
    /// Directory holding `train.swnc` and `eval.swnc`; empty means generate in memory.
    pub dataset: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub data: DataSection,
    pub optim: OptimSection,
    pub train: TrainSection,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::toy();
        let d = SyntheticSpec::default();
        let o = AdamWConfig::default();
        let t = TrainConfig::default();
        RunConfig {
            seed: 0,
            model: ModelSection {
                in_channels: m.in_channels,
                base_dim: m.base_dim,
                depths: m.depths,
                heads: m.heads,
                window: m.window,
                ff_kind: m.ff_kind.to_string(),
                branch_ratios: m.branch_ratios,
                bottleneck_ratio: m.bottleneck_ratio,
                mlp_ratio: m.mlp_ratio,
                merge_kind: m.merge_kind.to_string(),
                decoder_kind: m.decoder_kind.to_string(),
                num_classes: m.num_classes,
                use_rel_bias: m.use_rel_bias,
                qkv_bias: m.qkv_bias,
            },
            data: DataSection {
                edge: d.edge,
                min_shapes: d.shapes.0,
                max_shapes: d.shapes.1,
                min_size: d.size.0,
                max_size: d.size.1,
                kinds: vec!["sphere".into(), "box".into()],
                intensities: d.intensities,
                noise_sigma: d.noise_sigma,
                train_samples: t.train_samples,
                eval_samples: t.eval_samples,
            },
            optim: OptimSection {
                lr: o.lr,
                beta1: o.betas.0,
                beta2: o.betas.1,
                eps: o.eps,
                weight_decay: o.weight_decay,
                warmup_steps: t.warmup_steps,
            },
            train: TrainSection {
                steps: t.steps,
                batch: t.batch,
                eval_every: t.eval_every,
                target_dice: 0.0,
            },
            paths: PathsSection {
                out_dir: PathBuf::from("runs"),
                dataset: PathBuf::new(),
            },
        }
    }
}

fn parse_named<T: FromStr>(key: &str, value: &str, all: &[&str]) -> Result<T, CliError> {
    value.parse().map_err(|_| {
        CliError::config(format!(
            "{key} = {value:?} is not one of {}",
            all.join(", ")
        ))
    })
}

fn dotted_keys(table: &Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        if let Value::Table(t) = v {
            dotted_keys(t, &key, out);
        }
        out.push(key);
    }
}

fn nearest<'a>(key: &str, candidates: &'a [String]) -> Option<&'a str> {
    candidates
        .iter()
        .map(|c| (strsim::levenshtein(key, c), c.as_str()))
        .min()
        .filter(|(d, _)| *d <= key.len().max(3) / 2 + 1)
        .map(|(_, c)| c)
}

/// Rejects any key of `user` absent from `defaults`, naming the nearest valid key.
fn check_keys(
    user: &Table,
    defaults: &Table,
    prefix: &str,
    all: &[String],
) -> Result<(), CliError> {
    for (k, v) in user {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match defaults.get(k) {
            None => {
                let hint = nearest(&key, all)
                    .map(|s| format!("; did you mean `{s}`?"))
                    .unwrap_or_default();
                return Err(CliError::config(format!("unknown key `{key}`{hint}")));
            }
            Some(Value::Table(d)) => match v {
                Value::Table(u) => check_keys(u, d, &key, all)?,
                _ => return Err(CliError::config(format!("`{key}` must be a section"))),
            },
            Some(_) => {}
        }
    }
    Ok(())
}

/// Writes `value` at dotted `key`, creating sections as needed.
fn set_dotted(table: &mut Table, key: &str, value: Value) -> Result<(), CliError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().unwrap_or_default();
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => {
                return Err(CliError::config(format!(
                    "`{p}` in `{key}` is not a section"
                )))
            }
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Interprets a flag value as a TOML literal, falling back to a string.
pub fn flag_value(raw: &str) -> Value {
    let parsed: Result<Table, _> = toml::from_str(&format!("v = {raw}"));
    match parsed {
        Ok(mut t) => t
            .remove("v")
            .unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Defaults, overlaid by the file text, overlaid by `overrides` (dotted key, value).
pub fn parse_config(file_text: &str, overrides: &[(String, Value)]) -> Result<RunConfig, CliError> {
    let defaults =
        Table::try_from(RunConfig::default()).map_err(|e| CliError::internal(e.to_string()))?;
    let mut all = Vec::new();
    dotted_keys(&defaults, "", &mut all);
    let mut user: Table = toml::from_str(file_text)
        .map_err(|e| CliError::config(format!("config parse error: {}", e.message())))?;
    for (key, value) in overrides {
        set_dotted(&mut user, key, value.clone())?;
    }
    check_keys(&user, &defaults, "", &all)?;
    let mut merged = defaults;
    merge(&mut merged, user);
    let config: RunConfig = Value::Table(merged)
        .try_into()
        .map_err(|e: toml::de::Error| {
            CliError::config(format!("config type error: {}", e.message()))
        })?;
    config.validate()?;
    Ok(config)
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train_config()?.validate()?;
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        let m = &self.model;
        let ff_all: Vec<&str> = FfKind::ALL.iter().map(|k| k.as_str()).collect();
        let merge_all: Vec<&str> = MergeKind::ALL.iter().map(|k| k.as_str()).collect();
        let dec_all: Vec<&str> = DecoderKind::ALL.iter().map(|k| k.as_str()).collect();
        Ok(ModelConfig {
            in_channels: m.in_channels,
            base_dim: m.base_dim,
            depths: m.depths,
            heads: m.heads,
            window: m.window,
            ff_kind: parse_named("model.ff_kind", &m.ff_kind, &ff_all)?,
            branch_ratios: m.branch_ratios,
            bottleneck_ratio: m.bottleneck_ratio,
            mlp_ratio: m.mlp_ratio,
            merge_kind: parse_named("model.merge_kind", &m.merge_kind, &merge_all)?,
            decoder_kind: parse_named("model.decoder_kind", &m.decoder_kind, &dec_all)?,
            num_classes: m.num_classes,
            use_rel_bias: m.use_rel_bias,
            qkv_bias: m.qkv_bias,
        })
    }

    pub fn data_spec(&self) -> Result<SyntheticSpec, CliError> {
        let d = &self.data;
        let kinds = d
            .kinds
            .iter()
            .map(|k| match k.as_str() {
                "sphere" => Ok(ShapeKind::Sphere),
                "box" => Ok(ShapeKind::Box),
                other => Err(CliError::config(format!(
                    "data.kinds: {other:?} is not one of sphere, box"
                ))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(SyntheticSpec {
            edge: d.edge,
            num_classes: self.model.num_classes,
            shapes: (d.min_shapes, d.max_shapes),
            size: (d.min_size, d.max_size),
            kinds,
            intensities: d.intensities.clone(),
            noise_sigma: d.noise_sigma,
            seed: self.seed,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let o = &self.optim;
        let t = &self.train;
        Ok(TrainConfig {
            model: self.model_config()?,
            data: self.data_spec()?,
            optimizer: AdamWConfig {
                lr: o.lr,
                betas: (o.beta1, o.beta2),
                eps: o.eps,
                weight_decay: o.weight_decay,
            },
            train_samples: self.data.train_samples,
            eval_samples: self.data.eval_samples,
            steps: t.steps,
            batch: t.batch,
            warmup_steps: o.warmup_steps,
            eval_every: t.eval_every,
            target_dice: (t.target_dice > 0.0).then_some(t.target_dice),
            seed: self.seed,
        })
    }
}
