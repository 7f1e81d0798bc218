//! `swinception` command-line tool.

mod config;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use swinception::checkpoint::{dataset_from_checkpoint, dataset_to_checkpoint, Checkpoint};
use swinception::train::data::SegSample;
use swinception::train::fragments::{gradient_suite, probe_fragment, FRAGMENTS};
use swinception::train::params::{ablation_table, count_params};
use swinception::train::trainer::{evaluate, make_splits, metrics_csv_header, train};
use swinception::SegmentationModel;

use config::{flag_value, parse_config, RunConfig};

/// Failure of a command, printed as one `error kind=... message=...` line.
#[derive(Debug)]
pub struct CliError {
    kind: &'static str,
    message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError {
            kind: "config",
            message: message.into(),
        }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        CliError {
            kind: "internal",
            message: message.into(),
        }
    }

    fn failed(message: impl Into<String>) -> Self {
        CliError {
            kind: "failed",
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let flat = self.message.replace('\n', "; ");
        write!(f, "error kind={} message={flat:?}", self.kind)
    }
}

impl From<swinception::Error> for CliError {
    fn from(e: swinception::Error) -> Self {
        use swinception::Error as E;
        let kind = match &e {
            E::Dimension { .. } => "dimension",
            E::Numeric { .. } => "numeric",
            E::Config(_) => "config",
            E::State(_) => "state",
            E::Contract(_) => "contract",
            E::Internal(_) => "internal",
            E::Format(_) => "format",
            E::Mismatch(_) => "mismatch",
            E::Io(_) => "io",
        };
        CliError {
            kind,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError {
            kind: "io",
            message: e.to_string(),
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "swinception",
    version,
    about = "Window-attention segmentation toolkit"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every command. Flags override the config file, which
/// overrides built-in defaults.
#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML config file with [model], [data], [optim], [train], [paths] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override any config key, e.g. `--set model.window=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, global = true)]
    ff_kind: Option<String>,
    #[arg(long, global = true)]
    merge_kind: Option<String>,
    #[arg(long, global = true)]
    decoder_kind: Option<String>,
    #[arg(long, global = true)]
    base_dim: Option<usize>,
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the effective configuration as TOML.
    Config,
    /// Write train.swnc and eval.swnc synthetic datasets to the output directory.
    GenData,
    /// Train, writing metrics.csv, model.swnc, and config.toml to the output directory.
    Train,
    /// Evaluate a checkpoint on the held-out split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Load matching tensors only and report the skipped ones.
        #[arg(long)]
        non_strict: bool,
        /// Also write the metrics CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks over model fragments.
    Gradcheck {
        /// Fragment to check; repeatable. All fragments when omitted.
        #[arg(long)]
        fragment: Vec<String>,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
    /// Analytic parameter counts for the configured model.
    Params {
        /// Also print the encoder × decoder × merge × ratio ablation table.
        #[arg(long)]
        compare: bool,
    },
    /// Receptive-field probe of one output voxel of a fragment.
    ProbeRf {
        #[arg(long)]
        fragment: String,
        /// Output voxel as `z,y,x`; the volume centre by default.
        #[arg(long, value_parser = parse_voxel)]
        source: Option<[usize; 3]>,
    },
}

fn parse_voxel(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| format!("bad coordinate {p:?}"))
        })
        .collect::<Result<_, _>>()?;
    parts.try_into().map_err(|_| "expected z,y,x".to_string())
}

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let text = match &common.config {
        Some(path) => fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?,
        None => String::new(),
    };
    let mut overrides = Vec::new();
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        overrides.push((k.trim().to_string(), flag_value(v.trim())));
    }
    let named = [
        ("seed", common.seed.map(|v| toml::Value::Integer(v as i64))),
        (
            "model.ff_kind",
            common.ff_kind.clone().map(toml::Value::String),
        ),
        (
            "model.merge_kind",
            common.merge_kind.clone().map(toml::Value::String),
        ),
        (
            "model.decoder_kind",
            common.decoder_kind.clone().map(toml::Value::String),
        ),
        (
            "model.base_dim",
            common.base_dim.map(|v| toml::Value::Integer(v as i64)),
        ),
        (
            "train.steps",
            common.steps.map(|v| toml::Value::Integer(v as i64)),
        ),
        (
            "paths.out_dir",
            common
                .out_dir
                .as_ref()
                .map(|p| toml::Value::String(p.display().to_string())),
        ),
    ];
    overrides.extend(
        named
            .into_iter()
            .filter_map(|(k, v)| v.map(|v| (k.to_string(), v))),
    );
    parse_config(&text, &overrides)
}

fn load_splits(config: &RunConfig) -> Result<(Vec<SegSample>, Vec<SegSample>), CliError> {
    let dir = &config.paths.dataset;
    if dir.as_os_str().is_empty() {
        return Ok(make_splits(&config.train_config()?)?);
    }
    let read = |name: &str| -> Result<Vec<SegSample>, CliError> {
        Ok(dataset_from_checkpoint(&Checkpoint::read(dir.join(name))?)?)
    };
    Ok((read("train.swnc")?, read("eval.swnc")?))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::config(format!("cannot create {}: {e}", dir.display())))
}

fn echo(config: &RunConfig) {
    eprintln!("# effective config");
    for line in config.to_toml().lines() {
        eprintln!("# {line}");
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = load_config(&cli.common)?;
    match cli.command {
        Command::Config => print!("{}", config.to_toml()),
        Command::GenData => {
            echo(&config);
            let (train_set, eval_set) = make_splits(&config.train_config()?)?;
            let dir = &config.paths.out_dir;
            ensure_dir(dir)?;
            dataset_to_checkpoint(&train_set)?.write(dir.join("train.swnc"))?;
            dataset_to_checkpoint(&eval_set)?.write(dir.join("eval.swnc"))?;
            println!(
                "wrote {} train and {} eval volumes to {}",
                train_set.len(),
                eval_set.len(),
                dir.display()
            );
        }
        Command::Train => {
            echo(&config);
            let mut tc = config.train_config()?;
            let dir = config.paths.out_dir.clone();
            ensure_dir(&dir)?;
            fs::write(dir.join("config.toml"), config.to_toml())?;
            if !config.paths.dataset.as_os_str().is_empty() {
                let (t, e) = load_splits(&config)?;
                (tc.train_samples, tc.eval_samples) = (t.len(), e.len());
            }
            let k = tc.model.num_classes;
            print!("{}", metrics_csv_header(k));
            let report = train(&tc, |row| {
                let dice: Vec<String> = row.metrics.per_class[1..]
                    .iter()
                    .map(|d| format!("{d:.6}"))
                    .collect();
                println!(
                    "{},{:.6},{:.6},{}",
                    row.step,
                    row.loss,
                    row.metrics.mean_foreground(),
                    dice.join(",")
                );
            })?;
            fs::write(dir.join("metrics.csv"), report.csv(k))?;
            Checkpoint::from_store(&report.model.store).write(dir.join("model.swnc"))?;
            eprintln!("wrote {}", dir.display());
        }
        Command::Eval {
            checkpoint,
            non_strict,
            out,
        } => {
            echo(&config);
            let model = SegmentationModel::new(config.model_config()?, config.seed)?;
            let report = Checkpoint::read(&checkpoint)?.load_into(&model.store, !non_strict)?;
            for line in report.problems() {
                eprintln!("skipped: {line}");
            }
            let (_, eval_set) = load_splits(&config)?;
            let metrics = evaluate(&model, &eval_set)?;
            let k = model.config.num_classes;
            let mut csv = metrics_csv_header(k).replacen("step,loss,", "", 1);
            let dice: Vec<String> = metrics.per_class[1..]
                .iter()
                .map(|d| format!("{d:.6}"))
                .collect();
            csv += &format!("{:.6},{}\n", metrics.mean_foreground(), dice.join(","));
            print!("{csv}");
            if let Some(path) = out {
                fs::write(path, csv)?;
            }
        }
        Command::Gradcheck {
            fragment,
            tolerance,
        } => {
            let names: Vec<&str> = fragment.iter().map(String::as_str).collect();
            let results = gradient_suite(&names, tolerance, |e| {
                let verdict = if e.report.passed() { "pass" } else { "FAIL" };
                println!(
                    "{:<20} {verdict}  max rel err {:.3e}  ({:.1}s)",
                    e.name,
                    e.report.max_rel_error(),
                    e.seconds
                );
                if !e.report.passed() {
                    print!("{}", e.report);
                }
            })?;
            let failed: Vec<&str> = results
                .iter()
                .filter(|e| !e.report.passed())
                .map(|e| e.name)
                .collect();
            if !failed.is_empty() {
                return Err(CliError::failed(format!(
                    "gradient check failed for {}",
                    failed.join(", ")
                )));
            }
        }
        Command::Params { compare } => {
            let mc = config.model_config()?;
            print!("{}", count_params(&mc)?);
            if compare {
                println!();
                println!(
                    "{:<12} {:<12} {:<7} {:>9} {:>12}",
                    "encoder", "decoder", "merge", "mlp_ratio", "params"
                );
                for row in ablation_table(&mc)? {
                    let ratio = if row.encoder == "swinception" {
                        "-".to_string()
                    } else {
                        format!("{:.1}", row.mlp_ratio)
                    };
                    println!(
                        "{:<12} {:<12} {:<7} {:>9} {:>12}",
                        row.encoder,
                        row.decoder,
                        row.merge.as_str(),
                        ratio,
                        row.params.total()
                    );
                }
            }
        }
        Command::ProbeRf { fragment, source } => {
            if !FRAGMENTS.contains(&fragment.as_str()) {
                return Err(CliError::config(format!(
                    "unknown fragment {fragment:?}; known: {}",
                    FRAGMENTS.join(", ")
                )));
            }
            let (_, influence) = probe_fragment(&fragment, source, config.seed)?;
            println!("fragment {fragment}");
            println!("source {:?}", influence.source);
            println!("influenced {}", influence.count());
            println!("radius {}", influence.radius);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::FAILURE
        }
    }
}
