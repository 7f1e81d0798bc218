//! Trains the toy model on synthetic 32³ volumes and prints the metrics CSV.
//!
//! `cargo run --release --example toy_train -- [seed] [steps]`

use swinception::train::trainer::{metrics_csv_header, train, TrainConfig};

fn main() -> swinception::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed = args.next().map_or(0, |s| s.parse().expect("seed"));
    let steps = args.next().map_or(500, |s| s.parse().expect("steps"));
    let config = TrainConfig {
        seed,
        steps,
        target_dice: Some(0.9),
        ..TrainConfig::default()
    };
    let k = config.model.num_classes;
    print!("{}", metrics_csv_header(k));
    let start = std::time::Instant::now();
    let report = train(&config, |row| {
        let per_class: Vec<String> = row.metrics.per_class[1..]
            .iter()
            .map(|d| format!("{d:.4}"))
            .collect();
        println!(
            "{},{:.4},{:.4},{}  ({:.0}s)",
            row.step,
            row.loss,
            row.metrics.mean_foreground(),
            per_class.join(","),
            start.elapsed().as_secs_f64()
        );
    })?;
    eprintln!(
        "best mean foreground Dice {:.4}",
        report.best_dice().unwrap_or(0.0)
    );
    Ok(())
}
