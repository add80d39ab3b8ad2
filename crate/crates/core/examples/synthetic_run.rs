//! Trains on a seeded synthetic dataset shaped like yeast and prints the
//! test metrics. Usage: `cargo run --release --example synthetic_run [epochs]`.

use std::time::Instant;

use hotvae::data::{synthetic, Split};
use hotvae::run::{evaluate, prepare_dataset, train_with, RunConfig};

fn main() -> hotvae::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let cfg = RunConfig {
        seed: Some(1),
        epochs,
        ..RunConfig::default()
    };
    let prepared = prepare_dataset(synthetic("yeastlike", 2417, 103, 14, 7)?, &cfg)?;
    let start = Instant::now();
    let outcome = train_with(&cfg, &prepared, Default::default(), |r| {
        eprintln!(
            "epoch {:>3}  total {:.4}  val maF1 {:?}  ({:.1}s)",
            r.epoch,
            r.loss.total,
            r.val_ma_f1,
            start.elapsed().as_secs_f64()
        );
    })?;
    let eval = evaluate(&outcome.best, &prepared, Split::Test, &cfg)?;
    print!("{}", eval.report.to_table());
    Ok(())
}
