//! Runs a full experiment from a TOML config and summarizes the report.
//!
//! `cargo run --example harness_run -- [CONFIG]`, defaulting to
//! `examples/configs/quick.toml`.

use std::collections::BTreeMap;

use leaklab::{config, harness};

fn main() -> leaklab::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| {
        concat!(env!("CARGO_MANIFEST_DIR"), "/examples/configs/quick.toml").into()
    });
    let mut cfg = config::load_config(path.as_ref())?;
    if cfg.output_dir.is_relative() {
        cfg.output_dir = std::env::temp_dir().join("leaklab-runs");
    }
    let report = harness::run_experiment(&cfg)?;

    let mut by_metric: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in &report.rows {
        by_metric.entry(&r.metric).or_default().push(r.value);
    }
    for (metric, v) in by_metric {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        println!("{metric:<28} n={:<4} mean {mean:.4}", v.len());
    }
    for f in &report.failures {
        println!("stage {} failed: {}", f.stage, f.message);
    }
    println!(
        "stages {:?} -> {}",
        report.completed,
        harness::run_dir(&cfg).display()
    );
    Ok(())
}
