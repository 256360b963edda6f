//! Trains the full model once and evaluates it on the uniform test set.
//!
//! `cargo run --release --example train_rec4ad [config.toml] [seed]`

use rec4ad::pipeline::{run_variant, Dataset, ExperimentConfig};

fn main() -> rec4ad::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cfg = match args.first() {
        Some(p) => ExperimentConfig::load(p.as_ref())?,
        None => ExperimentConfig::default(),
    };
    let seed = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let data = Dataset::build(&cfg)?;
    let spec = cfg.variant_spec("REC4AD")?;
    let (outcome, report) = run_variant(&cfg, &data, &spec, seed)?;
    println!("{} steps over {} training samples", outcome.steps.len(), data.samples.merged.len());
    println!(
        "test AUC {:.4}, ECE {:.4}",
        report.overall.auc.unwrap_or(f64::NAN),
        report.overall.ece.unwrap_or(f64::NAN)
    );
    for g in &report.groups {
        println!("{:>9}: AUC {:.4} over {} rows", g.name, g.metrics.auc.unwrap_or(f64::NAN), g.metrics.n);
    }
    Ok(())
}
