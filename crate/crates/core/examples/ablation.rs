//! The full model against its three single-switch ablations.
//!
//! `cargo run --release --example ablation [config.toml]`

use rec4ad::eval::render_report;
use rec4ad::pipeline::{ablation_specs, run_variant, Dataset, ExperimentConfig};

fn main() -> rec4ad::Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(p) => ExperimentConfig::load(p.as_ref())?,
        None => ExperimentConfig {
            seeds: vec![1],
            ..ExperimentConfig::default()
        },
    };
    let data = Dataset::build(&cfg)?;
    let mut specs = vec![cfg.variant_spec("BASE")?];
    specs.extend(ablation_specs());
    let mut reports = Vec::new();
    for spec in &specs {
        for &seed in &cfg.seeds {
            let (_, r) = run_variant(&cfg, &data, spec, seed)?;
            println!("{:<26} seed {seed}: AUC {:.4}", r.variant, r.overall.auc.unwrap_or(f64::NAN));
            reports.push(r);
        }
    }
    let (_, table) = render_report(&reports)?;
    print!("\n{table}");
    Ok(())
}
