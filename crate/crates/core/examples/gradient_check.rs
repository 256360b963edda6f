//! Checks the analytic gradient of the full training objective against
//! central differences on a mixed ad/rec batch.
//!
//! `cargo run --release --example gradient_check [config.toml]`

use diffcore::GradCheckOptions;
use rec4ad::model::{check_objective_gradients, init_params, Batch};
use rec4ad::pipeline::{Dataset, ExperimentConfig};
use rec4ad::sim::Source;

fn main() -> rec4ad::Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(p) => ExperimentConfig::load(p.as_ref())?,
        None => ExperimentConfig::default(),
    };
    let data = Dataset::build(&cfg)?;
    let mut rows: Vec<_> = data.samples.merged.iter().filter(|s| s.source == Source::Ad).take(4).collect();
    rows.extend(data.samples.merged.iter().filter(|s| s.source == Source::Rec).take(4));
    let batch = Batch::from_samples(&rows, None, &data.vocab)?;
    let store = init_params(&cfg.model, &data.vocab, 1)?;
    let opts = GradCheckOptions {
        step: 1e-5,
        floor: 1e-5,
        max_entries_per_param: Some(8),
    };
    let report = check_objective_gradients(&store, &cfg.model, &batch, &opts)?;
    println!(
        "{} entries checked, {} set aside at activation kinks, max relative error {:.2e}",
        report.entries_checked, report.kinks_skipped, report.max_rel_error
    );
    if let Some(w) = &report.worst {
        println!("worst: {w:?}");
    }
    Ok(())
}
