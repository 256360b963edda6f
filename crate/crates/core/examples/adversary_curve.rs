//! Training curve of the full model: losses, discriminator AUC on held-out
//! rows, and cross-correlation between the two representation halves.
//!
//! `cargo run --release --example adversary_curve [config.toml] > curve.csv`

use rec4ad::eval::curve_csv;
use rec4ad::pipeline::{run_variant, Dataset, ExperimentConfig};

fn main() -> rec4ad::Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(p) => ExperimentConfig::load(p.as_ref())?,
        None => ExperimentConfig::default(),
    };
    let data = Dataset::build(&cfg)?;
    let (outcome, _) = run_variant(&cfg, &data, &cfg.variant_spec("REC4AD")?, cfg.seeds[0])?;
    print!("{}", curve_csv(&outcome.curve));
    Ok(())
}
