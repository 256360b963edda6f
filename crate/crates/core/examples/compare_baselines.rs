//! Trains every configured variant for every seed and prints the comparison
//! table against BASE.
//!
//! `cargo run --release --example compare_baselines [config.toml]`
//!
//! Without a config file the default data is used with two seeds.

use rayon::prelude::*;
use rec4ad::eval::render_report;
use rec4ad::pipeline::{run_variant, Dataset, ExperimentConfig};

fn main() -> rec4ad::Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(p) => ExperimentConfig::load(p.as_ref())?,
        None => ExperimentConfig {
            seeds: vec![1, 2],
            ..ExperimentConfig::default()
        },
    };
    let data = Dataset::build(&cfg)?;
    let specs = cfg.variant_specs()?;
    let jobs: Vec<_> = specs.iter().flat_map(|s| cfg.seeds.iter().map(move |&seed| (s, seed))).collect();
    let reports = jobs
        .par_iter()
        .map(|(spec, seed)| run_variant(&cfg, &data, spec, *seed).map(|(_, r)| r))
        .collect::<rec4ad::Result<Vec<_>>>()?;
    let (_, table) = render_report(&reports)?;
    print!("{table}");
    Ok(())
}
