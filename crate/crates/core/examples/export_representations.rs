//! Trains the full model and writes the invariant and confounding
//! representations of every test sample as TSV.
//!
//! `cargo run --release --example export_representations [config.toml] [out.tsv]`

use std::path::PathBuf;

use rec4ad::model::export_representations;
use rec4ad::pipeline::{run_variant, Dataset, ExperimentConfig};

fn main() -> rec4ad::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cfg = match args.first() {
        Some(p) => ExperimentConfig::load(p.as_ref())?,
        None => ExperimentConfig::default(),
    };
    let out = args.get(1).map_or_else(|| std::env::temp_dir().join("representations.tsv"), PathBuf::from);
    let data = Dataset::build(&cfg)?;
    let spec = cfg.variant_spec("REC4AD")?;
    let (outcome, _) = run_variant(&cfg, &data, &spec, cfg.seeds[0])?;
    export_representations(&outcome.store, &spec.model_config(&cfg.model), &data.vocab, &data.samples.test, &out)?;
    println!("wrote {} rows to {}", data.samples.test.len(), out.display());
    Ok(())
}
