//! Re-ranks the logged eCPM sessions under other policies and counts how many
//! displayed sets change.
//!
//! `cargo run --release --example mechanism_flip [config.toml]`

use rec4ad::pipeline::{generate_logs, ExperimentConfig};
use rec4ad::sim::{mechanism_flip_rate, Policy};

fn main() -> rec4ad::Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(p) => ExperimentConfig::load(p.as_ref())?,
        None => ExperimentConfig::default(),
    };
    let logs = generate_logs(&cfg)?;
    for policy in [Policy::Ecpm, Policy::Pctr, Policy::Uniform] {
        let rate = mechanism_flip_rate(&logs.ad_log, &logs.catalog, policy, &cfg.proxy(), 1)?;
        println!("{policy:>8}: {:.1}% of sessions change", 100.0 * rate);
    }
    Ok(())
}
