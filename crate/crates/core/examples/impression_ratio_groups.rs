//! Impression ratio per ad group under eCPM ranking versus uniform display.
//!
//! `cargo run --release --example impression_ratio_groups [config.toml]`

use rec4ad::pipeline::ExperimentConfig;
use rec4ad::sim::{generate_catalog, impression_ratio, ir_group_partition, run_sessions, Policy};

fn main() -> rec4ad::Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(p) => ExperimentConfig::load(p.as_ref())?,
        None => ExperimentConfig::default(),
    };
    let catalog = generate_catalog(&cfg.catalog, cfg.data_seed)?;
    let proxy = cfg.proxy();
    for policy in [Policy::Ecpm, Policy::Pctr, Policy::Uniform] {
        let sessions = rec4ad::sim::SessionConfig { policy, ..cfg.ad_log.clone() };
        let log = run_sessions(&catalog, &sessions, &proxy, cfg.data_seed)?;
        let ir = impression_ratio(&log);
        let groups = ir_group_partition(&ir, 4)?;
        let means: Vec<f64> = groups.iter().map(|g| g.iter().map(|a| ir[a]).sum::<f64>() / g.len() as f64).collect();
        println!(
            "{policy:>8}: group mean IR {}  top/bottom {:.1}",
            means.iter().map(|m| format!("{m:.4}")).collect::<Vec<_>>().join(" "),
            means[0] / means[3]
        );
    }
    Ok(())
}
