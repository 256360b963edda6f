//! Generates the synthetic marketplace and writes the catalog and logs.
//!
//! `cargo run --release --example simulate_marketplace [config.toml] [out_dir]`

use std::path::PathBuf;

use rec4ad::pipeline::{generate_logs, ExperimentConfig};
use rec4ad::sim::{self, ImpressionLog};

fn ctr(log: &ImpressionLog) -> f64 {
    log.records.iter().map(|r| f64::from(r.label)).sum::<f64>() / log.records.len() as f64
}

fn main() -> rec4ad::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cfg = match args.first() {
        Some(p) => ExperimentConfig::load(p.as_ref())?,
        None => ExperimentConfig::default(),
    };
    let logs = generate_logs(&cfg)?;
    let c = &logs.catalog;
    println!("{} users, {} items, {} ads", c.users.len(), c.items.len(), c.ads.len());
    let mut bids: Vec<f64> = c.ads.iter().map(|a| a.bid).collect();
    bids.sort_by(f64::total_cmp);
    println!(
        "bids: median {:.3}, p99 {:.3}, max {:.3}",
        bids[bids.len() / 2],
        bids[bids.len() * 99 / 100],
        bids[bids.len() - 1]
    );
    for (name, log) in [("ad", &logs.ad_log), ("rec", &logs.rec_log), ("test", &logs.test_log)] {
        println!(
            "{name:>4} log: {} policy, {} sessions, {} impressions, CTR {:.4}",
            log.policy,
            log.candidate_sets.len(),
            log.records.len(),
            ctr(log)
        );
    }
    if let Some(out) = args.get(1).map(PathBuf::from) {
        std::fs::create_dir_all(&out)?;
        sim::write_catalog(c, &out.join("catalog.json"))?;
        for (stem, log) in [("ad", &logs.ad_log), ("rec", &logs.rec_log), ("test", &logs.test_log)] {
            sim::write_log(log, &out, stem)?;
        }
        println!("wrote {}", out.display());
    }
    Ok(())
}
