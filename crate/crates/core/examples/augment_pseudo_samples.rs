//! Turns recommendation impressions into pseudo ad samples and merges them
//! with the ad log.
//!
//! `cargo run --release --example augment_pseudo_samples [config.toml]`

use rec4ad::augment::{build_item_ads_index, map_pseudo_samples, merge_training_set, retrieve_rec_samples};
use rec4ad::pipeline::{generate_logs, ExperimentConfig};
use rec4ad::sim::Source;

fn main() -> rec4ad::Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(p) => ExperimentConfig::load(p.as_ref())?,
        None => ExperimentConfig::default(),
    };
    let logs = generate_logs(&cfg)?;
    let index = build_item_ads_index(&logs.catalog.ads);
    println!("{} of {} items carry ads", index.entries.len(), logs.catalog.items.len());
    let kept = retrieve_rec_samples(&logs.rec_log, &index)?;
    println!("{} of {} rec impressions show an item with ads", kept.len(), logs.rec_log.records.len());
    let pseudo = map_pseudo_samples(&kept, &index, cfg.augment.k, cfg.augment.seed, &logs.catalog)?;
    if let Some(s) = pseudo.first() {
        println!("first pseudo sample: item {} -> ad {} (label {})", s.item_id, s.ad_id, s.label);
    }
    let merged = merge_training_set(&logs.ad_log, &pseudo, &logs.catalog, cfg.augment.seed)?;
    for src in [Source::Ad, Source::Rec] {
        let rows: Vec<_> = merged.iter().filter(|s| s.source == src).collect();
        let ctr = rows.iter().map(|s| f64::from(s.label)).sum::<f64>() / rows.len() as f64;
        println!("{:>3}: {} samples, CTR {ctr:.4}", src.as_str(), rows.len());
    }
    Ok(())
}
