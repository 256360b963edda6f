mod common;

use proptest::prelude::*;
use rec4ad::augment::{
    ad_samples, build_item_ads_index, map_pseudo_samples, merge_training_set, read_samples, retrieve_rec_samples, write_samples,
};
use rec4ad::sim::{generate_catalog, run_sessions, AdProfile, Catalog, ImpressionLog, ImpressionRecord, NoisyOracle, Policy, SessionConfig, Source};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn catalog(seed: u64) -> Catalog {
    generate_catalog(&common::small_catalog(), seed).unwrap()
}

fn log(c: &Catalog, source: Source, n: usize, seed: u64) -> ImpressionLog {
    let cfg = SessionConfig {
        policy: if source == Source::Ad { Policy::Ecpm } else { Policy::Pctr },
        source,
        n_sessions: n,
        candidates_per_session: 20,
        slots_per_session: 4,
        shadow_factor: 1,
    };
    run_sessions(c, &cfg, &NoisyOracle { sigma: 0.3, seed: 1 }, seed).unwrap()
}

fn rec_record(session_id: usize, item: usize, label: u8) -> ImpressionRecord {
    ImpressionRecord {
        session_id,
        user_id: 0,
        subject_id: item,
        context: rec4ad::sim::Context { time_bucket: 0, device: 0 },
        label,
        source: Source::Rec,
    }
}

/// Catalog whose item 0 has four ads, most recent first: 9, 4, 2, 1.
fn four_ad_catalog() -> Catalog {
    let mut c = catalog(1);
    let steps = [(1usize, 1u64), (2, 2), (4, 3), (9, 4)];
    for a in c.ads.iter_mut() {
        if a.item_id == 0 {
            a.item_id = 1;
        }
    }
    for (ad_id, step) in steps {
        c.ads[ad_id] = AdProfile {
            ad_id,
            item_id: 0,
            campaign_feature: 0,
            bid: 1.0,
            creation_step: step,
        };
    }
    c
}

#[test]
fn recent_k_draws_are_uniform_over_the_k_newest_ads() {
    let c = four_ad_catalog();
    let index = build_item_ads_index(&c.ads);
    assert_eq!(&index.ads_for(0).unwrap()[..4], &[9, 4, 2, 1]);
    let records: Vec<_> = (0..10_000).map(|s| rec_record(s, 0, 0)).collect();
    let mapped = map_pseudo_samples(&records, &index, 3, 17, &c).unwrap();
    let mut counts = [0u64; 3];
    for s in &mapped {
        let slot = [9, 4, 2].iter().position(|&a| a == s.ad_id).expect("only the three newest ads");
        counts[slot] += 1;
    }
    let expected = 10_000.0 / 3.0;
    let stat: f64 = counts.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new(2.0).unwrap().cdf(stat);
    assert!(p > 0.01, "p = {p}, counts {counts:?}");

    let newest = map_pseudo_samples(&records[..50], &index, 1, 3, &c).unwrap();
    assert!(newest.iter().all(|s| s.ad_id == 9));
}

#[test]
fn single_ad_items_map_deterministically() {
    let c = catalog(2);
    let index = build_item_ads_index(&c.ads);
    let (item, ads) = index.entries.iter().find(|(_, ads)| ads.len() == 1).expect("a single-ad item");
    let records: Vec<_> = (0..20).map(|s| rec_record(s, *item, 1)).collect();
    for s in map_pseudo_samples(&records, &index, 3, 5, &c).unwrap() {
        assert_eq!(s.ad_id, ads[0]);
    }
}

#[test]
fn retrieval_filters_and_rejects_ad_records() {
    let c = catalog(3);
    let index = build_item_ads_index(&c.ads);
    let covered = *index.entries.keys().next().unwrap();
    let uncovered = (0..c.n_items()).find(|i| !index.contains(*i)).unwrap();
    let rec = rec4ad::sim::ImpressionLog {
        source: Source::Rec,
        policy: Policy::Pctr,
        records: vec![
            rec_record(0, covered, 1),
            rec_record(0, uncovered, 0),
            rec_record(1, covered, 0),
            rec_record(1, uncovered, 1),
            rec_record(2, covered, 1),
        ],
        candidate_sets: vec![],
        display_propensity: Default::default(),
    };
    let kept = retrieve_rec_samples(&rec, &index).unwrap();
    assert_eq!(kept, vec![rec.records[0].clone(), rec.records[2].clone(), rec.records[4].clone()]);
    assert!(map_pseudo_samples(&rec.records, &index, 3, 1, &c).is_err());
    let mut bad = rec.clone();
    bad.records[1].source = Source::Ad;
    assert!(retrieve_rec_samples(&bad, &index).is_err());
}

#[test]
fn merge_preserves_counts_and_is_seeded() {
    let c = catalog(4);
    let ad_log = log(&c, Source::Ad, 25, 1);
    let rec_log = log(&c, Source::Rec, 40, 2);
    let index = build_item_ads_index(&c.ads);
    let pseudo = map_pseudo_samples(&retrieve_rec_samples(&rec_log, &index).unwrap(), &index, 3, 9, &c).unwrap();
    let merged = merge_training_set(&ad_log, &pseudo, &c, 12).unwrap();
    assert_eq!(merged.len(), ad_log.records.len() + pseudo.len());
    assert_eq!(merged.iter().filter(|s| s.source == Source::Ad).count(), ad_log.records.len());
    assert_eq!(merged, merge_training_set(&ad_log, &pseudo, &c, 12).unwrap());
    let ads_only = merge_training_set(&ad_log, &[], &c, 12).unwrap();
    assert!(ads_only.iter().all(|s| s.source == Source::Ad));
    assert_eq!(ads_only.len(), ad_log.records.len());
    assert!(merge_training_set(&rec_log, &[], &c, 12).is_err());
}

#[test]
fn samples_round_trip_through_files() {
    let c = catalog(5);
    let samples = ad_samples(&log(&c, Source::Ad, 30, 3), &c).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.tsv");
    write_samples(&samples, &path).unwrap();
    assert_eq!(read_samples(&path).unwrap(), samples);
    std::fs::write(&path, "ad\t2\t0\n").unwrap();
    assert!(read_samples(&path).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn pseudo_mapping_properties(seed in 0u64..500, k in 1usize..5) {
        let c = catalog(seed);
        let rec_log = log(&c, Source::Rec, 30, seed + 1);
        let index = build_item_ads_index(&c.ads);
        let kept = retrieve_rec_samples(&rec_log, &index).unwrap();
        let mapped = map_pseudo_samples(&kept, &index, k, seed, &c).unwrap();
        prop_assert_eq!(mapped.len(), kept.len());
        for (r, s) in kept.iter().zip(&mapped) {
            prop_assert_eq!(s.label, r.label);
            prop_assert_eq!(s.source, Source::Rec);
            prop_assert_eq!(s.user_id, r.user_id);
            let ads = index.ads_for(r.subject_id).unwrap();
            let rank = ads.iter().position(|&a| a == s.ad_id);
            prop_assert!(rank.is_some_and(|p| p < k));
            prop_assert_eq!(c.ads[s.ad_id].item_id, r.subject_id);
            prop_assert!(s.ad_id < c.n_ads() && s.item_id < c.n_items() && s.category_id < c.n_categories());
        }
        prop_assert_eq!(&mapped, &map_pseudo_samples(&kept, &index, k, seed, &c).unwrap());
        for ads in index.entries.values() {
            prop_assert!(!ads.is_empty());
            for w in ads.windows(2) {
                let (a, b) = (&c.ads[w[0]], &c.ads[w[1]]);
                prop_assert!(a.creation_step > b.creation_step || (a.creation_step == b.creation_step && a.ad_id < b.ad_id));
            }
        }
    }
}
