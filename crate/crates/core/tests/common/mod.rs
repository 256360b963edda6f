#![allow(dead_code)]

use rec4ad::augment::UnifiedSample;
use rec4ad::model::{ModelConfig, TrainConfig, Vocab};
use rec4ad::pipeline::ExperimentConfig;
use rec4ad::sim::{CatalogConfig, Context, SessionConfig, Source};

pub fn small_catalog() -> CatalogConfig {
    CatalogConfig {
        n_users: 120,
        n_items: 80,
        n_categories: 6,
        n_brands: 10,
        n_campaigns: 5,
        max_behavior_len: 5,
        ..CatalogConfig::default()
    }
}

pub fn small_model() -> ModelConfig {
    ModelConfig {
        embedding_dim: 4,
        attention_width: 6,
        backbone_widths: vec![16, 8],
        projection_dim: 4,
        head_widths: vec![6],
        discriminator_width: 5,
        ..ModelConfig::default()
    }
}

/// A few-second end-to-end configuration.
pub fn small_experiment() -> ExperimentConfig {
    let d = ExperimentConfig::default();
    ExperimentConfig {
        seeds: vec![1, 2],
        variants: ["BASE", "REC4AD"].map(String::from).to_vec(),
        catalog: small_catalog(),
        ad_log: SessionConfig {
            n_sessions: 300,
            candidates_per_session: 20,
            slots_per_session: 4,
            shadow_factor: 1,
            ..d.ad_log.clone()
        },
        rec_log: SessionConfig {
            n_sessions: 200,
            candidates_per_session: 20,
            slots_per_session: 4,
            shadow_factor: 1,
            ..d.rec_log.clone()
        },
        test_log: SessionConfig {
            n_sessions: 200,
            candidates_per_session: 20,
            slots_per_session: 4,
            ..d.test_log.clone()
        },
        model: small_model(),
        train: TrainConfig {
            epochs: 2,
            batch_size: 64,
            curve_points_per_epoch: 2,
            ..TrainConfig::default()
        },
        ..d
    }
}

pub fn tiny_vocab() -> Vocab {
    Vocab {
        age: 3,
        gender: 2,
        items: 7,
        categories: 3,
        brands: 4,
        ads: 9,
        campaigns: 3,
        time_buckets: 2,
        devices: 2,
        max_behavior_len: 3,
    }
}

/// Deterministic varied samples over [`tiny_vocab`]; `sources` gives the
/// source of each row.
pub fn tiny_samples(sources: &[Source]) -> Vec<UnifiedSample> {
    let v = tiny_vocab();
    sources
        .iter()
        .enumerate()
        .map(|(r, &source)| {
            let len = r % (v.max_behavior_len + 1);
            UnifiedSample {
                user_id: r,
                age_bucket: r % v.age,
                gender_bucket: (r / 2) % v.gender,
                behaviors: (0..len).map(|k| ((r + 2 * k) % v.items, (r + k) % v.categories)).collect(),
                ad_id: (3 * r + 1) % v.ads,
                item_id: (5 * r + 2) % v.items,
                category_id: (r + 1) % v.categories,
                brand_id: (2 * r) % v.brands,
                campaign_feature: r % v.campaigns,
                context: Context {
                    time_bucket: r % v.time_buckets,
                    device: (r / 3) % v.devices,
                },
                label: u8::from(r % 3 == 0),
                source,
            }
        })
        .collect()
}

pub fn mixed_sources(n: usize) -> Vec<Source> {
    (0..n).map(|r| if r % 2 == 0 { Source::Ad } else { Source::Rec }).collect()
}

/// O(n²) pairwise count of positive/negative orderings, ties scoring one half.
pub fn pairwise_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &yi) in labels.iter().enumerate() {
        if yi != 1 {
            continue;
        }
        for (j, &yj) in labels.iter().enumerate() {
            if yj != 0 {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

/// Calibration error with buckets found by scanning the bucket edges.
pub fn direct_ece(pred: &[f64], labels: &[u8], k: usize) -> f64 {
    let mut sums = vec![0.0; k];
    for (&p, &y) in pred.iter().zip(labels) {
        let b = (0..k).rev().find(|&b| p >= b as f64 / k as f64).unwrap_or(0);
        sums[b] += f64::from(y) - p;
    }
    sums.iter().map(|s: &f64| s.abs()).sum::<f64>() / pred.len() as f64
}

/// Random scored instance with ties, bucket-edge values and both classes.
pub fn random_instance(rng: &mut impl rand::Rng, max_n: usize) -> (Vec<f64>, Vec<u8>) {
    let n = rng.random_range(2..=max_n);
    let mut pred: Vec<f64> = (0..n)
        .map(|_| match rng.random_range(0..4) {
            0 => rng.random_range(0..=20) as f64 / 20.0,
            1 => rng.random_range(0..=100) as f64 / 100.0,
            _ => rng.random::<f64>(),
        })
        .collect();
    let mut labels: Vec<u8> = pred.iter().map(|&p| u8::from(rng.random::<f64>() < 0.2 + 0.6 * p)).collect();
    labels[0] = 1;
    labels[1] = 0;
    pred.swap(0, n - 1);
    (pred, labels)
}

pub fn store_bytes(store: &diffcore::ParameterStore) -> Vec<u8> {
    let mut out = Vec::new();
    store.write_checkpoint(&mut out, "").unwrap();
    out
}

/// Trains BASE and a reduced variant on the ads-only set with the same seed
/// and reports whether the loss trajectories, trained stores and test
/// predictions agree bit for bit.
pub fn reduces_to_base(
    cfg: &ExperimentConfig,
    data: &rec4ad::pipeline::Dataset,
    spec: &rec4ad::baselines::VariantSpec,
    full: &ModelConfig,
    propensity: &std::collections::BTreeMap<usize, f64>,
) -> bool {
    use rec4ad::baselines::{train_variant, VariantKind, VariantSpec};
    let train = &data.samples.ads_only;
    let base = train_variant(&VariantSpec::new(VariantKind::Base), train, propensity, &cfg.model, &data.vocab, &cfg.train, 1).unwrap();
    let other = train_variant(spec, train, propensity, full, &data.vocab, &cfg.train, 1).unwrap();
    let pb = rec4ad::model::predict_samples(&base.store, &cfg.model.plain(), &data.vocab, &data.samples.test).unwrap();
    let po = rec4ad::model::predict_samples(&other.store, &spec.model_config(full), &data.vocab, &data.samples.test).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let trajectory = |o: &rec4ad::model::TrainOutcome| bits(&o.steps.iter().flat_map(|s| [s.total, s.l_c, s.l_a, s.l_d]).collect::<Vec<_>>());
    trajectory(&base) == trajectory(&other) && store_bytes(&base.store) == store_bytes(&other.store) && bits(&pb) == bits(&po)
}

/// REC4AD with its switches off, IPS with unit propensities and IPS-C with a
/// unit cap, each checked against BASE.
pub fn reduction_identities(cfg: &ExperimentConfig, data: &rec4ad::pipeline::Dataset) -> Vec<(&'static str, bool)> {
    use rec4ad::baselines::{VariantKind, VariantSpec};
    let unit: std::collections::BTreeMap<usize, f64> = data.propensity.keys().map(|&k| (k, 1.0)).collect();
    let mut ips_c = VariantSpec::new(VariantKind::IpsC);
    ips_c.cap = Some(1.0);
    let off = ModelConfig {
        use_sabn: false,
        use_alignment: false,
        use_decorrelation: false,
        ..cfg.model.clone()
    };
    vec![
        (
            "REC4AD, switches off, ads only",
            reduces_to_base(cfg, data, &VariantSpec::new(VariantKind::Rec4ad), &off, &data.propensity),
        ),
        ("IPS, unit propensities", reduces_to_base(cfg, data, &VariantSpec::new(VariantKind::Ips), &cfg.model, &unit)),
        ("IPS_C, cap 1", reduces_to_base(cfg, data, &ips_c, &cfg.model, &data.propensity)),
    ]
}
