//! The synthetic world: users, items, ads, and the ground-truth click model.

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CatalogConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_categories: usize,
    pub n_brands: usize,
    pub n_campaigns: usize,
    pub latent_dim: usize,
    /// Fraction of items with at least one ad; strictly inside (0, 1).
    pub ad_coverage: f64,
    pub max_ads_per_item: usize,
    pub max_behavior_len: usize,
    pub n_age_buckets: usize,
    pub n_gender_buckets: usize,
    pub n_time_buckets: usize,
    pub n_devices: usize,
    /// Scale of the per-category latent centers.
    pub category_scale: f64,
    /// Scale of each item's deviation from its category center.
    pub item_scale: f64,
    /// Scale of the per-(age, gender) latent centers.
    pub profile_scale: f64,
    /// Scale of each user's deviation from the profile center.
    pub user_scale: f64,
    /// Log-normal shape of item popularity.
    pub popularity_sigma: f64,
    /// Logit weight of `ln(popularity)`.
    pub popularity_weight: f64,
    pub brand_scale: f64,
    pub context_scale: f64,
    pub base_logit: f64,
    /// Log-normal shape of ad bids; larger means heavier tails.
    pub bid_sigma: f64,
    /// Fraction of log-bid variance shared by all ads of one item.
    pub bid_item_share: f64,
    /// Sharpness of behavior sampling around the user's preferences.
    pub behavior_temperature: f64,
}

impl Default for CatalogConfig {
    fn default() -> Self {
        Self {
            n_users: 2000,
            n_items: 1000,
            n_categories: 20,
            n_brands: 100,
            n_campaigns: 50,
            latent_dim: 8,
            ad_coverage: 0.5,
            max_ads_per_item: 4,
            max_behavior_len: 10,
            n_age_buckets: 6,
            n_gender_buckets: 2,
            n_time_buckets: 4,
            n_devices: 3,
            category_scale: 0.5,
            item_scale: 0.5,
            profile_scale: 0.5,
            user_scale: 0.5,
            popularity_sigma: 1.0,
            popularity_weight: 0.3,
            brand_scale: 0.2,
            context_scale: 0.2,
            base_logit: -2.0,
            bid_sigma: 1.5,
            bid_item_share: 0.8,
            behavior_temperature: 1.0,
        }
    }
}

impl CatalogConfig {
    /// Number of items that receive ads.
    pub fn covered_items(&self) -> usize {
        (self.ad_coverage * self.n_items as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let positive = [
            ("n_users", self.n_users),
            ("n_items", self.n_items),
            ("n_categories", self.n_categories),
            ("n_brands", self.n_brands),
            ("n_campaigns", self.n_campaigns),
            ("max_ads_per_item", self.max_ads_per_item),
            ("n_age_buckets", self.n_age_buckets),
            ("n_gender_buckets", self.n_gender_buckets),
            ("n_time_buckets", self.n_time_buckets),
            ("n_devices", self.n_devices),
        ];
        for (name, v) in positive {
            if v == 0 {
                problems.push(format!("{name} must be positive"));
            }
        }
        if self.latent_dim < 2 {
            problems.push("latent_dim must be at least 2".into());
        }
        if !(self.ad_coverage > 0.0 && self.ad_coverage < 1.0) {
            problems.push(format!("ad_coverage must lie in (0, 1), got {}", self.ad_coverage));
        } else if self.n_items > 0 {
            let covered = self.covered_items();
            if covered == 0 || covered == self.n_items {
                problems.push(format!(
                    "ad_coverage {} over {} items leaves {covered} items with ads; need at least one with and one without",
                    self.ad_coverage, self.n_items
                ));
            }
        }
        let scales = [
            ("category_scale", self.category_scale),
            ("item_scale", self.item_scale),
            ("profile_scale", self.profile_scale),
            ("user_scale", self.user_scale),
            ("popularity_sigma", self.popularity_sigma),
            ("brand_scale", self.brand_scale),
            ("context_scale", self.context_scale),
            ("bid_sigma", self.bid_sigma),
            ("behavior_temperature", self.behavior_temperature),
        ];
        if !(0.0..=1.0).contains(&self.bid_item_share) {
            problems.push("bid_item_share must lie in [0, 1]".to_string());
        }
        for (name, v) in scales {
            if !(v >= 0.0 && v.is_finite()) {
                problems.push(format!("{name} must be finite and non-negative"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: usize,
    /// Ground truth only; models never see it.
    pub latent_pref: Vec<f64>,
    pub age_bucket: usize,
    pub gender_bucket: usize,
    /// `(item_id, category_id)` pairs, oldest first.
    pub behavior_seq: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemProfile {
    pub item_id: usize,
    pub category_id: usize,
    pub brand_id: usize,
    /// Ground truth only.
    pub latent_attr: Vec<f64>,
    pub popularity: f64,
    /// Ground-truth logit offset (base rate, popularity and brand effects).
    pub logit_bias: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdProfile {
    pub ad_id: usize,
    pub item_id: usize,
    pub campaign_feature: usize,
    pub bid: f64,
    pub creation_step: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Context {
    pub time_bucket: usize,
    pub device: usize,
}

/// The whole synthetic marketplace. Serialized as a single JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub config: CatalogConfig,
    pub users: Vec<UserProfile>,
    pub items: Vec<ItemProfile>,
    pub ads: Vec<AdProfile>,
    /// Ground-truth logit offset per context, indexed by
    /// `time_bucket * n_devices + device`.
    pub context_offsets: Vec<f64>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    diffcore::sigmoid(x)
}

/// Ground-truth click probability:
/// `sigmoid(latent_pref · latent_attr + item.logit_bias + context_offset)`.
pub fn true_ctr(user: &UserProfile, item: &ItemProfile, context_offset: f64) -> Result<f64> {
    if user.latent_pref.len() != item.latent_attr.len() {
        return Err(Error::Invalid(format!(
            "latent dimension mismatch: user {} has {}, item {} has {}",
            user.user_id,
            user.latent_pref.len(),
            item.item_id,
            item.latent_attr.len()
        )));
    }
    let dot: f64 = user.latent_pref.iter().zip(&item.latent_attr).map(|(a, b)| a * b).sum();
    Ok(sigmoid(dot + item.logit_bias + context_offset))
}

/// Sampled displayed entity: an ad or an organic item.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Subject {
    Ad(usize),
    Item(usize),
}

impl Catalog {
    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn n_ads(&self) -> usize {
        self.ads.len()
    }

    pub fn n_categories(&self) -> usize {
        self.config.n_categories
    }

    pub fn context_offset(&self, ctx: Context) -> f64 {
        self.context_offsets[ctx.time_bucket * self.config.n_devices + ctx.device]
    }

    /// Item a subject stands for: `I(a)` for ads, the item itself otherwise.
    pub fn item_of(&self, subject: Subject) -> Result<&ItemProfile> {
        let item_id = match subject {
            Subject::Ad(a) => self
                .ads
                .get(a)
                .ok_or_else(|| Error::Invalid(format!("unknown ad {a}")))?
                .item_id,
            Subject::Item(i) => i,
        };
        self.items
            .get(item_id)
            .ok_or_else(|| Error::Invalid(format!("unknown item {item_id}")))
    }

    pub fn user(&self, user_id: usize) -> Result<&UserProfile> {
        self.users
            .get(user_id)
            .ok_or_else(|| Error::Invalid(format!("unknown user {user_id}")))
    }

    /// Click probability of `subject` for `user` in `ctx`. An ad and its
    /// underlying item always share the same probability.
    pub fn click_probability(&self, user_id: usize, subject: Subject, ctx: Context) -> Result<f64> {
        let user = self.user(user_id)?;
        let item = self.item_of(subject)?;
        true_ctr(user, item, self.context_offset(ctx))
    }

    /// Mean bid, used to normalize eCPM scores in diagnostics.
    pub fn mean_bid(&self) -> f64 {
        self.ads.iter().map(|a| a.bid).sum::<f64>() / self.ads.len().max(1) as f64
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    (0..dim).map(|_| scale * n.sample(rng)).collect()
}

/// Builds a catalog deterministically from `config` and `seed`.
pub fn generate_catalog(config: &CatalogConfig, seed: u64) -> Result<Catalog> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = config.latent_dim;
    let unit = Normal::new(0.0, 1.0).expect("unit normal");

    let category_centers: Vec<Vec<f64>> = (0..config.n_categories)
        .map(|_| normal_vec(&mut rng, k, config.category_scale))
        .collect();
    let brand_offsets: Vec<f64> = (0..config.n_brands)
        .map(|_| config.brand_scale * unit.sample(&mut rng))
        .collect();
    let popularity = LogNormal::new(0.0, config.popularity_sigma).map_err(|e| Error::Config(e.to_string()))?;

    let items: Vec<ItemProfile> = (0..config.n_items)
        .map(|item_id| {
            let category_id = rng.random_range(0..config.n_categories);
            let brand_id = rng.random_range(0..config.n_brands);
            let dev = normal_vec(&mut rng, k, config.item_scale);
            let latent_attr = category_centers[category_id].iter().zip(&dev).map(|(c, d)| c + d).collect();
            let pop: f64 = popularity.sample(&mut rng);
            ItemProfile {
                item_id,
                category_id,
                brand_id,
                latent_attr,
                popularity: pop,
                logit_bias: config.base_logit + config.popularity_weight * pop.ln() + brand_offsets[brand_id],
            }
        })
        .collect();

    let profile_centers: Vec<Vec<f64>> = (0..config.n_age_buckets * config.n_gender_buckets)
        .map(|_| normal_vec(&mut rng, k, config.profile_scale))
        .collect();

    let mut users = Vec::with_capacity(config.n_users);
    for user_id in 0..config.n_users {
        let age_bucket = rng.random_range(0..config.n_age_buckets);
        let gender_bucket = rng.random_range(0..config.n_gender_buckets);
        let center = &profile_centers[age_bucket * config.n_gender_buckets + gender_bucket];
        let dev = normal_vec(&mut rng, k, config.user_scale);
        let latent_pref: Vec<f64> = center.iter().zip(&dev).map(|(c, d)| c + d).collect();
        let len = rng.random_range(0..=config.max_behavior_len);
        let behavior_seq = if len == 0 {
            Vec::new()
        } else {
            // Past interactions lean toward items the user likes.
            let weights: Vec<f64> = items
                .iter()
                .map(|it| {
                    let dot: f64 = latent_pref.iter().zip(&it.latent_attr).map(|(a, b)| a * b).sum();
                    (config.behavior_temperature * dot).exp() * it.popularity
                })
                .collect();
            let pick = WeightedIndex::new(&weights).map_err(|e| Error::Config(e.to_string()))?;
            (0..len)
                .map(|_| {
                    let i = pick.sample(&mut rng);
                    (i, items[i].category_id)
                })
                .collect()
        };
        users.push(UserProfile {
            user_id,
            latent_pref,
            age_bucket,
            gender_bucket,
            behavior_seq,
        });
    }

    let mut covered: Vec<usize> = (0..config.n_items).collect();
    covered.shuffle(&mut rng);
    covered.truncate(config.covered_items());
    covered.sort_unstable();

    let item_sigma = config.bid_sigma * config.bid_item_share.sqrt();
    let ad_sigma = config.bid_sigma * (1.0 - config.bid_item_share).sqrt();
    let mut ads = Vec::new();
    for item_id in covered {
        let n_ads = rng.random_range(1..=config.max_ads_per_item);
        let item_level: f64 = item_sigma * unit.sample(&mut rng);
        let mut step: u64 = rng.random_range(0..10_000);
        for _ in 0..n_ads {
            step += rng.random_range(1..500);
            ads.push(AdProfile {
                ad_id: ads.len(),
                item_id,
                campaign_feature: rng.random_range(0..config.n_campaigns),
                bid: (item_level + ad_sigma * unit.sample(&mut rng)).exp(),
                creation_step: step,
            });
        }
    }

    let context_offsets = (0..config.n_time_buckets * config.n_devices)
        .map(|_| config.context_scale * unit.sample(&mut rng))
        .collect();

    Ok(Catalog {
        config: config.clone(),
        users,
        items,
        ads,
        context_offsets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CatalogConfig {
        CatalogConfig {
            n_users: 10,
            n_items: 20,
            ad_coverage: 0.5,
            ..CatalogConfig::default()
        }
    }

    #[test]
    fn sizes_follow_config() {
        let c = generate_catalog(&small(), 7).unwrap();
        assert_eq!(c.users.len(), 10);
        assert_eq!(c.items.len(), 20);
        let mut with_ads: Vec<usize> = c.ads.iter().map(|a| a.item_id).collect();
        with_ads.dedup();
        assert_eq!(with_ads.len(), 10);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = serde_json::to_vec(&generate_catalog(&small(), 7).unwrap()).unwrap();
        let b = serde_json::to_vec(&generate_catalog(&small(), 7).unwrap()).unwrap();
        assert_eq!(a, b);
        let c = serde_json::to_vec(&generate_catalog(&small(), 8).unwrap()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            CatalogConfig {
                ad_coverage: 1.0,
                ..small()
            },
            CatalogConfig {
                ad_coverage: 0.0,
                ..small()
            },
            CatalogConfig { n_users: 0, ..small() },
            CatalogConfig { n_items: 0, ..small() },
            CatalogConfig {
                latent_dim: 1,
                ..small()
            },
        ] {
            assert!(matches!(generate_catalog(&cfg, 1), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn invariants_hold() {
        let c = generate_catalog(&CatalogConfig::default(), 3).unwrap();
        assert!(c.ads.iter().all(|a| a.item_id < c.items.len() && a.bid > 0.0));
        assert!(c.ads.iter().enumerate().all(|(i, a)| a.ad_id == i));
        let covered: std::collections::BTreeSet<usize> = c.ads.iter().map(|a| a.item_id).collect();
        assert!(covered.len() < c.items.len());
        for w in c.ads.windows(2) {
            if w[0].item_id == w[1].item_id {
                assert!(w[1].creation_step > w[0].creation_step);
            }
        }
        for u in &c.users {
            assert!(u.behavior_seq.len() <= c.config.max_behavior_len);
            assert!(u.age_bucket < c.config.n_age_buckets);
            assert!(u.behavior_seq.iter().all(|(i, cat)| *i < c.items.len() && c.items[*i].category_id == *cat));
        }
    }

    #[test]
    fn true_ctr_reference_values() {
        let u = UserProfile {
            user_id: 0,
            latent_pref: vec![0.0, 0.0],
            age_bucket: 0,
            gender_bucket: 0,
            behavior_seq: vec![],
        };
        let mut it = ItemProfile {
            item_id: 0,
            category_id: 0,
            brand_id: 0,
            latent_attr: vec![0.0, 0.0],
            popularity: 1.0,
            logit_bias: 0.0,
        };
        assert_eq!(true_ctr(&u, &it, 0.0).unwrap(), 0.5);
        it.latent_attr = vec![1.0, 0.0];
        let u1 = UserProfile {
            latent_pref: vec![1.0, 5.0],
            ..u.clone()
        };
        assert!((true_ctr(&u1, &it, 0.0).unwrap() - 0.7311).abs() < 1e-4);
        it.latent_attr = vec![1.0, 0.0, 0.0];
        assert!(true_ctr(&u1, &it, 0.0).is_err());
    }

    #[test]
    fn ad_and_item_share_click_probability() {
        let c = generate_catalog(&small(), 7).unwrap();
        let ctx = Context {
            time_bucket: 1,
            device: 2,
        };
        for ad in &c.ads {
            let pa = c.click_probability(3, Subject::Ad(ad.ad_id), ctx).unwrap();
            let pi = c.click_probability(3, Subject::Item(ad.item_id), ctx).unwrap();
            assert_eq!(pa, pi);
        }
    }
}
