//! Turns recommendation impressions into pseudo ad samples and merges them
//! with real ad impressions.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{AdProfile, Catalog, Context, ImpressionLog, ImpressionRecord, Source};

/// Item id to its ads, most recently created first (ties by ascending ad id).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemAdsIndex {
    pub entries: BTreeMap<usize, Vec<usize>>,
}

impl ItemAdsIndex {
    pub fn ads_for(&self, item_id: usize) -> Option<&[usize]> {
        self.entries.get(&item_id).map(Vec::as_slice)
    }

    pub fn contains(&self, item_id: usize) -> bool {
        self.entries.contains_key(&item_id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn build_item_ads_index(ads: &[AdProfile]) -> ItemAdsIndex {
    let mut grouped: BTreeMap<usize, Vec<&AdProfile>> = BTreeMap::new();
    for ad in ads {
        grouped.entry(ad.item_id).or_default().push(ad);
    }
    let entries = grouped
        .into_iter()
        .map(|(item, mut list)| {
            list.sort_by(|a, b| b.creation_step.cmp(&a.creation_step).then(a.ad_id.cmp(&b.ad_id)));
            (item, list.into_iter().map(|a| a.ad_id).collect())
        })
        .collect();
    ItemAdsIndex { entries }
}

/// A training or test example in model-ready form.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnifiedSample {
    pub user_id: usize,
    pub age_bucket: usize,
    pub gender_bucket: usize,
    /// `(item_id, category_id)`, oldest first.
    pub behaviors: Vec<(usize, usize)>,
    pub ad_id: usize,
    pub item_id: usize,
    pub category_id: usize,
    pub brand_id: usize,
    pub campaign_feature: usize,
    pub context: Context,
    pub label: u8,
    pub source: Source,
}

/// Keeps the rec records whose item has at least one ad, in order.
pub fn retrieve_rec_samples(rec_log: &ImpressionLog, index: &ItemAdsIndex) -> Result<Vec<ImpressionRecord>> {
    let mut out = Vec::new();
    for r in &rec_log.records {
        if r.source != Source::Rec {
            return Err(Error::Invalid(format!(
                "ad record in session {} passed to rec retrieval",
                r.session_id
            )));
        }
        if index.contains(r.subject_id) {
            out.push(r.clone());
        }
    }
    Ok(out)
}

fn join(catalog: &Catalog, user_id: usize, ad_id: usize, context: Context, label: u8, source: Source) -> Result<UnifiedSample> {
    let user = catalog.user(user_id)?;
    let ad = catalog
        .ads
        .get(ad_id)
        .ok_or_else(|| Error::Invalid(format!("unknown ad {ad_id}")))?;
    let item = &catalog.items[ad.item_id];
    Ok(UnifiedSample {
        user_id,
        age_bucket: user.age_bucket,
        gender_bucket: user.gender_bucket,
        behaviors: user.behavior_seq.clone(),
        ad_id,
        item_id: item.item_id,
        category_id: item.category_id,
        brand_id: item.brand_id,
        campaign_feature: ad.campaign_feature,
        context,
        label,
        source,
    })
}

/// Maps each rec record to one ad drawn uniformly from the `k` most recent
/// ads of its item.
pub fn map_pseudo_samples(filtered: &[ImpressionRecord], index: &ItemAdsIndex, k: usize, seed: u64, catalog: &Catalog) -> Result<Vec<UnifiedSample>> {
    if k == 0 {
        return Err(Error::Config("recent-K must be at least 1".into()));
    }
    filtered
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let ads = index
                .ads_for(r.subject_id)
                .ok_or_else(|| Error::Invalid(format!("item {} has no ads", r.subject_id)))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let ad_id = ads[rng.random_range(0..k.min(ads.len()))];
            join(catalog, r.user_id, ad_id, r.context, r.label, Source::Rec)
        })
        .collect()
}

/// Feature-joins an ad log against the catalog, keeping record order.
pub fn ad_samples(ad_log: &ImpressionLog, catalog: &Catalog) -> Result<Vec<UnifiedSample>> {
    ad_log
        .records
        .iter()
        .map(|r| {
            if r.source != Source::Ad {
                return Err(Error::Invalid(format!("rec record in session {} of an ad log", r.session_id)));
            }
            join(catalog, r.user_id, r.subject_id, r.context, r.label, Source::Ad)
        })
        .collect()
}

/// Ad samples followed by pseudo samples, then shuffled under `seed`.
pub fn merge_training_set(ad_log: &ImpressionLog, pseudo: &[UnifiedSample], catalog: &Catalog, seed: u64) -> Result<Vec<UnifiedSample>> {
    let mut all = ad_samples(ad_log, catalog)?;
    all.extend_from_slice(pseudo);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    all.shuffle(&mut rng);
    Ok(all)
}

/// Field order of the unified-sample file, one sample per tab-separated line.
pub const SAMPLE_FIELDS: [&str; 13] = [
    "source",
    "label",
    "user_id",
    "age_bucket",
    "gender_bucket",
    "ad_id",
    "item_id",
    "category_id",
    "brand_id",
    "campaign_feature",
    "time_bucket",
    "device",
    "behaviors",
];

/// Writes samples; behaviors are `item:category` pairs joined by `|`, or `-`
/// when empty.
pub fn write_samples(samples: &[UnifiedSample], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in samples {
        let behaviors = if s.behaviors.is_empty() {
            "-".to_string()
        } else {
            s.behaviors.iter().map(|(i, c)| format!("{i}:{c}")).collect::<Vec<_>>().join("|")
        };
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            s.source.as_str(),
            s.label,
            s.user_id,
            s.age_bucket,
            s.gender_bucket,
            s.ad_id,
            s.item_id,
            s.category_id,
            s.brand_id,
            s.campaign_feature,
            s.context.time_bucket,
            s.context.device,
            behaviors
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples(path: &Path) -> Result<Vec<UnifiedSample>> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        let n = i + 1;
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != SAMPLE_FIELDS.len() {
            return Err(err(n, format!("expected {} fields, found {}", SAMPLE_FIELDS.len(), f.len())));
        }
        let num = |j: usize| -> Result<usize> { f[j].parse().map_err(|_| err(n, format!("bad {} {:?}", SAMPLE_FIELDS[j], f[j]))) };
        let behaviors = if f[12] == "-" {
            Vec::new()
        } else {
            f[12]
                .split('|')
                .map(|p| {
                    let (a, b) = p.split_once(':').ok_or_else(|| err(n, format!("bad behavior {p:?}")))?;
                    Ok((
                        a.parse().map_err(|_| err(n, format!("bad behavior {p:?}")))?,
                        b.parse().map_err(|_| err(n, format!("bad behavior {p:?}")))?,
                    ))
                })
                .collect::<Result<_>>()?
        };
        let label = num(1)?;
        if label > 1 {
            return Err(err(n, format!("label {label} outside {{0,1}}")));
        }
        out.push(UnifiedSample {
            source: f[0].parse().map_err(|_| err(n, format!("bad source {:?}", f[0])))?,
            label: label as u8,
            user_id: num(2)?,
            age_bucket: num(3)?,
            gender_bucket: num(4)?,
            ad_id: num(5)?,
            item_id: num(6)?,
            category_id: num(7)?,
            brand_id: num(8)?,
            campaign_feature: num(9)?,
            context: Context {
                time_bucket: num(10)?,
                device: num(11)?,
            },
            behaviors,
        });
    }
    Ok(out)
}
