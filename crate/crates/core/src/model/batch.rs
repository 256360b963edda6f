use crate::augment::UnifiedSample;
use crate::error::{Error, Result};
use crate::model::config::Vocab;
use crate::sim::Source;

/// Column-oriented feature ids for a batch of samples. Behavior sequences are
/// padded to `seq_len` with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub len: usize,
    pub seq_len: usize,
    pub age: Vec<usize>,
    pub gender: Vec<usize>,
    pub behavior_items: Vec<usize>,
    pub behavior_categories: Vec<usize>,
    pub behavior_valid: Vec<bool>,
    pub ad: Vec<usize>,
    pub item: Vec<usize>,
    pub category: Vec<usize>,
    pub brand: Vec<usize>,
    pub campaign: Vec<usize>,
    pub time_bucket: Vec<usize>,
    pub device: Vec<usize>,
    pub labels: Vec<f64>,
    pub source: Vec<Source>,
    pub weights: Option<Vec<f64>>,
}

fn check(field: &str, id: usize, bound: usize) -> Result<()> {
    if id >= bound {
        Err(Error::Invalid(format!("{field} id {id} out of range (vocabulary {bound})")))
    } else {
        Ok(())
    }
}

impl Batch {
    pub fn from_samples(samples: &[&UnifiedSample], weights: Option<Vec<f64>>, vocab: &Vocab) -> Result<Self> {
        let n = samples.len();
        if n == 0 {
            return Err(Error::Invalid("empty batch".into()));
        }
        if weights.as_ref().is_some_and(|w| w.len() != n) {
            return Err(Error::Invalid("weights do not match batch length".into()));
        }
        let l = vocab.max_behavior_len.max(1);
        let mut b = Batch {
            len: n,
            seq_len: l,
            age: Vec::with_capacity(n),
            gender: Vec::with_capacity(n),
            behavior_items: vec![0; n * l],
            behavior_categories: vec![0; n * l],
            behavior_valid: vec![false; n * l],
            ad: Vec::with_capacity(n),
            item: Vec::with_capacity(n),
            category: Vec::with_capacity(n),
            brand: Vec::with_capacity(n),
            campaign: Vec::with_capacity(n),
            time_bucket: Vec::with_capacity(n),
            device: Vec::with_capacity(n),
            labels: Vec::with_capacity(n),
            source: Vec::with_capacity(n),
            weights,
        };
        for (r, s) in samples.iter().enumerate() {
            check("age", s.age_bucket, vocab.age)?;
            check("gender", s.gender_bucket, vocab.gender)?;
            check("ad", s.ad_id, vocab.ads)?;
            check("item", s.item_id, vocab.items)?;
            check("category", s.category_id, vocab.categories)?;
            check("brand", s.brand_id, vocab.brands)?;
            check("campaign", s.campaign_feature, vocab.campaigns)?;
            check("time_bucket", s.context.time_bucket, vocab.time_buckets)?;
            check("device", s.context.device, vocab.devices)?;
            // keep the most recent behaviors when a sequence is too long
            let seq = &s.behaviors[s.behaviors.len().saturating_sub(l)..];
            for (k, &(it, cat)) in seq.iter().enumerate() {
                check("behavior item", it, vocab.items)?;
                check("behavior category", cat, vocab.categories)?;
                b.behavior_items[r * l + k] = it;
                b.behavior_categories[r * l + k] = cat;
                b.behavior_valid[r * l + k] = true;
            }
            b.age.push(s.age_bucket);
            b.gender.push(s.gender_bucket);
            b.ad.push(s.ad_id);
            b.item.push(s.item_id);
            b.category.push(s.category_id);
            b.brand.push(s.brand_id);
            b.campaign.push(s.campaign_feature);
            b.time_bucket.push(s.context.time_bucket);
            b.device.push(s.context.device);
            b.labels.push(f64::from(s.label));
            b.source.push(s.source);
        }
        Ok(b)
    }

    pub fn rows_of(&self, source: Source) -> Vec<usize> {
        (0..self.len).filter(|&r| self.source[r] == source).collect()
    }
}
