use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::Catalog;

/// Vocabulary size of every categorical feature.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub age: usize,
    pub gender: usize,
    pub items: usize,
    pub categories: usize,
    pub brands: usize,
    pub ads: usize,
    pub campaigns: usize,
    pub time_buckets: usize,
    pub devices: usize,
    pub max_behavior_len: usize,
}

impl Vocab {
    pub fn from_catalog(c: &Catalog) -> Self {
        Self {
            age: c.config.n_age_buckets,
            gender: c.config.n_gender_buckets,
            items: c.n_items(),
            categories: c.config.n_categories,
            brands: c.config.n_brands,
            ads: c.n_ads(),
            campaigns: c.config.n_campaigns,
            time_buckets: c.config.n_time_buckets,
            devices: c.config.n_devices,
            max_behavior_len: c.config.max_behavior_len,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    pub attention_width: usize,
    pub backbone_widths: Vec<usize>,
    /// Width `d` of both the invariant and the confounder representation.
    pub projection_dim: usize,
    pub head_widths: Vec<usize>,
    pub discriminator_width: usize,
    /// Gradient reversal strength.
    pub alpha: f64,
    /// Weight of the alignment loss.
    pub lambda1: f64,
    /// Weight of the decorrelation loss.
    pub lambda2: f64,
    pub use_sabn: bool,
    pub use_alignment: bool,
    pub use_decorrelation: bool,
    /// Keep the decorrelation gradient out of the layers below the
    /// projections.
    pub decorrelation_stop_gradient: bool,
    /// Separate projections and prediction heads per source. Off means every
    /// row goes through the ad-side layers.
    pub source_aware_heads: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub pearson_eps: f64,
    /// Standard deviation of the embedding initialization.
    pub embedding_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 16,
            attention_width: 32,
            backbone_widths: vec![256, 128],
            projection_dim: 128,
            head_widths: vec![64],
            discriminator_width: 64,
            alpha: 0.1,
            lambda1: 0.005,
            lambda2: 0.5,
            use_sabn: true,
            use_alignment: true,
            use_decorrelation: true,
            decorrelation_stop_gradient: true,
            source_aware_heads: true,
            bn_momentum: 0.99,
            bn_eps: 1e-5,
            pearson_eps: 1e-8,
            embedding_init_std: 0.01,
        }
    }
}

impl ModelConfig {
    /// Every switch off and a single shared head: the plain attention CTR model.
    pub fn plain(&self) -> Self {
        Self {
            use_sabn: false,
            use_alignment: false,
            use_decorrelation: false,
            source_aware_heads: false,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.embedding_dim == 0 || self.attention_width == 0 || self.discriminator_width == 0 {
            problems.push("embedding, attention and discriminator widths must be positive".to_string());
        }
        if self.projection_dim == 0 {
            problems.push("projection_dim must be positive".into());
        }
        if self.backbone_widths.is_empty() || self.backbone_widths.contains(&0) {
            problems.push("backbone_widths must be non-empty and positive".into());
        }
        if self.head_widths.contains(&0) {
            problems.push("head_widths must be positive".into());
        }
        for (name, v) in [("alpha", self.alpha), ("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v >= 0.0 && v.is_finite()) {
                problems.push(format!("{name} must be finite and non-negative"));
            }
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            problems.push("bn_momentum must lie in [0, 1)".into());
        }
        if !(self.bn_eps >= 0.0) || !(self.pearson_eps >= 0.0) {
            problems.push("eps values must be non-negative".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Width of the concatenated raw representation `e`.
    pub fn input_dim(&self) -> usize {
        // age, gender, behavior interest (item + category), five ad fields, two context fields
        self.embedding_dim * (2 + 2 + 5 + 2)
    }
}

/// Model configuration and vocabulary, stored as a checkpoint header so a
/// checkpoint can be matched against the configuration that reads it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub vocab: Vocab,
}
