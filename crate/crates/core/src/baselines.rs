//! Comparison systems sharing the same network and optimizer: the plain
//! model, naive data merging, inverse propensity weighting (optionally
//! capped), and the full method with its ablations.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::UnifiedSample;
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig, TrainConfig, TrainOutcome, Vocab};
use crate::sim::{display_counts, ImpressionLog, Source};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VariantKind {
    #[serde(rename = "BASE")]
    Base,
    #[serde(rename = "DAG")]
    Dag,
    #[serde(rename = "IPS")]
    Ips,
    #[serde(rename = "IPS_C")]
    IpsC,
    #[serde(rename = "REC4AD")]
    Rec4ad,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropensitySource {
    SimulatorTruth,
    IrEstimate,
}

/// One switch removed from the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    NoSabn,
    NoAlignment,
    NoDecorrelation,
}

pub const DEFAULT_IPS_CAP: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub kind: VariantKind,
    pub propensity_source: PropensitySource,
    /// Weight cap; present exactly for IPS-C.
    pub cap: Option<f64>,
    pub ablation: Option<Ablation>,
}

impl VariantSpec {
    pub fn new(kind: VariantKind) -> Self {
        Self {
            kind,
            propensity_source: PropensitySource::SimulatorTruth,
            cap: (kind == VariantKind::IpsC).then_some(DEFAULT_IPS_CAP),
            ablation: None,
        }
    }

    pub fn ablated(ablation: Ablation) -> Self {
        Self {
            ablation: Some(ablation),
            ..Self::new(VariantKind::Rec4ad)
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind, self.cap) {
            (VariantKind::IpsC, None) => return Err(Error::Config("IPS_C needs a cap".into())),
            (VariantKind::IpsC, Some(c)) if !(c > 0.0 && c.is_finite()) => {
                return Err(Error::Config(format!("IPS_C cap must be positive, got {c}")))
            }
            (k, Some(_)) if k != VariantKind::IpsC => return Err(Error::Config("only IPS_C takes a cap".into())),
            _ => {}
        }
        if self.ablation.is_some() && self.kind != VariantKind::Rec4ad {
            return Err(Error::Config("ablations apply to REC4AD only".into()));
        }
        Ok(())
    }

    /// Name used in reports and file names, e.g. `REC4AD-no_sabn`.
    pub fn name(&self) -> String {
        let base = match self.kind {
            VariantKind::Base => "BASE",
            VariantKind::Dag => "DAG",
            VariantKind::Ips => "IPS",
            VariantKind::IpsC => "IPS_C",
            VariantKind::Rec4ad => "REC4AD",
        };
        match self.ablation {
            None => base.to_string(),
            Some(Ablation::NoSabn) => format!("{base}-no_sabn"),
            Some(Ablation::NoAlignment) => format!("{base}-no_alignment"),
            Some(Ablation::NoDecorrelation) => format!("{base}-no_decorrelation"),
        }
    }

    /// Whether the variant trains on merged ad + pseudo samples.
    pub fn uses_rec_samples(&self) -> bool {
        matches!(self.kind, VariantKind::Dag | VariantKind::Rec4ad)
    }

    /// Network configuration this variant trains with, derived from the full
    /// configuration `full`.
    pub fn model_config(&self, full: &ModelConfig) -> ModelConfig {
        match self.kind {
            VariantKind::Rec4ad => {
                let mut c = full.clone();
                match self.ablation {
                    Some(Ablation::NoSabn) => c.use_sabn = false,
                    Some(Ablation::NoAlignment) => c.use_alignment = false,
                    Some(Ablation::NoDecorrelation) => c.use_decorrelation = false,
                    None => {}
                }
                c
            }
            _ => full.plain(),
        }
    }
}

impl fmt::Display for VariantSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for VariantSpec {
    type Err = Error;
    /// Parses names produced by [`VariantSpec::name`].
    fn from_str(s: &str) -> Result<Self> {
        let (head, tail) = s.split_once('-').map_or((s, None), |(h, t)| (h, Some(t)));
        let kind = match head.to_ascii_uppercase().replace('-', "_").as_str() {
            "BASE" => VariantKind::Base,
            "DAG" => VariantKind::Dag,
            "IPS" => VariantKind::Ips,
            "IPS_C" | "IPSC" => VariantKind::IpsC,
            "REC4AD" => VariantKind::Rec4ad,
            other => return Err(Error::Config(format!("unknown variant {other:?}"))),
        };
        let mut spec = VariantSpec::new(kind);
        spec.ablation = match tail {
            None => None,
            Some("no_sabn") => Some(Ablation::NoSabn),
            Some("no_alignment") => Some(Ablation::NoAlignment),
            Some("no_decorrelation") => Some(Ablation::NoDecorrelation),
            Some(t) => return Err(Error::Config(format!("unknown ablation {t:?}"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Display probability per ad. `SimulatorTruth` reads the simulator's
/// bookkeeping; `IrEstimate` smooths the logged impression ratio as
/// `(displays + 0.5) / (candidacies + 1)`. Ads never displayed (truth) or
/// never a candidate (estimate) are absent.
pub fn propensity_estimate(ad_log: &ImpressionLog, source: PropensitySource) -> Result<BTreeMap<usize, f64>> {
    if ad_log.source != Source::Ad {
        return Err(Error::Invalid("propensities are defined on ad logs".into()));
    }
    match source {
        PropensitySource::SimulatorTruth => {
            if ad_log.display_propensity.is_empty() {
                return Err(Error::Invalid("log carries no simulator propensities".into()));
            }
            Ok(ad_log.display_propensity.clone())
        }
        PropensitySource::IrEstimate => Ok(display_counts(ad_log)
            .into_iter()
            .map(|(id, (d, c))| (id, (d as f64 + 0.5) / (c as f64 + 1.0)))
            .collect()),
    }
}

/// `1 / propensity`, capped at `cap` when given.
pub fn ips_weight(propensity: f64, cap: Option<f64>) -> Result<f64> {
    if !(propensity > 0.0 && propensity <= 1.0) {
        return Err(Error::Invalid(format!("propensity {propensity} outside (0, 1]")));
    }
    let w = 1.0 / propensity;
    Ok(cap.map_or(w, |c| w.min(c)))
}

/// Per-sample weights for an IPS variant; `None` for unweighted variants.
pub fn sample_weights(spec: &VariantSpec, samples: &[UnifiedSample], propensity: &BTreeMap<usize, f64>) -> Result<Option<Vec<f64>>> {
    if !matches!(spec.kind, VariantKind::Ips | VariantKind::IpsC) {
        return Ok(None);
    }
    samples
        .iter()
        .map(|s| {
            let p = propensity
                .get(&s.ad_id)
                .ok_or_else(|| Error::Invalid(format!("no propensity for ad {}", s.ad_id)))?;
            ips_weight(*p, spec.cap)
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

/// Trains one variant. Ads-only variants refuse training sets containing
/// pseudo samples.
pub fn train_variant(
    spec: &VariantSpec,
    samples: &[UnifiedSample],
    propensity: &BTreeMap<usize, f64>,
    full: &ModelConfig,
    vocab: &Vocab,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    spec.validate()?;
    if !spec.uses_rec_samples() && samples.iter().any(|s| s.source == Source::Rec) {
        return Err(Error::Invalid(format!("{} trains on ad samples only", spec.name())));
    }
    let weights = sample_weights(spec, samples, propensity)?;
    model::train(&spec.model_config(full), vocab, train_cfg, samples, weights.as_deref(), seed)
}
