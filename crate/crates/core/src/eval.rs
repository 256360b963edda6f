//! Ranking and calibration metrics, impression-ratio group breakdowns, and
//! the comparison report across variants and seeds.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::model::CurvePoint;
use crate::sim::ir_group_partition;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const ECE_BUCKETS: usize = 100;

/// Predictions with their labels and the ad each row was shown.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoredSet {
    pub pred: Vec<f64>,
    pub label: Vec<u8>,
    pub ad_id: Vec<usize>,
}

impl ScoredSet {
    pub fn new(pred: Vec<f64>, label: Vec<u8>, ad_id: Vec<usize>) -> Result<Self> {
        if pred.len() != label.len() || pred.len() != ad_id.len() {
            return Err(Error::Invalid("scored set columns differ in length".into()));
        }
        if let Some(p) = pred.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Invalid(format!("prediction {p} outside [0, 1]")));
        }
        if let Some(y) = label.iter().find(|y| **y > 1) {
            return Err(Error::Invalid(format!("label {y} outside {{0, 1}}")));
        }
        Ok(Self { pred, label, ad_id })
    }

    pub fn len(&self) -> usize {
        self.pred.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pred.is_empty()
    }

    fn subset(&self, rows: &[usize]) -> ScoredSet {
        ScoredSet {
            pred: rows.iter().map(|&r| self.pred[r]).collect(),
            label: rows.iter().map(|&r| self.label[r]).collect(),
            ad_id: rows.iter().map(|&r| self.ad_id[r]).collect(),
        }
    }
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half, via the rank-sum statistic. `None` for single-class
/// input.
pub fn auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "auc: scores and labels differ in length");
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Doubled ranks keep tie averages integral.
    let mut pos_rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg2 = (i + 1 + j + 1) as u128;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                pos_rank_sum2 += avg2;
            }
        }
        i = j + 1;
    }
    let np = n_pos as u128;
    let u2 = pos_rank_sum2 - np * (np + 1);
    Some(u2 as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// Bucket of `p` among `k` equal-width buckets over [0, 1], the last one
/// closed on the right.
pub fn ece_bucket(p: f64, k: usize) -> usize {
    let kf = k as f64;
    let mut b = ((p * kf).floor() as usize).min(k - 1);
    if b > 0 && p < b as f64 / kf {
        b -= 1;
    } else if b + 1 < k && p >= (b + 1) as f64 / kf {
        b += 1;
    }
    b
}

/// `(1/|D|) Σ_k |Σ_{i∈B_k} (y_i - ŷ_i)|` over `k` equal-width buckets.
pub fn ece(pred: &[f64], labels: &[u8], k: usize) -> f64 {
    assert_eq!(pred.len(), labels.len(), "ece: predictions and labels differ in length");
    assert!(k > 0, "ece: need at least one bucket");
    if pred.is_empty() {
        return 0.0;
    }
    let mut sums = vec![0.0; k];
    for (&p, &y) in pred.iter().zip(labels) {
        sums[ece_bucket(p, k)] += f64::from(y) - p;
    }
    sums.iter().map(|s| s.abs()).sum::<f64>() / pred.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub positives: usize,
    pub auc: Option<f64>,
    /// Absent for an empty set.
    pub ece: Option<f64>,
}

pub fn metrics(set: &ScoredSet) -> Metrics {
    Metrics {
        n: set.len(),
        positives: set.label.iter().filter(|&&y| y == 1).count(),
        auc: auc(&set.pred, &set.label),
        ece: (!set.is_empty()).then(|| ece(&set.pred, &set.label, ECE_BUCKETS)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupScheme {
    /// Four IR quartiles labelled `G_top`, `G_q2`, `G_q3`, `G_bottom`.
    Quartiles,
    /// `n` equal groups labelled `G1` (highest IR) to `Gn`.
    EqualGroups(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub name: String,
    pub n_ads: usize,
    pub metrics: Metrics,
}

/// Metrics within each IR group of ads. Groups without samples report absent
/// AUC and ECE.
pub fn group_report(set: &ScoredSet, ir: &BTreeMap<usize, f64>, scheme: GroupScheme) -> Result<Vec<GroupMetrics>> {
    if let Some(a) = set.ad_id.iter().find(|a| !ir.contains_key(a)) {
        return Err(Error::Invalid(format!("ad {a} has no impression ratio")));
    }
    let (groups, names): (Vec<Vec<usize>>, Vec<String>) = match scheme {
        GroupScheme::Quartiles => (
            ir_group_partition(ir, 4)?,
            ["G_top", "G_q2", "G_q3", "G_bottom"].map(String::from).to_vec(),
        ),
        GroupScheme::EqualGroups(0) => return Err(Error::Config("need at least one group".into())),
        GroupScheme::EqualGroups(1) => (vec![ir.keys().copied().collect()], vec!["G1".to_string()]),
        GroupScheme::EqualGroups(n) => (ir_group_partition(ir, n)?, (1..=n).map(|g| format!("G{g}")).collect()),
    };
    let mut group_of = BTreeMap::new();
    for (g, ads) in groups.iter().enumerate() {
        for &a in ads {
            group_of.insert(a, g);
        }
    }
    let mut rows = vec![Vec::new(); groups.len()];
    for (r, a) in set.ad_id.iter().enumerate() {
        rows[group_of[a]].push(r);
    }
    Ok(groups
        .iter()
        .zip(names)
        .zip(rows)
        .map(|((ads, name), rows)| GroupMetrics {
            name,
            n_ads: ads.len(),
            metrics: metrics(&set.subset(&rows)),
        })
        .collect())
}

/// Evaluation of one trained variant under one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub variant: String,
    pub seed: u64,
    /// Digest of the training and test data the run consumed.
    pub dataset_id: String,
    /// Switch states and other settings worth keeping next to the numbers.
    pub settings: BTreeMap<String, String>,
    pub overall: Metrics,
    pub groups: Vec<GroupMetrics>,
    pub curve: Vec<CurvePoint>,
}

/// Two-sided paired t-test; `None` with fewer than two pairs.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Option<PairedTest> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    let (t, p) = if sd == 0.0 {
        if mean == 0.0 {
            (0.0, 1.0)
        } else {
            (f64::INFINITY.copysign(mean), 0.0)
        }
    } else {
        let t = mean / (sd / n.sqrt());
        let dist = StudentsT::new(0.0, 1.0, n - 1.0).expect("degrees of freedom");
        (t, 2.0 * (1.0 - dist.cdf(t.abs())))
    };
    Some(PairedTest {
        mean_diff: mean,
        t,
        p_value: p,
        n: a.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub mean_diff: f64,
    pub t: f64,
    pub p_value: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

fn summarize(v: &[f64]) -> Summary {
    if v.is_empty() {
        return Summary { mean: None, std: None };
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.len() > 1).then(|| (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    Summary { mean: Some(mean), std }
}

/// One row of the comparison table: a variant on one slice of the test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub slice: String,
    pub variant: String,
    pub seeds: Vec<u64>,
    pub auc: Summary,
    /// Mean AUC minus the BASE mean AUC.
    pub auc_impv: Option<f64>,
    pub ece: Summary,
    /// BASE mean ECE minus this variant's mean ECE (positive is better).
    pub ece_impv: Option<f64>,
    /// Paired over seeds against BASE.
    pub auc_test: Option<PairedTest>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub schema_version: u32,
    pub dataset_id: String,
    pub rows: Vec<ComparisonRow>,
}

pub const BASE_VARIANT: &str = "BASE";

fn slice_metrics<'a>(r: &'a MetricsReport, slice: &str) -> Option<&'a Metrics> {
    if slice == "overall" {
        Some(&r.overall)
    } else {
        r.groups.iter().find(|g| g.name == slice).map(|g| &g.metrics)
    }
}

/// Aggregates reports over seeds per variant and compares every variant with
/// BASE. All reports must come from the same dataset.
pub fn compare_reports(reports: &[MetricsReport]) -> Result<Comparison> {
    let first = reports.first().ok_or_else(|| Error::Invalid("no reports to compare".into()))?;
    if let Some(r) = reports.iter().find(|r| r.dataset_id != first.dataset_id) {
        return Err(Error::Stale(format!(
            "report for {} seed {} was produced from a different dataset",
            r.variant, r.seed
        )));
    }
    if !reports.iter().any(|r| r.variant == BASE_VARIANT) {
        return Err(Error::Invalid("a BASE report is required to compute improvements".into()));
    }
    let mut variants: Vec<String> = Vec::new();
    for r in reports {
        if !variants.contains(&r.variant) {
            variants.push(r.variant.clone());
        }
    }
    let mut slices = vec!["overall".to_string()];
    for g in &first.groups {
        slices.push(g.name.clone());
    }

    let by_variant = |v: &str| -> BTreeMap<u64, &MetricsReport> { reports.iter().filter(|r| r.variant == v).map(|r| (r.seed, r)).collect() };
    let base = by_variant(BASE_VARIANT);
    let mut rows = Vec::new();
    for slice in &slices {
        let base_auc: Vec<f64> = base.values().filter_map(|r| slice_metrics(r, slice)?.auc).collect();
        let base_ece: Vec<f64> = base.values().filter_map(|r| slice_metrics(r, slice)?.ece).collect();
        let base_auc_mean = summarize(&base_auc).mean;
        let base_ece_mean = summarize(&base_ece).mean;
        for v in &variants {
            let runs = by_variant(v);
            let aucs: Vec<f64> = runs.values().filter_map(|r| slice_metrics(r, slice)?.auc).collect();
            let eces: Vec<f64> = runs.values().filter_map(|r| slice_metrics(r, slice)?.ece).collect();
            let auc_s = summarize(&aucs);
            let ece_s = summarize(&eces);
            let common: BTreeSet<u64> = runs.keys().filter(|s| base.contains_key(s)).copied().collect();
            let pairs: Vec<(f64, f64)> = common
                .iter()
                .filter_map(|s| Some((slice_metrics(runs[s], slice)?.auc?, slice_metrics(base[s], slice)?.auc?)))
                .collect();
            let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            rows.push(ComparisonRow {
                slice: slice.clone(),
                variant: v.clone(),
                seeds: runs.keys().copied().collect(),
                auc_impv: auc_s.mean.zip(base_auc_mean).map(|(m, b)| m - b),
                ece_impv: ece_s.mean.zip(base_ece_mean).map(|(m, b)| b - m),
                auc: auc_s,
                ece: ece_s,
                auc_test: if v == BASE_VARIANT { None } else { paired_t_test(&a, &b) },
            });
        }
    }
    Ok(Comparison {
        schema_version: REPORT_SCHEMA_VERSION,
        dataset_id: first.dataset_id.clone(),
        rows,
    })
}

fn fmt_opt(v: Option<f64>, prec: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.prec$}"))
}

fn fmt_signed(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:+.4}"))
}

fn fmt_summary(s: &Summary) -> String {
    match (s.mean, s.std) {
        (Some(m), Some(sd)) => format!("{m:.4} ± {sd:.4}"),
        (Some(m), None) => format!("{m:.4}"),
        _ => "-".to_string(),
    }
}

/// Plain-text table of a comparison.
pub fn render_table(c: &Comparison) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<10} {:<24} {:>18} {:>8} {:>18} {:>8} {:>9}",
        "slice", "variant", "AUC", "Impv.", "ECE", "Impv.", "p"
    );
    for r in &c.rows {
        let _ = writeln!(
            out,
            "{:<10} {:<24} {:>18} {:>8} {:>18} {:>8} {:>9}",
            r.slice,
            r.variant,
            fmt_summary(&r.auc),
            fmt_signed(r.auc_impv),
            fmt_summary(&r.ece),
            fmt_signed(r.ece_impv),
            fmt_opt(r.auc_test.as_ref().map(|t| t.p_value), 4)
        );
    }
    out
}

/// Machine-readable comparison (JSON) and its text table.
pub fn render_report(reports: &[MetricsReport]) -> Result<(String, String)> {
    let c = compare_reports(reports)?;
    Ok((serde_json::to_string_pretty(&c)?, render_table(&c)))
}

/// Training curve as CSV: `epoch,step,l_c,l_a,l_d,adversary_auc,cross_correlation`.
pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("epoch,step,l_c,l_a,l_d,adversary_auc,cross_correlation\n");
    let f = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    for p in curve {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            p.epoch,
            p.step,
            f(p.l_c),
            f(p.l_a),
            f(p.l_d),
            f(p.adversary_auc),
            f(p.cross_correlation)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_reference_cases() {
        assert_eq!(auc(&[0.9, 0.1], &[1, 0]), Some(1.0));
        assert_eq!(auc(&[0.1, 0.9], &[1, 0]), Some(0.0));
        assert_eq!(auc(&[0.5, 0.5], &[1, 0]), Some(0.5));
        assert_eq!(auc(&[0.5, 0.7], &[1, 1]), None);
    }

    #[test]
    fn ece_reference_cases() {
        assert!((ece(&[0.2, 0.2], &[1, 0], 100) - 0.3).abs() < 1e-15);
        assert_eq!(ece(&[0.5, 0.5], &[1, 0], 100), 0.0);
        assert_eq!(ece(&[1.0, 0.0, 1.0], &[1, 0, 1], 100), 0.0);
        assert_eq!(ece_bucket(1.0, 100), 99);
        assert_eq!(ece_bucket(0.0, 100), 0);
        assert_eq!(ece_bucket(0.07, 100), 7);
    }

    #[test]
    fn paired_test_detects_shift() {
        let a = [0.70, 0.71, 0.705, 0.702, 0.708];
        let b = [0.69, 0.70, 0.696, 0.693, 0.699];
        let t = paired_t_test(&a, &b).unwrap();
        assert!(t.mean_diff > 0.0 && t.p_value < 0.01);
        let same = paired_t_test(&a, &a).unwrap();
        assert_eq!(same.p_value, 1.0);
        assert!(paired_t_test(&a[..1], &b[..1]).is_none());
    }
}
