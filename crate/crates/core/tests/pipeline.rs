mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;

use common::{reduction_identities, small_experiment};
use rec4ad::baselines::{ips_weight, propensity_estimate, sample_weights, train_variant, PropensitySource, VariantKind, VariantSpec};
use rec4ad::error::Error;
use rec4ad::pipeline::{cmd_ablate, cmd_augment, cmd_evaluate, cmd_generate, cmd_report, cmd_train, Dataset, ExperimentConfig};
use rec4ad::sim::{Context, ImpressionLog, ImpressionRecord, Policy, SessionCandidates, Source};

fn one_seed() -> ExperimentConfig {
    ExperimentConfig {
        seeds: vec![1],
        ..small_experiment()
    }
}

#[test]
fn reductions_to_base_are_exact() {
    let cfg = one_seed();
    let data = Dataset::build(&cfg).unwrap();
    for (name, ok) in reduction_identities(&cfg, &data) {
        assert!(ok, "{name}");
    }
}

#[test]
fn ads_only_variants_refuse_pseudo_samples() {
    let cfg = one_seed();
    let data = Dataset::build(&cfg).unwrap();
    let spec = VariantSpec::new(VariantKind::Base);
    let r = train_variant(&spec, &data.samples.merged, &data.propensity, &cfg.model, &data.vocab, &cfg.train, 1);
    assert!(matches!(r, Err(Error::Invalid(_))));
}

#[test]
fn capped_weights_stay_bounded() {
    let cfg = small_experiment();
    let data = Dataset::build(&cfg).unwrap();
    let mut spec = VariantSpec::new(VariantKind::IpsC);
    spec.cap = Some(4.0);
    let w = sample_weights(&spec, &data.samples.ads_only, &data.propensity).unwrap().unwrap();
    assert_eq!(w.len(), data.samples.ads_only.len());
    assert!(w.iter().all(|&w| (1.0..=4.0).contains(&w)));
    let raw = sample_weights(&VariantSpec::new(VariantKind::Ips), &data.samples.ads_only, &data.propensity).unwrap().unwrap();
    assert!(raw.iter().sum::<f64>().is_finite());
    for (r, c) in raw.iter().zip(&w) {
        assert_eq!(*c, r.min(4.0));
    }
    assert_eq!(sample_weights(&VariantSpec::new(VariantKind::Dag), &data.samples.ads_only, &data.propensity).unwrap(), None);
    assert!(sample_weights(&spec, &data.samples.ads_only, &BTreeMap::new()).is_err());
    assert_eq!(ips_weight(0.5, Some(1.0)).unwrap(), 1.0);
}

fn log_with_candidacies() -> ImpressionLog {
    // Ad 3 is a candidate in four sessions and shown in two.
    let ctx = Context { time_bucket: 0, device: 0 };
    let candidate_sets = (0..4)
        .map(|s| SessionCandidates {
            session_id: s,
            user_id: 0,
            context: ctx,
            candidates: vec![3, 5],
        })
        .collect();
    let records = [(0, 3), (1, 3), (2, 5), (3, 5)]
        .into_iter()
        .map(|(s, a)| ImpressionRecord {
            session_id: s,
            user_id: 0,
            subject_id: a,
            context: ctx,
            label: 0,
            source: Source::Ad,
        })
        .collect();
    ImpressionLog {
        source: Source::Ad,
        policy: Policy::Ecpm,
        records,
        candidate_sets,
        display_propensity: BTreeMap::new(),
    }
}

#[test]
fn propensity_from_impression_ratio() {
    let log = log_with_candidacies();
    let p = propensity_estimate(&log, PropensitySource::IrEstimate).unwrap();
    assert_eq!(p[&3], 0.5);
    assert_eq!(p[&5], 0.5);
    assert!(propensity_estimate(&log, PropensitySource::SimulatorTruth).is_err());
    let mut rec = log;
    rec.source = Source::Rec;
    assert!(propensity_estimate(&rec, PropensitySource::IrEstimate).is_err());
}

#[test]
fn uniform_logging_has_flat_propensity() {
    let mut cfg = small_experiment();
    cfg.ad_log.policy = Policy::Uniform;
    cfg.ad_log.shadow_factor = 20;
    let logs = rec4ad::pipeline::generate_logs(&cfg).unwrap();
    let p = propensity_estimate(&logs.ad_log, PropensitySource::SimulatorTruth).unwrap();
    let want = cfg.ad_log.slots_per_session as f64 / cfg.ad_log.candidates_per_session as f64;
    let mean = p.values().sum::<f64>() / p.len() as f64;
    assert!((mean - want).abs() < 0.01, "{mean}");
    assert!(p.values().all(|v| (v - want).abs() < 0.12));
}

fn staged(cfg: &ExperimentConfig, dir: &Path) {
    cmd_generate(cfg, dir).unwrap();
    cmd_augment(cfg, dir).unwrap();
}

#[test]
fn stages_refuse_missing_or_changed_inputs() {
    let cfg = one_seed();
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(cmd_augment(&cfg, dir.path()), Err(Error::Stale(_))));
    assert!(matches!(cmd_generate(&cfg, &dir.path().join("absent")), Err(Error::Config(_))));

    staged(&cfg, dir.path());
    let mut other = cfg.clone();
    other.data_seed += 1;
    let e = cmd_train(&other, dir.path(), Some("BASE")).unwrap_err();
    assert_eq!(e.exit_code(), 3, "{e}");

    assert!(matches!(cmd_evaluate(&cfg, dir.path(), Some("BASE")), Err(Error::Stale(_))));
    cmd_train(&cfg, dir.path(), Some("BASE")).unwrap();
    let ckpt = dir.path().join("checkpoints/BASE-s1.ckpt");
    let good = fs::read(&ckpt).unwrap();
    let mut bad = good.clone();
    let last = bad.len() - 1;
    bad[last] ^= 1;
    fs::write(&ckpt, &bad).unwrap();
    assert!(matches!(cmd_evaluate(&cfg, dir.path(), Some("BASE")), Err(Error::Stale(_))));
    fs::write(&ckpt, &good).unwrap();
    cmd_evaluate(&cfg, dir.path(), Some("BASE")).unwrap();

    // A model change keeps the data but breaks the checkpoint header.
    let mut wider = cfg.clone();
    wider.model.embedding_dim += 1;
    assert!(matches!(cmd_evaluate(&wider, dir.path(), Some("BASE")), Err(Error::Config(_))));

    fs::write(dir.path().join("samples/train_ads.tsv"), "tampered\n").unwrap();
    assert!(matches!(cmd_train(&cfg, dir.path(), Some("BASE")), Err(Error::Stale(_))));
}

#[test]
fn report_rejects_foreign_reports() {
    let cfg = one_seed();
    let dir = tempfile::tempdir().unwrap();
    staged(&cfg, dir.path());
    cmd_train(&cfg, dir.path(), None).unwrap();
    cmd_evaluate(&cfg, dir.path(), None).unwrap();
    let (_, table) = cmd_report(&cfg, dir.path()).unwrap();
    assert!(table.lines().any(|l| l.starts_with("overall") && l.contains("REC4AD")));
    assert!(table.lines().any(|l| l.starts_with("G_bottom")));
    let mut other = cfg.clone();
    other.data_seed += 1;
    assert!(matches!(cmd_report(&other, dir.path()), Err(Error::Stale(_))));
}

#[test]
fn ablate_trains_the_four_models() {
    let cfg = one_seed();
    let dir = tempfile::tempdir().unwrap();
    staged(&cfg, dir.path());
    let m = cmd_ablate(&cfg, dir.path()).unwrap();
    let reports: Vec<&String> = m.outputs.keys().filter(|k| k.starts_with("reports/")).collect();
    let ckpts = m.outputs.keys().filter(|k| k.ends_with(".ckpt")).count();
    assert_eq!((reports.len(), ckpts), (4, 4));
    for name in ["REC4AD-s1", "REC4AD-no_sabn-s1", "REC4AD-no_alignment-s1", "REC4AD-no_decorrelation-s1"] {
        assert!(m.outputs.contains_key(&format!("reports/{name}.json")), "{name}");
    }
    let r: rec4ad::eval::MetricsReport =
        serde_json::from_str(&fs::read_to_string(dir.path().join("reports/REC4AD-no_sabn-s1.json")).unwrap()).unwrap();
    assert_eq!(r.settings["use_sabn"], "false");
    assert_eq!(r.settings["use_alignment"], "true");
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = small_experiment();
    let text = cfg.to_toml().unwrap();
    assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    assert!(ExperimentConfig::from_toml("no_such_key = 1").is_err());
    let mut bad = cfg;
    bad.seeds.clear();
    bad.variants.push("NOPE".into());
    let msg = bad.validate().unwrap_err().to_string();
    assert!(msg.contains("seeds") && msg.contains("NOPE"), "{msg}");
}

fn bin(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_rec4ad")).args(args).output().unwrap()
}

#[test]
fn driver_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg_path = dir.path().join("exp.toml");
    fs::write(&cfg_path, one_seed().to_toml().unwrap()).unwrap();
    let cfg = cfg_path.to_str().unwrap();

    assert_eq!(bin(&["generate", "--config", cfg, "--out-dir", &format!("{out}/absent")]).status.code(), Some(2));
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "seeds = []\n").unwrap();
    assert_eq!(bin(&["generate", "--config", bad.to_str().unwrap(), "--out-dir", out]).status.code(), Some(2));
    assert_eq!(bin(&["train", "--config", cfg, "--out-dir", out]).status.code(), Some(3));
    assert_eq!(bin(&["generate", "--config", cfg, "--out-dir", out, "--variant", "BASE"]).status.code(), Some(2));
    for stage in ["generate", "augment"] {
        let o = bin(&[stage, "--config", cfg, "--out-dir", out, "--threads", "1"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert!(dir.path().join("manifests/augment.json").exists());
    assert_eq!(bin(&["train", "--config", cfg, "--out-dir", out, "--variant", "SUPER"]).status.code(), Some(2));
}
