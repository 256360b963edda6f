//! Experiment configuration, in-memory experiment runs, and the file-based
//! stages behind the command-line driver.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{self, UnifiedSample};
use crate::baselines::{self, Ablation, PropensitySource, VariantSpec};
use crate::error::{Error, Result};
use crate::eval::{self, GroupScheme, MetricsReport, ScoredSet, REPORT_SCHEMA_VERSION};
use crate::model::{self, CheckpointHeader, ModelConfig, TrainConfig, TrainOutcome, Vocab};
use crate::sim::{self, Catalog, CatalogConfig, ImpressionLog, NoisyOracle, Policy, SessionConfig, Source};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProxyConfig {
    /// Log-scale noise of the scoring function used by the logging policies.
    pub sigma: f64,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        Self { sigma: 0.3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub k: usize,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { k: 3, seed: 11 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub scheme: GroupScheme,
    pub propensity_source: PropensitySource,
    pub ips_cap: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            scheme: GroupScheme::Quartiles,
            propensity_source: PropensitySource::SimulatorTruth,
            ips_cap: baselines::DEFAULT_IPS_CAP,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seed of the synthetic world, the logs and the augmentation.
    pub data_seed: u64,
    /// Model seeds; each variant is trained once per seed.
    pub seeds: Vec<u64>,
    pub variants: Vec<String>,
    pub catalog: CatalogConfig,
    pub proxy: ProxyConfig,
    pub ad_log: SessionConfig,
    pub rec_log: SessionConfig,
    pub test_log: SessionConfig,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data_seed: 7,
            seeds: vec![1, 2, 3, 4, 5],
            variants: ["BASE", "DAG", "IPS", "IPS_C", "REC4AD"].map(String::from).to_vec(),
            catalog: CatalogConfig::default(),
            proxy: ProxyConfig::default(),
            ad_log: SessionConfig::default(),
            rec_log: SessionConfig {
                policy: Policy::Pctr,
                source: Source::Rec,
                n_sessions: 6_000,
                ..SessionConfig::default()
            },
            test_log: SessionConfig {
                policy: Policy::Uniform,
                source: Source::Ad,
                n_sessions: 3_000,
                ..SessionConfig::default()
            },
            augment: AugmentConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Parts of the configuration that determine the data.
#[derive(Serialize)]
struct DataIdentity<'a> {
    data_seed: u64,
    catalog: &'a CatalogConfig,
    proxy: &'a ProxyConfig,
    ad_log: &'a SessionConfig,
    rec_log: &'a SessionConfig,
    test_log: &'a SessionConfig,
    augment: &'a AugmentConfig,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Collects every problem instead of stopping at the first.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut push = |r: Result<()>| {
            if let Err(e) = r {
                problems.push(match e {
                    Error::Config(m) => m,
                    other => other.to_string(),
                });
            }
        };
        push(self.catalog.validate());
        push(self.model.validate());
        push(self.train.validate());
        if self.seeds.is_empty() {
            push(Err(Error::Config("seeds must not be empty".into())));
        }
        for v in &self.variants {
            push(v.parse::<VariantSpec>().map(|_| ()));
        }
        for (name, log, source, allowed) in [
            ("ad_log", &self.ad_log, Source::Ad, &[Policy::Ecpm, Policy::Pctr, Policy::Uniform][..]),
            ("rec_log", &self.rec_log, Source::Rec, &[Policy::Pctr, Policy::Uniform][..]),
            ("test_log", &self.test_log, Source::Ad, &[Policy::Uniform, Policy::Ecpm, Policy::Pctr][..]),
        ] {
            if log.source != source {
                push(Err(Error::Config(format!("{name} must have source {}", source.as_str()))));
            }
            if !allowed.contains(&log.policy) {
                push(Err(Error::Config(format!("{name} cannot use policy {}", log.policy))));
            }
            if log.n_sessions == 0 {
                push(Err(Error::Config(format!("{name}.n_sessions must be positive"))));
            }
            if log.slots_per_session == 0 || log.slots_per_session >= log.candidates_per_session {
                push(Err(Error::Config(format!("{name}: slots must be positive and below the candidate count"))));
            }
        }
        if self.augment.k == 0 {
            push(Err(Error::Config("augment.k must be at least 1".into())));
        }
        if !(self.proxy.sigma >= 0.0 && self.proxy.sigma.is_finite()) {
            push(Err(Error::Config("proxy.sigma must be finite and non-negative".into())));
        }
        if !(self.eval.ips_cap > 0.0) {
            push(Err(Error::Config("eval.ips_cap must be positive".into())));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn variant_specs(&self) -> Result<Vec<VariantSpec>> {
        self.variants.iter().map(|v| self.variant_spec(v)).collect()
    }

    /// Parses a variant name and applies the configured propensity source and cap.
    pub fn variant_spec(&self, name: &str) -> Result<VariantSpec> {
        let mut spec: VariantSpec = name.parse()?;
        spec.propensity_source = self.eval.propensity_source;
        if spec.cap.is_some() {
            spec.cap = Some(self.eval.ips_cap);
        }
        Ok(spec)
    }

    /// Digest of everything that determines the generated data.
    pub fn dataset_id(&self) -> String {
        let id = DataIdentity {
            data_seed: self.data_seed,
            catalog: &self.catalog,
            proxy: &self.proxy,
            ad_log: &self.ad_log,
            rec_log: &self.rec_log,
            test_log: &self.test_log,
            augment: &self.augment,
        };
        sha256_hex(&serde_json::to_vec(&id).expect("serializable"))
    }

    pub fn config_hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("serializable"))
    }

    pub fn proxy(&self) -> NoisyOracle {
        NoisyOracle {
            sigma: self.proxy.sigma,
            seed: self.data_seed ^ 0x9b0c_5a11,
        }
    }
}

/// Seeds of the individual generation steps, derived from the data seed.
fn sub_seed(data_seed: u64, step: u64) -> u64 {
    data_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(step)
}

/// Catalog and the three logs.
#[derive(Clone, Debug)]
pub struct Logs {
    pub catalog: Catalog,
    pub ad_log: ImpressionLog,
    pub rec_log: ImpressionLog,
    pub test_log: ImpressionLog,
}

pub fn generate_logs(cfg: &ExperimentConfig) -> Result<Logs> {
    cfg.validate()?;
    let catalog = sim::generate_catalog(&cfg.catalog, sub_seed(cfg.data_seed, 0))?;
    let proxy = cfg.proxy();
    let ad_log = sim::run_sessions(&catalog, &cfg.ad_log, &proxy, sub_seed(cfg.data_seed, 1))?;
    let rec_log = sim::run_sessions(&catalog, &cfg.rec_log, &proxy, sub_seed(cfg.data_seed, 2))?;
    let test_log = sim::run_sessions(&catalog, &cfg.test_log, &proxy, sub_seed(cfg.data_seed, 3))?;
    Ok(Logs {
        catalog,
        ad_log,
        rec_log,
        test_log,
    })
}

/// Model-ready training and test sets.
#[derive(Clone, Debug)]
pub struct Samples {
    /// Ad samples followed by pseudo samples, shuffled.
    pub merged: Vec<UnifiedSample>,
    /// Ad samples only, shuffled with the same seed.
    pub ads_only: Vec<UnifiedSample>,
    /// Uniform-policy ad impressions.
    pub test: Vec<UnifiedSample>,
}

pub fn build_samples(cfg: &ExperimentConfig, logs: &Logs) -> Result<Samples> {
    let index = augment::build_item_ads_index(&logs.catalog.ads);
    let retrieved = augment::retrieve_rec_samples(&logs.rec_log, &index)?;
    let pseudo = augment::map_pseudo_samples(&retrieved, &index, cfg.augment.k, cfg.augment.seed, &logs.catalog)?;
    let merged = augment::merge_training_set(&logs.ad_log, &pseudo, &logs.catalog, cfg.augment.seed)?;
    let ads_only = augment::merge_training_set(&logs.ad_log, &[], &logs.catalog, cfg.augment.seed)?;
    let test = augment::ad_samples(&logs.test_log, &logs.catalog)?;
    Ok(Samples { merged, ads_only, test })
}

/// Everything a training run needs, built in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub id: String,
    pub logs: Logs,
    pub samples: Samples,
    pub vocab: Vocab,
    /// Impression ratio per ad in the training ad log.
    pub ir: BTreeMap<usize, f64>,
    pub propensity: BTreeMap<usize, f64>,
}

impl Dataset {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let logs = generate_logs(cfg)?;
        let samples = build_samples(cfg, &logs)?;
        Self::assemble(cfg, logs, samples)
    }

    pub fn assemble(cfg: &ExperimentConfig, logs: Logs, samples: Samples) -> Result<Self> {
        let ir = sim::impression_ratio(&logs.ad_log);
        let propensity = baselines::propensity_estimate(&logs.ad_log, cfg.eval.propensity_source)?;
        Ok(Self {
            id: cfg.dataset_id(),
            vocab: Vocab::from_catalog(&logs.catalog),
            logs,
            samples,
            ir,
            propensity,
        })
    }

    pub fn training_set(&self, spec: &VariantSpec) -> &[UnifiedSample] {
        if spec.uses_rec_samples() {
            &self.samples.merged
        } else {
            &self.samples.ads_only
        }
    }
}

pub fn checkpoint_header(cfg: &ExperimentConfig, spec: &VariantSpec, vocab: &Vocab) -> CheckpointHeader {
    CheckpointHeader {
        model: spec.model_config(&cfg.model),
        vocab: vocab.clone(),
    }
}

fn settings(cfg: &ExperimentConfig, spec: &VariantSpec) -> BTreeMap<String, String> {
    let m = spec.model_config(&cfg.model);
    let mut s = BTreeMap::new();
    s.insert("use_sabn".into(), m.use_sabn.to_string());
    s.insert("use_alignment".into(), m.use_alignment.to_string());
    s.insert("use_decorrelation".into(), m.use_decorrelation.to_string());
    s.insert("source_aware_heads".into(), m.source_aware_heads.to_string());
    s.insert("confounder_projection".into(), "per_source".into());
    s.insert("batch_size".into(), cfg.train.batch_size.to_string());
    // Loss terms are sums over the batch, so their weight per sample scales with 1/B.
    s.insert(
        "lambda1_per_sample".into(),
        format!("{:e}", m.lambda1 / cfg.train.batch_size as f64),
    );
    s.insert(
        "lambda2_per_sample".into(),
        format!("{:e}", m.lambda2 / cfg.train.batch_size as f64),
    );
    if let Some(cap) = spec.cap {
        s.insert("ips_cap".into(), cap.to_string());
    }
    if matches!(spec.kind, baselines::VariantKind::Ips | baselines::VariantKind::IpsC) {
        s.insert(
            "propensity_source".into(),
            match spec.propensity_source {
                PropensitySource::SimulatorTruth => "simulator_truth",
                PropensitySource::IrEstimate => "ir_estimate",
            }
            .into(),
        );
    }
    s
}

/// Scores the test set with a trained store and assembles the report.
pub fn evaluate_store(
    cfg: &ExperimentConfig,
    data: &Dataset,
    spec: &VariantSpec,
    store: &diffcore::ParameterStore,
    curve: Vec<model::CurvePoint>,
    seed: u64,
) -> Result<MetricsReport> {
    let mcfg = spec.model_config(&cfg.model);
    let pred = model::predict_samples(store, &mcfg, &data.vocab, &data.samples.test)?;
    let set = ScoredSet::new(
        pred,
        data.samples.test.iter().map(|s| s.label).collect(),
        data.samples.test.iter().map(|s| s.ad_id).collect(),
    )?;
    Ok(MetricsReport {
        schema_version: REPORT_SCHEMA_VERSION,
        variant: spec.name(),
        seed,
        dataset_id: data.id.clone(),
        settings: settings(cfg, spec),
        overall: eval::metrics(&set),
        groups: eval::group_report(&set, &data.ir, cfg.eval.scheme)?,
        curve,
    })
}

/// Trains and evaluates one variant under one seed.
pub fn run_variant(cfg: &ExperimentConfig, data: &Dataset, spec: &VariantSpec, seed: u64) -> Result<(TrainOutcome, MetricsReport)> {
    let full = &cfg.model;
    let outcome = baselines::train_variant(spec, data.training_set(spec), &data.propensity, full, &data.vocab, &cfg.train, seed)?;
    let report = evaluate_store(cfg, data, spec, &outcome.store, outcome.curve.clone(), seed)?;
    Ok((outcome, report))
}

/// The full model and its three single-switch ablations.
pub fn ablation_specs() -> Vec<VariantSpec> {
    let mut v = vec![VariantSpec::new(baselines::VariantKind::Rec4ad)];
    v.extend([Ablation::NoSabn, Ablation::NoAlignment, Ablation::NoDecorrelation].map(VariantSpec::ablated));
    v
}

// File-based stages.

pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

/// Record of one stage run: what it read, what it wrote, and how long it took.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub tool_version: String,
    pub config_hash: String,
    pub dataset_id: String,
    /// Relative path to SHA-256 digest.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub timings_ms: BTreeMap<String, u128>,
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

fn rel(out_dir: &Path, p: &Path) -> String {
    p.strip_prefix(out_dir).unwrap_or(p).display().to_string()
}

fn manifest_path(out_dir: &Path, stage: &str) -> PathBuf {
    out_dir.join("manifests").join(format!("{stage}.json"))
}

struct StageRun<'a> {
    out_dir: &'a Path,
    cfg: &'a ExperimentConfig,
    stage: String,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    timings_ms: BTreeMap<String, u128>,
}

impl<'a> StageRun<'a> {
    fn new(out_dir: &'a Path, cfg: &'a ExperimentConfig, stage: impl Into<String>) -> Result<Self> {
        if !out_dir.is_dir() {
            return Err(Error::Config(format!("output directory {} does not exist", out_dir.display())));
        }
        fs::create_dir_all(out_dir.join("manifests"))?;
        Ok(Self {
            out_dir,
            cfg,
            stage: stage.into(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            timings_ms: BTreeMap::new(),
        })
    }

    /// Checks `paths` against the manifest of the stage that wrote them and
    /// records them as inputs.
    fn require(&mut self, upstream: &str, paths: &[PathBuf]) -> Result<()> {
        let mp = manifest_path(self.out_dir, upstream);
        let text = fs::read_to_string(&mp)
            .map_err(|_| Error::Stale(format!("missing manifest {}; run the {upstream} stage first", mp.display())))?;
        let m: RunManifest = serde_json::from_str(&text)?;
        if m.dataset_id != self.cfg.dataset_id() {
            return Err(Error::Stale(format!(
                "{upstream} outputs were produced for a different data configuration; rerun {upstream}"
            )));
        }
        for p in paths {
            let key = rel(self.out_dir, p);
            let want = m
                .outputs
                .get(&key)
                .ok_or_else(|| Error::Stale(format!("{key} is not an output of {upstream}")))?;
            let have = file_digest(p).map_err(|_| Error::Stale(format!("{key} is missing")))?;
            if &have != want {
                return Err(Error::Stale(format!("{key} changed since {upstream} wrote it")));
            }
            self.inputs.insert(key, have);
        }
        Ok(())
    }

    /// Like [`StageRun::require`], accepting the first upstream stage whose
    /// manifest lists all of `paths`.
    fn require_any(&mut self, upstreams: &[String], paths: &[PathBuf]) -> Result<()> {
        let mut last = None;
        for u in upstreams {
            match self.require(u, paths) {
                Ok(()) => return Ok(()),
                Err(e) => last = Some(e),
            }
        }
        Err(last.unwrap_or_else(|| Error::Stale("no upstream stage".into())))
    }

    fn wrote(&mut self, paths: &[PathBuf]) -> Result<()> {
        for p in paths {
            self.outputs.insert(rel(self.out_dir, p), file_digest(p)?);
        }
        Ok(())
    }

    fn time<T>(&mut self, label: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f()?;
        self.timings_ms.insert(label.to_string(), t.elapsed().as_millis());
        Ok(out)
    }

    fn finish(self) -> Result<RunManifest> {
        let m = RunManifest {
            stage: self.stage,
            tool_version: TOOL_VERSION.to_string(),
            config_hash: self.cfg.config_hash(),
            dataset_id: self.cfg.dataset_id(),
            inputs: self.inputs,
            outputs: self.outputs,
            timings_ms: self.timings_ms,
        };
        fs::write(manifest_path(self.out_dir, &m.stage), serde_json::to_string_pretty(&m)?)?;
        Ok(m)
    }
}

fn catalog_path(out: &Path) -> PathBuf {
    out.join("catalog.json")
}

fn sample_paths(out: &Path) -> [PathBuf; 3] {
    [
        out.join("samples").join("train_merged.tsv"),
        out.join("samples").join("train_ads.tsv"),
        out.join("samples").join("test.tsv"),
    ]
}

fn log_files(out: &Path) -> Vec<PathBuf> {
    ["ad", "rec", "test"].iter().flat_map(|s| sim::log_paths(&out.join("logs"), s)).collect()
}

fn run_stem(spec: &VariantSpec, seed: u64) -> String {
    format!("{}-s{seed}", spec.name())
}

/// Writes the catalog and the ad, rec and uniform test logs.
pub fn cmd_generate(cfg: &ExperimentConfig, out: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    let mut run = StageRun::new(out, cfg, "generate")?;
    let logs = run.time("simulate", || generate_logs(cfg))?;
    sim::write_catalog(&logs.catalog, &catalog_path(out))?;
    let mut files = vec![catalog_path(out)];
    let logs_dir = out.join("logs");
    fs::create_dir_all(&logs_dir)?;
    files.extend(sim::write_log(&logs.ad_log, &logs_dir, "ad")?);
    files.extend(sim::write_log(&logs.rec_log, &logs_dir, "rec")?);
    files.extend(sim::write_log(&logs.test_log, &logs_dir, "test")?);
    run.wrote(&files)?;
    run.finish()
}

fn read_logs(out: &Path) -> Result<Logs> {
    Ok(Logs {
        catalog: sim::read_catalog(&catalog_path(out))?,
        ad_log: sim::read_log(&out.join("logs"), "ad")?,
        rec_log: sim::read_log(&out.join("logs"), "rec")?,
        test_log: sim::read_log(&out.join("logs"), "test")?,
    })
}

/// Builds the merged training set, the ads-only training set and the test set.
pub fn cmd_augment(cfg: &ExperimentConfig, out: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    let mut run = StageRun::new(out, cfg, "augment")?;
    let mut inputs = vec![catalog_path(out)];
    inputs.extend(log_files(out));
    run.require("generate", &inputs)?;
    let logs = read_logs(out)?;
    let samples = run.time("augment", || build_samples(cfg, &logs))?;
    let [merged, ads, test] = sample_paths(out);
    fs::create_dir_all(out.join("samples"))?;
    augment::write_samples(&samples.merged, &merged)?;
    augment::write_samples(&samples.ads_only, &ads)?;
    augment::write_samples(&samples.test, &test)?;
    run.wrote(&[merged, ads, test])?;
    run.finish()
}

fn load_dataset(cfg: &ExperimentConfig, run: &mut StageRun<'_>, out: &Path) -> Result<Dataset> {
    let mut gen_inputs = vec![catalog_path(out)];
    gen_inputs.extend(log_files(out));
    run.require("generate", &gen_inputs)?;
    run.require("augment", &sample_paths(out))?;
    let logs = read_logs(out)?;
    let [merged, ads, test] = sample_paths(out);
    let samples = Samples {
        merged: augment::read_samples(&merged)?,
        ads_only: augment::read_samples(&ads)?,
        test: augment::read_samples(&test)?,
    };
    Dataset::assemble(cfg, logs, samples)
}

fn train_and_write(cfg: &ExperimentConfig, run: &mut StageRun<'_>, data: &Dataset, spec: &VariantSpec, seed: u64) -> Result<()> {
    let out = run.out_dir;
    fs::create_dir_all(out.join("checkpoints"))?;
    fs::create_dir_all(out.join("curves"))?;
    let stem = run_stem(spec, seed);
    let outcome = run.time(&format!("train {stem}"), || {
        baselines::train_variant(spec, data.training_set(spec), &data.propensity, &cfg.model, &data.vocab, &cfg.train, seed)
    })?;
    let ckpt = out.join("checkpoints").join(format!("{stem}.ckpt"));
    model::save_checkpoint(&outcome.store, &checkpoint_header(cfg, spec, &data.vocab), &ckpt)?;
    let curve_csv = out.join("curves").join(format!("{stem}.csv"));
    fs::write(&curve_csv, eval::curve_csv(&outcome.curve))?;
    let curve_json = out.join("curves").join(format!("{stem}.json"));
    fs::write(&curve_json, serde_json::to_string(&outcome.curve)?)?;
    run.wrote(&[ckpt, curve_csv, curve_json])
}

/// Trains `variant` (or every configured variant) for each configured seed.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path, variant: Option<&str>) -> Result<RunManifest> {
    cfg.validate()?;
    let specs = match variant {
        Some(v) => vec![cfg.variant_spec(v)?],
        None => cfg.variant_specs()?,
    };
    let stage = match variant {
        Some(v) => format!("train-{v}"),
        None => "train".to_string(),
    };
    let mut run = StageRun::new(out, cfg, stage)?;
    let data = load_dataset(cfg, &mut run, out)?;
    for spec in &specs {
        for &seed in &cfg.seeds {
            train_and_write(cfg, &mut run, &data, spec, seed)?;
        }
    }
    run.finish()
}

fn evaluate_and_write(cfg: &ExperimentConfig, run: &mut StageRun<'_>, data: &Dataset, spec: &VariantSpec, seed: u64) -> Result<PathBuf> {
    let out = run.out_dir;
    let stem = run_stem(spec, seed);
    let ckpt = out.join("checkpoints").join(format!("{stem}.ckpt"));
    let curve_json = out.join("curves").join(format!("{stem}.json"));
    let upstreams = [format!("train-{}", spec.name()), "train".to_string(), "ablate".to_string()];
    run.require_any(&upstreams, &[ckpt.clone(), curve_json.clone()])?;
    let (store, _) = model::load_checkpoint(&ckpt, Some(&checkpoint_header(cfg, spec, &data.vocab)))?;
    let curve: Vec<model::CurvePoint> = serde_json::from_str(&fs::read_to_string(&curve_json)?)?;
    let report = evaluate_store(cfg, data, spec, &store, curve, seed)?;
    fs::create_dir_all(out.join("reports"))?;
    let path = out.join("reports").join(format!("{stem}.json"));
    fs::write(&path, serde_json::to_string_pretty(&report)?)?;
    run.wrote(std::slice::from_ref(&path))?;
    Ok(path)
}

/// Evaluates trained checkpoints on the uniform test set.
pub fn cmd_evaluate(cfg: &ExperimentConfig, out: &Path, variant: Option<&str>) -> Result<RunManifest> {
    cfg.validate()?;
    let specs = match variant {
        Some(v) => vec![cfg.variant_spec(v)?],
        None => cfg.variant_specs()?,
    };
    let stage = match variant {
        Some(v) => format!("evaluate-{v}"),
        None => "evaluate".to_string(),
    };
    let mut run = StageRun::new(out, cfg, stage)?;
    let data = load_dataset(cfg, &mut run, out)?;
    for spec in &specs {
        for &seed in &cfg.seeds {
            evaluate_and_write(cfg, &mut run, &data, spec, seed)?;
        }
    }
    run.finish()
}

/// Trains and evaluates the full model and its three ablations on one dataset.
pub fn cmd_ablate(cfg: &ExperimentConfig, out: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    let mut run = StageRun::new(out, cfg, "ablate")?;
    let data = load_dataset(cfg, &mut run, out)?;
    let mut paths = Vec::new();
    for spec in ablation_specs() {
        for &seed in &cfg.seeds {
            train_and_write(cfg, &mut run, &data, &spec, seed)?;
        }
    }
    // Evaluate against the checkpoints this stage just wrote.
    let written = run.outputs.clone();
    for spec in ablation_specs() {
        for &seed in &cfg.seeds {
            let stem = run_stem(&spec, seed);
            let ckpt = out.join("checkpoints").join(format!("{stem}.ckpt"));
            let (store, _) = model::load_checkpoint(&ckpt, Some(&checkpoint_header(cfg, &spec, &data.vocab)))?;
            if written.get(&rel(out, &ckpt)) != Some(&file_digest(&ckpt)?) {
                return Err(Error::Stale(format!("{} changed during the stage", ckpt.display())));
            }
            let curve: Vec<model::CurvePoint> =
                serde_json::from_str(&fs::read_to_string(out.join("curves").join(format!("{stem}.json")))?)?;
            let report = evaluate_store(cfg, &data, &spec, &store, curve, seed)?;
            fs::create_dir_all(out.join("reports"))?;
            let path = out.join("reports").join(format!("{stem}.json"));
            fs::write(&path, serde_json::to_string_pretty(&report)?)?;
            paths.push(path);
        }
    }
    run.wrote(&paths)?;
    run.finish()
}

/// Reads every report under `out/reports` and writes the comparison.
pub fn cmd_report(cfg: &ExperimentConfig, out: &Path) -> Result<(RunManifest, String)> {
    let mut run = StageRun::new(out, cfg, "report")?;
    let dir = out.join("reports");
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|_| Error::Stale(format!("no reports under {}; run evaluate first", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut reports = Vec::new();
    for p in &paths {
        let r: MetricsReport = serde_json::from_str(&fs::read_to_string(p)?)?;
        if r.dataset_id != cfg.dataset_id() {
            return Err(Error::Stale(format!(
                "{} was produced from a different dataset than the current configuration",
                p.display()
            )));
        }
        run.inputs.insert(rel(out, p), file_digest(p)?);
        reports.push(r);
    }
    let (json, table) = eval::render_report(&reports)?;
    let jp = out.join("comparison.json");
    let tp = out.join("comparison.txt");
    fs::write(&jp, &json)?;
    fs::write(&tp, &table)?;
    run.wrote(&[jp, tp])?;
    Ok((run.finish()?, table))
}
