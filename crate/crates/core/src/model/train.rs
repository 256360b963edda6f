//! Mini-batch training loop, inference, checkpoints and representation export.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use diffcore::{AdamConfig, ParameterStore, Tape, Tensor};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::UnifiedSample;
use crate::error::{Error, Result};
use crate::eval::auc;
use crate::model::batch::Batch;
use crate::model::config::{CheckpointHeader, ModelConfig, Vocab};
use crate::model::network::{self, Mode};
use crate::sim::Source;

/// Learning-rate schedule over all optimizer steps of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from `lr` down to zero.
    Cosine,
}

impl LrSchedule {
    /// Rate for step `t` (0-based) of `total`.
    pub fn rate(self, lr: f64, t: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => lr,
            LrSchedule::Cosine => 0.5 * lr * (1.0 + (std::f64::consts::PI * t as f64 / total.max(1) as f64).cos()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial learning rate.
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    /// Fraction of each epoch's shuffled data held out for diagnostics.
    pub holdout_fraction: f64,
    /// Diagnostic evaluations per epoch, besides the one before training.
    pub curve_points_per_epoch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 512,
            lr: 1e-3,
            lr_schedule: LrSchedule::Cosine,
            holdout_fraction: 0.05,
            curve_points_per_epoch: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.epochs == 0 {
            problems.push("epochs must be positive");
        }
        if self.batch_size < 2 {
            problems.push("batch_size must be at least 2");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            problems.push("lr must be positive");
        }
        if !(0.0..0.5).contains(&self.holdout_fraction) {
            problems.push("holdout_fraction must lie in [0, 0.5)");
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Loss terms and sample-weight summary of one optimizer step. Terms that
/// were not part of the objective are zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub total: f64,
    pub l_c: f64,
    pub l_a: f64,
    pub l_d: f64,
    pub rows: usize,
    pub weight_sum: f64,
    pub weight_max: f64,
}

/// Diagnostics at one point of training. Loss terms are means over the steps
/// since the previous point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: f64,
    pub step: usize,
    pub l_c: Option<f64>,
    pub l_a: Option<f64>,
    pub l_d: Option<f64>,
    /// AUC of the discriminator separating ad from rec rows on the held-out
    /// slice; absent without the alignment term or with a single source.
    pub adversary_auc: Option<f64>,
    /// Mean squared Pearson correlation over all (x_inv, x_con) dimension
    /// pairs on the held-out slice, averaged over sources.
    pub cross_correlation: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub store: ParameterStore,
    pub steps: Vec<StepRecord>,
    pub curve: Vec<CurvePoint>,
}

/// Splits `order` into batches of `size`; a short tail joins the previous batch.
pub fn batch_ranges(n: usize, size: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<std::ops::Range<usize>> = (0..n).step_by(size.max(1)).map(|s| s..(s + size).min(n)).collect();
    if out.len() >= 2 && out.last().is_some_and(|r| r.len() < size) {
        let tail = out.pop().unwrap();
        out.last_mut().unwrap().end = tail.end;
    }
    out
}

struct Diagnostics {
    adversary_auc: Option<f64>,
    cross_correlation: Option<f64>,
}

/// Adversary AUC and cross-correlation on the held-out slice. The slice is
/// normalized with its own per-source statistics, as a training batch is.
fn diagnose(store: &ParameterStore, cfg: &ModelConfig, vocab: &Vocab, samples: &[&UnifiedSample]) -> Result<Diagnostics> {
    let per_source_rows = |s: Source| samples.iter().filter(|x| x.source == s).count();
    let normalizable = if cfg.use_sabn {
        network::SOURCES.iter().all(|&s| per_source_rows(s) != 1)
    } else {
        true
    };
    if samples.len() < 2 || !normalizable {
        return Ok(Diagnostics {
            adversary_auc: None,
            cross_correlation: None,
        });
    }
    let batch = Batch::from_samples(samples, None, vocab)?;
    let mut tape = Tape::new();
    let fwd = network::forward(&mut tape, store, cfg, &batch, Mode::Train)?;
    let x_inv = tape.value(fwd.x_inv).clone();
    let x_con = tape.value(fwd.x_con).clone();
    let mut corr = Vec::new();
    for s in network::SOURCES {
        let rows = batch.rows_of(s);
        if rows.len() >= 2 {
            let mut t = Tape::new();
            let p = t.leaf(x_inv.gather(&rows));
            let q = t.leaf(x_con.gather(&rows));
            let pen = t.pearson_pairwise_penalty(p, q, cfg.pearson_eps)?;
            corr.push(t.value(pen).item() / (x_inv.cols() * x_con.cols()) as f64);
        }
    }
    let adversary_auc = if cfg.use_alignment {
        let s = network::discriminator(&mut tape, store, fwd.x_inv)?;
        let sources: Vec<u8> = samples.iter().map(|s| u8::from(s.source == Source::Ad)).collect();
        auc(tape.value(s).data(), &sources)
    } else {
        None
    };
    Ok(Diagnostics {
        adversary_auc,
        cross_correlation: mean_of(&corr),
    })
}

trait RowOps {
    fn gather(&self, rows: &[usize]) -> Tensor;
}

impl RowOps for Tensor {
    fn gather(&self, rows: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(rows.len() * self.cols());
        for &r in rows {
            data.extend_from_slice(self.row_slice(r));
        }
        Tensor::new(rows.len(), self.cols(), data).expect("shape")
    }
}

fn mean_of(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Trains a freshly initialized model on `samples`.
///
/// `weights`, when given, holds one BCE weight per sample. Each epoch draws a
/// new permutation; its first `holdout_fraction` is set aside for the
/// diagnostics curve and skipped by that epoch's updates.
pub fn train(cfg: &ModelConfig, vocab: &Vocab, tcfg: &TrainConfig, samples: &[UnifiedSample], weights: Option<&[f64]>, seed: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    tcfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    if let Some(w) = weights {
        if w.len() != samples.len() {
            return Err(Error::Invalid("one weight per sample required".into()));
        }
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::Invalid("sample weights must be finite and non-negative".into()));
        }
    }
    let mut store = network::init_params(cfg, vocab, seed)?;
    let mut adam = AdamConfig {
        lr: tcfg.lr,
        ..AdamConfig::default()
    };
    let n = samples.len();
    let n_hold = (tcfg.holdout_fraction * n as f64).round() as usize;
    let total_steps = tcfg.epochs * batch_ranges(n - n_hold.min(n - 1), tcfg.batch_size).len();
    let mut steps = Vec::new();
    let mut curve = Vec::new();
    let mut pending = 0usize;

    for epoch in 0..tcfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe90c_5eed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let (hold_idx, train_idx) = order.split_at(n_hold.min(n - 1));
        let holdout: Vec<&UnifiedSample> = hold_idx.iter().map(|&i| &samples[i]).collect();
        let ranges = batch_ranges(train_idx.len(), tcfg.batch_size);
        let points = tcfg.curve_points_per_epoch.max(1).min(ranges.len());
        let marks: Vec<usize> = (1..=points).map(|p| p * ranges.len() / points).collect();

        if epoch == 0 {
            let d = diagnose(&store, cfg, vocab, &holdout)?;
            curve.push(CurvePoint {
                epoch: 0.0,
                step: 0,
                l_c: None,
                l_a: None,
                l_d: None,
                adversary_auc: d.adversary_auc,
                cross_correlation: d.cross_correlation,
            });
        }

        for (bi, range) in ranges.iter().enumerate() {
            let idx = &train_idx[range.clone()];
            let rows: Vec<&UnifiedSample> = idx.iter().map(|&i| &samples[i]).collect();
            let w: Option<Vec<f64>> = weights.map(|w| idx.iter().map(|&i| w[i]).collect());
            let (weight_sum, weight_max) = match &w {
                Some(w) => (w.iter().sum(), w.iter().copied().fold(f64::MIN, f64::max)),
                None => (rows.len() as f64, 1.0),
            };
            let batch = Batch::from_samples(&rows, w, vocab)?;
            let mut tape = Tape::new();
            let fwd = network::forward(&mut tape, &store, cfg, &batch, Mode::Train)?;
            let losses = network::total_loss(&mut tape, &store, cfg, &fwd, &batch)?;
            tape.backward(losses.total)?;
            store.accumulate_grads(&tape)?;
            adam.lr = tcfg.lr_schedule.rate(tcfg.lr, steps.len(), total_steps);
            store.adam_step(&adam)?;
            network::update_running_stats(&mut store, cfg, &fwd.bn_stats)?;
            let val = |v: Option<diffcore::Var>| v.map_or(0.0, |v| tape.value(v).item());
            steps.push(StepRecord {
                total: tape.value(losses.total).item(),
                l_c: tape.value(losses.l_c).item(),
                l_a: val(losses.l_a),
                l_d: val(losses.l_d),
                rows: rows.len(),
                weight_sum,
                weight_max,
            });
            pending += 1;

            if marks.contains(&(bi + 1)) {
                let recent = &steps[steps.len() - pending..];
                let pick = |f: fn(&StepRecord) -> f64| mean_of(&recent.iter().map(f).collect::<Vec<_>>());
                let d = diagnose(&store, cfg, vocab, &holdout)?;
                curve.push(CurvePoint {
                    epoch: epoch as f64 + (bi + 1) as f64 / ranges.len() as f64,
                    step: steps.len(),
                    l_c: pick(|s| s.l_c),
                    l_a: if cfg.use_alignment { pick(|s| s.l_a) } else { None },
                    l_d: if cfg.use_decorrelation { pick(|s| s.l_d) } else { None },
                    adversary_auc: d.adversary_auc,
                    cross_correlation: d.cross_correlation,
                });
                pending = 0;
            }
        }
    }
    recompute_bn_statistics(&mut store, cfg, vocab, &samples.iter().collect::<Vec<_>>())?;
    Ok(TrainOutcome { store, steps, curve })
}

/// Replaces the running normalization statistics with exact per-source
/// population statistics of the embedding layer over `samples`.
pub fn recompute_bn_statistics(store: &mut ParameterStore, cfg: &ModelConfig, vocab: &Vocab, samples: &[&UnifiedSample]) -> Result<()> {
    let dim = cfg.input_dim();
    let mut embedded: Vec<(Tensor, Vec<Source>)> = Vec::new();
    for chunk in samples.chunks(INFER_CHUNK) {
        let batch = Batch::from_samples(chunk, None, vocab)?;
        let mut tape = Tape::new();
        let e = network::embed_and_aggregate(&mut tape, store, &batch)?;
        embedded.push((tape.value(e).clone(), batch.source.clone()));
    }
    let group_of = |s: Source| if cfg.use_sabn { s } else { Source::Ad };
    for s in network::SOURCES {
        if group_of(s) != s {
            continue;
        }
        let rows = || {
            embedded
                .iter()
                .flat_map(|(e, src)| (0..e.rows()).filter(move |&r| group_of(src[r]) == s).map(move |r| e.row_slice(r)))
        };
        let n = rows().count();
        if n < 2 {
            continue;
        }
        let mut mean = vec![0.0; dim];
        for row in rows() {
            mean.iter_mut().zip(row).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; dim];
        for row in rows() {
            var.iter_mut().zip(row).zip(&mean).for_each(|((v, x), m)| *v += (x - m) * (x - m));
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        let t = s.as_str();
        for (name, value) in [(format!("bn.{t}.mean"), mean), (format!("bn.{t}.var"), var)] {
            *store
                .value_mut(&name)
                .ok_or_else(|| Error::Diff(diffcore::DiffError::UnknownParam(name.clone())))? = Tensor::new(1, dim, value)?;
        }
    }
    Ok(())
}

/// Inference-mode representations of a set of samples.
#[derive(Clone, Debug)]
pub struct Representations {
    pub x_inv: Tensor,
    pub x_con: Tensor,
    pub pred: Vec<f64>,
}

const INFER_CHUNK: usize = 4096;

pub fn representations(store: &ParameterStore, cfg: &ModelConfig, vocab: &Vocab, samples: &[&UnifiedSample]) -> Result<Representations> {
    let d = cfg.projection_dim;
    let (mut inv, mut con, mut pred) = (Vec::new(), Vec::new(), Vec::new());
    for chunk in samples.chunks(INFER_CHUNK) {
        let batch = Batch::from_samples(chunk, None, vocab)?;
        let mut tape = Tape::new();
        let fwd = network::forward(&mut tape, store, cfg, &batch, Mode::Infer)?;
        inv.extend_from_slice(tape.value(fwd.x_inv).data());
        con.extend_from_slice(tape.value(fwd.x_con).data());
        pred.extend_from_slice(tape.value(fwd.pred).data());
    }
    Ok(Representations {
        x_inv: Tensor::new(samples.len(), d, inv)?,
        x_con: Tensor::new(samples.len(), d, con)?,
        pred,
    })
}

/// Inference-mode click probabilities. Ad rows use the ad-side statistics,
/// projections and head.
pub fn predict_samples(store: &ParameterStore, cfg: &ModelConfig, vocab: &Vocab, samples: &[UnifiedSample]) -> Result<Vec<f64>> {
    let refs: Vec<&UnifiedSample> = samples.iter().collect();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in refs.chunks(INFER_CHUNK) {
        let batch = Batch::from_samples(chunk, None, vocab)?;
        let mut tape = Tape::new();
        let fwd = network::forward(&mut tape, store, cfg, &batch, Mode::Infer)?;
        out.extend_from_slice(tape.value(fwd.pred).data());
    }
    Ok(out)
}

/// Writes `sample_id  source  x_inv[0..d]  x_con[0..d]`, tab-separated, with
/// a header line naming the columns.
pub fn export_representations(store: &ParameterStore, cfg: &ModelConfig, vocab: &Vocab, samples: &[UnifiedSample], path: &Path) -> Result<()> {
    let refs: Vec<&UnifiedSample> = samples.iter().collect();
    let reps = representations(store, cfg, vocab, &refs)?;
    let d = cfg.projection_dim;
    let mut w = BufWriter::new(File::create(path)?);
    let mut header = vec!["sample_id".to_string(), "source".to_string()];
    header.extend((0..d).map(|i| format!("inv_{i}")));
    header.extend((0..d).map(|i| format!("con_{i}")));
    writeln!(w, "{}", header.join("\t"))?;
    for (i, s) in samples.iter().enumerate() {
        write!(w, "{i}\t{}", s.source.as_str())?;
        for v in reps.x_inv.row_slice(i).iter().chain(reps.x_con.row_slice(i)) {
            write!(w, "\t{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_checkpoint(store: &ParameterStore, header: &CheckpointHeader, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    store.write_checkpoint(&mut w, &serde_json::to_string(header)?)?;
    w.flush()?;
    Ok(())
}

/// Loads a checkpoint, refusing it when its header differs from `expected`.
pub fn load_checkpoint(path: &Path, expected: Option<&CheckpointHeader>) -> Result<(ParameterStore, CheckpointHeader)> {
    let (store, raw) = ParameterStore::read_checkpoint(BufReader::new(File::open(path)?))?;
    let header: CheckpointHeader = serde_json::from_str(&raw)?;
    if let Some(exp) = expected {
        if &header != exp {
            return Err(Error::Config(format!(
                "checkpoint {} was written for a different model configuration",
                path.display()
            )));
        }
    }
    Ok((store, header))
}
