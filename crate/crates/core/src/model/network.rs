//! Forward graph: embeddings and behavior attention, source-aware batch
//! normalization, backbone, invariant/confounder projections, prediction
//! heads, discriminator, and the joint loss.

use diffcore::{ParameterStore, Reduction, Tape, Tensor, Var};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use crate::error::{Error, Result};
use crate::model::batch::Batch;
use crate::model::config::{ModelConfig, Vocab};
use crate::sim::Source;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

pub const SOURCES: [Source; 2] = [Source::Ad, Source::Rec];

fn tag(s: Source) -> &'static str {
    s.as_str()
}

/// Batch mean and variance a source's rows were normalized with.
#[derive(Clone, Debug)]
pub struct BnBatchStats {
    pub source: Source,
    pub mean: Tensor,
    pub var: Tensor,
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub e: Var,
    pub e_norm: Var,
    pub x: Var,
    pub x_inv: Var,
    pub x_con: Var,
    /// Click probabilities, `(B, 1)`.
    pub pred: Var,
    pub bn_stats: Vec<BnBatchStats>,
}

#[derive(Clone, Debug)]
pub struct Losses {
    pub total: Var,
    pub l_c: Var,
    pub l_a: Option<Var>,
    pub l_d: Option<Var>,
    /// Discriminator output `(B, 1)` when the alignment term is active.
    pub discriminator: Option<Var>,
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(rows, cols, data).expect("shape")
}

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let n = Normal::new(0.0, std).expect("std");
    let data = (0..rows * cols).map(|_| n.sample(rng)).collect();
    Tensor::new(rows, cols, data).expect("shape")
}

fn dense(store: &mut ParameterStore, rng: &mut ChaCha8Rng, prefix: &str, fan_in: usize, fan_out: usize, activation: bool) -> Result<()> {
    store.insert(format!("{prefix}.w"), glorot(rng, fan_in, fan_out))?;
    store.insert(format!("{prefix}.b"), Tensor::zeros(1, fan_out))?;
    if activation {
        store.insert(format!("{prefix}.a"), Tensor::full(1, fan_out, 0.25))?;
    }
    Ok(())
}

/// Creates every parameter in a fixed order independent of the switches, so
/// two configurations that differ only in switches start from identical
/// weights under the same seed.
pub fn init_params(cfg: &ModelConfig, vocab: &Vocab, seed: u64) -> Result<ParameterStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    let k = cfg.embedding_dim;
    let std = cfg.embedding_init_std;
    for (name, n) in [
        ("emb.age", vocab.age),
        ("emb.gender", vocab.gender),
        ("emb.item", vocab.items),
        ("emb.category", vocab.categories),
        ("emb.brand", vocab.brands),
        ("emb.ad", vocab.ads),
        ("emb.campaign", vocab.campaigns),
        ("emb.time", vocab.time_buckets),
        ("emb.device", vocab.devices),
    ] {
        store.insert(name, normal(&mut rng, n, k, std))?;
    }
    dense(&mut store, &mut rng, "att.l1", 6 * k, cfg.attention_width, true)?;
    dense(&mut store, &mut rng, "att.out", cfg.attention_width, 1, false)?;

    let e_dim = cfg.input_dim();
    for s in SOURCES {
        let t = tag(s);
        store.insert(format!("bn.{t}.gamma"), Tensor::full(1, e_dim, 1.0))?;
        store.insert(format!("bn.{t}.beta"), Tensor::zeros(1, e_dim))?;
        store.insert(format!("bn.{t}.mean"), Tensor::zeros(1, e_dim))?;
        store.insert(format!("bn.{t}.var"), Tensor::full(1, e_dim, 1.0))?;
    }

    let mut width = e_dim;
    for (i, &w) in cfg.backbone_widths.iter().enumerate() {
        dense(&mut store, &mut rng, &format!("mlp.{i}"), width, w, true)?;
        width = w;
    }
    let d = cfg.projection_dim;
    for kind in ["inv", "con"] {
        dense(&mut store, &mut rng, &format!("{kind}.ad"), width, d, false)?;
    }
    let mut w_in = 2 * d;
    for (i, &w) in cfg.head_widths.iter().enumerate() {
        dense(&mut store, &mut rng, &format!("head.ad.{i}"), w_in, w, true)?;
        w_in = w;
    }
    dense(&mut store, &mut rng, "head.ad.out", w_in, 1, false)?;
    // Rec-side layers start as copies of the ad-side ones.
    let ad_side: Vec<String> = store
        .names()
        .filter(|n| n.starts_with("inv.ad.") || n.starts_with("con.ad.") || n.starts_with("head.ad."))
        .map(str::to_string)
        .collect();
    for name in ad_side {
        let v = store.value(&name).cloned().expect("inserted above");
        store.insert(name.replacen(".ad.", ".rec.", 1), v)?;
    }
    dense(&mut store, &mut rng, "disc.l1", d, cfg.discriminator_width, false)?;
    dense(&mut store, &mut rng, "disc.out", cfg.discriminator_width, 1, false)?;
    Ok(store)
}

fn linear(tape: &mut Tape, store: &ParameterStore, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{prefix}.w"))?;
    let b = tape.param(store, &format!("{prefix}.b"))?;
    Ok(tape.affine(x, w, b)?)
}

fn linear_prelu(tape: &mut Tape, store: &ParameterStore, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(tape, store, prefix, x)?;
    let a = tape.param(store, &format!("{prefix}.a"))?;
    Ok(tape.prelu(h, a)?)
}

fn embed(tape: &mut Tape, store: &ParameterStore, table: &str, ids: &[usize]) -> Result<Var> {
    let t = tape.param(store, table)?;
    Ok(tape.embedding_gather(t, ids)?)
}

/// Row groups that share per-source layers. Without `per_source` every row
/// is routed through the ad-side layers.
pub fn row_groups(batch: &Batch, per_source: bool) -> Vec<(Source, Vec<usize>)> {
    if !per_source {
        return vec![(Source::Ad, (0..batch.len).collect())];
    }
    SOURCES
        .iter()
        .map(|&s| (s, batch.rows_of(s)))
        .filter(|(_, rows)| !rows.is_empty())
        .collect()
}

/// Applies `f` to each group's rows and stitches the results back into batch
/// order.
fn per_group<F>(tape: &mut Tape, x: Var, n: usize, groups: &[(Source, Vec<usize>)], mut f: F) -> Result<Var>
where
    F: FnMut(&mut Tape, Var, Source, &[usize]) -> Result<Var>,
{
    if let [(s, rows)] = groups {
        if rows.len() == n {
            return f(tape, x, *s, rows);
        }
    }
    let mut parts = Vec::with_capacity(groups.len());
    for (s, rows) in groups {
        let xs = tape.gather_rows(x, rows)?;
        parts.push((f(tape, xs, *s, rows)?, rows.clone()));
    }
    Ok(tape.assemble_rows(&parts, n)?)
}

/// User, behavior-interest, ad and context embeddings concatenated into `e`.
pub fn embed_and_aggregate(tape: &mut Tape, store: &ParameterStore, batch: &Batch) -> Result<Var> {
    let n = batch.len;
    let l = batch.seq_len;
    let age = embed(tape, store, "emb.age", &batch.age)?;
    let gender = embed(tape, store, "emb.gender", &batch.gender)?;

    let bi = embed(tape, store, "emb.item", &batch.behavior_items)?;
    let bc = embed(tape, store, "emb.category", &batch.behavior_categories)?;
    let behaviors = tape.concat(&[bi, bc])?;
    let ti = embed(tape, store, "emb.item", &batch.item)?;
    let tc = embed(tape, store, "emb.category", &batch.category)?;
    let target = tape.concat(&[ti, tc])?;
    let expand: Vec<usize> = (0..n).flat_map(|r| std::iter::repeat_n(r, l)).collect();
    let target_exp = tape.gather_rows(target, &expand)?;
    let prod = tape.mul(behaviors, target_exp)?;
    let att_in = tape.concat(&[behaviors, target_exp, prod])?;
    let h = linear_prelu(tape, store, "att.l1", att_in)?;
    let scores = linear(tape, store, "att.out", h)?;
    let scores = tape.reshape(scores, n, l)?;
    let weights = tape.masked_softmax(scores, &batch.behavior_valid)?;
    let interest = tape.segment_weighted_sum(behaviors, weights)?;

    let ad = embed(tape, store, "emb.ad", &batch.ad)?;
    let campaign = embed(tape, store, "emb.campaign", &batch.campaign)?;
    let brand = embed(tape, store, "emb.brand", &batch.brand)?;
    let time = embed(tape, store, "emb.time", &batch.time_bucket)?;
    let device = embed(tape, store, "emb.device", &batch.device)?;
    Ok(tape.concat(&[age, gender, interest, ad, ti, tc, brand, campaign, time, device])?)
}

/// Source-aware batch normalization. In training each source's rows are
/// standardized with that source's batch statistics; at inference the running
/// statistics are used. With `use_sabn` off all rows share the ad-side state.
pub fn sabn(tape: &mut Tape, store: &ParameterStore, cfg: &ModelConfig, e: Var, batch: &Batch, mode: Mode) -> Result<(Var, Vec<BnBatchStats>)> {
    let groups = row_groups(batch, cfg.use_sabn);
    let mut stats = Vec::new();
    let out = per_group(tape, e, batch.len, &groups, |tape, xs, s, rows| {
        let t = tag(s);
        let (mean, var) = match mode {
            Mode::Train => {
                if rows.len() < 2 {
                    return Err(Error::Invalid(format!(
                        "source {t} has a single row in this batch; batch statistics need a larger batch"
                    )));
                }
                let m = tape.mean_rows(xs, None)?;
                let v = tape.var_rows(xs, None)?;
                stats.push(BnBatchStats {
                    source: s,
                    mean: tape.value(m).clone(),
                    var: tape.value(v).clone(),
                });
                (m, v)
            }
            Mode::Infer => (tape.leaf(store_value(store, &format!("bn.{t}.mean"))?), tape.leaf(store_value(store, &format!("bn.{t}.var"))?)),
        };
        let centered = tape.sub(xs, mean)?;
        let std = tape.add_scalar(var, cfg.bn_eps)?;
        let std = tape.sqrt(std)?;
        let z = tape.div(centered, std)?;
        let gamma = tape.param(store, &format!("bn.{t}.gamma"))?;
        let beta = tape.param(store, &format!("bn.{t}.beta"))?;
        let z = tape.mul(z, gamma)?;
        Ok(tape.add(z, beta)?)
    })?;
    Ok((out, stats))
}

fn store_value(store: &ParameterStore, name: &str) -> Result<Tensor> {
    store
        .value(name)
        .cloned()
        .ok_or_else(|| Error::Diff(diffcore::DiffError::UnknownParam(name.to_string())))
}

/// Blends batch statistics into the running statistics.
pub fn update_running_stats(store: &mut ParameterStore, cfg: &ModelConfig, stats: &[BnBatchStats]) -> Result<()> {
    let m = cfg.bn_momentum;
    for st in stats {
        let t = tag(st.source);
        for (name, batch) in [(format!("bn.{t}.mean"), &st.mean), (format!("bn.{t}.var"), &st.var)] {
            let run = store
                .value_mut(&name)
                .ok_or_else(|| Error::Diff(diffcore::DiffError::UnknownParam(name.clone())))?;
            for (r, b) in run.data_mut().iter_mut().zip(batch.data()) {
                *r = m * *r + (1.0 - m) * b;
            }
        }
    }
    Ok(())
}

pub fn backbone(tape: &mut Tape, store: &ParameterStore, cfg: &ModelConfig, e_norm: Var) -> Result<Var> {
    let mut h = e_norm;
    for i in 0..cfg.backbone_widths.len() {
        h = linear_prelu(tape, store, &format!("mlp.{i}"), h)?;
    }
    Ok(h)
}

/// Per-source linear projection of `x`; `kind` is `inv` or `con`.
pub fn project(tape: &mut Tape, store: &ParameterStore, cfg: &ModelConfig, kind: &str, x: Var, batch: &Batch) -> Result<Var> {
    let groups = row_groups(batch, cfg.source_aware_heads);
    per_group(tape, x, batch.len, &groups, |tape, xs, s, _| linear(tape, store, &format!("{kind}.{}", tag(s)), xs))
}

/// Click probability from `x_inv ⊕ x_con` through the head of each row's
/// source.
pub fn predict(tape: &mut Tape, store: &ParameterStore, cfg: &ModelConfig, x_inv: Var, x_con: Var, batch: &Batch) -> Result<Var> {
    let x_new = tape.concat(&[x_inv, x_con])?;
    let groups = row_groups(batch, cfg.source_aware_heads);
    per_group(tape, x_new, batch.len, &groups, |tape, xs, s, _| {
        let mut h = xs;
        for i in 0..cfg.head_widths.len() {
            h = linear_prelu(tape, store, &format!("head.{}.{i}", tag(s)), h)?;
        }
        let logit = linear(tape, store, &format!("head.{}.out", tag(s)), h)?;
        Ok(tape.sigmoid(logit)?)
    })
}

pub fn forward(tape: &mut Tape, store: &ParameterStore, cfg: &ModelConfig, batch: &Batch, mode: Mode) -> Result<Forward> {
    let e = embed_and_aggregate(tape, store, batch)?;
    let (e_norm, bn_stats) = sabn(tape, store, cfg, e, batch, mode)?;
    let x = backbone(tape, store, cfg, e_norm)?;
    let x_inv = project(tape, store, cfg, "inv", x, batch)?;
    let x_con = project(tape, store, cfg, "con", x, batch)?;
    let pred = predict(tape, store, cfg, x_inv, x_con, batch)?;
    Ok(Forward {
        e,
        e_norm,
        x,
        x_inv,
        x_con,
        pred,
        bn_stats,
    })
}

/// Discriminator probability that each row is an ad sample.
pub fn discriminator(tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
    let h = linear(tape, store, "disc.l1", x)?;
    let h = tape.relu(h)?;
    let logit = linear(tape, store, "disc.out", h)?;
    Ok(tape.sigmoid(logit)?)
}

/// `-Σ_ad log ŝ - Σ_rec log(1 - ŝ)` with `ŝ` computed behind a gradient
/// reversal of strength `alpha`. `None` unless both sources are present.
pub fn alignment_loss(tape: &mut Tape, store: &ParameterStore, x_inv: Var, sources: &[Source], alpha: f64) -> Result<Option<(Var, Var)>> {
    if !(sources.contains(&Source::Ad) && sources.contains(&Source::Rec)) {
        return Ok(None);
    }
    let reversed = tape.grl(x_inv, alpha)?;
    let s_hat = discriminator(tape, store, reversed)?;
    let targets: Vec<f64> = sources.iter().map(|&s| if s == Source::Ad { 1.0 } else { 0.0 }).collect();
    let loss = tape.binary_cross_entropy(s_hat, &targets, None, Reduction::Sum)?;
    Ok(Some((loss, s_hat)))
}

/// Pairwise Pearson penalty between `x_inv` and `x_con`, summed over the
/// sources with at least two rows. `None` when no source qualifies.
pub fn decorrelation_loss(tape: &mut Tape, x_inv: Var, x_con: Var, sources: &[Source], eps: f64) -> Result<Option<Var>> {
    let n = sources.len();
    let mut terms = Vec::new();
    for s in SOURCES {
        let rows: Vec<usize> = (0..n).filter(|&r| sources[r] == s).collect();
        if rows.len() < 2 {
            continue;
        }
        let term = if rows.len() == n {
            tape.pearson_pairwise_penalty(x_inv, x_con, eps)?
        } else {
            let p = tape.gather_rows(x_inv, &rows)?;
            let q = tape.gather_rows(x_con, &rows)?;
            tape.pearson_pairwise_penalty(p, q, eps)?
        };
        terms.push(term);
    }
    let mut it = terms.into_iter();
    let Some(mut acc) = it.next() else {
        return Ok(None);
    };
    for t in it {
        acc = tape.add(acc, t)?;
    }
    Ok(Some(acc))
}

/// `L_C + λ1·L_A + λ2·L_D` on plain numbers.
pub fn combine_losses(l_c: f64, l_a: f64, l_d: f64, lambda1: f64, lambda2: f64) -> f64 {
    l_c + lambda1 * l_a + lambda2 * l_d
}

/// Joint objective over a forward pass. Disabled or inapplicable terms are
/// left out of the graph entirely. With `decorrelation_stop_gradient` the
/// decorrelation term reaches the projections but not the shared layers
/// below them.
pub fn total_loss(tape: &mut Tape, store: &ParameterStore, cfg: &ModelConfig, fwd: &Forward, batch: &Batch) -> Result<Losses> {
    let l_c = tape.binary_cross_entropy(fwd.pred, &batch.labels, batch.weights.as_deref(), Reduction::Sum)?;
    let mut total = l_c;
    let (mut l_a, mut discriminator) = (None, None);
    if cfg.use_alignment {
        if let Some((loss, s_hat)) = alignment_loss(tape, store, fwd.x_inv, &batch.source, cfg.alpha)? {
            let weighted = tape.scale(loss, cfg.lambda1)?;
            total = tape.add(total, weighted)?;
            l_a = Some(loss);
            discriminator = Some(s_hat);
        }
    }
    let mut l_d = None;
    if cfg.use_decorrelation {
        let (x_inv, x_con) = if cfg.decorrelation_stop_gradient {
            let x = tape.value(fwd.x).clone();
            let x = tape.leaf(x);
            (project(tape, store, cfg, "inv", x, batch)?, project(tape, store, cfg, "con", x, batch)?)
        } else {
            (fwd.x_inv, fwd.x_con)
        };
        if let Some(loss) = decorrelation_loss(tape, x_inv, x_con, &batch.source, cfg.pearson_eps)? {
            let weighted = tape.scale(loss, cfg.lambda2)?;
            total = tape.add(total, weighted)?;
            l_d = Some(loss);
        }
    }
    Ok(Losses {
        total,
        l_c,
        l_a,
        l_d,
        discriminator,
    })
}
