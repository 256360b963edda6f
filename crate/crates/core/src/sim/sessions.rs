//! Session generation under eCPM, pCTR and uniform display policies.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::catalog::{Catalog, Context, Subject};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Policy {
    Ecpm,
    Pctr,
    Uniform,
}

impl FromStr for Policy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "ECPM" => Ok(Policy::Ecpm),
            "PCTR" => Ok(Policy::Pctr),
            "UNIFORM" => Ok(Policy::Uniform),
            other => Err(Error::Config(format!("unknown policy {other:?}"))),
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Policy::Ecpm => "ECPM",
            Policy::Pctr => "PCTR",
            Policy::Uniform => "UNIFORM",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Ad,
    Rec,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Ad => "ad",
            Source::Rec => "rec",
        }
    }

    pub fn subject(self, id: usize) -> Subject {
        match self {
            Source::Ad => Subject::Ad(id),
            Source::Rec => Subject::Item(id),
        }
    }
}

impl FromStr for Source {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ad" => Ok(Source::Ad),
            "rec" => Ok(Source::Rec),
            other => Err(Error::Invalid(format!("unknown source {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImpressionRecord {
    pub session_id: usize,
    pub user_id: usize,
    /// Ad id for `Source::Ad`, item id for `Source::Rec`.
    pub subject_id: usize,
    pub context: Context,
    pub label: u8,
    pub source: Source,
}

/// One user request: who asked, in which context, and what was eligible.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionCandidates {
    pub session_id: usize,
    pub user_id: usize,
    pub context: Context,
    pub candidates: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImpressionLog {
    pub source: Source,
    pub policy: Policy,
    pub records: Vec<ImpressionRecord>,
    /// Indexed by session id.
    pub candidate_sets: Vec<SessionCandidates>,
    /// Display probability per candidacy under the logging policy, measured
    /// by the simulator. Empty for logs read from foreign sources.
    pub display_propensity: BTreeMap<usize, f64>,
}

impl ImpressionLog {
    /// Subjects displayed in each session, in slot order.
    pub fn displayed_by_session(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.candidate_sets.len()];
        for r in &self.records {
            if let Some(v) = out.get_mut(r.session_id) {
                v.push(r.subject_id);
            }
        }
        out
    }

    /// Checks that every displayed subject appears in its session's candidates.
    pub fn validate(&self) -> Result<()> {
        for r in &self.records {
            if r.source != self.source {
                return Err(Error::Invalid(format!(
                    "record in session {} has source {} in a {} log",
                    r.session_id,
                    r.source.as_str(),
                    self.source.as_str()
                )));
            }
            if r.label > 1 {
                return Err(Error::Invalid(format!("label {} outside {{0,1}}", r.label)));
            }
            let session = self
                .candidate_sets
                .get(r.session_id)
                .filter(|s| s.session_id == r.session_id)
                .ok_or_else(|| Error::Invalid(format!("session {} has no candidate set", r.session_id)))?;
            if !session.candidates.contains(&r.subject_id) {
                return Err(Error::Invalid(format!(
                    "subject {} displayed in session {} but not a candidate",
                    r.subject_id, r.session_id
                )));
            }
        }
        Ok(())
    }
}

/// Scores any (user, subject, context) triple; drives eCPM and pCTR ranking.
pub trait ScoringFn: Sync {
    fn score(&self, catalog: &Catalog, user_id: usize, subject: Subject, ctx: Context) -> Result<f64>;
}

/// Ground-truth click probability corrupted by multiplicative log-normal
/// noise. The noise is a deterministic function of the seed and the scored
/// triple, so the same request always gets the same score.
#[derive(Clone, Debug)]
pub struct NoisyOracle {
    pub sigma: f64,
    pub seed: u64,
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn hash_parts(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x9e37_79b9_7f4a_7c15, |h, &p| mix(h ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15)))
}

impl ScoringFn for NoisyOracle {
    fn score(&self, catalog: &Catalog, user_id: usize, subject: Subject, ctx: Context) -> Result<f64> {
        let p = catalog.click_probability(user_id, subject, ctx)?;
        if self.sigma == 0.0 {
            return Ok(p);
        }
        let (tag, id) = match subject {
            Subject::Ad(a) => (1u64, a),
            Subject::Item(i) => (2u64, i),
        };
        let h = hash_parts(&[
            self.seed,
            user_id as u64,
            tag,
            id as u64,
            ctx.time_bucket as u64,
            ctx.device as u64,
        ]);
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let z: f64 = Normal::new(0.0, 1.0).expect("unit normal").sample(&mut rng);
        Ok(p * (self.sigma * z).exp())
    }
}

/// Returns candidate positions in display order, truncated to `slots`.
///
/// Ties in score keep the earlier candidate first.
pub fn rank_candidates(policy: Policy, scores: &[f64], bids: Option<&[f64]>, slots: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if scores.is_empty() {
        return Err(Error::Invalid("empty candidate set".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    match policy {
        Policy::Uniform => order.shuffle(rng),
        Policy::Pctr => order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a])),
        Policy::Ecpm => {
            let bids = bids.ok_or_else(|| Error::Invalid("ECPM ranking needs bids".into()))?;
            if bids.len() != scores.len() {
                return Err(Error::Invalid("bids and scores differ in length".into()));
            }
            let ecpm: Vec<f64> = scores.iter().zip(bids).map(|(s, b)| s * b).collect();
            order.sort_by(|&a, &b| ecpm[b].total_cmp(&ecpm[a]));
        }
    }
    order.truncate(slots);
    Ok(order)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub policy: Policy,
    pub source: Source,
    pub n_sessions: usize,
    pub candidates_per_session: usize,
    pub slots_per_session: usize,
    /// Extra label-free sessions per logged session, replayed only to measure
    /// display propensities.
    pub shadow_factor: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            policy: Policy::Ecpm,
            source: Source::Ad,
            n_sessions: 10_000,
            candidates_per_session: 50,
            slots_per_session: 10,
            shadow_factor: 4,
        }
    }
}

struct SessionDraw {
    candidates: SessionCandidates,
    displayed: Vec<usize>,
}

fn draw_session(catalog: &Catalog, cfg: &SessionConfig, proxy: &dyn ScoringFn, pool: usize, seed: u64, stream: u64, session_id: usize) -> Result<SessionDraw> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let user_id = rng.random_range(0..catalog.n_users());
    let context = Context {
        time_bucket: rng.random_range(0..catalog.config.n_time_buckets),
        device: rng.random_range(0..catalog.config.n_devices),
    };
    let n_cand = cfg.candidates_per_session.min(pool);
    let candidates = rand::seq::index::sample(&mut rng, pool, n_cand).into_vec();
    let displayed = if cfg.policy == Policy::Uniform {
        rank_candidates(Policy::Uniform, &vec![0.0; n_cand], None, cfg.slots_per_session, &mut rng)?
    } else {
        let scores = candidates
            .iter()
            .map(|&c| proxy.score(catalog, user_id, cfg.source.subject(c), context))
            .collect::<Result<Vec<_>>>()?;
        let bids: Option<Vec<f64>> = match cfg.source {
            Source::Ad => Some(candidates.iter().map(|&c| catalog.ads[c].bid).collect()),
            Source::Rec => None,
        };
        if cfg.policy == Policy::Ecpm && bids.is_none() {
            return Err(Error::Config("ECPM policy needs an ad log".into()));
        }
        rank_candidates(cfg.policy, &scores, bids.as_deref(), cfg.slots_per_session, &mut rng)?
    };
    let displayed = displayed.into_iter().map(|p| candidates[p]).collect();
    Ok(SessionDraw {
        candidates: SessionCandidates {
            session_id,
            user_id,
            context,
            candidates,
        },
        displayed,
    })
}

const SHADOW_STREAM_OFFSET: u64 = 1 << 40;

/// Simulates `cfg.n_sessions` requests and logs the displayed subjects with
/// Bernoulli labels drawn from the ground-truth click model.
///
/// Each session uses its own random stream, so the log does not depend on how
/// sessions are scheduled across threads.
pub fn run_sessions(catalog: &Catalog, cfg: &SessionConfig, proxy: &dyn ScoringFn, seed: u64) -> Result<ImpressionLog> {
    let pool = match cfg.source {
        Source::Ad => catalog.n_ads(),
        Source::Rec => catalog.n_items(),
    };
    if pool == 0 || cfg.candidates_per_session == 0 {
        return Err(Error::Invalid("empty candidate set".into()));
    }
    let n_cand = cfg.candidates_per_session.min(pool);
    if cfg.slots_per_session == 0 || cfg.slots_per_session >= n_cand {
        return Err(Error::Config(format!(
            "slots_per_session ({}) must be positive and below the candidate set size ({n_cand})",
            cfg.slots_per_session
        )));
    }

    let sessions: Vec<(SessionDraw, Vec<u8>)> = (0..cfg.n_sessions)
        .into_par_iter()
        .map(|sid| {
            let draw = draw_session(catalog, cfg, proxy, pool, seed, sid as u64, sid)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1abe1);
            rng.set_stream(sid as u64);
            let labels = draw
                .displayed
                .iter()
                .map(|&s| {
                    let p = catalog.click_probability(draw.candidates.user_id, cfg.source.subject(s), draw.candidates.context)?;
                    let b = Bernoulli::new(p).map_err(|e| Error::Invalid(e.to_string()))?;
                    Ok(u8::from(b.sample(&mut rng)))
                })
                .collect::<Result<Vec<u8>>>()?;
            Ok((draw, labels))
        })
        .collect::<Result<_>>()?;

    let mut counts: BTreeMap<usize, (u64, u64)> = BTreeMap::new();
    let display_propensity = if cfg.policy == Policy::Uniform {
        let p = cfg.slots_per_session as f64 / n_cand as f64;
        (0..pool).map(|id| (id, p)).collect()
    } else {
        let shadow: Vec<SessionDraw> = (0..cfg.n_sessions * cfg.shadow_factor)
            .into_par_iter()
            .map(|i| draw_session(catalog, cfg, proxy, pool, seed, SHADOW_STREAM_OFFSET + i as u64, i))
            .collect::<Result<_>>()?;
        for d in shadow.iter().chain(sessions.iter().map(|(d, _)| d)) {
            tally(&mut counts, &d.candidates.candidates, &d.displayed);
        }
        counts
            .iter()
            .filter(|(_, &(disp, _))| disp > 0)
            .map(|(&id, &(disp, cand))| (id, disp as f64 / cand as f64))
            .collect()
    };

    let mut records = Vec::with_capacity(cfg.n_sessions * cfg.slots_per_session);
    let mut candidate_sets = Vec::with_capacity(cfg.n_sessions);
    for (draw, labels) in sessions {
        for (&subject_id, &label) in draw.displayed.iter().zip(&labels) {
            records.push(ImpressionRecord {
                session_id: draw.candidates.session_id,
                user_id: draw.candidates.user_id,
                subject_id,
                context: draw.candidates.context,
                label,
                source: cfg.source,
            });
        }
        candidate_sets.push(draw.candidates);
    }
    Ok(ImpressionLog {
        source: cfg.source,
        policy: cfg.policy,
        records,
        candidate_sets,
        display_propensity,
    })
}

fn tally(counts: &mut BTreeMap<usize, (u64, u64)>, candidates: &[usize], displayed: &[usize]) {
    for &c in candidates {
        counts.entry(c).or_default().1 += 1;
    }
    for &d in displayed {
        counts.entry(d).or_default().0 += 1;
    }
}

/// Per subject: (sessions displaying it, sessions where it was a candidate).
pub fn display_counts(log: &ImpressionLog) -> BTreeMap<usize, (u64, u64)> {
    let mut counts = BTreeMap::new();
    let displayed = log.displayed_by_session();
    for (s, shown) in log.candidate_sets.iter().zip(&displayed) {
        let mut shown = shown.clone();
        shown.sort_unstable();
        shown.dedup();
        tally(&mut counts, &s.candidates, &shown);
    }
    counts
}

/// Impression ratio per subject: displays over candidacies. Subjects that were
/// never candidates are absent.
pub fn impression_ratio(log: &ImpressionLog) -> BTreeMap<usize, f64> {
    display_counts(log)
        .into_iter()
        .map(|(id, (d, c))| (id, d as f64 / c as f64))
        .collect()
}

/// Sorts ids by descending IR (ties by ascending id) and splits them into
/// `n_groups` near-equal groups; earlier groups absorb the remainder.
pub fn ir_group_partition(ir: &BTreeMap<usize, f64>, n_groups: usize) -> Result<Vec<Vec<usize>>> {
    if n_groups < 2 {
        return Err(Error::Invalid(format!("need at least 2 groups, got {n_groups}")));
    }
    if ir.len() < n_groups {
        return Err(Error::Invalid(format!("{} ads cannot fill {n_groups} groups", ir.len())));
    }
    let mut ids: Vec<(usize, f64)> = ir.iter().map(|(&k, &v)| (k, v)).collect();
    ids.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let base = ids.len() / n_groups;
    let extra = ids.len() % n_groups;
    let mut groups = Vec::with_capacity(n_groups);
    let mut it = ids.into_iter().map(|(k, _)| k);
    for g in 0..n_groups {
        let size = base + usize::from(g < extra);
        groups.push(it.by_ref().take(size).collect());
    }
    Ok(groups)
}

/// Re-ranks every logged session's candidates under `policy` and returns the
/// fraction of sessions whose displayed set changes.
pub fn mechanism_flip_rate(log: &ImpressionLog, catalog: &Catalog, policy: Policy, proxy: &dyn ScoringFn, seed: u64) -> Result<f64> {
    if log.candidate_sets.is_empty() {
        return Err(Error::Invalid("log has no sessions".into()));
    }
    let displayed = log.displayed_by_session();
    let changed: Vec<bool> = log
        .candidate_sets
        .par_iter()
        .zip(&displayed)
        .map(|(s, shown)| {
            let scores = s
                .candidates
                .iter()
                .map(|&c| proxy.score(catalog, s.user_id, log.source.subject(c), s.context))
                .collect::<Result<Vec<_>>>()?;
            let bids: Option<Vec<f64>> = (log.source == Source::Ad).then(|| s.candidates.iter().map(|&c| catalog.ads[c].bid).collect());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(s.session_id as u64);
            let order = rank_candidates(policy, &scores, bids.as_deref(), shown.len(), &mut rng)?;
            let mut new: Vec<usize> = order.into_iter().map(|p| s.candidates[p]).collect();
            let mut old = shown.clone();
            new.sort_unstable();
            old.sort_unstable();
            Ok(new != old)
        })
        .collect::<Result<_>>()?;
    Ok(changed.iter().filter(|&&c| c).count() as f64 / changed.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_log() -> ImpressionLog {
        let ctx = Context { time_bucket: 0, device: 0 };
        let candidate_sets = (0..4)
            .map(|s| SessionCandidates {
                session_id: s,
                user_id: 0,
                context: ctx,
                candidates: vec![7, 8, 9],
            })
            .collect();
        let rec = |s, a| ImpressionRecord {
            session_id: s,
            user_id: 0,
            subject_id: a,
            context: ctx,
            label: 0,
            source: Source::Ad,
        };
        ImpressionLog {
            source: Source::Ad,
            policy: Policy::Ecpm,
            records: vec![rec(0, 7), rec(1, 7), rec(0, 9), rec(1, 9), rec(2, 9), rec(3, 9)],
            candidate_sets,
            display_propensity: BTreeMap::new(),
        }
    }

    #[test]
    fn ecpm_and_pctr_disagree_on_the_reference_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let scores = [0.10, 0.15];
        let bids = [2.0, 1.0];
        assert_eq!(rank_candidates(Policy::Ecpm, &scores, Some(&bids), 1, &mut rng).unwrap(), vec![0]);
        assert_eq!(rank_candidates(Policy::Pctr, &scores, Some(&bids), 1, &mut rng).unwrap(), vec![1]);
        assert!(rank_candidates(Policy::Pctr, &[], None, 1, &mut rng).is_err());
        assert!(rank_candidates(Policy::Ecpm, &scores, None, 1, &mut rng).is_err());
    }

    #[test]
    fn impression_ratio_counts() {
        let ir = impression_ratio(&toy_log());
        assert_eq!(ir[&7], 0.5);
        assert_eq!(ir[&8], 0.0);
        assert_eq!(ir[&9], 1.0);
        assert!(!ir.contains_key(&3));
        toy_log().validate().unwrap();
    }

    #[test]
    fn partition_shapes_and_ties() {
        let ir: BTreeMap<usize, f64> = (0..12).map(|i| (i, i as f64 / 12.0)).collect();
        let g = ir_group_partition(&ir, 12).unwrap();
        assert_eq!(g.len(), 12);
        assert_eq!(g[0], vec![11]);
        assert_eq!(g[11], vec![0]);

        let ir: BTreeMap<usize, f64> = (0..8).map(|i| (i, i as f64)).collect();
        let g = ir_group_partition(&ir, 4).unwrap();
        assert_eq!(g[0], vec![7, 6]);

        let flat: BTreeMap<usize, f64> = (0..7).map(|i| (i, 0.3)).collect();
        let g = ir_group_partition(&flat, 3).unwrap();
        assert_eq!(g, vec![vec![0, 1, 2], vec![3, 4], vec![5, 6]]);

        assert!(ir_group_partition(&flat, 1).is_err());
        assert!(ir_group_partition(&flat, 8).is_err());
    }

    #[test]
    fn policy_parsing() {
        assert_eq!("ecpm".parse::<Policy>().unwrap(), Policy::Ecpm);
        assert_eq!("UNIFORM".parse::<Policy>().unwrap(), Policy::Uniform);
        assert!(matches!("greedy".parse::<Policy>(), Err(Error::Config(_))));
    }
}
