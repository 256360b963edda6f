//! File formats for catalogs and impression logs.
//!
//! A log with stem `ad` is stored as three tab-separated files:
//!
//! * `ad.tsv`: one record per line,
//!   `session_id  source  user_id  subject_id  time_bucket  device  label`.
//! * `ad.candidates.tsv`: a `# source=<ad|rec> policy=<POLICY>` header, then
//!   one session per line, `session_id  user_id  time_bucket  device  id,id,...`.
//! * `ad.propensity.tsv`: `subject_id  display_probability`.
//!
//! The catalog is a single JSON document.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::catalog::{Catalog, Context};
use super::sessions::{ImpressionLog, ImpressionRecord, Policy, SessionCandidates, Source};
use crate::error::{Error, Result};

pub fn write_catalog(catalog: &Catalog, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, catalog)?;
    w.flush()?;
    Ok(())
}

pub fn read_catalog(path: &Path) -> Result<Catalog> {
    let r = BufReader::new(File::open(path)?);
    Ok(serde_json::from_reader(r)?)
}

/// The three paths a log occupies under `dir`.
pub fn log_paths(dir: &Path, stem: &str) -> [PathBuf; 3] {
    [
        dir.join(format!("{stem}.tsv")),
        dir.join(format!("{stem}.candidates.tsv")),
        dir.join(format!("{stem}.propensity.tsv")),
    ]
}

pub fn write_log(log: &ImpressionLog, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    let [records, candidates, propensity] = log_paths(dir, stem);
    let mut w = BufWriter::new(File::create(&records)?);
    for r in &log.records {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.session_id,
            r.source.as_str(),
            r.user_id,
            r.subject_id,
            r.context.time_bucket,
            r.context.device,
            r.label
        )?;
    }
    w.flush()?;

    let mut w = BufWriter::new(File::create(&candidates)?);
    writeln!(w, "# source={} policy={}", log.source.as_str(), log.policy)?;
    for s in &log.candidate_sets {
        let ids: Vec<String> = s.candidates.iter().map(|c| c.to_string()).collect();
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            s.session_id,
            s.user_id,
            s.context.time_bucket,
            s.context.device,
            ids.join(",")
        )?;
    }
    w.flush()?;

    let mut w = BufWriter::new(File::create(&propensity)?);
    for (id, p) in &log.display_propensity {
        writeln!(w, "{id}\t{p}")?;
    }
    w.flush()?;
    Ok(vec![records, candidates, propensity])
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn fields<'a, const N: usize>(path: &Path, line_no: usize, line: &'a str) -> Result<[&'a str; N]> {
    let parts: Vec<&str> = line.split('\t').collect();
    parts
        .try_into()
        .map_err(|p: Vec<&str>| parse_err(path, line_no, format!("expected {N} fields, found {}", p.len())))
}

fn num<T: std::str::FromStr>(path: &Path, line: usize, s: &str) -> Result<T> {
    s.parse().map_err(|_| parse_err(path, line, format!("bad number {s:?}")))
}

pub fn read_log(dir: &Path, stem: &str) -> Result<ImpressionLog> {
    let [records_path, candidates_path, propensity_path] = log_paths(dir, stem);

    let mut lines = BufReader::new(File::open(&candidates_path)?).lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    let (mut source, mut policy) = (None, None);
    for kv in header.trim_start_matches('#').split_whitespace() {
        match kv.split_once('=') {
            Some(("source", v)) => source = Some(v.parse::<Source>()?),
            Some(("policy", v)) => policy = Some(v.parse::<Policy>()?),
            _ => {}
        }
    }
    let (source, policy) = source
        .zip(policy)
        .ok_or_else(|| parse_err(&candidates_path, 1, "missing source/policy header"))?;
    let mut candidate_sets = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let n = i + 2;
        let [sid, uid, t, d, ids] = fields::<5>(&candidates_path, n, &line)?;
        let candidates = if ids.is_empty() {
            Vec::new()
        } else {
            ids.split(',').map(|c| num(&candidates_path, n, c)).collect::<Result<_>>()?
        };
        let session_id: usize = num(&candidates_path, n, sid)?;
        if session_id != candidate_sets.len() {
            return Err(parse_err(&candidates_path, n, "session ids must be dense and in order"));
        }
        candidate_sets.push(SessionCandidates {
            session_id,
            user_id: num(&candidates_path, n, uid)?,
            context: Context {
                time_bucket: num(&candidates_path, n, t)?,
                device: num(&candidates_path, n, d)?,
            },
            candidates,
        });
    }

    let mut records = Vec::new();
    for (i, line) in BufReader::new(File::open(&records_path)?).lines().enumerate() {
        let line = line?;
        let n = i + 1;
        let [sid, src, uid, subj, t, d, label] = fields::<7>(&records_path, n, &line)?;
        let label: u8 = num(&records_path, n, label)?;
        if label > 1 {
            return Err(parse_err(&records_path, n, format!("label {label} outside {{0,1}}")));
        }
        records.push(ImpressionRecord {
            session_id: num(&records_path, n, sid)?,
            source: src.parse().map_err(|_| parse_err(&records_path, n, format!("bad source {src:?}")))?,
            user_id: num(&records_path, n, uid)?,
            subject_id: num(&records_path, n, subj)?,
            context: Context {
                time_bucket: num(&records_path, n, t)?,
                device: num(&records_path, n, d)?,
            },
            label,
        });
    }

    let mut display_propensity = BTreeMap::new();
    if propensity_path.exists() {
        for (i, line) in BufReader::new(File::open(&propensity_path)?).lines().enumerate() {
            let line = line?;
            let [id, p] = fields::<2>(&propensity_path, i + 1, &line)?;
            display_propensity.insert(num(&propensity_path, i + 1, id)?, num(&propensity_path, i + 1, p)?);
        }
    }

    let log = ImpressionLog {
        source,
        policy,
        records,
        candidate_sets,
        display_propensity,
    };
    log.validate()?;
    Ok(log)
}
