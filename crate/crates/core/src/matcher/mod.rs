// SPDX-License-Identifier: Apache-2.0

//! Template matching of trace segments against a fingerprint database.

mod score;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bytecode::Label;
use crate::preprocess::Segment;
use crate::profiler::{Fingerprint, FingerprintDb};
use crate::trace::TraceFormatError;

pub use score::{hamming, pearson, score_discrete, score_numeric, PearsonError};

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Latency,
    Pf,
    Mode,
    Class,
}

impl Channel {
    pub const ALL: [Channel; 4] = [Channel::Latency, Channel::Pf, Channel::Mode, Channel::Class];

    pub fn name(self) -> &'static str {
        match self {
            Channel::Latency => "latency",
            Channel::Pf => "pf",
            Channel::Mode => "mode",
            Channel::Class => "class",
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ChannelError {
    #[error("unknown channel `{0}` (expected latency, pf, mode or class)")]
    Unknown(String),
    #[error("channel set is empty")]
    Empty,
}

impl FromStr for Channel {
    type Err = ChannelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Channel::ALL
            .into_iter()
            .find(|c| c.name() == s.trim())
            .ok_or_else(|| ChannelError::Unknown(s.to_string()))
    }
}

/// Non-empty set of enabled channels.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ChannelSet(BTreeSet<Channel>);

impl ChannelSet {
    pub fn all() -> Self {
        ChannelSet(Channel::ALL.into_iter().collect())
    }

    pub fn new(channels: impl IntoIterator<Item = Channel>) -> Result<Self, ChannelError> {
        let set: BTreeSet<_> = channels.into_iter().collect();
        if set.is_empty() {
            return Err(ChannelError::Empty);
        }
        Ok(ChannelSet(set))
    }

    pub fn without(&self, c: Channel) -> Result<Self, ChannelError> {
        Self::new(self.0.iter().copied().filter(|&x| x != c))
    }

    pub fn contains(&self, c: Channel) -> bool {
        self.0.contains(&c)
    }

    pub fn iter(&self) -> impl Iterator<Item = Channel> + '_ {
        self.0.iter().copied()
    }
}

impl FromStr for ChannelSet {
    type Err = ChannelError;

    /// `all` or a `+`/`,`-separated list such as `pf+mode+class`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.trim() == "all" {
            return Ok(Self::all());
        }
        let parts = s.split(['+', ',']).map(str::trim).filter(|p| !p.is_empty());
        Self::new(parts.map(str::parse).collect::<Result<Vec<Channel>, _>>()?)
    }
}

impl fmt::Display for ChannelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self == Self::all() {
            return f.write_str("all");
        }
        let names: Vec<_> = self.iter().map(Channel::name).collect();
        f.write_str(&names.join("+"))
    }
}

/// Similarity of one side channel between a segment and a fingerprint, in `[0, 1]`.
pub trait ChannelScorer: Send + Sync {
    fn channel(&self) -> Channel;
    fn score(&self, seg: &Segment, fp: &Fingerprint) -> f64;
}

struct LatencyScorer;
struct PfScorer;
struct ModeScorer;
struct ClassScorer;

impl ChannelScorer for LatencyScorer {
    fn channel(&self) -> Channel {
        Channel::Latency
    }
    fn score(&self, seg: &Segment, fp: &Fingerprint) -> f64 {
        score_numeric(&seg.latencies, &fp.latency_mean)
    }
}

impl ChannelScorer for PfScorer {
    fn channel(&self) -> Channel {
        Channel::Pf
    }
    fn score(&self, seg: &Segment, fp: &Fingerprint) -> f64 {
        score_numeric(&seg.pfs, &fp.pf_values())
    }
}

impl ChannelScorer for ModeScorer {
    fn channel(&self) -> Channel {
        Channel::Mode
    }
    fn score(&self, seg: &Segment, fp: &Fingerprint) -> f64 {
        score_discrete(&seg.modes, &fp.mode_seq)
    }
}

impl ChannelScorer for ClassScorer {
    fn channel(&self) -> Channel {
        Channel::Class
    }
    fn score(&self, seg: &Segment, fp: &Fingerprint) -> f64 {
        score_discrete(&seg.classes, &fp.class_seq)
    }
}

/// Scorers keyed by channel.
pub struct ScorerRegistry {
    scorers: BTreeMap<Channel, Box<dyn ChannelScorer>>,
}

impl ScorerRegistry {
    pub fn builtin() -> Self {
        let mut r = ScorerRegistry {
            scorers: BTreeMap::new(),
        };
        r.register(Box::new(LatencyScorer));
        r.register(Box::new(PfScorer));
        r.register(Box::new(ModeScorer));
        r.register(Box::new(ClassScorer));
        r
    }

    /// Replaces the scorer for its channel.
    pub fn register(&mut self, s: Box<dyn ChannelScorer>) {
        self.scorers.insert(s.channel(), s);
    }

    pub fn get(&self, c: Channel) -> Option<&dyn ChannelScorer> {
        self.scorers.get(&c).map(|b| b.as_ref())
    }

    /// Product of the enabled channel scores; disabled channels count as 1.
    pub fn score_segment(&self, seg: &Segment, fp: &Fingerprint, channels: &ChannelSet) -> f64 {
        channels
            .iter()
            .filter_map(|c| self.get(c))
            .map(|s| s.score(seg, fp))
            .product()
    }
}

/// Product of the enabled built-in channel scores.
pub fn score_segment(seg: &Segment, fp: &Fingerprint, channels: &ChannelSet) -> f64 {
    ScorerRegistry::builtin().score_segment(seg, fp, channels)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchOutcome {
    pub segment_index: usize,
    pub predicted: Label,
    pub score: f64,
    /// Best score minus the best score of any entry with a different label.
    pub runner_up_margin: f64,
}

/// Preference between two scored entries: higher score, then higher
/// support, then the lexicographically smaller label name.
fn better(a: (f64, &Fingerprint), b: (f64, &Fingerprint)) -> bool {
    match a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => match a.1.support.cmp(&b.1.support) {
            Ordering::Greater => true,
            Ordering::Less => false,
            Ordering::Equal => a.1.label.name() < b.1.label.name(),
        },
    }
}

fn match_one(reg: &ScorerRegistry, idx: usize, seg: &Segment, db: &FingerprintDb, channels: &ChannelSet) -> MatchOutcome {
    let mut best: Option<(f64, &Fingerprint)> = None;
    let mut per_label: BTreeMap<Label, f64> = BTreeMap::new();
    for fp in &db.entries {
        let s = reg.score_segment(seg, fp, channels);
        let slot = per_label.entry(fp.label).or_insert(0.0);
        *slot = slot.max(s);
        if best.is_none_or(|b| better((s, fp), b)) {
            best = Some((s, fp));
        }
    }
    let (score, fp) = best.expect("database is non-empty");
    let runner_up = per_label
        .iter()
        .filter(|(l, _)| **l != fp.label)
        .map(|(_, &s)| s)
        .fold(0.0, f64::max);
    MatchOutcome {
        segment_index: idx,
        predicted: fp.label,
        score,
        runner_up_margin: (score - runner_up).max(0.0),
    }
}

/// Best database entry for each segment. Segments are scored in parallel;
/// the result is deterministic. An empty database yields NULL predictions
/// with score 0.
pub fn match_trace(segments: &[Segment], db: &FingerprintDb, channels: &ChannelSet) -> Vec<MatchOutcome> {
    match_trace_with(&ScorerRegistry::builtin(), segments, db, channels)
}

pub fn match_trace_with(
    reg: &ScorerRegistry,
    segments: &[Segment],
    db: &FingerprintDb,
    channels: &ChannelSet,
) -> Vec<MatchOutcome> {
    if db.entries.is_empty() {
        return (0..segments.len())
            .map(|i| MatchOutcome {
                segment_index: i,
                predicted: Label::Null,
                score: 0.0,
                runner_up_margin: 0.0,
            })
            .collect();
    }
    segments
        .par_iter()
        .enumerate()
        .map(|(i, seg)| match_one(reg, i, seg, db, channels))
        .collect()
}

pub const PREDICTIONS_HEADER: [&str; 4] = ["segment_id", "label", "score", "margin"];

/// Writes one row per outcome; scores carry six decimals.
pub fn write_predictions_csv(w: impl Write, outcomes: &[MatchOutcome]) -> Result<(), TraceFormatError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(PREDICTIONS_HEADER)?;
    for o in outcomes {
        wtr.write_record([
            o.segment_index.to_string(),
            o.predicted.name().to_string(),
            format!("{:.6}", o.score),
            format!("{:.6}", o.runner_up_margin),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads predictions back, ordered by segment id; ids must be `0..n`.
pub fn read_predictions_csv(r: impl Read) -> Result<Vec<MatchOutcome>, TraceFormatError> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
    let headers = rdr.headers()?.clone();
    if headers.iter().ne(PREDICTIONS_HEADER) {
        return Err(TraceFormatError::Header {
            found: headers.iter().map(str::to_string).collect(),
            expected: PREDICTIONS_HEADER.to_vec(),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str, v: &str| TraceFormatError::Row {
            row: i + 1,
            msg: format!("bad {what} `{v}`"),
        };
        out.push(MatchOutcome {
            segment_index: rec[0].parse().map_err(|_| bad("segment_id", &rec[0]))?,
            predicted: rec[1].parse().map_err(|_| bad("label", &rec[1]))?,
            score: rec[2].parse().map_err(|_| bad("score", &rec[2]))?,
            runner_up_margin: rec[3].parse().map_err(|_| bad("margin", &rec[3]))?,
        });
    }
    out.sort_by_key(|o| o.segment_index);
    if out.iter().enumerate().any(|(i, o)| o.segment_index != i) {
        return Err(TraceFormatError::Row {
            row: 0,
            msg: "segment ids must cover 0..n exactly once".into(),
        });
    }
    Ok(out)
}
