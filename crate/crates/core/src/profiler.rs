// SPDX-License-Identifier: Apache-2.0

//! Fingerprint database construction from marker-instrumented traces.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::bytecode::Label;
use crate::preprocess::{SegClass, Segment};
use crate::trace::{AccessMode, FrameNumber, SideChannelTrace};

pub const DB_FORMAT: &str = "optrace-fingerprint-db";
pub const DB_VERSION: u32 = 1;
/// Decimal places kept for mean latencies.
pub const LATENCY_DECIMALS: i32 = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Fingerprint {
    pub label: Label,
    pub mode_seq: Vec<AccessMode>,
    pub class_seq: Vec<SegClass>,
    pub pf_seq: Vec<u32>,
    pub latency_mean: Vec<f64>,
    pub support: u64,
}

impl Fingerprint {
    pub fn len(&self) -> usize {
        self.mode_seq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mode_seq.is_empty()
    }

    fn from_segment(seg: &Segment, label: Label) -> Self {
        Fingerprint {
            label,
            mode_seq: seg.modes.clone(),
            class_seq: seg.classes.clone(),
            pf_seq: seg.events.iter().map(|e| e.pf_count).collect(),
            latency_mean: seg.latencies.clone(),
            support: 1,
        }
    }

    fn structure(&self) -> StructureKey<'_> {
        (self.label, &self.mode_seq, &self.class_seq, &self.pf_seq)
    }

    /// Pf counts as reals, for the numeric scorer.
    pub fn pf_values(&self) -> Vec<f64> {
        self.pf_seq.iter().map(|&p| p as f64).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DbMeta {
    pub layout_seed: u64,
    /// Hash of the configuration that produced the database.
    pub config_hash: String,
    /// Free-form creation parameters.
    pub params: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FingerprintDb {
    pub entries: Vec<Fingerprint>,
    pub meta: DbMeta,
}

impl FingerprintDb {
    pub fn labels(&self) -> BTreeSet<Label> {
        self.entries.iter().map(|e| e.label).collect()
    }

    pub fn total_support(&self) -> u64 {
        self.entries.iter().map(|e| e.support).sum()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ProfileError {
    #[error("no marker writes to page {0:#x} found")]
    NoMarkers(FrameNumber),
    #[error("trace carries no ground truth")]
    NoTruth,
    #[error("optable read at event {0} has no truth label")]
    TruthMismatch(usize),
    #[error("no labeled observations")]
    Empty,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
}

/// Splits a profiling trace at marker writes. Inside one marker region
/// every further optable read opens a NULL-labeled continuation. Marker
/// events and anything before the region's first optable read are dropped.
pub fn split_by_marker(
    trace: &SideChannelTrace,
    marker_page: FrameNumber,
    optable: FrameNumber,
    stack: &BTreeSet<FrameNumber>,
) -> Result<Vec<(Segment, Label)>, ProfileError> {
    let truth = trace.truth.as_ref().ok_or(ProfileError::NoTruth)?;
    let labels: HashMap<usize, Label> = truth.iter().map(|b| (b.index, b.label)).collect();
    let events = &trace.events;
    let markers: Vec<usize> = events
        .iter()
        .enumerate()
        .filter(|(_, e)| e.page == marker_page && e.mode == AccessMode::W)
        .map(|(i, _)| i)
        .collect();
    if markers.is_empty() {
        return Err(ProfileError::NoMarkers(marker_page));
    }
    let mut out = Vec::new();
    for (k, &m) in markers.iter().enumerate() {
        let end = markers.get(k + 1).copied().unwrap_or(events.len());
        let starts: Vec<usize> = (m + 1..end)
            .filter(|&i| events[i].page == optable && events[i].mode == AccessMode::R)
            .collect();
        for (j, &s) in starts.iter().enumerate() {
            let e = starts.get(j + 1).copied().unwrap_or(end);
            let label = *labels.get(&s).ok_or(ProfileError::TruthMismatch(s))?;
            // Only the first read of a region dispatches an opcode.
            let label = if j == 0 { label } else { Label::Null };
            out.push((Segment::new(events[s..e].to_vec(), s, optable, stack), label));
        }
    }
    Ok(out)
}

/// One raw fingerprint per observation.
pub fn build_fingerprints(labeled: &[(Segment, Label)], meta: DbMeta) -> Result<FingerprintDb, ProfileError> {
    if labeled.is_empty() {
        return Err(ProfileError::Empty);
    }
    Ok(FingerprintDb {
        entries: labeled.iter().map(|(s, l)| Fingerprint::from_segment(s, *l)).collect(),
        meta,
    })
}

fn round_latency(x: f64) -> f64 {
    let scale = 10f64.powi(LATENCY_DECIMALS);
    (x * scale).round() / scale
}

type StructureKey<'a> = (Label, &'a [AccessMode], &'a [SegClass], &'a [u32]);

/// Groups entries with identical label and structure; latencies become
/// support-weighted means. Output is ordered by label, then structure.
pub fn dedup_db(db: &FingerprintDb) -> FingerprintDb {
    let mut groups: BTreeMap<StructureKey, Vec<&Fingerprint>> = BTreeMap::new();
    for e in &db.entries {
        groups.entry(e.structure()).or_default().push(e);
    }
    let entries = groups
        .into_values()
        .map(|group| {
            let first = group[0];
            if group.len() == 1 {
                return Fingerprint {
                    latency_mean: first.latency_mean.iter().map(|&x| round_latency(x)).collect(),
                    ..first.clone()
                };
            }
            let support: u64 = group.iter().map(|e| e.support).sum();
            let mut sums = vec![0.0f64; first.len()];
            for e in &group {
                for (s, &x) in sums.iter_mut().zip(&e.latency_mean) {
                    *s += x * e.support as f64;
                }
            }
            Fingerprint {
                latency_mean: sums.iter().map(|s| round_latency(s / support as f64)).collect(),
                support,
                ..first.clone()
            }
        })
        .collect();
    FingerprintDb {
        entries,
        meta: db.meta.clone(),
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    entries: usize,
    meta: DbMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    label: String,
    mode_seq: String,
    class_seq: Vec<SegClass>,
    pf_seq: Vec<u32>,
    latency_mean: Vec<f64>,
    support: u64,
}

/// Writes the database as JSON lines: a header, then one record per entry.
pub fn write_db(mut w: impl Write, db: &FingerprintDb) -> Result<(), ProfileError> {
    let header = Header {
        format: DB_FORMAT.into(),
        version: DB_VERSION,
        entries: db.entries.len(),
        meta: db.meta.clone(),
    };
    writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes"))?;
    for e in &db.entries {
        let rec = Record {
            label: e.label.name().into(),
            mode_seq: e.mode_seq.iter().map(|m| m.as_char()).collect(),
            class_seq: e.class_seq.clone(),
            pf_seq: e.pf_seq.clone(),
            latency_mean: e.latency_mean.iter().map(|&x| round_latency(x)).collect(),
            support: e.support,
        };
        writeln!(w, "{}", serde_json::to_string(&rec).expect("record serializes"))?;
    }
    Ok(())
}

pub fn read_db(r: impl BufRead) -> Result<FingerprintDb, ProfileError> {
    let mut lines = r.lines();
    let fmt_err = |line: usize, msg: String| ProfileError::Format { line, msg };
    let first = lines.next().ok_or_else(|| fmt_err(1, "missing header".into()))??;
    let header: Header = serde_json::from_str(&first).map_err(|e| fmt_err(1, e.to_string()))?;
    if header.format != DB_FORMAT {
        return Err(fmt_err(1, format!("not a fingerprint database (format `{}`)", header.format)));
    }
    if header.version != DB_VERSION {
        return Err(fmt_err(1, format!("unsupported version {}", header.version)));
    }
    let mut entries = Vec::with_capacity(header.entries);
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| fmt_err(lineno, e.to_string()))?;
        let label: Label = rec.label.parse().map_err(|e| fmt_err(lineno, format!("{e}")))?;
        let mode_seq = rec
            .mode_seq
            .chars()
            .map(|c| AccessMode::from_char(c).ok_or_else(|| fmt_err(lineno, format!("bad mode `{c}`"))))
            .collect::<Result<Vec<_>, _>>()?;
        let n = mode_seq.len();
        if rec.class_seq.len() != n || rec.pf_seq.len() != n || rec.latency_mean.len() != n {
            return Err(fmt_err(lineno, "channel sequences differ in length".into()));
        }
        if rec.support == 0 {
            return Err(fmt_err(lineno, "support must be at least 1".into()));
        }
        entries.push(Fingerprint {
            label,
            mode_seq,
            class_seq: rec.class_seq,
            pf_seq: rec.pf_seq,
            latency_mean: rec.latency_mean,
            support: rec.support,
        });
    }
    if entries.len() != header.entries {
        return Err(fmt_err(1, format!("header announces {} entries, found {}", header.entries, entries.len())));
    }
    Ok(FingerprintDb {
        entries,
        meta: header.meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bytecode::Opcode;

    fn fp(label: Label, lat: &[f64], support: u64) -> Fingerprint {
        Fingerprint {
            label,
            mode_seq: vec![AccessMode::R; lat.len()],
            class_seq: vec![SegClass::Other; lat.len()],
            pf_seq: vec![8; lat.len()],
            latency_mean: lat.to_vec(),
            support,
        }
    }

    #[test]
    fn dedup_averages_and_counts() {
        let add = Label::Op(Opcode::I32Add);
        let db = FingerprintDb {
            entries: vec![fp(add, &[10.0, 20.0], 1), fp(add, &[12.0, 26.0], 1)],
            meta: DbMeta::default(),
        };
        let d = dedup_db(&db);
        assert_eq!(d.entries.len(), 1);
        assert_eq!(d.entries[0].latency_mean, vec![11.0, 23.0]);
        assert_eq!(d.entries[0].support, 2);
        assert_eq!(dedup_db(&d), d);
    }

    #[test]
    fn different_labels_stay_apart() {
        let db = FingerprintDb {
            entries: vec![fp(Label::Op(Opcode::I32Add), &[1.0], 1), fp(Label::Op(Opcode::I32Sub), &[1.0], 1)],
            meta: DbMeta::default(),
        };
        assert_eq!(dedup_db(&db).entries.len(), 2);
    }

    #[test]
    fn weighted_merge_is_idempotent_over_partial_dedups() {
        let add = Label::Op(Opcode::I32Add);
        let raw = vec![fp(add, &[1.0], 1), fp(add, &[2.0], 1), fp(add, &[6.0], 1)];
        let all = dedup_db(&FingerprintDb {
            entries: raw.clone(),
            meta: DbMeta::default(),
        });
        let partial = dedup_db(&FingerprintDb {
            entries: raw[..2].to_vec(),
            meta: DbMeta::default(),
        });
        let mut mixed = partial.entries.clone();
        mixed.push(raw[2].clone());
        let again = dedup_db(&FingerprintDb {
            entries: mixed,
            meta: DbMeta::default(),
        });
        assert_eq!(again.entries, all.entries);
        assert_eq!(all.entries[0].latency_mean, vec![3.0]);
    }

    #[test]
    fn file_round_trip() {
        let db = FingerprintDb {
            entries: vec![fp(Label::Null, &[5400.333, 5285.0], 3), fp(Label::Op(Opcode::Drop), &[1.5], 1)],
            meta: DbMeta {
                layout_seed: 7,
                config_hash: "abc".into(),
                params: BTreeMap::from([("k".into(), "v".into())]),
            },
        };
        let mut buf = Vec::new();
        write_db(&mut buf, &db).unwrap();
        let back = read_db(buf.as_slice()).unwrap();
        assert_eq!(back, db);
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().nth(1).unwrap().contains("\"label\":\"NULL\""));
    }

    #[test]
    fn malformed_files() {
        assert!(read_db("".as_bytes()).is_err());
        assert!(read_db("{\"format\":\"x\",\"version\":1,\"entries\":0,\"meta\":{\"layout_seed\":0,\"config_hash\":\"\",\"params\":{}}}".as_bytes()).is_err());
    }
}
