// SPDX-License-Identifier: Apache-2.0

//! Side-channel event records and their CSV representation.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bytecode::Label;

/// A guest page-frame number.
pub type FrameNumber = u64;

/// Page-fault type observed for one single-step.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AccessMode {
    R,
    W,
    E,
}

impl AccessMode {
    pub fn as_char(self) -> char {
        match self {
            AccessMode::R => 'R',
            AccessMode::W => 'W',
            AccessMode::E => 'E',
        }
    }

    pub fn from_char(c: char) -> Option<Self> {
        match c {
            'R' => Some(AccessMode::R),
            'W' => Some(AccessMode::W),
            'E' => Some(AccessMode::E),
            _ => None,
        }
    }
}

impl fmt::Display for AccessMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

/// One retired native instruction as seen by the attacker.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct StepEvent {
    pub page: FrameNumber,
    pub mode: AccessMode,
    pub pf_count: u32,
    pub latency: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TruthBoundary {
    /// Index of the optable-read event that opens the region.
    pub index: usize,
    pub label: Label,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SideChannelTrace {
    pub events: Vec<StepEvent>,
    pub truth: Option<Vec<TruthBoundary>>,
    pub layout_seed: u64,
}

impl SideChannelTrace {
    pub fn new(events: Vec<StepEvent>) -> Self {
        SideChannelTrace {
            events,
            truth: None,
            layout_seed: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn truth_labels(&self) -> Option<Vec<Label>> {
        self.truth
            .as_ref()
            .map(|t| t.iter().map(|b| b.label).collect())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TraceFormatError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("row {row}: {msg}")]
    Row { row: usize, msg: String },
    #[error("unexpected header {found:?}, expected {expected:?}")]
    Header {
        found: Vec<String>,
        expected: Vec<&'static str>,
    },
}

pub const TRACE_HEADER: [&str; 4] = ["address", "mode", "pf_count", "latency"];
pub const SEGMENTED_HEADER: [&str; 5] = ["address", "mode", "pf_count", "latency", "segment_id"];
pub const TRUTH_HEADER: [&str; 2] = ["boundary_index", "label"];

pub fn format_frame(page: FrameNumber) -> String {
    format!("{page:#x}")
}

pub fn parse_frame(s: &str) -> Option<FrameNumber> {
    let hex = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X"))?;
    u64::from_str_radix(hex, 16).ok()
}

fn row_err(row: usize, msg: impl Into<String>) -> TraceFormatError {
    TraceFormatError::Row {
        row,
        msg: msg.into(),
    }
}

fn parse_event(row: usize, rec: &csv::StringRecord) -> Result<StepEvent, TraceFormatError> {
    let page = parse_frame(&rec[0]).ok_or_else(|| row_err(row, format!("bad address `{}`", &rec[0])))?;
    let mut mode_chars = rec[1].chars();
    let mode = match (mode_chars.next(), mode_chars.next()) {
        (Some(c), None) => AccessMode::from_char(c),
        _ => None,
    }
    .ok_or_else(|| row_err(row, format!("bad mode `{}`", &rec[1])))?;
    let pf_count = u32::from_str(&rec[2]).map_err(|_| row_err(row, format!("bad pf_count `{}`", &rec[2])))?;
    let latency = u64::from_str(&rec[3]).map_err(|_| row_err(row, format!("bad latency `{}`", &rec[3])))?;
    Ok(StepEvent {
        page,
        mode,
        pf_count,
        latency,
    })
}

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r)
}

/// Provenance carried in a leading `# key=value ...` comment line of CSV artifacts.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ArtifactMeta {
    pub config_hash: String,
    pub layout_seed: u64,
}

impl ArtifactMeta {
    pub fn write_comment(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "# config_hash={} layout_seed={}", self.config_hash, self.layout_seed)
    }

    /// Parses the comment line written by [`ArtifactMeta::write_comment`], if `text` starts with one.
    pub fn from_text(text: &str) -> Option<Self> {
        let line = text.lines().next()?.strip_prefix('#')?;
        let mut meta = ArtifactMeta::default();
        let mut seen = 0;
        for kv in line.split_whitespace() {
            match kv.split_once('=') {
                Some(("config_hash", v)) => {
                    meta.config_hash = v.to_string();
                    seen += 1;
                }
                Some(("layout_seed", v)) => {
                    meta.layout_seed = v.parse().ok()?;
                    seen += 1;
                }
                _ => {}
            }
        }
        (seen == 2).then_some(meta)
    }
}

fn check_header(rdr: &mut csv::Reader<impl Read>, expected: &[&'static str]) -> Result<(), TraceFormatError> {
    let headers = rdr.headers()?.clone();
    if headers.iter().ne(expected.iter().copied()) {
        return Err(TraceFormatError::Header {
            found: headers.iter().map(str::to_string).collect(),
            expected: expected.to_vec(),
        });
    }
    Ok(())
}

pub fn write_trace_csv(w: impl Write, events: &[StepEvent]) -> Result<(), TraceFormatError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(TRACE_HEADER)?;
    for e in events {
        wtr.write_record([
            format_frame(e.page),
            e.mode.to_string(),
            e.pf_count.to_string(),
            e.latency.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_trace_csv(r: impl Read) -> Result<Vec<StepEvent>, TraceFormatError> {
    let mut rdr = reader(r);
    check_header(&mut rdr, &TRACE_HEADER)?;
    rdr.records()
        .enumerate()
        .map(|(i, rec)| parse_event(i + 1, &rec?))
        .collect()
}

/// Writes events with the segment each belongs to. Events before the first
/// segment are not written.
pub fn write_segmented_csv(
    w: impl Write,
    events: &[StepEvent],
    segment_starts: &[usize],
) -> Result<(), TraceFormatError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(SEGMENTED_HEADER)?;
    for (seg_id, &start) in segment_starts.iter().enumerate() {
        let end = segment_starts.get(seg_id + 1).copied().unwrap_or(events.len());
        for e in &events[start..end] {
            wtr.write_record([
                format_frame(e.page),
                e.mode.to_string(),
                e.pf_count.to_string(),
                e.latency.to_string(),
                seg_id.to_string(),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Reads a segmented trace back into its events and segment start offsets.
pub fn read_segmented_csv(r: impl Read) -> Result<(Vec<StepEvent>, Vec<usize>), TraceFormatError> {
    let mut rdr = reader(r);
    check_header(&mut rdr, &SEGMENTED_HEADER)?;
    let mut events = Vec::new();
    let mut starts = Vec::new();
    let mut current: Option<usize> = None;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        events.push(parse_event(row, &rec)?);
        let seg = usize::from_str(&rec[4]).map_err(|_| row_err(row, format!("bad segment_id `{}`", &rec[4])))?;
        match current {
            Some(c) if c == seg => {}
            Some(c) if seg == c + 1 => {
                starts.push(events.len() - 1);
                current = Some(seg);
            }
            None if seg == 0 => {
                starts.push(0);
                current = Some(0);
            }
            _ => return Err(row_err(row, format!("segment ids must be consecutive from 0, found {seg}"))),
        }
    }
    Ok((events, starts))
}

pub fn write_truth_csv(w: impl Write, truth: &[TruthBoundary]) -> Result<(), TraceFormatError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(TRUTH_HEADER)?;
    for b in truth {
        wtr.write_record([b.index.to_string(), b.label.name().to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_truth_csv(r: impl Read) -> Result<Vec<TruthBoundary>, TraceFormatError> {
    let mut rdr = reader(r);
    check_header(&mut rdr, &TRUTH_HEADER)?;
    let mut out: Vec<TruthBoundary> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let index = usize::from_str(&rec[0]).map_err(|_| row_err(row, format!("bad boundary_index `{}`", &rec[0])))?;
        let label = Label::from_str(&rec[1]).map_err(|e| row_err(row, e.to_string()))?;
        if out.last().is_some_and(|prev| prev.index >= index) {
            return Err(row_err(row, "boundary indices must be strictly increasing"));
        }
        out.push(TruthBoundary { index, label });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bytecode::Opcode;
    use proptest::prelude::*;

    fn ev(page: u64, mode: AccessMode, pf: u32, lat: u64) -> StepEvent {
        StepEvent {
            page,
            mode,
            pf_count: pf,
            latency: lat,
        }
    }

    #[test]
    fn artifact_meta_comment() {
        let m = ArtifactMeta {
            config_hash: "00ff00ff00ff00ff".into(),
            layout_seed: 12,
        };
        let mut buf = Vec::new();
        m.write_comment(&mut buf).unwrap();
        write_trace_csv(&mut buf, &[ev(0x10, AccessMode::R, 8, 5540)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# config_hash=00ff00ff00ff00ff layout_seed=12\n"));
        assert_eq!(ArtifactMeta::from_text(&text), Some(m));
        assert_eq!(read_trace_csv(text.as_bytes()).unwrap().len(), 1);
        assert_eq!(ArtifactMeta::from_text("address,mode\n"), None);
        assert_eq!(ArtifactMeta::from_text("# layout_seed=x config_hash=a\n"), None);
    }

    #[test]
    fn trace_csv_layout() {
        let events = vec![ev(0x26a4d, AccessMode::R, 8, 5540), ev(0x2cc78, AccessMode::E, 5, 5280)];
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &events).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text, "address,mode,pf_count,latency\n0x26a4d,R,8,5540\n0x2cc78,E,5,5280\n");
        assert_eq!(read_trace_csv(&buf[..]).unwrap(), events);
    }

    #[test]
    fn rejects_malformed_rows() {
        let bad = "address,mode,pf_count,latency\n26a4d,R,8,5540\n";
        assert!(matches!(read_trace_csv(bad.as_bytes()), Err(TraceFormatError::Row { row: 1, .. })));
        let bad = "address,mode,pf_count,latency\n0x1,X,8,5540\n";
        assert!(read_trace_csv(bad.as_bytes()).is_err());
        let bad = "addr,mode\n";
        assert!(matches!(read_trace_csv(bad.as_bytes()), Err(TraceFormatError::Header { .. })));
    }

    #[test]
    fn truth_csv() {
        let truth = vec![
            TruthBoundary { index: 0, label: Label::Op(Opcode::Call) },
            TruthBoundary { index: 5, label: Label::Null },
        ];
        let mut buf = Vec::new();
        write_truth_csv(&mut buf, &truth).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "boundary_index,label\n0,call\n5,NULL\n");
        assert_eq!(read_truth_csv(&buf[..]).unwrap(), truth);
        let bad = "boundary_index,label\n3,nop\n3,nop\n";
        assert!(read_truth_csv(bad.as_bytes()).is_err());
    }

    fn arb_event() -> impl Strategy<Value = StepEvent> {
        (any::<u64>(), 0..3u8, any::<u32>(), any::<u64>()).prop_map(|(page, m, pf, lat)| StepEvent {
            page,
            mode: [AccessMode::R, AccessMode::W, AccessMode::E][m as usize],
            pf_count: pf,
            latency: lat,
        })
    }

    proptest! {
        #[test]
        fn csv_round_trip(events in proptest::collection::vec(arb_event(), 0..40)) {
            let mut buf = Vec::new();
            write_trace_csv(&mut buf, &events).unwrap();
            prop_assert_eq!(read_trace_csv(&buf[..]).unwrap(), events);
        }

        #[test]
        fn segmented_round_trip(events in proptest::collection::vec(arb_event(), 1..40), cuts in proptest::collection::btree_set(1usize..40, 0..6)) {
            let mut starts = vec![0usize];
            starts.extend(cuts.into_iter().filter(|&c| c < events.len()));
            let mut buf = Vec::new();
            write_segmented_csv(&mut buf, &events, &starts).unwrap();
            let (back, back_starts) = read_segmented_csv(&buf[..]).unwrap();
            prop_assert_eq!(back, events);
            prop_assert_eq!(back_starts, starts);
        }
    }
}
