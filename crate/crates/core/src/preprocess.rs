// SPDX-License-Identifier: Apache-2.0

//! Structure recovery on raw traces: optable and stack pages, removal of
//! foreign events, segmentation at dispatch reads.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::trace::{AccessMode, FrameNumber, SideChannelTrace, StepEvent, TruthBoundary};

/// Page class as far as the attacker can tell.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SegClass {
    Optable,
    Stack,
    Other,
}

impl SegClass {
    pub fn name(self) -> &'static str {
        match self {
            SegClass::Optable => "OPTABLE",
            SegClass::Stack => "STACK",
            SegClass::Other => "OTHER",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "OPTABLE" => Some(SegClass::Optable),
            "STACK" => Some(SegClass::Stack),
            "OTHER" => Some(SegClass::Other),
            _ => None,
        }
    }
}

impl fmt::Display for SegClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessParams {
    /// Share of dispatch regions the chosen stack pages should touch.
    pub stack_coverage_target: f64,
    /// A stack candidate is taken only if it touches at least this share of
    /// regions not yet covered.
    pub stack_min_gain: f64,
    /// Half-width, in events, of the window around each dispatch read.
    pub filter_window: usize,
    /// A page survives filtering when at least this share of its events lie
    /// inside some dispatch window.
    pub filter_min_share: f64,
}

impl Default for PreprocessParams {
    fn default() -> Self {
        PreprocessParams {
            stack_coverage_target: 0.95,
            stack_min_gain: 0.01,
            filter_window: 16,
            filter_min_share: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub optable_page: FrameNumber,
    pub stack_pages: BTreeSet<FrameNumber>,
    pub events_removed: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PreprocessError {
    #[error("trace is empty")]
    EmptyTrace,
    #[error("no read-then-execute pattern found; trace holds no dispatch")]
    NoDispatchPattern,
    #[error("found {found} optable reads; at least 2 are needed to segment")]
    TooFewBoundaries { found: usize },
}

/// Events between two dispatch reads, with their channel vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub events: Vec<StepEvent>,
    /// Index of the first event in the (filtered) trace.
    pub start_index: usize,
    pub modes: Vec<AccessMode>,
    pub classes: Vec<SegClass>,
    pub pfs: Vec<f64>,
    pub latencies: Vec<f64>,
}

impl Segment {
    pub fn new(events: Vec<StepEvent>, start_index: usize, optable: FrameNumber, stack: &BTreeSet<FrameNumber>) -> Self {
        let classify = |p: FrameNumber| {
            if p == optable {
                SegClass::Optable
            } else if stack.contains(&p) {
                SegClass::Stack
            } else {
                SegClass::Other
            }
        };
        Segment {
            modes: events.iter().map(|e| e.mode).collect(),
            classes: events.iter().map(|e| classify(e.page)).collect(),
            pfs: events.iter().map(|e| e.pf_count as f64).collect(),
            latencies: events.iter().map(|e| e.latency as f64).collect(),
            events,
            start_index,
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

fn is_dispatch_read(e: &StepEvent, optable: FrameNumber) -> bool {
    e.mode == AccessMode::R && e.page == optable
}

/// Per-page counts of read-then-execute pairs whose execute lands on a page
/// other than the code page running before the read.
pub fn dispatch_pair_counts(events: &[StepEvent]) -> BTreeMap<FrameNumber, u64> {
    let mut counts = BTreeMap::new();
    let mut last_exec: Option<FrameNumber> = None;
    for w in events.windows(2) {
        let (cur, next) = (&w[0], &w[1]);
        if cur.mode == AccessMode::R && next.mode == AccessMode::E && last_exec != Some(next.page) {
            *counts.entry(cur.page).or_insert(0) += 1;
        }
        if cur.mode == AccessMode::E {
            last_exec = Some(cur.page);
        }
    }
    counts
}

/// The page whose reads most often precede a jump to new code, with the
/// share of such pairs it accounts for. Ties go to the lowest frame.
pub fn detect_optable_page(events: &[StepEvent]) -> Result<(FrameNumber, f64), PreprocessError> {
    if events.is_empty() {
        return Err(PreprocessError::EmptyTrace);
    }
    let counts = dispatch_pair_counts(events);
    let total: u64 = counts.values().sum();
    let (&page, &best) = counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .ok_or(PreprocessError::NoDispatchPattern)?;
    let tied = counts.values().filter(|&&c| c == best).count();
    if tied > 1 {
        log::warn!("{tied} pages tie for the optable with {best} dispatch pairs; picked {page:#x}");
    }
    Ok((page, best as f64 / total as f64))
}

fn boundaries(events: &[StepEvent], optable: FrameNumber) -> Vec<usize> {
    events
        .iter()
        .enumerate()
        .filter(|(_, e)| is_dispatch_read(e, optable))
        .map(|(i, _)| i)
        .collect()
}

/// Greedy choice of the pages that behave like the operand stack: read and
/// written often, and present in most dispatch regions.
pub fn detect_stack_pages(
    events: &[StepEvent],
    optable: FrameNumber,
    params: &PreprocessParams,
) -> BTreeSet<FrameNumber> {
    let mut chosen = BTreeSet::new();
    let bounds = boundaries(events, optable);
    if bounds.is_empty() || params.stack_coverage_target <= 0.0 {
        return chosen;
    }
    let regions = bounds.len();
    let mut rw: BTreeMap<FrameNumber, (u64, u64)> = BTreeMap::new();
    // Regions each page appears in, as sorted region ids.
    let mut touched: BTreeMap<FrameNumber, Vec<usize>> = BTreeMap::new();
    for (r, &start) in bounds.iter().enumerate() {
        let end = bounds.get(r + 1).copied().unwrap_or(events.len());
        for e in &events[start..end] {
            if e.page == optable || e.mode == AccessMode::E {
                continue;
            }
            let c = rw.entry(e.page).or_default();
            if e.mode == AccessMode::R {
                c.0 += 1;
            } else {
                c.1 += 1;
            }
            let t = touched.entry(e.page).or_default();
            if t.last() != Some(&r) {
                t.push(r);
            }
        }
    }
    let mut candidates: Vec<(u64, FrameNumber)> = rw
        .iter()
        .map(|(&p, &(r, w))| (r.min(w), p))
        .filter(|&(score, _)| score > 0)
        .collect();
    candidates.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));

    let mut covered = vec![false; regions];
    let mut n_covered = 0usize;
    for (_, page) in candidates {
        let fresh = touched[&page].iter().filter(|&&r| !covered[r]).count();
        if (fresh as f64) < params.stack_min_gain * regions as f64 || fresh == 0 {
            continue;
        }
        for &r in &touched[&page] {
            covered[r] = true;
        }
        n_covered += fresh;
        chosen.insert(page);
        if n_covered as f64 >= params.stack_coverage_target * regions as f64 {
            break;
        }
    }
    chosen
}

/// Drops events on pages that mostly occur away from dispatch. Returns the
/// filtered trace (truth re-indexed) and the number of removed events.
pub fn filter_redundant(
    trace: &SideChannelTrace,
    optable: FrameNumber,
    stack: &BTreeSet<FrameNumber>,
    params: &PreprocessParams,
) -> (SideChannelTrace, usize) {
    let events = &trace.events;
    let bounds = boundaries(events, optable);
    // Distance from each event to the nearest dispatch read.
    let mut near = vec![false; events.len()];
    let w = params.filter_window;
    for &b in &bounds {
        let lo = b.saturating_sub(w);
        let hi = (b + w + 1).min(events.len());
        near[lo..hi].iter_mut().for_each(|x| *x = true);
    }
    let mut per_page: BTreeMap<FrameNumber, (usize, usize)> = BTreeMap::new();
    for (e, &n) in events.iter().zip(&near) {
        let c = per_page.entry(e.page).or_default();
        c.1 += 1;
        if n {
            c.0 += 1;
        }
    }
    let keep_page = |p: FrameNumber| {
        p == optable || stack.contains(&p) || {
            let (n, t) = per_page[&p];
            n as f64 >= params.filter_min_share * t as f64
        }
    };

    let mut new_index = Vec::with_capacity(events.len());
    let mut kept = Vec::with_capacity(events.len());
    for e in events {
        new_index.push(kept.len());
        if keep_page(e.page) {
            kept.push(*e);
        }
    }
    let removed = events.len() - kept.len();
    let truth = trace.truth.as_ref().map(|t| {
        t.iter()
            .filter(|b| b.index < events.len() && keep_page(events[b.index].page))
            .map(|b| TruthBoundary {
                index: new_index[b.index],
                label: b.label,
            })
            .collect()
    });
    (
        SideChannelTrace {
            events: kept,
            truth,
            layout_seed: trace.layout_seed,
        },
        removed,
    )
}

/// Splits at every optable read. Events before the first read are dropped.
pub fn segment_trace(
    events: &[StepEvent],
    optable: FrameNumber,
    stack: &BTreeSet<FrameNumber>,
) -> Result<Vec<Segment>, PreprocessError> {
    let bounds = boundaries(events, optable);
    if bounds.len() < 2 {
        return Err(PreprocessError::TooFewBoundaries { found: bounds.len() });
    }
    Ok(bounds
        .iter()
        .enumerate()
        .map(|(i, &start)| {
            let end = bounds.get(i + 1).copied().unwrap_or(events.len());
            Segment::new(events[start..end].to_vec(), start, optable, stack)
        })
        .collect())
}

/// Everything the attack needs from a raw trace.
#[derive(Clone, Debug)]
pub struct Preprocessed {
    pub report: PreprocessReport,
    pub filtered: SideChannelTrace,
    pub segments: Vec<Segment>,
}

pub fn preprocess(trace: &SideChannelTrace, params: &PreprocessParams) -> Result<Preprocessed, PreprocessError> {
    let (optable, confidence) = detect_optable_page(&trace.events)?;
    let stack = detect_stack_pages(&trace.events, optable, params);
    let (filtered, removed) = filter_redundant(trace, optable, &stack, params);
    let segments = segment_trace(&filtered.events, optable, &stack)?;
    Ok(Preprocessed {
        report: PreprocessReport {
            optable_page: optable,
            stack_pages: stack,
            events_removed: removed,
            confidence,
        },
        filtered,
        segments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(page: FrameNumber, mode: AccessMode) -> StepEvent {
        StepEvent {
            page,
            mode,
            pf_count: 5,
            latency: 100,
        }
    }

    #[test]
    fn pairs_require_a_code_change() {
        use AccessMode::*;
        // E on 1, R on 9, E on 2 counts; R on 7 then E on 2 again does not.
        let t = [ev(1, E), ev(9, R), ev(2, E), ev(7, R), ev(2, E)];
        let c = dispatch_pair_counts(&t);
        assert_eq!(c.get(&9), Some(&1));
        assert_eq!(c.get(&7), None);
        assert_eq!(detect_optable_page(&t).unwrap(), (9, 1.0));
    }

    #[test]
    fn ties_pick_lowest_frame() {
        use AccessMode::*;
        let t = [ev(1, E), ev(9, R), ev(2, E), ev(4, R), ev(3, E)];
        assert_eq!(detect_optable_page(&t).unwrap(), (4, 0.5));
    }

    #[test]
    fn no_pattern_is_an_error() {
        use AccessMode::*;
        assert_eq!(detect_optable_page(&[]), Err(PreprocessError::EmptyTrace));
        let t = [ev(1, E), ev(1, E), ev(2, W)];
        assert_eq!(detect_optable_page(&t), Err(PreprocessError::NoDispatchPattern));
    }

    #[test]
    fn segmentation_partitions() {
        use AccessMode::*;
        let t = [ev(3, E), ev(9, R), ev(2, E), ev(9, R), ev(4, E), ev(5, W)];
        let s = segment_trace(&t, 9, &BTreeSet::from([5])).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].start_index, 1);
        assert_eq!(s[1].classes, vec![SegClass::Optable, SegClass::Other, SegClass::Stack]);
        assert_eq!(segment_trace(&t[..3], 9, &BTreeSet::new()), Err(PreprocessError::TooFewBoundaries { found: 1 }));
    }

    #[test]
    fn empty_trace_filters_to_empty() {
        let (f, removed) = filter_redundant(&SideChannelTrace::default(), 1, &BTreeSet::new(), &PreprocessParams::default());
        assert!(f.events.is_empty());
        assert_eq!(removed, 0);
    }
}
