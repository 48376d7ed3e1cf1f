// SPDX-License-Identifier: Apache-2.0

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use optrace_core::bytecode::{Label, Opcode};
use optrace_core::machine::NoiseModel;
use optrace_core::matcher::{match_trace, pearson, score_segment, ChannelSet};
use optrace_core::metrics::{align_free, classify_outcomes, recall};
use optrace_core::preprocess::{
    detect_optable_page, filter_redundant, segment_trace, PreprocessParams, SegClass, Segment,
};
use optrace_core::profiler::{dedup_db, Fingerprint, FingerprintDb};
use optrace_core::trace::{AccessMode, FrameNumber, SideChannelTrace, StepEvent, TruthBoundary};

const OPTABLE: FrameNumber = 3;

fn mode() -> impl Strategy<Value = AccessMode> {
    prop_oneof![Just(AccessMode::R), Just(AccessMode::W), Just(AccessMode::E)]
}

fn event() -> impl Strategy<Value = StepEvent> {
    (1u64..8, mode(), 1u32..10, 5000u64..6000).prop_map(|(page, mode, pf_count, latency)| StepEvent {
        page,
        mode,
        pf_count,
        latency,
    })
}

fn events() -> impl Strategy<Value = Vec<StepEvent>> {
    prop::collection::vec(event(), 0..200)
}

fn dispatch_reads(events: &[StepEvent]) -> Vec<usize> {
    (0..events.len())
        .filter(|&i| events[i].page == OPTABLE && events[i].mode == AccessMode::R)
        .collect()
}

fn label() -> impl Strategy<Value = Label> {
    prop_oneof![
        Just(Label::Null),
        Just(Label::Op(Opcode::I32Add)),
        Just(Label::Op(Opcode::I64Add)),
        Just(Label::Op(Opcode::I32Sub)),
        Just(Label::Op(Opcode::LocalGet)),
        Just(Label::Op(Opcode::Drop)),
    ]
}

fn fingerprint() -> impl Strategy<Value = Fingerprint> {
    (label(), 2usize..6, 1u64..5).prop_flat_map(|(label, n, support)| {
        (
            prop::collection::vec(mode(), n),
            prop::collection::vec(prop_oneof![Just(SegClass::Stack), Just(SegClass::Other)], n),
            prop::collection::vec(5u32..10, n),
            prop::collection::vec(5000.0f64..6000.0, n),
        )
            .prop_map(move |(mode_seq, class_seq, pf_seq, latency_mean)| Fingerprint {
                label,
                mode_seq,
                class_seq,
                pf_seq,
                latency_mean,
                support,
            })
    })
}

fn segment_like(fp: &Fingerprint, jitter: &[f64]) -> Segment {
    let stack = BTreeSet::from([5]);
    let events = fp
        .mode_seq
        .iter()
        .zip(&fp.class_seq)
        .zip(&fp.pf_seq)
        .zip(&fp.latency_mean)
        .zip(jitter.iter().cycle())
        .map(|((((&mode, &class), &pf_count), &lat), &j)| StepEvent {
            page: if class == SegClass::Stack { 5 } else { 6 },
            mode,
            pf_count,
            latency: (lat + j).max(1.0) as u64,
        })
        .collect();
    Segment::new(events, 0, OPTABLE, &stack)
}

/// Width-insensitive counterpart, when one exists.
fn swap_width(l: Label) -> Label {
    match l {
        Label::Op(Opcode::I32Add) => Label::Op(Opcode::I64Add),
        Label::Op(Opcode::I64Add) => Label::Op(Opcode::I32Add),
        other => other,
    }
}

fn levenshtein(a: &[u8], b: &[u8]) -> u64 {
    let mut prev: Vec<u64> = (0..=b.len() as u64).collect();
    for (i, x) in a.iter().enumerate() {
        let mut cur = vec![i as u64 + 1];
        for (j, y) in b.iter().enumerate() {
            cur.push((prev[j] + (x != y) as u64).min(prev[j + 1] + 1).min(cur[j] + 1));
        }
        prev = cur;
    }
    prev[b.len()]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn segments_partition_the_trace(ev in events()) {
        let reads = dispatch_reads(&ev);
        match segment_trace(&ev, OPTABLE, &BTreeSet::new()) {
            Err(_) => prop_assert!(reads.len() < 2),
            Ok(segs) => {
                prop_assert_eq!(segs.len(), reads.len());
                let joined: Vec<StepEvent> = segs.iter().flat_map(|s| s.events.clone()).collect();
                prop_assert_eq!(&joined[..], &ev[reads[0]..]);
                for (s, &r) in segs.iter().zip(&reads) {
                    prop_assert_eq!(s.start_index, r);
                    prop_assert_eq!(s.classes[0], SegClass::Optable);
                    prop_assert_eq!(dispatch_reads(&s.events), vec![0]);
                }
            }
        }
    }

    #[test]
    fn filter_keeps_anchors_and_remaps_truth(ev in events(), window in 0usize..20, share in 0.0f64..1.0) {
        let truth: Vec<TruthBoundary> = dispatch_reads(&ev)
            .into_iter()
            .map(|index| TruthBoundary { index, label: Label::Op(Opcode::Nop) })
            .collect();
        let trace = SideChannelTrace { events: ev.clone(), truth: Some(truth.clone()), layout_seed: 0 };
        let stack = BTreeSet::from([5]);
        let params = PreprocessParams { filter_window: window, filter_min_share: share, ..Default::default() };
        let (out, removed) = filter_redundant(&trace, OPTABLE, &stack, &params);
        prop_assert_eq!(out.events.len() + removed, ev.len());
        // Kept events form a subsequence and include every anchor event.
        let mut it = ev.iter();
        for e in &out.events {
            prop_assert!(it.any(|x| x == e));
        }
        let anchors = |v: &[StepEvent]| v.iter().filter(|e| e.page == OPTABLE || e.page == 5).count();
        prop_assert_eq!(anchors(&out.events), anchors(&ev));
        let t = out.truth.unwrap();
        prop_assert_eq!(t.len(), truth.len());
        for b in &t {
            prop_assert_eq!(out.events[b.index].page, OPTABLE);
            prop_assert_eq!(out.events[b.index].mode, AccessMode::R);
        }
        let keep_all = PreprocessParams { filter_min_share: 0.0, ..params };
        prop_assert_eq!(filter_redundant(&trace, OPTABLE, &stack, &keep_all).1, 0);
    }

    #[test]
    fn optable_detection_follows_page_relabeling(ev in events(), k in 1u64..64) {
        let relabel = |p: FrameNumber| (p ^ k) + 100;
        let moved: Vec<StepEvent> = ev.iter().map(|e| StepEvent { page: relabel(e.page), ..*e }).collect();
        match detect_optable_page(&ev) {
            Err(e) => prop_assert_eq!(detect_optable_page(&moved).unwrap_err(), e),
            Ok((page, conf)) => {
                let counts = optrace_core::preprocess::dispatch_pair_counts(&ev);
                let best = counts[&page];
                let (moved_page, moved_conf) = detect_optable_page(&moved).unwrap();
                prop_assert_eq!(moved_conf, conf);
                if counts.values().filter(|&&c| c == best).count() == 1 {
                    prop_assert_eq!(moved_page, relabel(page));
                }
            }
        }
    }

    #[test]
    fn dedup_preserves_support_and_labels(entries in prop::collection::vec(fingerprint(), 1..30)) {
        // Duplicate part of the input so groups actually merge.
        let mut all = entries.clone();
        all.extend(entries.iter().take(entries.len() / 2).cloned());
        let db = FingerprintDb { entries: all, ..Default::default() };
        let d = dedup_db(&db);
        prop_assert_eq!(d.total_support(), db.total_support());
        prop_assert_eq!(d.labels(), db.labels());
        let keys: BTreeSet<_> = d.entries.iter().map(|e| (e.label, e.mode_seq.clone(), e.class_seq.clone(), e.pf_seq.clone())).collect();
        prop_assert_eq!(keys.len(), d.entries.len());
        prop_assert_eq!(dedup_db(&d), d.clone());
        for e in &d.entries {
            prop_assert!(e.latency_mean.iter().all(|&x| (5000.0..=6000.0).contains(&x)));
        }
    }

    #[test]
    fn matcher_agrees_with_brute_force(
        entries in prop::collection::vec(fingerprint(), 1..12),
        probe in 0usize..12,
        jitter in prop::collection::vec(-80.0f64..80.0, 1..6),
    ) {
        let db = FingerprintDb { entries, ..Default::default() };
        let seg = segment_like(&db.entries[probe % db.entries.len()], &jitter);
        let channels = ChannelSet::all();
        let out = &match_trace(std::slice::from_ref(&seg), &db, &channels)[0];
        let mut best: Option<(f64, &Fingerprint)> = None;
        for fp in &db.entries {
            let s = score_segment(&seg, fp, &channels);
            let wins = match best {
                None => true,
                Some((bs, bf)) => s > bs
                    || (s == bs && (fp.support > bf.support
                        || (fp.support == bf.support && fp.label.name() < bf.label.name()))),
            };
            if wins {
                best = Some((s, fp));
            }
        }
        let (bs, bf) = best.unwrap();
        prop_assert_eq!(out.score, bs);
        prop_assert_eq!(out.predicted, bf.label);
        let per_label: BTreeMap<Label, f64> = db.entries.iter().fold(BTreeMap::new(), |mut m, fp| {
            let s = score_segment(&seg, fp, &channels);
            let slot = m.entry(fp.label).or_insert(0.0f64);
            *slot = slot.max(s);
            m
        });
        let runner = per_label.iter().filter(|(l, _)| **l != bf.label).map(|(_, &s)| s).fold(0.0, f64::max);
        prop_assert!((out.runner_up_margin - (bs - runner).max(0.0)).abs() < 1e-12);
    }

    #[test]
    fn latency_scale_does_not_change_predictions(
        entries in prop::collection::vec(fingerprint(), 1..10),
        probe in 0usize..10,
        jitter in prop::collection::vec(-80.0f64..80.0, 2..6),
        a in prop::sample::select(vec![1u64, 2, 4]),
        b in 0u64..3000,
    ) {
        let db = FingerprintDb { entries, ..Default::default() };
        let seg = segment_like(&db.entries[probe % db.entries.len()], &jitter);
        let mut scaled = seg.clone();
        for e in &mut scaled.events {
            e.latency = e.latency * a + b;
        }
        scaled.latencies = scaled.events.iter().map(|e| e.latency as f64).collect();
        let channels = ChannelSet::all();
        let x = &match_trace(&[seg], &db, &channels)[0];
        let y = &match_trace(&[scaled], &db, &channels)[0];
        prop_assert_eq!(x.predicted, y.predicted);
        prop_assert!((x.score - y.score).abs() < 1e-9);
    }

    #[test]
    fn family_members_are_interchangeable(
        pairs in prop::collection::vec((label(), label()), 1..40),
        strict in any::<bool>(),
    ) {
        let (p, t): (Vec<Label>, Vec<Label>) = pairs.into_iter().unzip();
        let swapped: Vec<Label> = p.iter().map(|&l| swap_width(l)).collect();
        let a = classify_outcomes(&p, &t, false).unwrap();
        let b = classify_outcomes(&swapped, &t, false).unwrap();
        prop_assert_eq!((a.correct, a.errors, a.misses, a.insertions), (b.correct, b.errors, b.misses, b.insertions));
        let s = classify_outcomes(&p, &t, strict).unwrap();
        prop_assert_eq!(s.correct + s.errors + s.misses + s.insertions, s.n);
        prop_assert!(s.correct <= a.correct);
    }

    #[test]
    fn recall_falls_as_mistakes_grow(n in 1u64..10_000, e in 0u64..10_000, m in 0u64..100, i in 0u64..100) {
        prop_assume!(e + m + i < n);
        let r = recall(n, e, m, i).unwrap();
        prop_assert!((0.0..=1.0).contains(&r));
        prop_assert!(recall(n, e + 1, m, i).unwrap() < r);
        prop_assert!(recall(n, e, m + 1, i).unwrap() < r);
        prop_assert!(recall(n, e, m, i + 1).unwrap() < r);
    }

    #[test]
    fn alignment_counts_are_consistent(
        p in prop::collection::vec(0u8..4, 0..30),
        t in prop::collection::vec(0u8..4, 0..30),
    ) {
        let a = align_free(&p, &t);
        prop_assert_eq!(a.cost(), levenshtein(&p, &t));
        prop_assert!(a.errors + a.misses <= t.len() as u64);
        let matched = t.len() as u64 - a.errors - a.misses;
        prop_assert_eq!(matched + a.errors + a.insertions, p.len() as u64);
    }

    #[test]
    fn pearson_is_symmetric_and_bounded(
        xy in prop::collection::vec((-1e4f64..1e4, -1e4f64..1e4), 2..50),
        a in 0.5f64..20.0,
        b in -1e3f64..1e3,
    ) {
        let (x, y): (Vec<f64>, Vec<f64>) = xy.into_iter().unzip();
        if let Ok(r) = pearson(&x, &y) {
            prop_assert!((-1.0..=1.0).contains(&r));
            prop_assert!((pearson(&y, &x).unwrap() - r).abs() < 1e-12);
            let moved: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            prop_assert!((pearson(&moved, &y).unwrap() - r).abs() < 1e-9);
        }
    }

    #[test]
    fn quantized_latencies_sit_on_the_grid(lat in 0.0f64..20_000.0, q in 1u64..100) {
        let n = NoiseModel { apic_quantum: q, ..NoiseModel::zero() };
        let v = n.quantize(lat);
        prop_assert_eq!(v % q, 0);
        prop_assert!(v >= q);
        if lat >= q as f64 {
            prop_assert!((v as f64 - lat).abs() <= q as f64 / 2.0);
        }
    }
}
