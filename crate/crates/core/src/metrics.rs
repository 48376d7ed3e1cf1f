// SPDX-License-Identifier: Apache-2.0

//! Recovery scoring: errors, misses and insertions against ground truth.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::bytecode::Label;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("recall needs at least one region")]
    NoRegions,
    #[error("E + M + I = {sum} exceeds N = {n}")]
    CountsExceedTotal { sum: u64, n: u64 },
    #[error("{predicted} predictions for {truth} truth regions")]
    LengthMismatch { predicted: usize, truth: usize },
}

/// `1 - (E + M + I) / N`.
pub fn recall(n: u64, e: u64, m: u64, i: u64) -> Result<f64, MetricsError> {
    if n == 0 {
        return Err(MetricsError::NoRegions);
    }
    let sum = e + m + i;
    if sum > n {
        return Err(MetricsError::CountsExceedTotal { sum, n });
    }
    Ok(1.0 - sum as f64 / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub n: u64,
    pub correct: u64,
    pub errors: u64,
    pub misses: u64,
    pub insertions: u64,
    pub recall: f64,
    /// Whether correctness compared exact opcodes instead of families.
    pub strict: bool,
    /// `(truth, predicted)` family (or mnemonic when strict) pair counts.
    /// Written separately as CSV.
    #[serde(skip)]
    pub confusion: BTreeMap<(String, String), u64>,
}

impl RecallReport {
    pub fn recall_percent(&self) -> f64 {
        self.recall * 100.0
    }

    /// Confusion matrix as CSV rows `truth,predicted,count`.
    pub fn write_confusion_csv(&self, w: impl Write) -> Result<(), csv::Error> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["truth", "predicted", "count"])?;
        for ((t, p), c) in &self.confusion {
            wr.write_record([t.as_str(), p.as_str(), &c.to_string()])?;
        }
        wr.flush()?;
        Ok(())
    }
}

fn key(l: Label, strict: bool) -> &'static str {
    if strict {
        l.name()
    } else {
        l.family_name()
    }
}

/// Classifies each region: correct on family match (NULL matches NULL), a
/// miss when a real opcode is predicted NULL, an insertion when a NULL
/// region is predicted as an opcode, an error otherwise.
pub fn classify_outcomes(predicted: &[Label], truth: &[Label], strict: bool) -> Result<RecallReport, MetricsError> {
    if predicted.len() != truth.len() {
        return Err(MetricsError::LengthMismatch {
            predicted: predicted.len(),
            truth: truth.len(),
        });
    }
    let (mut c, mut e, mut m, mut ins) = (0u64, 0u64, 0u64, 0u64);
    let mut confusion = BTreeMap::new();
    for (&p, &t) in predicted.iter().zip(truth) {
        let (kp, kt) = (key(p, strict), key(t, strict));
        *confusion.entry((kt.to_string(), kp.to_string())).or_insert(0) += 1;
        match (t.is_null(), p.is_null()) {
            _ if kp == kt => c += 1,
            (false, true) => m += 1,
            (true, false) => ins += 1,
            _ => e += 1,
        }
    }
    let n = truth.len() as u64;
    Ok(RecallReport {
        n,
        correct: c,
        errors: e,
        misses: m,
        insertions: ins,
        recall: recall(n, e, m, ins)?,
        strict,
        confusion,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignCounts {
    pub errors: u64,
    pub misses: u64,
    pub insertions: u64,
    pub n: u64,
}

impl AlignCounts {
    pub fn cost(&self) -> u64 {
        self.errors + self.misses + self.insertions
    }

    pub fn recall(&self) -> Result<f64, MetricsError> {
        recall(self.n, self.errors, self.misses, self.insertions)
    }
}

/// Minimum-cost alignment of a predicted sequence to the truth with unit
/// costs: substitution = error, truth symbol skipped = miss, extra predicted
/// symbol = insertion. Among optimal alignments, substitutions are preferred
/// over misses and misses over insertions, scanning from the end.
pub fn align_free<T: PartialEq>(predicted: &[T], truth: &[T]) -> AlignCounts {
    let (n, m) = (truth.len(), predicted.len());
    let w = m + 1;
    // d[i * w + j]: cost of aligning truth[..i] with predicted[..j].
    let mut d = vec![0u32; (n + 1) * w];
    for (j, v) in d[..w].iter_mut().enumerate() {
        *v = j as u32;
    }
    for i in 1..=n {
        d[i * w] = i as u32;
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + (truth[i - 1] != predicted[j - 1]) as u32;
            let miss = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = sub.min(miss).min(ins);
        }
    }
    let (mut i, mut j) = (n, m);
    let mut out = AlignCounts {
        errors: 0,
        misses: 0,
        insertions: 0,
        n: n as u64,
    };
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let diff = (truth[i - 1] != predicted[j - 1]) as u32;
            if d[(i - 1) * w + j - 1] + diff == here {
                out.errors += diff as u64;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == here {
            out.misses += 1;
            i -= 1;
        } else {
            out.insertions += 1;
            j -= 1;
        }
    }
    out
}

/// Share of positions where both sequences hold the same symbol, over the
/// truth length.
pub fn naive_positional_match<T: PartialEq>(predicted: &[T], truth: &[T]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let same = predicted.iter().zip(truth).filter(|(a, b)| a == b).count();
    same as f64 / truth.len() as f64
}
