//! Word error rate scoring with a biased/unbiased breakdown.
//!
//! Substitutions and deletions are attributed by the reference word's
//! membership in the bias set; insertions by the hypothesis word's. Rates are
//! micro-averages: pooled errors over pooled reference counts.

use serde::{Deserialize, Serialize};
use std::collections::HashSet;

/// One step of a minimal edit alignment between reference and hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditOp {
    /// Reference word `r` matches hypothesis word `h`.
    Match { r: usize, h: usize },
    /// Reference word `r` was replaced by hypothesis word `h`.
    Substitute { r: usize, h: usize },
    /// Reference word `r` is missing from the hypothesis.
    Delete { r: usize },
    /// Hypothesis word `h` has no reference counterpart.
    Insert { h: usize },
}

/// Minimal-cost alignment with unit substitution/deletion/insertion costs.
/// Cost ties during backtracking prefer match, then substitution, then
/// deletion, then insertion.
pub fn word_align(reference: &[usize], hypothesis: &[usize]) -> Vec<EditOp> {
    let n = reference.len();
    let m = hypothesis.len();
    let width = m + 1;
    let mut cost = vec![0u32; (n + 1) * width];
    for j in 0..=m {
        cost[j] = j as u32;
    }
    for i in 1..=n {
        cost[i * width] = i as u32;
        for j in 1..=m {
            let sub = cost[(i - 1) * width + j - 1]
                + u32::from(reference[i - 1] != hypothesis[j - 1]);
            let del = cost[(i - 1) * width + j] + 1;
            let ins = cost[i * width + j - 1] + 1;
            cost[i * width + j] = sub.min(del).min(ins);
        }
    }

    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = cost[i * width + j];
        if i > 0 && j > 0 {
            let diag = cost[(i - 1) * width + j - 1];
            if reference[i - 1] == hypothesis[j - 1] && diag == here {
                ops.push(EditOp::Match { r: i - 1, h: j - 1 });
                i -= 1;
                j -= 1;
                continue;
            }
            if reference[i - 1] != hypothesis[j - 1] && diag + 1 == here {
                ops.push(EditOp::Substitute { r: i - 1, h: j - 1 });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && cost[(i - 1) * width + j] + 1 == here {
            ops.push(EditOp::Delete { r: i - 1 });
            i -= 1;
            continue;
        }
        ops.push(EditOp::Insert { h: j - 1 });
        j -= 1;
    }
    ops.reverse();
    ops
}

/// Error and reference-word tallies for one scoring class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub substitutions: u64,
    pub deletions: u64,
    pub insertions: u64,
    pub ref_words: u64,
}

impl ErrorCounts {
    pub fn errors(&self) -> u64 {
        self.substitutions + self.deletions + self.insertions
    }

    /// Errors over reference words. `None` when errors exist against an
    /// empty reference, where no rate is defined.
    pub fn rate(&self) -> Option<f64> {
        if self.ref_words == 0 {
            if self.errors() == 0 {
                Some(0.0)
            } else {
                None
            }
        } else {
            Some(self.errors() as f64 / self.ref_words as f64)
        }
    }

    fn add(&mut self, other: &ErrorCounts) {
        self.substitutions += other.substitutions;
        self.deletions += other.deletions;
        self.insertions += other.insertions;
        self.ref_words += other.ref_words;
    }
}

/// Scoring report split into all / biased / unbiased word classes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalReport {
    pub utterances: u64,
    pub all: ErrorCounts,
    pub biased: ErrorCounts,
    pub unbiased: ErrorCounts,
}

impl EvalReport {
    pub fn wer(&self) -> Option<f64> {
        self.all.rate()
    }

    pub fn b_wer(&self) -> Option<f64> {
        self.biased.rate()
    }

    pub fn u_wer(&self) -> Option<f64> {
        self.unbiased.rate()
    }
}

/// Scores one utterance. `bias_words` decides the biased/unbiased split.
pub fn wer_breakdown(
    reference: &[usize],
    hypothesis: &[usize],
    bias_words: &HashSet<usize>,
) -> EvalReport {
    let mut report = EvalReport {
        utterances: 1,
        ..EvalReport::default()
    };
    for &w in reference {
        let class = class_of(&mut report, bias_words.contains(&w));
        class.ref_words += 1;
        report.all.ref_words += 1;
    }
    for op in word_align(reference, hypothesis) {
        match op {
            EditOp::Match { .. } => {}
            EditOp::Substitute { r, .. } => {
                class_of(&mut report, bias_words.contains(&reference[r])).substitutions += 1;
                report.all.substitutions += 1;
            }
            EditOp::Delete { r } => {
                class_of(&mut report, bias_words.contains(&reference[r])).deletions += 1;
                report.all.deletions += 1;
            }
            EditOp::Insert { h } => {
                class_of(&mut report, bias_words.contains(&hypothesis[h])).insertions += 1;
                report.all.insertions += 1;
            }
        }
    }
    report
}

fn class_of(report: &mut EvalReport, biased: bool) -> &mut ErrorCounts {
    if biased {
        &mut report.biased
    } else {
        &mut report.unbiased
    }
}

/// Pools counts across reports; rates then follow from the pooled tallies.
pub fn aggregate(reports: &[EvalReport]) -> EvalReport {
    let mut total = EvalReport::default();
    for r in reports {
        total.utterances += r.utterances;
        total.all.add(&r.all);
        total.biased.add(&r.biased);
        total.unbiased.add(&r.unbiased);
    }
    total
}
