//! A/A split: hash-based customer assignment and comparison of the daily
//! CTR series of the two segments.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use xxhash_rust::xxh3::xxh3_64_with_seed;

use crate::metrics::MetricsReport;
use crate::model::{EventLog, Segment};
use crate::outliers::correlation;

#[derive(Debug, Error, PartialEq)]
pub enum AaError {
    #[error("need at least {needed} days, got {got}")]
    SeriesTooShort { needed: usize, got: usize },
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("day {0} has no CTR in one of the segments")]
    AbsentCell(i64),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentMap {
    pub seed: u64,
    pub assignments: BTreeMap<String, Segment>,
}

impl SegmentMap {
    pub fn segment_of(&self, cust: &str) -> Option<Segment> {
        self.assignments.get(cust).copied()
    }

    pub fn count(&self, segment: Segment) -> usize {
        self.assignments.values().filter(|s| **s == segment).count()
    }
}

/// Orders customers by a seeded hash and gives the first half to A1. The
/// split is exact (sizes differ by at most one) and does not depend on the
/// order customers are listed in.
pub fn assign_segments<'a>(cust_ids: impl IntoIterator<Item = &'a str>, seed: u64) -> SegmentMap {
    let mut keyed: Vec<(u64, &str)> = cust_ids
        .into_iter()
        .map(|c| (xxh3_64_with_seed(c.as_bytes(), seed), c))
        .collect();
    keyed.sort_unstable();
    keyed.dedup();
    let half = keyed.len().div_ceil(2);
    SegmentMap {
        seed,
        assignments: keyed
            .into_iter()
            .enumerate()
            .map(|(i, (_, c))| (c.to_string(), if i < half { Segment::A1 } else { Segment::A2 }))
            .collect(),
    }
}

/// Stamps the segment on events that do not already carry one.
pub fn stamp_segments(log: &EventLog, map: &SegmentMap) -> EventLog {
    log.map(|e| {
        let mut e = e.clone();
        if e.segment_flag.is_none() {
            e.segment_flag = e.customer_key().and_then(|c| map.segment_of(c));
        }
        e
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AaThresholds {
    pub diff_max: f64,
    pub corr_min: f64,
    pub min_days: usize,
}

impl Default for AaThresholds {
    fn default() -> Self {
        AaThresholds {
            diff_max: 0.10,
            corr_min: 0.8,
            min_days: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AaOutcome {
    Consistent,
    Inconsistent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailyPair {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub day: Option<i64>,
    pub ctr_a1: f64,
    pub ctr_a2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AaVerdict {
    pub days: Vec<DailyPair>,
    pub mean_relative_difference: f64,
    /// Absent when a series has no variance.
    pub correlation: Option<f64>,
    /// Correlation was undefined and the verdict rests on the difference alone.
    pub degenerate: bool,
    pub verdict: AaOutcome,
    pub thresholds: AaThresholds,
}

/// Mean over days of `|a1 - a2| / mean(a1, a2)` plus the Pearson correlation
/// of the two series. Symmetric in its arguments.
pub fn compare_aa(a1: &[f64], a2: &[f64], thresholds: &AaThresholds) -> Result<AaVerdict, AaError> {
    if a1.len() != a2.len() {
        return Err(AaError::LengthMismatch(a1.len(), a2.len()));
    }
    let needed = thresholds.min_days.max(2);
    if a1.len() < needed {
        return Err(AaError::SeriesTooShort { needed, got: a1.len() });
    }
    let diff = a1
        .iter()
        .zip(a2)
        .map(|(x, y)| {
            let m = (x + y) / 2.0;
            if m == 0.0 {
                0.0
            } else {
                (x - y).abs() / m
            }
        })
        .sum::<f64>()
        / a1.len() as f64;
    let corr = correlation(a1, a2);
    let ok = diff <= thresholds.diff_max && corr.is_none_or(|r| r >= thresholds.corr_min);
    Ok(AaVerdict {
        days: a1
            .iter()
            .zip(a2)
            .map(|(&ctr_a1, &ctr_a2)| DailyPair {
                day: None,
                ctr_a1,
                ctr_a2,
            })
            .collect(),
        mean_relative_difference: diff,
        correlation: corr,
        degenerate: corr.is_none(),
        verdict: if ok {
            AaOutcome::Consistent
        } else {
            AaOutcome::Inconsistent
        },
        thresholds: *thresholds,
    })
}

/// Daily CTR per segment from a metrics report, then [`compare_aa`].
pub fn compare_report(report: &MetricsReport, thresholds: &AaThresholds) -> Result<AaVerdict, AaError> {
    let a1 = report.daily_ctr(Some(Segment::A1));
    let a2 = report.daily_ctr(Some(Segment::A2));
    let mut days = Vec::new();
    let (mut s1, mut s2) = (Vec::new(), Vec::new());
    for (day, r1) in &a1 {
        match (r1, a2.get(day).copied().flatten()) {
            (Some(x), Some(y)) => {
                days.push(*day);
                s1.push(*x);
                s2.push(y);
            }
            _ => return Err(AaError::AbsentCell(*day)),
        }
    }
    let mut v = compare_aa(&s1, &s2, thresholds)?;
    for (p, d) in v.days.iter_mut().zip(days) {
        p.day = Some(d);
    }
    Ok(v)
}
