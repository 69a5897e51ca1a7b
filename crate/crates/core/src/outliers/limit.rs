use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::bootlier::{bootlier_histogram_with, BootlierParams};
use super::modality::{modality, ModalityVerdict, ProminenceThresholds};
use super::{ActivityMetric, ActivityPopulation, OutlierError};
use crate::model::{CleaningReport, EventLog, RuleOutcome};
use crate::par::Execution;

/// How the resample size N is chosen at each trimming step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum SampleSizing {
    /// Use `BootlierParams::sample_size` at every step.
    Fixed,
    /// `ceil(fraction * current population)`, never below `floor` nor `2k + 2`.
    PopulationFraction { fraction: f64, floor: usize },
}

/// Parameters of the upper-tail trimming search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimitSearch {
    pub metric: ActivityMetric,
    pub bootlier: BootlierParams,
    pub sizing: SampleSizing,
}

impl LimitSearch {
    /// Defaults: k = 7 for views and 3 for buys, 50,000 iterations,
    /// N = 1% of the population (at least 50 for buys).
    pub fn for_metric(metric: ActivityMetric) -> Self {
        let (trim, floor) = match metric {
            ActivityMetric::ViewsPerDay => (7, 0),
            ActivityMetric::BuysPerDay => (3, 50),
        };
        LimitSearch {
            metric,
            bootlier: BootlierParams {
                sample_size: floor.max(2 * trim + 2),
                trim,
                iterations: 50_000,
                seed: 42,
                prominence: ProminenceThresholds::default(),
            },
            sizing: SampleSizing::PopulationFraction { fraction: 0.01, floor },
        }
    }

    pub fn sample_size_for(&self, population: usize) -> usize {
        match self.sizing {
            SampleSizing::Fixed => self.bootlier.sample_size,
            SampleSizing::PopulationFraction { fraction, floor } => {
                let n = (fraction * population as f64).ceil() as usize;
                n.max(floor).max(2 * self.bootlier.trim + 2)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub candidate_limit: u64,
    pub population_size: usize,
    pub sample_size: usize,
    pub verdict: ModalityVerdict,
    pub peak_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionSource {
    Automated,
    /// Limit confirmed by an analyst; its trace entry records the analyst's verdict.
    Analyst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierDecision {
    pub metric: ActivityMetric,
    pub final_limit: u64,
    pub removal_trace: Vec<TraceStep>,
    pub customers_flagged: BTreeSet<String>,
    pub flagged_fraction: f64,
    pub source: DecisionSource,
}

impl OutlierDecision {
    pub fn is_well_formed(&self) -> bool {
        matches!(self.removal_trace.last(), Some(s) if s.candidate_limit == self.final_limit && s.verdict == ModalityVerdict::Unimodal)
            && (0.0..=1.0).contains(&self.flagged_fraction)
    }
}

fn flagged(pop: &ActivityPopulation, limit: u64) -> (BTreeSet<String>, f64) {
    let all: BTreeSet<&str> = pop.entries.iter().map(|e| e.cust_id.as_str()).collect();
    let flagged: BTreeSet<String> = pop
        .entries
        .iter()
        .filter(|e| e.count > limit)
        .map(|e| e.cust_id.clone())
        .collect();
    let fraction = if all.is_empty() {
        0.0
    } else {
        flagged.len() as f64 / all.len() as f64
    };
    (flagged, fraction)
}

/// Decision for a limit chosen outside the automated search.
pub fn decision_for_limit(pop: &ActivityPopulation, limit: u64, sample_size: usize) -> OutlierDecision {
    let (customers_flagged, flagged_fraction) = flagged(pop, limit);
    OutlierDecision {
        metric: pop.metric,
        final_limit: limit,
        removal_trace: vec![TraceStep {
            candidate_limit: limit,
            population_size: pop.entries.iter().filter(|e| e.count <= limit).count(),
            sample_size,
            verdict: ModalityVerdict::Unimodal,
            peak_count: 1,
        }],
        customers_flagged,
        flagged_fraction,
        source: DecisionSource::Analyst,
    }
}

pub fn find_outlier_limit(pop: &ActivityPopulation, search: &LimitSearch) -> Result<OutlierDecision, OutlierError> {
    find_outlier_limit_with(pop, search, Execution::default())
}

/// Trims the upper tail one distinct value at a time and returns the largest
/// candidate limit whose Bootlier plot is unimodal. Candidates never go below
/// the population median.
pub fn find_outlier_limit_with(
    pop: &ActivityPopulation,
    search: &LimitSearch,
    exec: Execution,
) -> Result<OutlierDecision, OutlierError> {
    if pop.is_empty() {
        return Err(OutlierError::EmptyPopulation);
    }
    let mut sorted = pop.values();
    sorted.sort_unstable();
    let median = {
        let n = sorted.len();
        if n % 2 == 1 {
            sorted[n / 2] as f64
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
        }
    };
    let mut distinct = sorted.clone();
    distinct.dedup();

    let mut trace = Vec::new();
    for &candidate in distinct.iter().rev().take_while(|&&c| c as f64 >= median) {
        let current = sorted.partition_point(|&v| v <= candidate);
        let sample_size = search.sample_size_for(current);
        if current < sample_size {
            break;
        }
        let restricted = pop.restricted(candidate);
        let params = BootlierParams {
            sample_size,
            ..search.bootlier
        };
        let hist = bootlier_histogram_with(&restricted, &params, exec)?;
        let shape = modality(&hist, &params.prominence);
        trace.push(TraceStep {
            candidate_limit: candidate,
            population_size: current,
            sample_size,
            verdict: shape.verdict,
            peak_count: shape.peak_count,
        });
        if shape.verdict == ModalityVerdict::Unimodal {
            let (customers_flagged, flagged_fraction) = flagged(pop, candidate);
            return Ok(OutlierDecision {
                metric: pop.metric,
                final_limit: candidate,
                removal_trace: trace,
                customers_flagged,
                flagged_fraction,
                source: DecisionSource::Automated,
            });
        }
    }
    if trace.is_empty() {
        let needed = search.sample_size_for(sorted.len());
        return Err(OutlierError::InsufficientPopulation {
            needed,
            available: sorted.len(),
        });
    }
    Err(OutlierError::NoUnimodalLimit { trace })
}

/// Removes every event of each (customer, day) whose activity count exceeds the
/// decided limit for that metric.
pub fn apply_outlier_filter(log: &EventLog, decisions: &[OutlierDecision]) -> (EventLog, CleaningReport) {
    let mut flagged_days: BTreeSet<(String, i64)> = BTreeSet::new();
    let mut per_metric = BTreeMap::new();
    for d in decisions {
        let pop = ActivityPopulation::from_log(log, d.metric);
        let over: Vec<_> = pop.entries.iter().filter(|e| e.count > d.final_limit).collect();
        per_metric.insert(d.metric.short_name(), (d.final_limit, over.len()));
        flagged_days.extend(over.into_iter().map(|e| (e.cust_id.clone(), e.day)));
    }
    let customers: BTreeSet<&str> = log.distinct_customers();
    let flagged_customers: BTreeSet<&str> = flagged_days.iter().map(|(c, _)| c.as_str()).collect();
    let mut removed = 0;
    let mut hits_removed = 0;
    let out = log.retain(|e| {
        let hit = match e.customer_key() {
            Some(c) => flagged_days.contains(&(c.to_string(), e.day())),
            None => false,
        };
        if hit {
            removed += 1;
            if e.event_type == crate::model::EventType::Hit {
                hits_removed += 1;
            }
        }
        !hit
    });
    let fraction = if customers.is_empty() {
        0.0
    } else {
        flagged_customers.len() as f64 / customers.len() as f64
    };
    let mut report = CleaningReport::default();
    let mut outcome = RuleOutcome {
        records_removed: removed,
        customers_flagged: flagged_customers.len(),
        hits_removed,
        ..RuleOutcome::new("outliers")
    }
    .detail("flagged_customer_fraction", fraction)
    .detail("flagged_customer_days", flagged_days.len());
    for (metric, (limit, days)) in per_metric {
        outcome = outcome
            .param(&format!("{metric}_limit"), limit)
            .detail(&format!("{metric}_days_over_limit"), days);
    }
    report.push(outcome);
    (out, report)
}
