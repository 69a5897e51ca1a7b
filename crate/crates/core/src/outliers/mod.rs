//! Outlier limits on per-customer, per-day activity counts.
//!
//! Two estimators are provided: the Hampel X84 rule (median + x·1.4826·MAD)
//! and a non-parametric search driven by Bootlier plots, i.e. histograms of
//! `mean - trimmed mean` over bootstrap resamples. The search trims the upper
//! tail one distinct value at a time until the plot becomes unimodal.

mod bootlier;
mod limit;
mod modality;
mod normality;
mod robust;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{EventLog, EventType};

pub use bootlier::{bootlier_histogram, bootlier_histogram_with, BootlierHistogram, BootlierParams, HistogramBin};
pub use limit::{
    apply_outlier_filter, decision_for_limit, find_outlier_limit, find_outlier_limit_with, DecisionSource, LimitSearch,
    OutlierDecision, SampleSizing, TraceStep,
};
pub use modality::{kde, modality, Kde, Modality, ModalityVerdict, Peak, ProminenceThresholds};
pub(crate) use normality::correlation;
pub use normality::{normality_probe, NormalityProbe, NormalityVerdict};
pub use robust::{hampel_limit, hampel_outliers, mad, median, MAD_TO_SD};

#[derive(Debug, Error)]
pub enum OutlierError {
    #[error("empty population")]
    EmptyPopulation,
    #[error("population of {available} is smaller than the required {needed}")]
    InsufficientPopulation { needed: usize, available: usize },
    #[error("invalid bootlier parameters: {0}")]
    InvalidParams(String),
    #[error("no candidate limit produced a unimodal plot ({} steps tried)", .trace.len())]
    NoUnimodalLimit { trace: Vec<TraceStep> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ActivityMetric {
    /// CLICK events (product views) per customer per day.
    ViewsPerDay,
    /// BUY events per customer per day.
    BuysPerDay,
}

impl ActivityMetric {
    pub fn event_type(self) -> EventType {
        match self {
            ActivityMetric::ViewsPerDay => EventType::Click,
            ActivityMetric::BuysPerDay => EventType::Buy,
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            ActivityMetric::ViewsPerDay => "views",
            ActivityMetric::BuysPerDay => "buys",
        }
    }
}

impl std::str::FromStr for ActivityMetric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "views" | "views_per_day" => Ok(ActivityMetric::ViewsPerDay),
            "buys" | "buys_per_day" => Ok(ActivityMetric::BuysPerDay),
            other => Err(format!("unknown metric `{other}` (expected views or buys)")),
        }
    }
}

/// Activity count of one customer on one UTC day.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PopulationEntry {
    pub cust_id: String,
    pub day: i64,
    pub count: u64,
}

/// One value per (customer, day) with at least one event of the metric's type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivityPopulation {
    pub metric: ActivityMetric,
    pub entries: Vec<PopulationEntry>,
}

impl ActivityPopulation {
    pub fn from_log(log: &EventLog, metric: ActivityMetric) -> Self {
        let kind = metric.event_type();
        let mut counts: BTreeMap<(&str, i64), u64> = BTreeMap::new();
        for e in log.events().iter().filter(|e| e.event_type == kind) {
            if let Some(c) = e.customer_key() {
                *counts.entry((c, e.day())).or_default() += 1;
            }
        }
        ActivityPopulation {
            metric,
            entries: counts
                .into_iter()
                .map(|((c, day), count)| PopulationEntry {
                    cust_id: c.to_string(),
                    day,
                    count,
                })
                .collect(),
        }
    }

    /// Anonymous population, one synthetic customer per value. Zeros are dropped.
    pub fn from_values(metric: ActivityMetric, values: &[u64]) -> Self {
        ActivityPopulation {
            metric,
            entries: values
                .iter()
                .enumerate()
                .filter(|(_, v)| **v > 0)
                .map(|(i, &count)| PopulationEntry {
                    cust_id: format!("#{i}"),
                    day: 0,
                    count,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn values(&self) -> Vec<u64> {
        self.entries.iter().map(|e| e.count).collect()
    }

    pub fn max(&self) -> Option<u64> {
        self.entries.iter().map(|e| e.count).max()
    }

    /// Entries whose count does not exceed `limit`.
    pub fn restricted(&self, limit: u64) -> ActivityPopulation {
        ActivityPopulation {
            metric: self.metric,
            entries: self.entries.iter().filter(|e| e.count <= limit).cloned().collect(),
        }
    }
}
