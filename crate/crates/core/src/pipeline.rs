//! End-to-end run: dedup, identity, behavior cleaning, journey audit,
//! outlier trimming, metrics and the A/A check.
//!
//! Reports hold no wall-clock data and only ordered maps, so two runs over the
//! same input serialize to identical bytes.

use std::collections::BTreeMap;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::behavior::{
    apply_flags, detect_b2b, detect_bots_with, detect_bounces, new_customer_cutoff, B2BConfig, BehaviorError,
    BotConfig, FlagSet, NewCustomerConfig, NewCustomerCutoff,
};
use crate::identity::{build_identity_map_with, resolve, IdentityReport};
use crate::ingest::{deduplicate_with, normalize_currency, DedupPolicy, IngestError, RateTable};
use crate::journey::{
    audit_journeys, expand_combos, remove_violators, ComboMap, JourneyPolicy, JourneyReport, JourneyVerdict,
};
use crate::metrics::{
    attribute_with, conversion_revenue, flag_low_visibility, rates, AttributionWindows, MetricsReport, PlpGate,
};
use crate::model::{CleaningReport, EventLog, EventType};
use crate::outliers::{
    apply_outlier_filter, find_outlier_limit_with, ActivityMetric, ActivityPopulation, LimitSearch, OutlierDecision,
};
use crate::par::Execution;
use crate::validation::{assign_segments, compare_report, stamp_segments, AaThresholds, AaVerdict};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Behavior(#[from] BehaviorError),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurrencyStage {
    /// Convert prices to this currency before anything else. Needs `rates`.
    pub base: Option<String>,
    /// Value of one unit of each currency in the base currency.
    pub rates: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DedupStage {
    pub enabled: bool,
    pub policy: DedupPolicy,
}

impl Default for DedupStage {
    fn default() -> Self {
        DedupStage {
            enabled: true,
            policy: DedupPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CleanStage {
    pub bots: Option<BotConfig>,
    pub b2b: Option<B2BConfig>,
    pub bounce: bool,
    /// Attribution settings are taken from the metrics stage.
    pub new_customers: Option<NewCustomerConfig>,
}

impl Default for CleanStage {
    fn default() -> Self {
        CleanStage {
            bots: Some(BotConfig::default()),
            b2b: Some(B2BConfig::default()),
            bounce: true,
            new_customers: Some(NewCustomerConfig::default()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JourneyStage {
    pub enabled: bool,
    pub policy: JourneyPolicy,
    /// Stop the run when the violation rate reaches the alarm.
    pub halt_on_alarm: bool,
    /// SKU -> combo id.
    pub combos: BTreeMap<String, String>,
}

impl Default for JourneyStage {
    fn default() -> Self {
        JourneyStage {
            enabled: true,
            policy: JourneyPolicy::default(),
            halt_on_alarm: true,
            combos: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutlierStage {
    pub enabled: bool,
    pub metrics: Vec<ActivityMetric>,
    /// Per-metric search parameters; missing metrics use their defaults.
    pub search: BTreeMap<ActivityMetric, LimitSearch>,
    /// Analyst decisions. A metric with a decision here skips the search.
    pub decisions: Vec<OutlierDecision>,
}

impl Default for OutlierStage {
    fn default() -> Self {
        OutlierStage {
            enabled: true,
            metrics: vec![ActivityMetric::ViewsPerDay, ActivityMetric::BuysPerDay],
            search: BTreeMap::new(),
            decisions: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsStage {
    pub windows: AttributionWindows,
    pub gate: PlpGate,
    /// Flag widgets whose CTR is below this fraction of the site median.
    pub low_visibility_fraction: Option<f64>,
}

impl Default for MetricsStage {
    fn default() -> Self {
        MetricsStage {
            windows: AttributionWindows::default(),
            gate: PlpGate::default(),
            low_visibility_fraction: Some(0.5),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AaStage {
    pub enabled: bool,
    /// Assign segments to customers whose events carry none.
    pub assign_seed: Option<u64>,
    pub thresholds: AaThresholds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub parallel: bool,
    pub currency: CurrencyStage,
    pub dedup: DedupStage,
    pub identity: bool,
    pub clean: CleanStage,
    pub journey: JourneyStage,
    pub outliers: OutlierStage,
    pub metrics: MetricsStage,
    pub aa: AaStage,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            parallel: true,
            currency: CurrencyStage::default(),
            dedup: DedupStage::default(),
            identity: true,
            clean: CleanStage::default(),
            journey: JourneyStage::default(),
            outliers: OutlierStage::default(),
            metrics: MetricsStage::default(),
            aa: AaStage {
                enabled: true,
                ..AaStage::default()
            },
        }
    }
}

impl PipelineConfig {
    pub fn execution(&self) -> Execution {
        if self.parallel {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }

    /// Applies `key=value` overrides; see [`apply_overrides`].
    pub fn with_overrides<'a>(&self, overrides: impl IntoIterator<Item = &'a str>) -> Result<Self, PipelineError> {
        apply_overrides(self, overrides)
    }
}

/// Applies `key=value` overrides with dotted keys, e.g. `clean.b2b.m=10`, to
/// any serializable configuration. The value is read as JSON, or as a string
/// when it is not valid JSON. Keys must already exist in the configuration.
pub fn apply_overrides<'a, T: Serialize + DeserializeOwned>(
    cfg: &T,
    overrides: impl IntoIterator<Item = &'a str>,
) -> Result<T, PipelineError> {
    let mut tree = serde_json::to_value(cfg).map_err(|e| PipelineError::Config(e.to_string()))?;
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| PipelineError::Config(format!("override `{o}` is not key=value")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        set_path(&mut tree, key, value)?;
    }
    serde_json::from_value(tree).map_err(|e| PipelineError::Config(e.to_string()))
}

fn set_path(tree: &mut Value, key: &str, value: Value) -> Result<(), PipelineError> {
    let unknown = || PipelineError::Config(format!("unknown configuration key `{key}`"));
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        let obj = match node {
            Value::Object(m) => m,
            // an optional section that is switched off: fill in its defaults first
            _ => return Err(unknown()),
        };
        if last {
            if !obj.contains_key(*part) {
                return Err(unknown());
            }
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.get_mut(*part).ok_or_else(unknown)?;
    }
    Err(unknown())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RunStatus {
    Completed,
    /// Stopped by the journey integration alarm.
    Halted,
}

/// A stage step that did not run, and why. Not fatal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageNote {
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestSection {
    pub events: usize,
    pub rejected: usize,
    pub currency_base: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanSection {
    pub flags: Vec<FlagSet>,
    pub new_customers: Option<NewCustomerCutoff>,
    pub report: CleaningReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JourneySection {
    pub combo_rows_collapsed: usize,
    pub audit: JourneyReport,
    pub report: Option<CleaningReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierSection {
    pub decisions: Vec<OutlierDecision>,
    pub report: CleaningReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSection {
    #[serde(flatten)]
    pub report: MetricsReport,
    pub conversion_revenue: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub status: RunStatus,
    pub input_events: usize,
    pub output_events: usize,
    pub ingest: IngestSection,
    pub dedup: Option<CleaningReport>,
    pub identity: Option<IdentityReport>,
    pub clean: Option<CleanSection>,
    pub journey: Option<JourneySection>,
    pub outliers: Option<OutlierSection>,
    pub metrics: Option<MetricsSection>,
    pub aa: Option<AaVerdict>,
    pub notes: Vec<StageNote>,
}

impl PipelineReport {
    /// Events removed by all stages together.
    pub fn events_removed(&self) -> usize {
        self.input_events - self.output_events
    }
}

pub struct PipelineRun {
    pub report: PipelineReport,
    /// The cleaned log, as it stood when the run ended.
    pub log: EventLog,
}

fn note(notes: &mut Vec<StageNote>, stage: &str, message: impl ToString) {
    notes.push(StageNote {
        stage: stage.into(),
        message: message.to_string(),
    });
}

/// Bots, B2B and bounces, then the new-customer cutoff on what remains. The
/// cutoff borrows attribution settings from `metrics`.
pub fn clean_stage(
    log: &EventLog,
    clean: &CleanStage,
    metrics: &MetricsStage,
    exec: Execution,
    notes: &mut Vec<StageNote>,
) -> Result<(EventLog, CleanSection), PipelineError> {
    let mut flags = Vec::new();
    if let Some(bots) = &clean.bots {
        flags.push(detect_bots_with(log, bots, exec)?);
    }
    if let Some(b2b) = &clean.b2b {
        match detect_b2b(log, b2b) {
            Ok(f) => flags.push(f),
            Err(BehaviorError::NoPurchases) => note(notes, "clean.b2b", BehaviorError::NoPurchases),
            Err(e) => return Err(e.into()),
        }
    }
    if clean.bounce {
        flags.push(detect_bounces(log));
    }
    let (mut log, mut report) = apply_flags(log, &flags, None);
    let mut cutoff = None;
    if let Some(nc) = &clean.new_customers {
        let nc = NewCustomerConfig {
            windows: metrics.windows,
            gate: metrics.gate,
            ..*nc
        };
        match new_customer_cutoff(&log, &nc) {
            Ok(c) => {
                let (out, r) = apply_flags(&log, &[], Some(&c));
                log = out;
                report.extend(r);
                cutoff = Some(c);
            }
            Err(e @ BehaviorError::InsufficientData { .. }) => note(notes, "clean.new_customers", e),
            Err(e) => return Err(e.into()),
        }
    }
    Ok((
        log,
        CleanSection {
            flags,
            new_customers: cutoff,
            report,
        },
    ))
}

/// Collapses combo purchases and audits journeys. Returns `true` as the last
/// element when the alarm fired and `halt_on_alarm` is set; the log is then
/// returned as audited, violators included.
pub fn journey_stage(
    log: &EventLog,
    cfg: &JourneyStage,
    session_gap_ms: i64,
    notes: &mut Vec<StageNote>,
) -> Result<(EventLog, JourneySection, bool), PipelineError> {
    let combos = ComboMap::new(cfg.combos.clone()).map_err(|e| PipelineError::Config(e.to_string()))?;
    let buys = |l: &EventLog| l.events().iter().filter(|e| e.event_type == EventType::Buy).count();
    let log_out = expand_combos(log, &combos, session_gap_ms);
    let audit = audit_journeys(&log_out, &cfg.policy);
    let alarm = audit.verdict == JourneyVerdict::IntegrationAlarm;
    let mut section = JourneySection {
        combo_rows_collapsed: buys(log) - buys(&log_out),
        audit,
        report: None,
    };
    if alarm {
        if cfg.halt_on_alarm {
            return Ok((log_out, section, true));
        }
        note(notes, "journey", "integration alarm raised; violators kept");
        return Ok((log_out, section, false));
    }
    let (out, r) = remove_violators(&log_out, &section.audit).expect("no alarm");
    section.report = Some(r);
    Ok((out, section, false))
}

/// Uses the configured decision for a metric when there is one, otherwise
/// searches for a limit.
pub fn outlier_stage(
    log: &EventLog,
    cfg: &OutlierStage,
    exec: Execution,
    notes: &mut Vec<StageNote>,
) -> (EventLog, OutlierSection) {
    let mut decisions = Vec::new();
    for metric in &cfg.metrics {
        if let Some(d) = cfg.decisions.iter().find(|d| d.metric == *metric) {
            decisions.push(d.clone());
            continue;
        }
        let search = cfg
            .search
            .get(metric)
            .copied()
            .unwrap_or_else(|| LimitSearch::for_metric(*metric));
        let pop = ActivityPopulation::from_log(log, *metric);
        match find_outlier_limit_with(&pop, &search, exec) {
            Ok(d) => decisions.push(d),
            Err(e) => note(notes, &format!("outliers.{}", metric.short_name()), e),
        }
    }
    let (out, report) = apply_outlier_filter(log, &decisions);
    (out, OutlierSection { decisions, report })
}

/// Attribution, rates, low-visibility flags and revenue.
pub fn metrics_stage(
    log: &EventLog,
    cfg: &MetricsStage,
    exec: Execution,
    notes: &mut Vec<StageNote>,
) -> Result<MetricsSection, PipelineError> {
    cfg.windows
        .validate()
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    let attr = attribute_with(log, &cfg.windows, &cfg.gate, exec);
    let mut report = rates(&attr);
    if let Some(fraction) = cfg.low_visibility_fraction {
        match flag_low_visibility(&report, fraction) {
            Ok(flags) => report.low_visibility = flags,
            Err(e) => note(notes, "metrics.low_visibility", e),
        }
    }
    let conversion_revenue = match conversion_revenue(&attr, log) {
        Ok(r) => Some(r),
        Err(e) => {
            note(notes, "metrics.revenue", e);
            None
        }
    };
    Ok(MetricsSection {
        report,
        conversion_revenue,
    })
}

/// Stamps segments on customers that have none, when a seed is configured.
pub fn stamp_stage(log: &EventLog, cfg: &AaStage) -> EventLog {
    match cfg.assign_seed {
        Some(seed) => {
            let unassigned = log
                .events()
                .iter()
                .filter(|e| e.segment_flag.is_none())
                .filter_map(|e| e.customer_key());
            let map = assign_segments(unassigned, seed);
            stamp_segments(log, &map)
        }
        None => log.clone(),
    }
}

pub fn run(input: &EventLog, cfg: &PipelineConfig) -> Result<PipelineRun, PipelineError> {
    let exec = cfg.execution();
    cfg.metrics
        .windows
        .validate()
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    if !cfg.dedup.policy.is_valid() {
        return Err(PipelineError::Config(
            "dedup glitch window must be shorter than the session gap".into(),
        ));
    }
    ComboMap::new(cfg.journey.combos.clone()).map_err(|e| PipelineError::Config(e.to_string()))?;

    let mut notes = Vec::new();
    let mut report = PipelineReport {
        status: RunStatus::Completed,
        input_events: input.len(),
        output_events: input.len(),
        ingest: IngestSection {
            events: input.len(),
            ..Default::default()
        },
        dedup: None,
        identity: None,
        clean: None,
        journey: None,
        outliers: None,
        metrics: None,
        aa: None,
        notes: Vec::new(),
    };

    let mut log = input.clone();
    if let Some(base) = &cfg.currency.base {
        let table = RateTable::new(base, cfg.currency.rates.clone())?;
        log = normalize_currency(&log, &table)?;
        report.ingest.currency_base = Some(base.clone());
    }

    if cfg.dedup.enabled {
        let (out, r) = deduplicate_with(&log, &cfg.dedup.policy, exec);
        log = out;
        report.dedup = Some(r);
    }

    if cfg.identity {
        let map = build_identity_map_with(&log, exec);
        let (out, r) = resolve(&log, &map);
        log = out;
        report.identity = Some(r);
    }

    let (out, section) = clean_stage(&log, &cfg.clean, &cfg.metrics, exec, &mut notes)?;
    log = out;
    report.clean = Some(section);

    if cfg.journey.enabled {
        let (out, section, halted) = journey_stage(&log, &cfg.journey, cfg.dedup.policy.session_gap_ms, &mut notes)?;
        log = out;
        report.journey = Some(section);
        if halted {
            report.status = RunStatus::Halted;
            return Ok(finish(report, notes, log));
        }
    }

    if cfg.outliers.enabled {
        let (out, section) = outlier_stage(&log, &cfg.outliers, exec, &mut notes);
        log = out;
        report.outliers = Some(section);
    }

    if cfg.aa.enabled {
        log = stamp_stage(&log, &cfg.aa);
    }
    let metrics = metrics_stage(&log, &cfg.metrics, exec, &mut notes)?;
    if cfg.aa.enabled {
        match compare_report(&metrics.report, &cfg.aa.thresholds) {
            Ok(v) => report.aa = Some(v),
            Err(e) => note(&mut notes, "aa", e),
        }
    }
    report.metrics = Some(metrics);
    Ok(finish(report, notes, log))
}

fn finish(mut report: PipelineReport, notes: Vec<StageNote>, log: EventLog) -> PipelineRun {
    report.output_events = log.len();
    report.notes = notes;
    PipelineRun { report, log }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::*;

    #[test]
    fn overrides_set_nested_keys() {
        let cfg = PipelineConfig::default()
            .with_overrides([
                "clean.b2b.m=10",
                "journey.policy.quick_buy_enabled=true",
                "aa.assign_seed=3",
            ])
            .unwrap();
        assert_eq!(cfg.clean.b2b.unwrap().m, 10.0);
        assert!(cfg.journey.policy.quick_buy_enabled);
        assert_eq!(cfg.aa.assign_seed, Some(3));
    }

    #[test]
    fn unknown_override_key_is_an_error() {
        assert!(PipelineConfig::default().with_overrides(["clean.b2b.mm=10"]).is_err());
        assert!(PipelineConfig::default().with_overrides(["nokey"]).is_err());
        assert!(PipelineConfig::default()
            .with_overrides(["dedup.policy.session_gap_ms=abc"])
            .is_err());
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = PipelineConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<PipelineConfig>(&text).unwrap(), cfg);
        assert_eq!(serde_json::from_str::<PipelineConfig>("{}").unwrap(), cfg);
    }

    #[test]
    fn alarm_halts_the_run() {
        let mut events = Vec::new();
        for i in 0..10 {
            let c = format!("c{i}");
            events.push(hit(&format!("h{i}"), 0, &c, &["p"]));
            events.push(action(&format!("a{i}"), EventType::Atc, 10, &c, "p"));
        }
        let out = run(&log(events), &PipelineConfig::default()).unwrap();
        assert_eq!(out.report.status, RunStatus::Halted);
        assert!(out.report.metrics.is_none());
        assert_eq!(
            out.report.journey.unwrap().audit.verdict,
            JourneyVerdict::IntegrationAlarm
        );
    }

    #[test]
    fn small_log_completes_with_notes() {
        let events = vec![
            hit("h1", 0, "a", &["p", "q"]),
            action("c1", EventType::Click, 1000, "a", "p"),
            hit("h2", 5000, "a", &["q"]),
        ];
        let out = run(&log(events), &PipelineConfig::default()).unwrap();
        assert_eq!(out.report.status, RunStatus::Completed);
        assert_eq!(out.report.output_events, 3);
        assert!(!out.report.notes.is_empty());
        let m = out.report.metrics.unwrap();
        assert_eq!(m.report.totals.counts.clicks, 1);
    }
}
