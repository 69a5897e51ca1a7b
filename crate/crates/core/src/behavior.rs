//! Customer-behavior filters: bulk (B2B) buyers, bounced visitors, bots, and
//! the initial clicks of new customers.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::net::IpAddr;

use globset::{GlobBuilder, GlobSet, GlobSetBuilder};
use ipnet::IpNet;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::metrics::{attribute, AttributionWindows, PlpGate};
use crate::model::{CleaningReport, Event, EventLog, EventType, PageType, RuleOutcome};
use crate::par::{self, Execution};

#[derive(Debug, Error, PartialEq)]
pub enum BehaviorError {
    #[error("log contains no purchases")]
    NoPurchases,
    #[error("only {customers} customers reach {x_max} attributed clicks, need {needed}")]
    InsufficientData {
        customers: usize,
        x_max: u32,
        needed: usize,
    },
    #[error("invalid signature `{0}`")]
    InvalidSignature(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagRule {
    Bot,
    B2b,
    Bounce,
}

impl FlagRule {
    pub fn name(self) -> &'static str {
        match self {
            FlagRule::Bot => "bots",
            FlagRule::B2b => "b2b",
            FlagRule::Bounce => "bounce",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub reason: String,
    pub value: f64,
}

/// Customers flagged by one rule, with what triggered each flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlagSet {
    pub rule: FlagRule,
    pub customers: BTreeMap<String, Vec<Evidence>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub parameters: BTreeMap<String, Value>,
}

impl FlagSet {
    fn new(rule: FlagRule) -> Self {
        FlagSet {
            rule,
            customers: BTreeMap::new(),
            parameters: BTreeMap::new(),
        }
    }

    fn param(mut self, key: &str, value: impl Serialize) -> Self {
        self.parameters
            .insert(key.to_string(), serde_json::to_value(value).unwrap_or(Value::Null));
        self
    }

    pub fn contains(&self, cust: &str) -> bool {
        self.customers.contains_key(cust)
    }

    pub fn len(&self) -> usize {
        self.customers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.customers.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct B2BConfig {
    /// Multiple of the median buys/day above which a customer is a bulk buyer.
    /// 5 suits fashion retail; grocery calls for something nearer 10.
    pub m: f64,
    /// Weight each BUY by its quantity.
    pub weight_by_quantity: bool,
}

impl Default for B2BConfig {
    fn default() -> Self {
        B2BConfig {
            m: 5.0,
            weight_by_quantity: true,
        }
    }
}

/// Flags customers who buy more than `m` times the median buys/day on any day.
pub fn detect_b2b(log: &EventLog, cfg: &B2BConfig) -> Result<FlagSet, BehaviorError> {
    if cfg.m.is_nan() || cfg.m <= 1.0 {
        return Err(BehaviorError::InvalidConfig(format!(
            "b2b m must exceed 1, got {}",
            cfg.m
        )));
    }
    let mut per_day: BTreeMap<(&str, i64), u64> = BTreeMap::new();
    for e in log.events().iter().filter(|e| e.event_type == EventType::Buy) {
        if let Some(c) = e.customer_key() {
            let w = if cfg.weight_by_quantity { e.quantity as u64 } else { 1 };
            *per_day.entry((c, e.day())).or_default() += w;
        }
    }
    if per_day.is_empty() {
        return Err(BehaviorError::NoPurchases);
    }
    let values: Vec<f64> = per_day.values().map(|&v| v as f64).collect();
    let median = crate::outliers::median(&values).expect("non-empty");
    let threshold = cfg.m * median;
    let mut flags = FlagSet::new(FlagRule::B2b)
        .param("m", cfg.m)
        .param("median_buys_per_day", median)
        .param("threshold", threshold);
    for ((c, _), &v) in &per_day {
        if v as f64 > threshold {
            let ev = flags.customers.entry(c.to_string()).or_default();
            match ev.first_mut() {
                Some(e) => e.value = e.value.max(v as f64),
                None => ev.push(Evidence {
                    reason: "buys_per_day".into(),
                    value: v as f64,
                }),
            }
        }
    }
    Ok(flags)
}

/// Flags customers whose whole history is one home-page or PLP hit.
pub fn detect_bounces(log: &EventLog) -> FlagSet {
    let mut flags = FlagSet::new(FlagRule::Bounce);
    for (c, events) in log.by_customer() {
        if let [e] = events.as_slice() {
            if e.event_type == EventType::Hit && matches!(e.page_type, PageType::Home | PageType::Plp) {
                flags.customers.insert(
                    c.to_string(),
                    vec![Evidence {
                        reason: "single_landing_hit".into(),
                        value: 1.0,
                    }],
                );
            }
        }
    }
    flags
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BotConfig {
    /// Case-insensitive glob patterns matched against the whole user agent.
    #[serde(alias = "user_agents")]
    pub signature_user_agents: Vec<String>,
    /// Addresses or CIDR blocks.
    #[serde(alias = "ips")]
    pub signature_ips: Vec<String>,
    /// Sustained CLICK+ATC events per second that marks a bot.
    pub rate_threshold: f64,
    pub rate_window_ms: i64,
    pub regularity_min_events: usize,
    pub regularity_cv_max: f64,
}

impl Default for BotConfig {
    fn default() -> Self {
        BotConfig {
            signature_user_agents: [
                "*bot*",
                "*crawler*",
                "*spider*",
                "*headless*",
                "curl/*",
                "python-requests/*",
            ]
            .map(String::from)
            .to_vec(),
            signature_ips: Vec::new(),
            rate_threshold: 1.0,
            rate_window_ms: 10_000,
            regularity_min_events: 20,
            regularity_cv_max: 0.1,
        }
    }
}

struct Signatures {
    agents: GlobSet,
    nets: Vec<IpNet>,
}

impl Signatures {
    fn compile(cfg: &BotConfig) -> Result<Self, BehaviorError> {
        let mut b = GlobSetBuilder::new();
        for p in &cfg.signature_user_agents {
            let glob = GlobBuilder::new(p)
                .case_insensitive(true)
                .literal_separator(false)
                .build()
                .map_err(|_| BehaviorError::InvalidSignature(p.clone()))?;
            b.add(glob);
        }
        let agents = b.build().map_err(|e| BehaviorError::InvalidSignature(e.to_string()))?;
        let nets = cfg
            .signature_ips
            .iter()
            .map(|s| {
                s.parse::<IpNet>()
                    .or_else(|_| s.parse::<IpAddr>().map(IpNet::from))
                    .map_err(|_| BehaviorError::InvalidSignature(s.clone()))
            })
            .collect::<Result<_, _>>()?;
        Ok(Signatures { agents, nets })
    }

    fn agent(&self, ua: &str) -> bool {
        self.agents.is_match(ua)
    }

    fn ip(&self, ip: &str) -> bool {
        ip.parse::<IpAddr>()
            .map(|a| self.nets.iter().any(|n| n.contains(&a)))
            .unwrap_or(false)
    }
}

pub fn detect_bots(log: &EventLog, cfg: &BotConfig) -> Result<FlagSet, BehaviorError> {
    detect_bots_with(log, cfg, Execution::default())
}

/// Flags a customer on any of: signature user agent, signature IP, a burst of
/// at least `rate_threshold` CLICK/ATC events per second over the rate window,
/// or machine-regular gaps between consecutive clicks.
pub fn detect_bots_with(log: &EventLog, cfg: &BotConfig, exec: Execution) -> Result<FlagSet, BehaviorError> {
    if cfg.rate_threshold.is_nan() || cfg.rate_threshold <= 0.0 || cfg.rate_window_ms <= 0 {
        return Err(BehaviorError::InvalidConfig(
            "bot rate threshold and window must be positive".into(),
        ));
    }
    if cfg.regularity_min_events < 3 {
        return Err(BehaviorError::InvalidConfig(
            "regularity_min_events must be at least 3".into(),
        ));
    }
    let sigs = Signatures::compile(cfg)?;
    let groups: Vec<(&str, Vec<&Event>)> = log.by_customer().into_iter().collect();
    let evidence = par::map_slice(exec, &groups, |(_, events)| bot_evidence(events, cfg, &sigs));

    let mut flags = FlagSet::new(FlagRule::Bot)
        .param("rate_threshold", cfg.rate_threshold)
        .param("rate_window_ms", cfg.rate_window_ms)
        .param("regularity_min_events", cfg.regularity_min_events)
        .param("regularity_cv_max", cfg.regularity_cv_max);
    for ((c, _), ev) in groups.iter().zip(evidence) {
        if !ev.is_empty() {
            flags.customers.insert(c.to_string(), ev);
        }
    }
    Ok(flags)
}

fn bot_evidence(events: &[&Event], cfg: &BotConfig, sigs: &Signatures) -> Vec<Evidence> {
    let mut out = Vec::new();
    if events
        .iter()
        .any(|e| e.user_agent.as_deref().is_some_and(|ua| sigs.agent(ua)))
    {
        out.push(Evidence {
            reason: "user_agent_signature".into(),
            value: 1.0,
        });
    }
    if events.iter().any(|e| e.ip.as_deref().is_some_and(|ip| sigs.ip(ip))) {
        out.push(Evidence {
            reason: "ip_signature".into(),
            value: 1.0,
        });
    }

    let active: Vec<i64> = events
        .iter()
        .filter(|e| matches!(e.event_type, EventType::Click | EventType::Atc))
        .map(|e| e.timestamp_utc)
        .collect();
    let window_s = cfg.rate_window_ms as f64 / 1000.0;
    let peak = peak_window_count(&active, cfg.rate_window_ms);
    if peak as f64 >= cfg.rate_threshold * window_s {
        out.push(Evidence {
            reason: "event_rate".into(),
            value: peak as f64 / window_s,
        });
    }

    let clicks: Vec<i64> = events
        .iter()
        .filter(|e| e.event_type == EventType::Click)
        .map(|e| e.timestamp_utc)
        .collect();
    if let Some(cv) = min_gap_cv(&clicks, cfg.regularity_min_events) {
        if cv < cfg.regularity_cv_max {
            out.push(Evidence {
                reason: "regular_gaps".into(),
                value: cv,
            });
        }
    }
    out
}

/// Largest number of sorted timestamps inside any window `[t, t + window)`.
fn peak_window_count(times: &[i64], window_ms: i64) -> usize {
    let mut best = 0;
    let mut j = 0;
    for i in 0..times.len() {
        while j < times.len() && times[j] < times[i] + window_ms {
            j += 1;
        }
        best = best.max(j - i);
    }
    best
}

/// Smallest coefficient of variation of inter-event gaps over any run of
/// `min_events` consecutive timestamps.
fn min_gap_cv(times: &[i64], min_events: usize) -> Option<f64> {
    let w = min_events - 1;
    if times.len() < min_events {
        return None;
    }
    let gaps: Vec<f64> = times.windows(2).map(|p| (p[1] - p[0]) as f64).collect();
    let mut best: Option<f64> = None;
    let (mut s, mut s2) = (0.0, 0.0);
    for (i, &g) in gaps.iter().enumerate() {
        s += g;
        s2 += g * g;
        if i >= w {
            let old = gaps[i - w];
            s -= old;
            s2 -= old * old;
        }
        if i + 1 >= w {
            let mean = s / w as f64;
            if mean > 0.0 {
                let var = (s2 / w as f64 - mean * mean).max(0.0);
                let cv = var.sqrt() / mean;
                best = Some(best.map_or(cv, |b: f64| b.min(cv)));
            }
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NewCustomerConfig {
    /// A click ordinal qualifies when its CTR is below `ratio` times the CTR of later ordinals.
    pub ratio: f64,
    pub x_max: u32,
    /// Customers needed with at least `x_max` attributed clicks.
    pub min_customers: usize,
    pub windows: AttributionWindows,
    pub gate: PlpGate,
}

impl Default for NewCustomerConfig {
    fn default() -> Self {
        NewCustomerConfig {
            ratio: 0.7,
            x_max: 10,
            min_customers: 30,
            windows: AttributionWindows::default(),
            gate: PlpGate::default(),
        }
    }
}

/// CTR split at one click ordinal. A hit's ordinal is one plus the number of
/// clicks its customer made before it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrdinalRow {
    pub x: u32,
    pub hits_at: u64,
    pub ctr_at: Option<f64>,
    pub ctr_at_or_below: Option<f64>,
    pub ctr_above: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewCustomerCutoff {
    pub x: u32,
    pub table: Vec<OrdinalRow>,
    pub ratio: f64,
    /// Hits and clicks to leave out of CTR for cutoff `x`.
    #[serde(skip)]
    pub excluded_event_ids: BTreeSet<String>,
}

/// Finds how many initial clicks behave differently from a customer's later
/// clicks: ordinals `1..=x` each have a CTR below `ratio` times the CTR of all
/// higher ordinals; `x = 0` when the first ordinal already does not.
pub fn new_customer_cutoff(log: &EventLog, cfg: &NewCustomerConfig) -> Result<NewCustomerCutoff, BehaviorError> {
    if cfg.x_max == 0 || cfg.ratio.is_nan() || cfg.ratio <= 0.0 {
        return Err(BehaviorError::InvalidConfig("x_max and ratio must be positive".into()));
    }
    let attr = attribute(log, &cfg.windows, &cfg.gate);
    let click_hit: HashMap<&str, &str> = attr
        .pairs
        .iter()
        .filter(|p| p.event_type == EventType::Click)
        .map(|p| (p.interaction_id.as_str(), p.hit_id.as_str()))
        .collect();

    // ordinal buckets 1..=x_max, the last one also holding everything above
    let top = cfg.x_max as usize + 1;
    let mut hits_at = vec![0u64; top + 1];
    let mut clicked_at = vec![0u64; top + 1];
    let mut heavy = 0;
    let mut hit_ordinal: Vec<(&str, usize)> = Vec::new();
    let mut click_ordinal: Vec<(&str, usize)> = Vec::new();
    for events in log.by_customer().into_values() {
        let mut prior = 0usize;
        let mut hit_bucket: HashMap<&str, usize> = HashMap::new();
        let mut clicked: BTreeSet<&str> = BTreeSet::new();
        for &e in &events {
            match e.event_type {
                EventType::Hit if cfg.gate.hit_eligible(e) => {
                    let o = prior + 1;
                    hit_bucket.insert(e.event_id.as_str(), o.min(top));
                    hit_ordinal.push((e.event_id.as_str(), o));
                }
                EventType::Click => {
                    if let Some(h) = click_hit.get(e.event_id.as_str()) {
                        prior += 1;
                        click_ordinal.push((e.event_id.as_str(), prior));
                        clicked.insert(h);
                    }
                }
                _ => {}
            }
        }
        for (h, b) in hit_bucket {
            hits_at[b] += 1;
            if clicked.contains(h) {
                clicked_at[b] += 1;
            }
        }
        if prior >= cfg.x_max as usize {
            heavy += 1;
        }
    }
    if heavy < cfg.min_customers {
        return Err(BehaviorError::InsufficientData {
            customers: heavy,
            x_max: cfg.x_max,
            needed: cfg.min_customers,
        });
    }

    let ratio = |n: u64, d: u64| (d > 0).then(|| n as f64 / d as f64);
    let sum = |v: &[u64]| v.iter().sum::<u64>();
    let table: Vec<OrdinalRow> = (1..=cfg.x_max as usize)
        .map(|x| OrdinalRow {
            x: x as u32,
            hits_at: hits_at[x],
            ctr_at: ratio(clicked_at[x], hits_at[x]),
            ctr_at_or_below: ratio(sum(&clicked_at[1..=x]), sum(&hits_at[1..=x])),
            ctr_above: ratio(sum(&clicked_at[x + 1..]), sum(&hits_at[x + 1..])),
        })
        .collect();
    let x = table
        .iter()
        .take_while(|r| matches!((r.ctr_at, r.ctr_above), (Some(at), Some(above)) if at < cfg.ratio * above))
        .count();

    let excluded_event_ids = hit_ordinal
        .into_iter()
        .chain(click_ordinal)
        .filter(|(_, o)| *o <= x)
        .map(|(id, _)| id.to_string())
        .collect();
    Ok(NewCustomerCutoff {
        x: x as u32,
        table,
        ratio: cfg.ratio,
        excluded_event_ids,
    })
}

/// Applies flags in order; an event removed by an earlier rule is not counted
/// again. Bounce flags remove the flagged hits, bot and B2B flags remove every
/// event of the customer. The new-customer cutoff only marks events.
pub fn apply_flags(
    log: &EventLog,
    flags: &[FlagSet],
    new_customers: Option<&NewCustomerCutoff>,
) -> (EventLog, CleaningReport) {
    let mut removed_by: Vec<(usize, usize)> = vec![(0, 0); flags.len()];
    let out = log.retain(|e| {
        let Some(c) = e.customer_key() else { return true };
        for (i, f) in flags.iter().enumerate() {
            let hit = f.contains(c) && (f.rule != FlagRule::Bounce || e.event_type == EventType::Hit);
            if hit {
                removed_by[i].0 += 1;
                if e.event_type == EventType::Hit {
                    removed_by[i].1 += 1;
                }
                return false;
            }
        }
        true
    });

    let mut report = CleaningReport::default();
    for (f, (records, hits)) in flags.iter().zip(removed_by) {
        let mut outcome = RuleOutcome {
            records_removed: records,
            customers_flagged: f.len(),
            hits_removed: hits,
            ..RuleOutcome::new(f.rule.name())
        };
        outcome.parameters = f.parameters.clone();
        let mut reasons: BTreeMap<&str, usize> = BTreeMap::new();
        for ev in f.customers.values().flatten() {
            *reasons.entry(ev.reason.as_str()).or_default() += 1;
        }
        report.push(outcome.detail("evidence_counts", reasons));
    }

    let Some(cut) = new_customers else {
        return (out, report);
    };
    let mut marked_hits = 0;
    let mut marked_clicks = 0;
    let out = out.map(|e| {
        let mut e = e.clone();
        if cut.excluded_event_ids.contains(&e.event_id) {
            e.excluded_from_metrics = true;
            match e.event_type {
                EventType::Hit => marked_hits += 1,
                _ => marked_clicks += 1,
            }
        }
        e
    });
    report.push(
        RuleOutcome::new("newcust")
            .param("x", cut.x)
            .param("ratio", cut.ratio)
            .detail("hits_excluded_from_ctr", marked_hits)
            .detail("clicks_excluded_from_ctr", marked_clicks),
    );
    (out, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::rates;
    use crate::model::fixtures::*;
    use crate::model::DAY_MS;

    const SEC: i64 = 1000;

    fn buys(cust: &str, day: i64, n: usize) -> Vec<Event> {
        (0..n)
            .map(|i| {
                action(
                    &format!("{cust}-{day}-{i}"),
                    EventType::Buy,
                    day * DAY_MS + i as i64 * 60 * SEC,
                    cust,
                    &format!("p{i}"),
                )
            })
            .collect()
    }

    #[test]
    fn b2b_threshold_is_m_times_median() {
        let mut events = Vec::new();
        for c in 0..20 {
            events.extend(buys(&format!("c{c}"), 0, 2));
        }
        events.extend(buys("reseller", 0, 11));
        events.extend(buys("edge", 0, 10));
        let flags = detect_b2b(&log(events), &B2BConfig::default()).unwrap();
        assert_eq!(flags.customers.keys().collect::<Vec<_>>(), vec!["reseller"]);
        assert_eq!(flags.customers["reseller"][0].value, 11.0);
    }

    #[test]
    fn b2b_uniform_population_has_no_flags() {
        let events: Vec<Event> = (0..10).flat_map(|c| buys(&format!("c{c}"), 0, 1)).collect();
        assert!(detect_b2b(
            &log(events),
            &B2BConfig {
                m: 1.01,
                ..Default::default()
            }
        )
        .unwrap()
        .is_empty());
        assert_eq!(
            detect_b2b(&log(vec![]), &B2BConfig::default()),
            Err(BehaviorError::NoPurchases)
        );
    }

    #[test]
    fn b2b_weights_quantity() {
        let mut events: Vec<Event> = (0..10).flat_map(|c| buys(&format!("c{c}"), 0, 1)).collect();
        let mut bulk = action("bulk", EventType::Buy, 0, "big", "p");
        bulk.quantity = 40;
        events.push(bulk);
        let l = log(events);
        assert!(detect_b2b(&l, &B2BConfig::default()).unwrap().contains("big"));
        let unweighted = B2BConfig {
            weight_by_quantity: false,
            ..Default::default()
        };
        assert!(detect_b2b(&l, &unweighted).unwrap().is_empty());
    }

    #[test]
    fn bounce_definition() {
        let mut home = hit("h1", 0, "home", &["a"]);
        home.page_type = PageType::Home;
        let pdp = hit("h2", 0, "pdp", &["a"]);
        let mut engaged = hit("h3", 0, "engaged", &["a"]);
        engaged.page_type = PageType::Home;
        let l = log(vec![
            home,
            pdp,
            engaged,
            action("k", EventType::Click, SEC, "engaged", "a"),
        ]);
        let flags = detect_bounces(&l);
        assert_eq!(flags.customers.keys().collect::<Vec<_>>(), vec!["home"]);
    }

    #[test]
    fn bounce_removal_is_a_fixpoint_and_raises_ctr() {
        let mut events = Vec::new();
        for i in 0..10 {
            let mut h = hit(&format!("b{i}"), 0, &format!("bounce{i}"), &["a"]);
            h.page_type = PageType::Plp;
            events.push(h);
        }
        for i in 0..10 {
            let c = format!("c{i}");
            events.push(hit(&format!("h{i}"), 0, &c, &["a"]));
            if i < 3 {
                events.push(action(&format!("k{i}"), EventType::Click, SEC, &c, "a"));
            }
        }
        let l = log(events);
        let before = rates(&attribute(&l, &Default::default(), &Default::default()))
            .totals
            .ctr
            .unwrap();
        let (cleaned, report) = apply_flags(&l, &[detect_bounces(&l)], None);
        let after = rates(&attribute(&cleaned, &Default::default(), &Default::default()))
            .totals
            .ctr
            .unwrap();
        assert!(after > before);
        assert!((after - 0.3).abs() < 1e-12);
        assert_eq!(report.rule("bounce").unwrap().hits_removed, 10);
        assert!(detect_bounces(&cleaned).is_empty());
    }

    fn clicks_at(cust: &str, times: &[i64]) -> Vec<Event> {
        times
            .iter()
            .enumerate()
            .map(|(i, &t)| action(&format!("{cust}{i}"), EventType::Click, t, cust, &format!("p{i}")))
            .collect()
    }

    #[test]
    fn burst_of_clicks_is_a_bot() {
        let times: Vec<i64> = (0..15).map(|i| i * 650).collect();
        let flags = detect_bots(&log(clicks_at("fast", &times)), &BotConfig::default()).unwrap();
        assert_eq!(flags.customers["fast"][0].reason, "event_rate");
    }

    #[test]
    fn metronome_clicks_are_a_bot() {
        let times: Vec<i64> = (0..30).map(|i| i * 5 * SEC).collect();
        let flags = detect_bots(&log(clicks_at("tick", &times)), &BotConfig::default()).unwrap();
        let ev = &flags.customers["tick"];
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].reason, "regular_gaps");
        assert!(ev[0].value < 1e-9);
    }

    #[test]
    fn signatures_match_case_insensitively() {
        let mut a = action("a", EventType::Click, 0, "crawler", "p");
        a.user_agent = Some("Mozilla/5.0 (compatible; GoogleBot/2.1)".into());
        let mut b = action("b", EventType::Click, 0, "proxy", "p");
        b.ip = Some("66.249.70.12".into());
        let mut c = action("c", EventType::Click, 0, "human", "p");
        c.user_agent = Some("Mozilla/5.0 (X11; Linux x86_64) Firefox/120.0".into());
        c.ip = Some("10.0.0.1".into());
        let cfg = BotConfig {
            signature_ips: vec!["66.249.64.0/19".into(), "192.0.2.7".into()],
            ..Default::default()
        };
        let flags = detect_bots(&log(vec![a, b, c]), &cfg).unwrap();
        assert_eq!(flags.customers.keys().collect::<Vec<_>>(), vec!["crawler", "proxy"]);
        assert_eq!(flags.customers["proxy"][0].reason, "ip_signature");
    }

    #[test]
    fn human_pace_is_not_a_bot() {
        use rand::SeedableRng;
        use rand_chacha::ChaCha8Rng;
        use rand_distr::{Distribution, LogNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gap = LogNormal::new((20_000f64).ln(), 1.0).unwrap();
        let mut t = 0i64;
        let times: Vec<i64> = (0..200)
            .map(|_| {
                t += 60_000 + gap.sample(&mut rng) as i64;
                t
            })
            .collect();
        assert!(detect_bots(&log(clicks_at("h", &times)), &BotConfig::default())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn bad_signature_is_reported() {
        let cfg = BotConfig {
            signature_ips: vec!["not-an-ip".into()],
            ..Default::default()
        };
        assert!(matches!(
            detect_bots(&log(vec![]), &cfg),
            Err(BehaviorError::InvalidSignature(_))
        ));
    }

    #[test]
    fn window_count_and_cv_helpers() {
        assert_eq!(peak_window_count(&[0, 1, 2, 10, 11], 10), 3);
        assert_eq!(peak_window_count(&[], 10), 0);
        assert_eq!(min_gap_cv(&[0, 10, 20, 30], 4), Some(0.0));
        assert_eq!(min_gap_cv(&[0, 10], 4), None);
        // gaps 1 and 3: mean 2, sd 1
        assert!((min_gap_cv(&[0, 1, 4], 3).unwrap() - 0.5).abs() < 1e-12);
    }

    /// Each customer sees hits; the click probability of the o-th click is `p(o)`.
    fn ordinal_log(customers: usize, hits_per: usize, p: impl Fn(usize) -> f64, seed: u64) -> EventLog {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut events = Vec::new();
        for c in 0..customers {
            let cust = format!("c{c}");
            let mut clicks = 0;
            for h in 0..hits_per {
                let t = h as i64 * 600 * SEC;
                let product = format!("p{h}");
                events.push(hit(&format!("{cust}h{h}"), t, &cust, &[&product]));
                if rng.gen::<f64>() < p(clicks + 1) {
                    clicks += 1;
                    events.push(action(
                        &format!("{cust}k{h}"),
                        EventType::Click,
                        t + SEC,
                        &cust,
                        &product,
                    ));
                }
            }
        }
        log(events)
    }

    #[test]
    fn homogeneous_ctr_has_no_cutoff() {
        let l = ordinal_log(400, 150, |_| 0.08, 1);
        let cut = new_customer_cutoff(&l, &NewCustomerConfig::default()).unwrap();
        assert_eq!(cut.x, 0, "{:?}", cut.table);
        assert!(cut.excluded_event_ids.is_empty());
    }

    #[test]
    fn ramp_over_three_clicks_gives_three() {
        let l = ordinal_log(400, 150, |o| if o <= 3 { 0.03 } else { 0.08 }, 2);
        let cut = new_customer_cutoff(&l, &NewCustomerConfig::default()).unwrap();
        assert_eq!(cut.x, 3, "{:?}", cut.table);
        let (marked, report) = apply_flags(&l, &[], Some(&cut));
        assert_eq!(marked.len(), l.len());
        let clicks = marked
            .events()
            .iter()
            .filter(|e| e.event_type == EventType::Click && e.excluded_from_metrics)
            .count();
        assert_eq!(
            report.rule("newcust").unwrap().details["clicks_excluded_from_ctr"],
            clicks
        );
        let expected: usize = l
            .by_customer()
            .values()
            .map(|ev| ev.iter().filter(|e| e.event_type == EventType::Click).count().min(3))
            .sum();
        assert_eq!(clicks, expected);
    }

    #[test]
    fn first_click_dip_gives_one() {
        let l = ordinal_log(400, 150, |o| if o == 1 { 0.045 } else { 0.075 }, 3);
        assert_eq!(new_customer_cutoff(&l, &NewCustomerConfig::default()).unwrap().x, 1);
    }

    #[test]
    fn too_few_heavy_clickers() {
        let l = ordinal_log(10, 20, |_| 0.1, 4);
        assert!(matches!(
            new_customer_cutoff(&l, &NewCustomerConfig::default()),
            Err(BehaviorError::InsufficientData { .. })
        ));
    }

    #[test]
    fn removals_are_attributed_once() {
        let mut events = clicks_at("bot", &(0..15).map(|i| i * 100).collect::<Vec<_>>());
        let mut b = buys("bot", 0, 30);
        b.iter_mut().for_each(|e| e.event_id.push('b'));
        events.extend(b);
        for c in 0..10 {
            events.extend(buys(&format!("c{c}"), 0, 1));
        }
        let l = log(events);
        let bots = detect_bots(&l, &BotConfig::default()).unwrap();
        let b2b = detect_b2b(&l, &B2BConfig::default()).unwrap();
        assert!(bots.contains("bot") && b2b.contains("bot"));
        let (out, report) = apply_flags(&l, &[bots, b2b], None);
        assert_eq!(out.len(), 10);
        assert_eq!(report.rule("bots").unwrap().records_removed, 45);
        assert_eq!(report.rule("b2b").unwrap().records_removed, 0);
        assert_eq!(report.records_removed(), l.len() - out.len());
    }

    #[test]
    fn no_flags_leave_log_unchanged() {
        let l = log(buys("c", 0, 3));
        let (out, report) = apply_flags(&l, &[], None);
        assert_eq!(out, l);
        assert_eq!(report.records_removed(), 0);
    }
}
