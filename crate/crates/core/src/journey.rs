//! Click -> add-to-cart -> buy integrity audit, and combo (bundle) purchases.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{session_ids, CleaningReport, Event, EventLog, EventType, Money, RuleOutcome};

#[derive(Debug, Error, PartialEq)]
pub enum JourneyError {
    #[error("violation rate {rate:.4} reached the integration alarm at {alarm}; fix the data feed first")]
    AlarmRefusal { rate: f64, alarm: f64 },
    #[error("log contains no hits")]
    NoHits,
    #[error("SKU {sku} belongs to both {first} and {second}")]
    ConflictingCombo { sku: String, first: String, second: String },
    #[error("unreadable combo map: {0}")]
    UnreadableComboMap(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JourneyPolicy {
    /// The site lets visitors add to cart or buy without opening the product.
    pub quick_buy_enabled: bool,
    pub violation_rate_alarm: f64,
}

impl Default for JourneyPolicy {
    fn default() -> Self {
        JourneyPolicy {
            quick_buy_enabled: false,
            violation_rate_alarm: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MissingStage {
    /// An ATC with no click before it.
    Click,
    /// A BUY with neither a click nor an ATC before it.
    ClickOrAtc,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub cust_id: String,
    pub product_id: String,
    pub missing_stage: MissingStage,
    /// First offending event.
    pub event_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JourneyVerdict {
    Clean,
    RemoveViolators,
    IntegrationAlarm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JourneyReport {
    pub policy: JourneyPolicy,
    /// (customer, product) pairs with at least one ATC or BUY.
    pub pairs_audited: usize,
    pub violations: Vec<Violation>,
    pub violation_rate: f64,
    pub verdict: JourneyVerdict,
    /// Violating pairs per user agent of the offending event, for drill-down.
    pub violations_by_user_agent: BTreeMap<String, usize>,
}

/// Checks every (customer, product) pair for an ATC without an earlier click,
/// or a BUY with neither. "Earlier" looks back over the whole log and includes
/// events at the same timestamp.
pub fn audit_journeys(log: &EventLog, policy: &JourneyPolicy) -> JourneyReport {
    #[derive(Default)]
    struct Pair<'a> {
        first_click: Option<i64>,
        first_atc: Option<&'a Event>,
        atcs: Vec<&'a Event>,
        buys: Vec<&'a Event>,
    }
    let mut pairs: BTreeMap<(&str, &str), Pair> = BTreeMap::new();
    for e in log.events() {
        let (Some(c), Some(p)) = (e.customer_key(), e.product_id.as_deref()) else {
            continue;
        };
        let pair = pairs.entry((c, p)).or_default();
        match e.event_type {
            EventType::Click => {
                pair.first_click.get_or_insert(e.timestamp_utc);
            }
            EventType::Atc => {
                pair.first_atc.get_or_insert(e);
                pair.atcs.push(e);
            }
            EventType::Buy => {
                pair.buys.push(e);
            }
            EventType::Hit => {}
        }
    }

    let mut audited = 0;
    let mut violations = Vec::new();
    let mut by_agent: BTreeMap<String, usize> = BTreeMap::new();
    for ((c, p), pair) in &pairs {
        if pair.atcs.is_empty() && pair.buys.is_empty() {
            continue;
        }
        audited += 1;
        if policy.quick_buy_enabled {
            continue;
        }
        let click = pair.first_click.unwrap_or(i64::MAX);
        let atc_or_click = click.min(pair.first_atc.map_or(i64::MAX, |e| e.timestamp_utc));
        let bad_atc = pair.atcs.iter().find(|e| e.timestamp_utc < click);
        let bad_buy = pair.buys.iter().find(|e| e.timestamp_utc < atc_or_click);
        let found = match (bad_atc, bad_buy) {
            (Some(a), Some(b)) if b.timestamp_utc < a.timestamp_utc => Some((b, MissingStage::ClickOrAtc)),
            (Some(a), _) => Some((a, MissingStage::Click)),
            (None, Some(b)) => Some((b, MissingStage::ClickOrAtc)),
            (None, None) => None,
        };
        if let Some((e, stage)) = found {
            *by_agent
                .entry(e.user_agent.clone().unwrap_or_else(|| "(none)".into()))
                .or_default() += 1;
            violations.push(Violation {
                cust_id: c.to_string(),
                product_id: p.to_string(),
                missing_stage: stage,
                event_id: e.event_id.clone(),
            });
        }
    }
    let violation_rate = if audited == 0 {
        0.0
    } else {
        violations.len() as f64 / audited as f64
    };
    let verdict = if violations.is_empty() {
        JourneyVerdict::Clean
    } else if violation_rate >= policy.violation_rate_alarm {
        JourneyVerdict::IntegrationAlarm
    } else {
        JourneyVerdict::RemoveViolators
    };
    JourneyReport {
        policy: *policy,
        pairs_audited: audited,
        violations,
        violation_rate,
        verdict,
        violations_by_user_agent: by_agent,
    }
}

/// Removes every event of each violating (customer, product) pair. Refuses
/// when the audit raised the integration alarm.
pub fn remove_violators(log: &EventLog, report: &JourneyReport) -> Result<(EventLog, CleaningReport), JourneyError> {
    if report.verdict == JourneyVerdict::IntegrationAlarm {
        return Err(JourneyError::AlarmRefusal {
            rate: report.violation_rate,
            alarm: report.policy.violation_rate_alarm,
        });
    }
    let bad: BTreeSet<(&str, &str)> = report
        .violations
        .iter()
        .map(|v| (v.cust_id.as_str(), v.product_id.as_str()))
        .collect();
    let mut removed = 0;
    let out = log.retain(|e| match (e.customer_key(), e.product_id.as_deref()) {
        (Some(c), Some(p)) if bad.contains(&(c, p)) => {
            removed += 1;
            false
        }
        _ => true,
    });
    let customers: BTreeSet<&str> = bad.iter().map(|(c, _)| *c).collect();
    let mut cleaning = CleaningReport::default();
    cleaning.push(
        RuleOutcome {
            records_removed: removed,
            customers_flagged: customers.len(),
            ..RuleOutcome::new("journey")
        }
        .param("quick_buy_enabled", report.policy.quick_buy_enabled)
        .detail("violating_pairs", bad.len())
        .detail("violation_rate", report.violation_rate),
    );
    Ok((out, cleaning))
}

/// Individual SKU -> combo id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComboMap {
    pub skus: BTreeMap<String, String>,
}

impl ComboMap {
    pub fn new(pairs: impl IntoIterator<Item = (String, String)>) -> Result<Self, JourneyError> {
        let mut skus: BTreeMap<String, String> = BTreeMap::new();
        for (sku, combo) in pairs {
            if let Some(first) = skus.get(&sku) {
                if *first != combo {
                    return Err(JourneyError::ConflictingCombo {
                        sku,
                        first: first.clone(),
                        second: combo,
                    });
                }
            }
            skus.insert(sku, combo);
        }
        Ok(ComboMap { skus })
    }

    /// Reads a CSV with a `sku,combo_id` header.
    pub fn from_csv<R: Read>(input: R) -> Result<Self, JourneyError> {
        #[derive(Deserialize)]
        struct Row {
            sku: String,
            combo_id: String,
        }
        let mut rows = Vec::new();
        for r in csv::Reader::from_reader(input).deserialize::<Row>() {
            let r = r.map_err(|e| JourneyError::UnreadableComboMap(e.to_string()))?;
            rows.push((r.sku.trim().to_string(), r.combo_id.trim().to_string()));
        }
        ComboMap::new(rows)
    }

    pub fn combo_of(&self, sku: &str) -> Option<&str> {
        self.skus.get(sku).map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.skus.is_empty()
    }
}

/// Rewrites combo-member BUYs to the combo id and collapses them to one BUY
/// per (customer, session, combo). The kept BUY is the earliest, with
/// quantity 1 and the summed line totals as its price when every line is
/// priced in one currency.
pub fn expand_combos(log: &EventLog, combos: &ComboMap, session_gap_ms: i64) -> EventLog {
    if combos.is_empty() {
        return log.clone();
    }
    let mut keep: HashMap<&str, Event> = HashMap::new();
    let mut drop: BTreeSet<&str> = BTreeSet::new();
    for events in log.by_customer().into_values() {
        let times: Vec<i64> = events.iter().map(|e| e.timestamp_utc).collect();
        let sessions = session_ids(&times, session_gap_ms);
        let mut groups: BTreeMap<(usize, &str), Vec<&Event>> = BTreeMap::new();
        for (e, s) in events.iter().zip(sessions) {
            if e.event_type != EventType::Buy {
                continue;
            }
            if let Some(combo) = e.product_id.as_deref().and_then(|p| combos.combo_of(p)) {
                groups.entry((s, combo)).or_default().push(e);
            }
        }
        for ((_, combo), members) in groups {
            let first = members[0];
            let mut merged = first.clone();
            merged.product_id = Some(combo.to_string());
            merged.quantity = 1;
            merged.unit_price = combined_price(&members);
            keep.insert(first.event_id.as_str(), merged);
            drop.extend(members[1..].iter().map(|e| e.event_id.as_str()));
        }
    }
    let events = log
        .events()
        .iter()
        .filter(|e| !drop.contains(e.event_id.as_str()))
        .map(|e| keep.get(e.event_id.as_str()).cloned().unwrap_or_else(|| e.clone()))
        .collect();
    EventLog::from_subset(events, log.metadata().clone())
}

fn combined_price(members: &[&Event]) -> Option<Money> {
    let currency = members.first()?.unit_price.as_ref()?.currency.clone();
    let mut amount = 0.0;
    for e in members {
        let p = e.unit_price.as_ref()?;
        if p.currency != currency {
            return None;
        }
        amount += e.quantity as f64 * p.amount;
    }
    Some(Money { amount, currency })
}

/// Distinct customers with at least one BUY and one HIT, over the number of hits.
pub fn btr_buyer(log: &EventLog) -> Result<f64, JourneyError> {
    let mut hits = 0usize;
    let mut seen: BTreeMap<&str, (bool, bool)> = BTreeMap::new();
    for e in log.events() {
        if e.event_type == EventType::Hit {
            hits += 1;
        }
        if let Some(c) = e.customer_key() {
            let s = seen.entry(c).or_default();
            s.0 |= e.event_type == EventType::Hit;
            s.1 |= e.event_type == EventType::Buy;
        }
    }
    if hits == 0 {
        return Err(JourneyError::NoHits);
    }
    let buyers = seen.values().filter(|(h, b)| *h && *b).count();
    Ok(buyers as f64 / hits as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::*;

    const MIN: i64 = 60_000;

    fn ev(id: &str, kind: EventType, t: i64, cust: &str, p: &str) -> Event {
        action(id, kind, t, cust, p)
    }

    #[test]
    fn ideal_journey_is_clean() {
        let l = log(vec![
            ev("k", EventType::Click, 0, "c", "p"),
            ev("a", EventType::Atc, MIN, "c", "p"),
            ev("b", EventType::Buy, 2 * MIN, "c", "p"),
        ]);
        let r = audit_journeys(&l, &JourneyPolicy::default());
        assert_eq!(r.verdict, JourneyVerdict::Clean);
        assert_eq!(r.pairs_audited, 1);
    }

    #[test]
    fn bare_buy_violates_unless_quick_buy() {
        let l = log(vec![ev("b", EventType::Buy, 0, "c", "p")]);
        let r = audit_journeys(&l, &JourneyPolicy::default());
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.violations[0].missing_stage, MissingStage::ClickOrAtc);
        let quick = JourneyPolicy {
            quick_buy_enabled: true,
            ..Default::default()
        };
        assert!(audit_journeys(&l, &quick).violations.is_empty());
    }

    #[test]
    fn atc_before_click_violates_and_buy_after_atc_does_not() {
        let l = log(vec![
            ev("a", EventType::Atc, 0, "c", "p"),
            ev("k", EventType::Click, MIN, "c", "p"),
            ev("b", EventType::Buy, 2 * MIN, "c", "q"),
            ev("a2", EventType::Atc, 0, "c", "q"),
        ]);
        let r = audit_journeys(&l, &JourneyPolicy::default());
        assert_eq!(r.violations.len(), 2);
        let by_product: BTreeMap<&str, MissingStage> = r
            .violations
            .iter()
            .map(|v| (v.product_id.as_str(), v.missing_stage))
            .collect();
        assert_eq!(by_product["p"], MissingStage::Click);
        assert_eq!(by_product["q"], MissingStage::Click);
    }

    fn clean_pairs(n: usize) -> Vec<Event> {
        (0..n)
            .flat_map(|i| {
                let c = format!("c{i}");
                [
                    ev(&format!("k{i}"), EventType::Click, 0, &c, "p"),
                    ev(&format!("b{i}"), EventType::Buy, MIN, &c, "p"),
                ]
            })
            .collect()
    }

    #[test]
    fn single_violator_is_removed() {
        let mut events = clean_pairs(999);
        events.push(ev("bad", EventType::Buy, 0, "x", "p"));
        events.push(ev("bad-click", EventType::Click, MIN, "x", "p"));
        events.push(ev("fine", EventType::Click, 0, "x", "other"));
        let l = log(events);
        let r = audit_journeys(&l, &JourneyPolicy::default());
        assert_eq!(r.verdict, JourneyVerdict::RemoveViolators);
        assert!((r.violation_rate - 0.001).abs() < 1e-12);
        let (out, report) = remove_violators(&l, &r).unwrap();
        assert_eq!(out.len(), l.len() - 2);
        assert_eq!(report.rule("journey").unwrap().records_removed, 2);
    }

    #[test]
    fn alarm_refuses_removal() {
        let mut events = clean_pairs(8);
        events.push(ev("xb", EventType::Buy, 0, "x", "p"));
        events.push(ev("yb", EventType::Buy, 0, "y", "p"));
        let l = log(events);
        let r = audit_journeys(&l, &JourneyPolicy::default());
        assert!((r.violation_rate - 0.2).abs() < 1e-12);
        assert_eq!(r.verdict, JourneyVerdict::IntegrationAlarm);
        assert!(matches!(
            remove_violators(&l, &r),
            Err(JourneyError::AlarmRefusal { .. })
        ));
        assert_eq!(r.violations_by_user_agent["(none)"], 2);
    }

    #[test]
    fn clean_report_leaves_log_unchanged() {
        let l = log(clean_pairs(3));
        let r = audit_journeys(&l, &JourneyPolicy::default());
        let (out, _) = remove_violators(&l, &r).unwrap();
        assert_eq!(out, l);
    }

    fn combos() -> ComboMap {
        ComboMap::from_csv(&b"sku,combo_id\na,K\nb,K\nc,K\n"[..]).unwrap()
    }

    fn priced(mut e: Event, amount: f64) -> Event {
        e.unit_price = Some(Money {
            amount,
            currency: "USD".into(),
        });
        e
    }

    #[test]
    fn combo_members_collapse_per_session() {
        let l = log(vec![
            priced(ev("1", EventType::Buy, 0, "c", "a"), 10.0),
            priced(ev("2", EventType::Buy, 10, "c", "b"), 5.0),
            priced(ev("3", EventType::Buy, 20, "c", "c"), 2.5),
            priced(ev("4", EventType::Buy, 20, "c", "z"), 1.0),
        ]);
        let out = expand_combos(&l, &combos(), 30 * MIN);
        assert_eq!(out.len(), 2);
        let k = out
            .events()
            .iter()
            .find(|e| e.product_id.as_deref() == Some("K"))
            .unwrap();
        assert_eq!(k.event_id, "1");
        assert_eq!(k.quantity, 1);
        assert_eq!(k.unit_price.as_ref().unwrap().amount, 17.5);
        assert!(out.events().iter().any(|e| e.product_id.as_deref() == Some("z")));
    }

    #[test]
    fn combo_in_two_sessions_stays_two_buys() {
        let l = log(vec![
            ev("1", EventType::Buy, 0, "c", "a"),
            ev("2", EventType::Buy, 0, "c", "b"),
            ev("3", EventType::Buy, 5 * 60 * MIN, "c", "a"),
        ]);
        let out = expand_combos(&l, &combos(), 30 * MIN);
        assert_eq!(out.len(), 2);
        assert!(out.events().iter().all(|e| e.product_id.as_deref() == Some("K")));
        assert!(out.events().iter().all(|e| e.unit_price.is_none()));
    }

    #[test]
    fn conflicting_combo_map_is_rejected() {
        let bad = ComboMap::from_csv(&b"sku,combo_id\na,K\na,L\n"[..]);
        assert!(matches!(bad, Err(JourneyError::ConflictingCombo { .. })));
        assert!(ComboMap::from_csv(&b"wrong,header\na,K\n"[..]).is_err());
    }

    #[test]
    fn btr_buyer_formula() {
        let mut events: Vec<Event> = (0..10)
            .map(|i| hit(&format!("h{i}"), 0, &format!("c{i}"), &["p"]))
            .collect();
        events.push(ev("b0", EventType::Buy, 1, "c0", "p"));
        events.push(ev("b0x", EventType::Buy, 2, "c0", "q"));
        events.push(ev("b1", EventType::Buy, 1, "c1", "p"));
        events.push(ev("bn", EventType::Buy, 1, "nohits", "p"));
        assert_eq!(btr_buyer(&log(events)), Ok(0.2));
        assert_eq!(btr_buyer(&log(vec![hit("h", 0, "c", &["p"])])), Ok(0.0));
        assert_eq!(btr_buyer(&log(vec![])), Err(JourneyError::NoHits));
    }
}
