//! Time-window attribution of interactions to recommendation hits, and the
//! CTR / ATC-TR / BTR / revenue figures built on it.
//!
//! An interaction of product `p` by customer `c` at time `t` belongs to the most
//! recent hit shown to `c` that contained `p` and satisfies
//! `t_hit <= t <= t_hit + window`. Rates count distinct hits with at least one
//! attributed interaction, divided by eligible hits.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Event, EventLog, EventType, PageType, Segment};
use crate::par::{self, Execution};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("attributed buy {0} has no price")]
    MissingPrice(String),
    #[error("attributed buy {event_id} is priced in {currency}, not the base currency")]
    UnnormalizedCurrency { event_id: String, currency: String },
    #[error("need at least 2 page/widget groups with a CTR, got {0}")]
    TooFewCells(usize),
    #[error("invalid attribution windows: click <= atc <= buy must hold")]
    InvalidWindows,
}

/// Maximum lag between a hit and an interaction it induced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttributionWindows {
    pub click_ms: i64,
    pub atc_ms: i64,
    pub buy_ms: i64,
}

impl Default for AttributionWindows {
    fn default() -> Self {
        AttributionWindows {
            click_ms: 5 * 60 * 1000,
            atc_ms: 30 * 60 * 1000,
            buy_ms: 24 * 60 * 60 * 1000,
        }
    }
}

impl AttributionWindows {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if 0 <= self.click_ms && self.click_ms <= self.atc_ms && self.atc_ms <= self.buy_ms {
            Ok(())
        } else {
            Err(MetricsError::InvalidWindows)
        }
    }

    pub fn for_type(&self, kind: EventType) -> Option<i64> {
        match kind {
            EventType::Hit => None,
            EventType::Click => Some(self.click_ms),
            EventType::Atc => Some(self.atc_ms),
            EventType::Buy => Some(self.buy_ms),
        }
    }
}

/// Restricts PLP hits to the first page and the top slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlpGate {
    pub enabled: bool,
    pub top_n: u32,
    pub first_page_only: bool,
}

impl Default for PlpGate {
    fn default() -> Self {
        PlpGate {
            enabled: true,
            top_n: 8,
            first_page_only: true,
        }
    }
}

impl PlpGate {
    /// Whether the hit counts in the denominator. A PLP hit without a page
    /// number is taken to be on the first page.
    pub fn hit_eligible(&self, hit: &Event) -> bool {
        !self.enabled || hit.page_type != PageType::Plp || !self.first_page_only || hit.page_number.unwrap_or(1) == 1
    }

    /// Whether an interaction with the product in `slot` may be credited to the hit.
    pub fn slot_eligible(&self, hit: &Event, slot: u32) -> bool {
        self.hit_eligible(hit) && (!self.enabled || hit.page_type != PageType::Plp || slot < self.top_n)
    }
}

/// Breakdown dimensions of a metrics cell.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub day: i64,
    pub page_type: PageType,
    pub widget_id: String,
    pub segment: Option<Segment>,
}

impl CellKey {
    fn of(hit: &Event) -> Self {
        CellKey {
            day: hit.day(),
            page_type: hit.page_type,
            widget_id: hit.widget_id.clone().unwrap_or_default(),
            segment: hit.segment_flag,
        }
    }
}

/// Additive counters of one cell.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CellCounts {
    /// Eligible hits.
    pub hits: u64,
    /// Eligible hits not excluded from CTR.
    pub ctr_hits: u64,
    /// CTR hits with at least one attributed click.
    pub clicked_hits: u64,
    pub atc_hits: u64,
    pub buy_hits: u64,
    pub clicks: u64,
    pub atcs: u64,
    pub buys: u64,
    /// Sum of quantity x unit price over attributed, priced buys.
    pub revenue: f64,
}

impl std::ops::AddAssign for CellCounts {
    fn add_assign(&mut self, o: CellCounts) {
        self.hits += o.hits;
        self.ctr_hits += o.ctr_hits;
        self.clicked_hits += o.clicked_hits;
        self.atc_hits += o.atc_hits;
        self.buy_hits += o.buy_hits;
        self.clicks += o.clicks;
        self.atcs += o.atcs;
        self.buys += o.buys;
        self.revenue += o.revenue;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    #[serde(flatten)]
    pub key: CellKey,
    #[serde(flatten)]
    pub counts: CellCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributedPair {
    pub interaction_id: String,
    pub hit_id: String,
    pub event_type: EventType,
    pub lag_ms: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    /// No eligible hit with the product inside the window.
    NoMatchingHit,
    /// Click marked by the new-customer rule.
    ExcludedFromMetrics,
    NoCustomer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionSet {
    pub windows: AttributionWindows,
    pub gate: PlpGate,
    pub pairs: Vec<AttributedPair>,
    pub cells: Vec<Cell>,
    pub excluded: BTreeMap<ExclusionReason, u64>,
}

impl AttributionSet {
    pub fn totals(&self) -> CellCounts {
        let mut t = CellCounts::default();
        for c in &self.cells {
            t += c.counts;
        }
        t
    }
}

#[derive(Default)]
struct Partial {
    pairs: Vec<AttributedPair>,
    cells: BTreeMap<CellKey, CellCounts>,
    excluded: BTreeMap<ExclusionReason, u64>,
}

pub fn attribute(log: &EventLog, windows: &AttributionWindows, gate: &PlpGate) -> AttributionSet {
    attribute_with(log, windows, gate, Execution::default())
}

pub fn attribute_with(log: &EventLog, windows: &AttributionWindows, gate: &PlpGate, exec: Execution) -> AttributionSet {
    let groups: Vec<Vec<&Event>> = log.by_customer().into_values().collect();
    let partials = par::map_slice(exec, &groups, |events| attribute_customer(events, windows, gate));

    let mut cells: BTreeMap<CellKey, CellCounts> = BTreeMap::new();
    let mut excluded: BTreeMap<ExclusionReason, u64> = BTreeMap::new();
    let mut pairs = Vec::new();
    for p in partials {
        pairs.extend(p.pairs);
        for (k, c) in p.cells {
            *cells.entry(k).or_default() += c;
        }
        for (r, n) in p.excluded {
            *excluded.entry(r).or_default() += n;
        }
    }
    let anonymous = log
        .events()
        .iter()
        .filter(|e| e.event_type.is_interaction() && e.customer_key().is_none())
        .count() as u64;
    if anonymous > 0 {
        *excluded.entry(ExclusionReason::NoCustomer).or_default() += anonymous;
    }
    AttributionSet {
        windows: *windows,
        gate: *gate,
        pairs,
        cells: cells.into_iter().map(|(key, counts)| Cell { key, counts }).collect(),
        excluded,
    }
}

#[derive(Default, Clone, Copy)]
struct HitState {
    clicked: bool,
    atc: bool,
    buy: bool,
}

fn attribute_customer(events: &[&Event], windows: &AttributionWindows, gate: &PlpGate) -> Partial {
    let hits: Vec<&Event> = events
        .iter()
        .copied()
        .filter(|e| e.event_type == EventType::Hit)
        .collect();
    // product -> eligible hits showing it, in log order
    let mut shown: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, h) in hits.iter().enumerate() {
        for r in &h.recommended_products {
            if gate.slot_eligible(h, r.slot_index) {
                shown.entry(r.product_id.as_str()).or_default().push(i);
            }
        }
    }

    let mut out = Partial::default();
    let mut state = vec![HitState::default(); hits.len()];
    for h in &hits {
        if gate.hit_eligible(h) {
            let c = out.cells.entry(CellKey::of(h)).or_default();
            c.hits += 1;
            if !h.excluded_from_metrics {
                c.ctr_hits += 1;
            }
        }
    }

    for e in events.iter().filter(|e| e.event_type.is_interaction()) {
        if e.event_type == EventType::Click && e.excluded_from_metrics {
            *out.excluded.entry(ExclusionReason::ExcludedFromMetrics).or_default() += 1;
            continue;
        }
        let window = windows.for_type(e.event_type).expect("interaction has a window");
        let matched = e
            .product_id
            .as_deref()
            .and_then(|p| shown.get(p))
            .and_then(|list| {
                // hits at the same timestamp as the interaction still qualify
                let n = list.partition_point(|&i| hits[i].timestamp_utc <= e.timestamp_utc);
                n.checked_sub(1).map(|j| list[j])
            })
            .filter(|&i| e.timestamp_utc - hits[i].timestamp_utc <= window);
        let Some(i) = matched else {
            *out.excluded.entry(ExclusionReason::NoMatchingHit).or_default() += 1;
            continue;
        };
        let h = hits[i];
        let c = out.cells.entry(CellKey::of(h)).or_default();
        let s = &mut state[i];
        match e.event_type {
            EventType::Click => {
                c.clicks += 1;
                if !h.excluded_from_metrics && !s.clicked {
                    s.clicked = true;
                    c.clicked_hits += 1;
                }
            }
            EventType::Atc => {
                c.atcs += 1;
                if !s.atc {
                    s.atc = true;
                    c.atc_hits += 1;
                }
            }
            EventType::Buy => {
                c.buys += 1;
                if let Some(price) = &e.unit_price {
                    c.revenue += e.quantity as f64 * price.amount;
                }
                if !s.buy {
                    s.buy = true;
                    c.buy_hits += 1;
                }
            }
            EventType::Hit => unreachable!(),
        }
        out.pairs.push(AttributedPair {
            interaction_id: e.event_id.clone(),
            hit_id: h.event_id.clone(),
            event_type: e.event_type,
            lag_ms: e.timestamp_utc - h.timestamp_utc,
        });
    }
    out
}

/// Counters of a cell or total with the derived rates. A rate is absent when
/// its denominator is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    #[serde(flatten)]
    pub counts: CellCounts,
    pub ctr: Option<f64>,
    pub atc_tr: Option<f64>,
    pub btr: Option<f64>,
}

impl RateRow {
    pub fn from_counts(counts: CellCounts) -> Self {
        let ratio = |n: u64, d: u64| (d > 0).then(|| n as f64 / d as f64);
        RateRow {
            ctr: ratio(counts.clicked_hits, counts.ctr_hits),
            atc_tr: ratio(counts.atc_hits, counts.hits),
            btr: ratio(counts.buy_hits, counts.hits),
            counts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRates {
    #[serde(flatten)]
    pub key: CellKey,
    #[serde(flatten)]
    pub rates: RateRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowVisibilityFlag {
    pub page_type: PageType,
    pub widget_id: String,
    pub ctr: f64,
    pub site_median_ctr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub windows: AttributionWindows,
    pub gate: PlpGate,
    pub totals: RateRow,
    pub cells: Vec<CellRates>,
    pub excluded: BTreeMap<ExclusionReason, u64>,
    #[serde(default)]
    pub low_visibility: Vec<LowVisibilityFlag>,
}

impl MetricsReport {
    /// Pooled CTR per day for one segment (`None` pools every cell).
    pub fn daily_ctr(&self, segment: Option<Segment>) -> BTreeMap<i64, Option<f64>> {
        let mut days: BTreeMap<i64, CellCounts> = BTreeMap::new();
        for c in &self.cells {
            let entry = days.entry(c.key.day).or_default();
            if segment.is_none() || c.key.segment == segment {
                *entry += c.rates.counts;
            }
        }
        days.into_iter()
            .map(|(d, c)| (d, RateRow::from_counts(c).ctr))
            .collect()
    }

    /// One CSV row per breakdown cell.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "day",
            "page_type",
            "widget_id",
            "segment",
            "hits",
            "ctr_hits",
            "clicked_hits",
            "atc_hits",
            "buy_hits",
            "clicks",
            "atcs",
            "buys",
            "revenue",
            "ctr",
            "atc_tr",
            "btr",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for c in &self.cells {
            let n = &c.rates.counts;
            w.write_record([
                c.key.day.to_string(),
                format!("{:?}", c.key.page_type).to_uppercase(),
                c.key.widget_id.clone(),
                c.key.segment.map(|s| format!("{s:?}")).unwrap_or_default(),
                n.hits.to_string(),
                n.ctr_hits.to_string(),
                n.clicked_hits.to_string(),
                n.atc_hits.to_string(),
                n.buy_hits.to_string(),
                n.clicks.to_string(),
                n.atcs.to_string(),
                n.buys.to_string(),
                n.revenue.to_string(),
                opt(c.rates.ctr),
                opt(c.rates.atc_tr),
                opt(c.rates.btr),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn rates(attr: &AttributionSet) -> MetricsReport {
    MetricsReport {
        windows: attr.windows,
        gate: attr.gate,
        totals: RateRow::from_counts(attr.totals()),
        cells: attr
            .cells
            .iter()
            .map(|c| CellRates {
                key: c.key.clone(),
                rates: RateRow::from_counts(c.counts),
            })
            .collect(),
        excluded: attr.excluded.clone(),
        low_visibility: Vec::new(),
    }
}

/// Revenue of attributed buys. Every attributed buy must be priced in the
/// log's base currency (or, without one, all in a single currency).
pub fn conversion_revenue(attr: &AttributionSet, log: &EventLog) -> Result<f64, MetricsError> {
    let by_id: HashMap<&str, &Event> = log.events().iter().map(|e| (e.event_id.as_str(), e)).collect();
    let mut currency: Option<String> = log.metadata().base_currency.clone();
    let mut total = 0.0;
    for p in attr.pairs.iter().filter(|p| p.event_type == EventType::Buy) {
        let e = by_id
            .get(p.interaction_id.as_str())
            .ok_or_else(|| MetricsError::MissingPrice(p.interaction_id.clone()))?;
        let price = e
            .unit_price
            .as_ref()
            .ok_or_else(|| MetricsError::MissingPrice(e.event_id.clone()))?;
        match &currency {
            Some(c) if *c != price.currency => {
                return Err(MetricsError::UnnormalizedCurrency {
                    event_id: e.event_id.clone(),
                    currency: price.currency.clone(),
                })
            }
            Some(_) => {}
            None => currency = Some(price.currency.clone()),
        }
        total += e.quantity as f64 * price.amount;
    }
    Ok(total)
}

/// Page/widget groups whose CTR is below `fraction` of the median group CTR.
pub fn flag_low_visibility(report: &MetricsReport, fraction: f64) -> Result<Vec<LowVisibilityFlag>, MetricsError> {
    let mut groups: BTreeMap<(PageType, &str), CellCounts> = BTreeMap::new();
    for c in &report.cells {
        *groups.entry((c.key.page_type, c.key.widget_id.as_str())).or_default() += c.rates.counts;
    }
    let ctrs: Vec<((PageType, &str), f64)> = groups
        .into_iter()
        .filter_map(|(k, c)| RateRow::from_counts(c).ctr.map(|r| (k, r)))
        .collect();
    if ctrs.len() < 2 {
        return Err(MetricsError::TooFewCells(ctrs.len()));
    }
    let values: Vec<f64> = ctrs.iter().map(|(_, r)| *r).collect();
    let median = crate::outliers::median(&values).expect("non-empty");
    Ok(ctrs
        .into_iter()
        .filter(|(_, r)| *r < fraction * median)
        .map(|((page_type, widget), ctr)| LowVisibilityFlag {
            page_type,
            widget_id: widget.to_string(),
            ctr,
            site_median_ctr: median,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::*;
    use crate::model::{LogMetadata, Money};

    const SEC: i64 = 1000;

    fn click(id: &str, t: i64, p: &str) -> Event {
        action(id, EventType::Click, t, "c", p)
    }

    #[test]
    fn click_window_is_inclusive() {
        let l = log(vec![
            hit("h1", 0, "c", &["a", "b"]),
            click("k1", 300 * SEC, "a"),
            hit("h2", 1_000 * SEC, "c", &["a"]),
            click("k2", 1_301 * SEC, "a"),
        ]);
        let attr = attribute(&l, &Default::default(), &Default::default());
        assert_eq!(attr.pairs.len(), 1);
        assert_eq!(attr.pairs[0].hit_id, "h1");
        assert_eq!(attr.pairs[0].lag_ms, 300 * SEC);
        assert_eq!(attr.excluded[&ExclusionReason::NoMatchingHit], 1);
    }

    #[test]
    fn buy_within_a_day_is_attributed() {
        let l = log(vec![
            hit("h", 0, "c", &["a"]),
            action("b", EventType::Buy, 23 * 3600 * SEC, "c", "a"),
        ]);
        let report = rates(&attribute(&l, &Default::default(), &Default::default()));
        assert_eq!(report.totals.btr, Some(1.0));
        assert_eq!(report.totals.ctr, Some(0.0));
    }

    #[test]
    fn most_recent_hit_wins() {
        let l = log(vec![
            hit("h1", 0, "c", &["a"]),
            hit("h2", 10 * SEC, "c", &["a"]),
            click("k", 20 * SEC, "a"),
        ]);
        let attr = attribute(&l, &Default::default(), &Default::default());
        assert_eq!(attr.pairs[0].hit_id, "h2");
    }

    #[test]
    fn plp_gate_removes_low_slots_and_later_pages() {
        let mut deep = hit(
            "h1",
            0,
            "c",
            &["p0", "p1", "p2", "p3", "p4", "p5", "p6", "p7", "p8", "p9"],
        );
        deep.page_type = PageType::Plp;
        let mut page2 = hit("h2", 0, "c", &["q"]);
        page2.page_type = PageType::Plp;
        page2.page_number = Some(2);
        let l = log(vec![
            deep,
            page2,
            click("k1", SEC, "p9"),
            click("k2", SEC, "q"),
            click("k3", SEC, "p3"),
        ]);
        let attr = attribute(&l, &Default::default(), &Default::default());
        let t = attr.totals();
        assert_eq!(t.hits, 1);
        assert_eq!(t.clicks, 1);
        let ungated = attribute(
            &l,
            &Default::default(),
            &PlpGate {
                enabled: false,
                ..Default::default()
            },
        );
        assert_eq!(ungated.totals().hits, 2);
        assert_eq!(ungated.totals().clicks, 3);
    }

    #[test]
    fn unseen_product_is_unattributed() {
        let l = log(vec![hit("h", 0, "c", &["a"]), click("k", SEC, "z")]);
        let attr = attribute(&l, &Default::default(), &Default::default());
        assert!(attr.pairs.is_empty());
    }

    #[test]
    fn excluded_clicks_and_hits_leave_ctr_only() {
        let mut h1 = hit("h1", 0, "c", &["a"]);
        h1.excluded_from_metrics = true;
        let mut k1 = click("k1", SEC, "a");
        k1.excluded_from_metrics = true;
        let l = log(vec![
            h1,
            k1,
            action("t1", EventType::Atc, 2 * SEC, "c", "a"),
            hit("h2", 100 * SEC, "c", &["b"]),
            click("k2", 101 * SEC, "b"),
        ]);
        let r = rates(&attribute(&l, &Default::default(), &Default::default()));
        assert_eq!(r.totals.counts.hits, 2);
        assert_eq!(r.totals.counts.ctr_hits, 1);
        assert_eq!(r.totals.ctr, Some(1.0));
        assert_eq!(r.totals.atc_tr, Some(0.5));
    }

    #[test]
    fn ctr_of_constructed_log() {
        let mut events = Vec::new();
        for i in 0..1000 {
            let cust = format!("c{i}");
            events.push(hit(&format!("h{i}"), 0, &cust, &["a"]));
            if i < 81 {
                events.push(action(&format!("k{i}"), EventType::Click, SEC, &cust, "a"));
            }
        }
        let r = rates(&attribute(&log(events), &Default::default(), &Default::default()));
        assert!((r.totals.ctr.unwrap() - 0.081).abs() < 1e-12);
    }

    #[test]
    fn zero_hit_cells_have_no_rate() {
        assert_eq!(RateRow::from_counts(CellCounts::default()).ctr, None);
    }

    fn priced_buy(id: &str, t: i64, qty: u32, amount: f64, currency: &str) -> Event {
        Event {
            quantity: qty,
            unit_price: Some(Money {
                amount,
                currency: currency.into(),
            }),
            ..action(id, EventType::Buy, t, "c", "a")
        }
    }

    #[test]
    fn revenue_sums_quantity_times_price() {
        let l = EventLog::new(
            vec![hit("h", 0, "c", &["a"]), priced_buy("b", SEC, 2, 10.0, "USD")],
            LogMetadata {
                base_currency: Some("USD".into()),
                ..Default::default()
            },
        )
        .unwrap();
        let attr = attribute(&l, &Default::default(), &Default::default());
        assert_eq!(conversion_revenue(&attr, &l), Ok(20.0));
        assert_eq!(attr.totals().revenue, 20.0);

        let empty = log(vec![hit("h", 0, "c", &["a"])]);
        let attr = attribute(&empty, &Default::default(), &Default::default());
        assert_eq!(conversion_revenue(&attr, &empty), Ok(0.0));
    }

    #[test]
    fn mixed_currencies_are_refused() {
        let l = log(vec![
            hit("h", 0, "c", &["a", "b"]),
            priced_buy("b1", SEC, 1, 10.0, "USD"),
            Event {
                product_id: Some("b".into()),
                ..priced_buy("b2", 2 * SEC, 1, 10.0, "EUR")
            },
        ]);
        let attr = attribute(&l, &Default::default(), &Default::default());
        assert!(matches!(
            conversion_revenue(&attr, &l),
            Err(MetricsError::UnnormalizedCurrency { .. })
        ));
        let unpriced = log(vec![
            hit("h", 0, "c", &["a"]),
            action("b", EventType::Buy, SEC, "c", "a"),
        ]);
        let attr = attribute(&unpriced, &Default::default(), &Default::default());
        assert_eq!(
            conversion_revenue(&attr, &unpriced),
            Err(MetricsError::MissingPrice("b".into()))
        );
    }

    fn widget_log(ctrs: &[(&str, usize)]) -> MetricsReport {
        let mut events = Vec::new();
        for (w, clicks) in ctrs {
            for i in 0..200 {
                let cust = format!("{w}{i}");
                let mut h = hit(&format!("h{w}{i}"), 0, &cust, &["a"]);
                h.widget_id = Some(w.to_string());
                events.push(h);
                if i < *clicks {
                    events.push(action(&format!("k{w}{i}"), EventType::Click, SEC, &cust, "a"));
                }
            }
        }
        rates(&attribute(&log(events), &Default::default(), &Default::default()))
    }

    #[test]
    fn low_visibility_widget_is_flagged() {
        let r = widget_log(&[("w1", 12), ("w2", 12), ("w3", 1)]);
        let flags = flag_low_visibility(&r, 0.25).unwrap();
        assert_eq!(flags.len(), 1);
        assert_eq!(flags[0].widget_id, "w3");
        assert!((flags[0].site_median_ctr - 0.06).abs() < 1e-12);

        let uniform = widget_log(&[("w1", 12), ("w2", 12)]);
        assert!(flag_low_visibility(&uniform, 0.25).unwrap().is_empty());
        let single = widget_log(&[("w1", 12)]);
        assert_eq!(flag_low_visibility(&single, 0.25), Err(MetricsError::TooFewCells(1)));
    }

    #[test]
    fn csv_has_one_row_per_cell() {
        let r = widget_log(&[("w1", 12), ("w2", 3)]);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 3);
    }

    #[test]
    fn windows_must_nest() {
        assert!(AttributionWindows::default().validate().is_ok());
        let bad = AttributionWindows {
            click_ms: 10,
            atc_ms: 5,
            buy_ms: 20,
        };
        assert_eq!(bad.validate(), Err(MetricsError::InvalidWindows));
    }
}
