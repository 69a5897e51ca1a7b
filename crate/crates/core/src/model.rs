//! Canonical event record, the immutable event log, and raw-record validation.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use chrono::{DateTime, FixedOffset, NaiveDateTime, TimeZone};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

/// JSON Schema of one JSON Lines record.
pub const EVENT_SCHEMA_V1: &str = include_str!("../schema/event.v1.schema.json");

/// Milliseconds in one UTC day.
pub const DAY_MS: i64 = 86_400_000;

/// UTC day index of a millisecond timestamp.
pub fn day_index(timestamp_ms: i64) -> i64 {
    timestamp_ms.div_euclid(DAY_MS)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EventType {
    Hit,
    Click,
    Atc,
    Buy,
}

impl EventType {
    pub fn is_interaction(self) -> bool {
        !matches!(self, EventType::Hit)
    }

    fn parse(raw: &str) -> Option<Self> {
        match raw.trim().to_ascii_uppercase().as_str() {
            "HIT" => Some(EventType::Hit),
            "CLICK" => Some(EventType::Click),
            "ATC" | "ADD_TO_CART" => Some(EventType::Atc),
            "BUY" | "PURCHASE" => Some(EventType::Buy),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PageType {
    Home,
    Plp,
    Pdp,
    Cart,
}

impl PageType {
    fn parse(raw: &str) -> Option<Self> {
        match raw.trim().to_ascii_uppercase().as_str() {
            "HOME" => Some(PageType::Home),
            "PLP" => Some(PageType::Plp),
            "PDP" => Some(PageType::Pdp),
            "CART" => Some(PageType::Cart),
            _ => None,
        }
    }
}

/// A/A split segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Segment {
    A1,
    A2,
}

impl Segment {
    fn parse(raw: &str) -> Option<Self> {
        match raw.trim().to_ascii_uppercase().as_str() {
            "A1" => Some(Segment::A1),
            "A2" => Some(Segment::A2),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RecommendedProduct {
    pub product_id: String,
    pub slot_index: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Money {
    pub amount: f64,
    pub currency: String,
}

/// One timestamped visitor action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub event_id: String,
    pub event_type: EventType,
    pub timestamp_utc: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cookie_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cust_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub product_id: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub recommended_products: Vec<RecommendedProduct>,
    pub page_type: PageType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub page_number: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub widget_id: Option<String>,
    #[serde(default = "one")]
    pub quantity: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit_price: Option<Money>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_agent: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ip: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segment_flag: Option<Segment>,
    /// Set by the new-customer rule: the event stays in the log but is left out of CTR.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub excluded_from_metrics: bool,
}

fn one() -> u32 {
    1
}

impl Event {
    /// Resolved customer if available, otherwise the best raw identifier.
    pub fn customer_key(&self) -> Option<&str> {
        self.cust_id
            .as_deref()
            .or(self.user_id.as_deref())
            .or(self.cookie_id.as_deref())
    }

    pub fn day(&self) -> i64 {
        day_index(self.timestamp_utc)
    }

    /// Slot of `product` in this hit, if recommended.
    pub fn slot_of(&self, product: &str) -> Option<u32> {
        self.recommended_products
            .iter()
            .find(|r| r.product_id == product)
            .map(|r| r.slot_index)
    }

    pub fn to_record(&self) -> Map<String, Value> {
        match serde_json::to_value(self) {
            Ok(Value::Object(map)) => map,
            _ => unreachable!("Event always serializes to an object"),
        }
    }
}

/// Why a raw record was refused.
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "code", content = "detail")]
pub enum RejectReason {
    #[error("both cookie_id and user_id are missing")]
    MissingIdentity,
    #[error("malformed timestamp: {0}")]
    MalformedTimestamp(String),
    #[error("HIT record has no recommended products")]
    HitWithoutProducts,
    #[error("HIT record carries a product_id")]
    HitWithProduct,
    #[error("interaction record has no product_id")]
    MissingProduct,
    #[error("interaction record carries recommended products")]
    ProductsOnInteraction,
    #[error("slot indices must be distinct and start at 0")]
    InvalidSlots,
    #[error("negative price")]
    NegativePrice,
    #[error("missing field `{0}`")]
    MissingField(String),
    #[error("invalid value for `{field}`: {value}")]
    InvalidValue { field: String, value: String },
}

/// Options controlling validation of raw records.
#[derive(Debug, Clone, Default)]
pub struct ValidateOptions {
    /// Offset applied to zone-less timestamps; without it they are rejected.
    pub default_offset: Option<FixedOffset>,
}

/// Turns a raw field map (a JSON object or a CSV row) into an [`Event`].
pub fn validate_event(raw: &Map<String, Value>, opts: &ValidateOptions) -> Result<Event, RejectReason> {
    let event_id = text(raw, "event_id").ok_or_else(|| RejectReason::MissingField("event_id".into()))?;
    let type_raw = text(raw, "event_type").ok_or_else(|| RejectReason::MissingField("event_type".into()))?;
    let event_type = EventType::parse(&type_raw).ok_or(RejectReason::InvalidValue {
        field: "event_type".into(),
        value: type_raw,
    })?;

    let cookie_id = text(raw, "cookie_id");
    let user_id = text(raw, "user_id");
    if cookie_id.is_none() && user_id.is_none() {
        return Err(RejectReason::MissingIdentity);
    }

    let timestamp_utc = parse_timestamp(
        raw.get("timestamp_utc")
            .ok_or_else(|| RejectReason::MissingField("timestamp_utc".into()))?,
        opts,
    )?;

    let page_raw = text(raw, "page_type").ok_or_else(|| RejectReason::MissingField("page_type".into()))?;
    let page_type = PageType::parse(&page_raw).ok_or(RejectReason::InvalidValue {
        field: "page_type".into(),
        value: page_raw,
    })?;

    let product_id = text(raw, "product_id");
    let recommended_products = parse_recommendations(raw.get("recommended_products"))?;
    match event_type {
        EventType::Hit => {
            if recommended_products.is_empty() {
                return Err(RejectReason::HitWithoutProducts);
            }
            if product_id.is_some() {
                return Err(RejectReason::HitWithProduct);
            }
            let slots: BTreeSet<u32> = recommended_products.iter().map(|r| r.slot_index).collect();
            if slots.len() != recommended_products.len() || slots.first() != Some(&0) {
                return Err(RejectReason::InvalidSlots);
            }
        }
        _ => {
            if product_id.is_none() {
                return Err(RejectReason::MissingProduct);
            }
            if !recommended_products.is_empty() {
                return Err(RejectReason::ProductsOnInteraction);
            }
        }
    }

    let page_number = match unsigned(raw, "page_number")? {
        Some(0) => {
            return Err(RejectReason::InvalidValue {
                field: "page_number".into(),
                value: "0".into(),
            })
        }
        other => other.map(|n| n as u32),
    };
    let quantity = match unsigned(raw, "quantity")? {
        None => 1,
        Some(0) => {
            return Err(RejectReason::InvalidValue {
                field: "quantity".into(),
                value: "0".into(),
            })
        }
        Some(q) => u32::try_from(q).map_err(|_| RejectReason::InvalidValue {
            field: "quantity".into(),
            value: q.to_string(),
        })?,
    };

    let unit_price = parse_price(raw)?;
    let segment_flag = match text(raw, "segment_flag") {
        None => None,
        Some(s) => Some(Segment::parse(&s).ok_or(RejectReason::InvalidValue {
            field: "segment_flag".into(),
            value: s,
        })?),
    };
    let excluded_from_metrics = match raw.get("excluded_from_metrics") {
        None | Some(Value::Null) => false,
        Some(Value::Bool(b)) => *b,
        Some(Value::String(s)) if s.eq_ignore_ascii_case("true") => true,
        Some(Value::String(s)) if s.is_empty() || s.eq_ignore_ascii_case("false") => false,
        Some(other) => {
            return Err(RejectReason::InvalidValue {
                field: "excluded_from_metrics".into(),
                value: other.to_string(),
            })
        }
    };

    Ok(Event {
        event_id,
        event_type,
        timestamp_utc,
        cookie_id,
        user_id,
        cust_id: text(raw, "cust_id"),
        product_id,
        recommended_products,
        page_type,
        page_number,
        widget_id: text(raw, "widget_id"),
        quantity,
        unit_price,
        user_agent: text(raw, "user_agent"),
        ip: text(raw, "ip"),
        segment_flag,
        excluded_from_metrics,
    })
}

/// Non-empty string value; CSV nulls ("", "NULL") count as absent.
fn text(raw: &Map<String, Value>, key: &str) -> Option<String> {
    match raw.get(key)? {
        Value::String(s) => {
            let s = s.trim();
            if s.is_empty() || s.eq_ignore_ascii_case("null") {
                None
            } else {
                Some(s.to_string())
            }
        }
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn unsigned(raw: &Map<String, Value>, key: &str) -> Result<Option<u64>, RejectReason> {
    let invalid = |v: &Value| RejectReason::InvalidValue {
        field: key.into(),
        value: v.to_string(),
    };
    match raw.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v @ Value::Number(n)) => n.as_u64().map(Some).ok_or_else(|| invalid(v)),
        Some(v @ Value::String(s)) => {
            let s = s.trim();
            if s.is_empty() || s.eq_ignore_ascii_case("null") {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| invalid(v))
            }
        }
        Some(v) => Err(invalid(v)),
    }
}

fn parse_timestamp(value: &Value, opts: &ValidateOptions) -> Result<i64, RejectReason> {
    let malformed = || RejectReason::MalformedTimestamp(value.to_string());
    match value {
        Value::Number(n) => n.as_i64().ok_or_else(malformed),
        Value::String(s) => {
            let s = s.trim();
            if let Ok(ms) = s.parse::<i64>() {
                return Ok(ms);
            }
            if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
                return Ok(dt.timestamp_millis());
            }
            let naive = ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f"]
                .iter()
                .find_map(|fmt| NaiveDateTime::parse_from_str(s, fmt).ok())
                .ok_or_else(malformed)?;
            let offset = opts.default_offset.ok_or_else(malformed)?;
            offset
                .from_local_datetime(&naive)
                .single()
                .map(|dt| dt.timestamp_millis())
                .ok_or_else(malformed)
        }
        _ => Err(malformed()),
    }
}

fn parse_recommendations(value: Option<&Value>) -> Result<Vec<RecommendedProduct>, RejectReason> {
    let invalid = |v: &Value| RejectReason::InvalidValue {
        field: "recommended_products".into(),
        value: v.to_string(),
    };
    let Some(value) = value else {
        return Ok(Vec::new());
    };
    match value {
        Value::Null => Ok(Vec::new()),
        Value::Array(items) => items
            .iter()
            .enumerate()
            .map(|(pos, item)| match item {
                Value::String(p) => Ok(RecommendedProduct {
                    product_id: p.clone(),
                    slot_index: pos as u32,
                }),
                Value::Object(obj) => {
                    let product_id = text(obj, "product_id").ok_or_else(|| invalid(item))?;
                    let slot_index = unsigned(obj, "slot_index")?.unwrap_or(pos as u64) as u32;
                    Ok(RecommendedProduct { product_id, slot_index })
                }
                _ => Err(invalid(item)),
            })
            .collect(),
        // CSV form: "p1:0;p2:1" or "p1;p2" (slot = position).
        Value::String(s) if s.trim().is_empty() => Ok(Vec::new()),
        Value::String(s) => s
            .split(';')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .enumerate()
            .map(|(pos, token)| match token.rsplit_once(':') {
                Some((p, slot)) => slot
                    .parse()
                    .map(|slot_index| RecommendedProduct {
                        product_id: p.to_string(),
                        slot_index,
                    })
                    .map_err(|_| invalid(value)),
                None => Ok(RecommendedProduct {
                    product_id: token.to_string(),
                    slot_index: pos as u32,
                }),
            })
            .collect(),
        other => Err(invalid(other)),
    }
}

fn parse_price(raw: &Map<String, Value>) -> Result<Option<Money>, RejectReason> {
    let (amount, currency) = match raw.get("unit_price") {
        Some(Value::Object(obj)) => (obj.get("amount").cloned(), text(obj, "currency")),
        Some(Value::Null) | None => (raw.get("unit_price_amount").cloned(), text(raw, "currency")),
        Some(other) => (Some(other.clone()), text(raw, "currency")),
    };
    let amount = match amount {
        None | Some(Value::Null) => return Ok(None),
        Some(Value::Number(n)) => n.as_f64(),
        Some(Value::String(s)) if s.trim().is_empty() => return Ok(None),
        Some(Value::String(s)) => s.trim().parse::<f64>().ok(),
        Some(_) => None,
    }
    .filter(|a| a.is_finite())
    .ok_or_else(|| RejectReason::InvalidValue {
        field: "unit_price".into(),
        value: format!("{:?}", raw.get("unit_price")),
    })?;
    if amount < 0.0 {
        return Err(RejectReason::NegativePrice);
    }
    let currency = currency.ok_or_else(|| RejectReason::MissingField("unit_price.currency".into()))?;
    if currency.len() != 3 || !currency.chars().all(|c| c.is_ascii_alphabetic()) {
        return Err(RejectReason::InvalidValue {
            field: "unit_price.currency".into(),
            value: currency,
        });
    }
    Ok(Some(Money {
        amount,
        currency: currency.to_ascii_uppercase(),
    }))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogMetadata {
    pub source: String,
    pub ingested_at_ms: i64,
    pub base_currency: Option<String>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LogError {
    #[error("duplicate event_id `{0}`")]
    DuplicateEventId(String),
}

/// Time-ordered, immutable collection of events.
///
/// Events are kept sorted by `(timestamp_utc, event_id)`, which makes every
/// downstream computation independent of the order records arrived in.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventLog {
    events: Vec<Event>,
    metadata: LogMetadata,
}

impl EventLog {
    pub fn new(mut events: Vec<Event>, metadata: LogMetadata) -> Result<Self, LogError> {
        sort_events(&mut events);
        let mut seen = BTreeSet::new();
        for e in &events {
            if !seen.insert(e.event_id.as_str()) {
                return Err(LogError::DuplicateEventId(e.event_id.clone()));
            }
        }
        Ok(EventLog { events, metadata })
    }

    /// Builds a log from events that are known to carry unique ids (a subset of another log).
    pub(crate) fn from_subset(mut events: Vec<Event>, metadata: LogMetadata) -> Self {
        sort_events(&mut events);
        debug_assert!(events.windows(2).all(|w| w[0].event_id != w[1].event_id));
        EventLog { events, metadata }
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn metadata(&self) -> &LogMetadata {
        &self.metadata
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn into_events(self) -> Vec<Event> {
        self.events
    }

    /// New log holding the events for which `keep` returns true.
    pub fn retain(&self, mut keep: impl FnMut(&Event) -> bool) -> EventLog {
        EventLog {
            events: self.events.iter().filter(|e| keep(e)).cloned().collect(),
            metadata: self.metadata.clone(),
        }
    }

    /// New log with every event passed through `f` (ids must stay unique).
    pub fn map(&self, f: impl FnMut(&Event) -> Event) -> EventLog {
        EventLog::from_subset(self.events.iter().map(f).collect(), self.metadata.clone())
    }

    pub fn with_metadata(mut self, metadata: LogMetadata) -> Self {
        self.metadata = metadata;
        self
    }

    /// Events grouped by customer key, each group in time order.
    pub fn by_customer(&self) -> BTreeMap<&str, Vec<&Event>> {
        let mut groups: BTreeMap<&str, Vec<&Event>> = BTreeMap::new();
        for e in &self.events {
            if let Some(key) = e.customer_key() {
                groups.entry(key).or_default().push(e);
            }
        }
        groups
    }

    pub fn distinct_customers(&self) -> BTreeSet<&str> {
        self.events.iter().filter_map(Event::customer_key).collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }
}

fn sort_events(events: &mut [Event]) {
    events.sort_by(|a, b| {
        a.timestamp_utc
            .cmp(&b.timestamp_utc)
            .then_with(|| a.event_id.cmp(&b.event_id))
    });
}

/// Session number of each timestamp, where a gap of at least `gap_ms` starts a new session.
/// `times` must be sorted.
pub fn session_ids(times: &[i64], gap_ms: i64) -> Vec<usize> {
    let mut out = Vec::with_capacity(times.len());
    let mut session = 0;
    for (i, &t) in times.iter().enumerate() {
        if i > 0 && t - times[i - 1] >= gap_ms {
            session += 1;
        }
        out.push(session);
    }
    out
}

/// One cleaning rule's contribution to a [`CleaningReport`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RuleOutcome {
    pub rule: String,
    pub records_removed: usize,
    pub customers_flagged: usize,
    pub hits_removed: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub parameters: BTreeMap<String, Value>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub details: BTreeMap<String, Value>,
}

impl RuleOutcome {
    pub fn new(rule: impl Into<String>) -> Self {
        RuleOutcome {
            rule: rule.into(),
            ..Default::default()
        }
    }

    pub fn param(mut self, key: &str, value: impl Serialize) -> Self {
        self.parameters
            .insert(key.to_string(), serde_json::to_value(value).unwrap_or(Value::Null));
        self
    }

    pub fn detail(mut self, key: &str, value: impl Serialize) -> Self {
        self.details
            .insert(key.to_string(), serde_json::to_value(value).unwrap_or(Value::Null));
        self
    }
}

/// Ordered per-rule removal counters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CleaningReport {
    pub rules: Vec<RuleOutcome>,
}

impl CleaningReport {
    pub fn push(&mut self, outcome: RuleOutcome) {
        self.rules.push(outcome);
    }

    pub fn extend(&mut self, other: CleaningReport) {
        self.rules.extend(other.rules);
    }

    pub fn records_removed(&self) -> usize {
        self.rules.iter().map(|r| r.records_removed).sum()
    }

    pub fn rule(&self, name: &str) -> Option<&RuleOutcome> {
        self.rules.iter().find(|r| r.rule == name)
    }
}
