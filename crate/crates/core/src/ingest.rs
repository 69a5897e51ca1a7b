//! Raw log parsing, currency normalization and duplicate removal.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Read;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::model::{
    session_ids, validate_event, CleaningReport, Event, EventLog, EventType, LogMetadata, RejectReason, RuleOutcome,
    ValidateOptions,
};
use crate::par::{self, Execution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    Jsonl,
    Csv,
}

impl std::str::FromStr for InputFormat {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "json" | "ndjson" => Ok(InputFormat::Jsonl),
            "csv" => Ok(InputFormat::Csv),
            other => Err(IngestError::UnknownFormat(other.to_string())),
        }
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("unreadable stream: {0}")]
    UnreadableStream(String),
    #[error("unknown input format `{0}`")]
    UnknownFormat(String),
    #[error("no rate for currency {0}")]
    MissingRate(String),
    #[error("invalid rate table: {0}")]
    InvalidRates(String),
}

/// A record refused at ingestion, with its 1-based line number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub line: usize,
    pub reason: RejectReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record: Option<Map<String, Value>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RejectReport {
    pub rejects: Vec<Rejection>,
}

/// A parsed row, or why it could not be read as one.
type RawRow = Result<Map<String, Value>, RejectReason>;

/// Reads a batch log, validating every row. Rows that fail validation go to
/// the reject report instead of aborting the parse.
pub fn parse_events<R: Read>(
    mut input: R,
    format: InputFormat,
    opts: &ValidateOptions,
    metadata: LogMetadata,
) -> Result<(EventLog, RejectReport), IngestError> {
    let rows: Vec<(usize, RawRow)> = match format {
        InputFormat::Jsonl => {
            let mut text = String::new();
            input
                .read_to_string(&mut text)
                .map_err(|e| IngestError::UnreadableStream(e.to_string()))?;
            text.lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty())
                .map(|(i, l)| {
                    let row = match serde_json::from_str::<Value>(l) {
                        Ok(Value::Object(map)) => Ok(map),
                        Ok(_) | Err(_) => Err(RejectReason::InvalidValue {
                            field: "<line>".into(),
                            value: "not a JSON object".into(),
                        }),
                    };
                    (i + 1, row)
                })
                .collect()
        }
        InputFormat::Csv => {
            let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
            let headers = reader
                .headers()
                .map_err(|e| IngestError::UnreadableStream(e.to_string()))?
                .clone();
            let mut rows = Vec::new();
            for (i, record) in reader.records().enumerate() {
                // header is line 1
                let line = i + 2;
                let record = record.map_err(|e| IngestError::UnreadableStream(e.to_string()))?;
                let map: Map<String, Value> = headers
                    .iter()
                    .zip(record.iter())
                    .map(|(h, v)| (h.trim().to_string(), Value::String(v.to_string())))
                    .collect();
                rows.push((line, Ok(map)));
            }
            rows
        }
    };

    let mut events = Vec::with_capacity(rows.len());
    let mut rejects = Vec::new();
    let mut seen_ids = BTreeSet::new();
    for (line, row) in rows {
        let map = match row {
            Ok(map) => map,
            Err(reason) => {
                rejects.push(Rejection {
                    line,
                    reason,
                    record: None,
                });
                continue;
            }
        };
        match validate_event(&map, opts) {
            Ok(event) if seen_ids.insert(event.event_id.clone()) => events.push(event),
            Ok(event) => rejects.push(Rejection {
                line,
                reason: RejectReason::InvalidValue {
                    field: "event_id".into(),
                    value: format!("duplicate {}", event.event_id),
                },
                record: Some(map),
            }),
            Err(reason) => rejects.push(Rejection {
                line,
                reason,
                record: Some(map),
            }),
        }
    }
    let log = EventLog::from_subset(events, metadata);
    Ok((log, RejectReport { rejects }))
}

/// Conversion rates into one base currency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateTable {
    pub base: String,
    pub rates: BTreeMap<String, f64>,
}

impl RateTable {
    pub fn new(base: &str, rates: impl IntoIterator<Item = (String, f64)>) -> Result<Self, IngestError> {
        let base = base.to_ascii_uppercase();
        let mut table: BTreeMap<String, f64> = rates.into_iter().map(|(c, r)| (c.to_ascii_uppercase(), r)).collect();
        if let Some((c, r)) = table.iter().find(|(_, r)| !(**r > 0.0 && r.is_finite())) {
            return Err(IngestError::InvalidRates(format!(
                "rate for {c} must be positive, got {r}"
            )));
        }
        match table.get(&base) {
            Some(r) if *r != 1.0 => {
                return Err(IngestError::InvalidRates(format!(
                    "rate of base {base} must be 1, got {r}"
                )))
            }
            _ => {
                table.insert(base.clone(), 1.0);
            }
        }
        Ok(RateTable { base, rates: table })
    }

    pub fn rate(&self, currency: &str) -> Option<f64> {
        self.rates.get(&currency.to_ascii_uppercase()).copied()
    }
}

/// Converts every price to the base currency.
pub fn normalize_currency(log: &EventLog, rates: &RateTable) -> Result<EventLog, IngestError> {
    let missing: BTreeSet<&str> = log
        .events()
        .iter()
        .filter_map(|e| e.unit_price.as_ref())
        .map(|p| p.currency.as_str())
        .filter(|c| rates.rate(c).is_none())
        .collect();
    if let Some(c) = missing.first() {
        return Err(IngestError::MissingRate(c.to_string()));
    }
    let mut metadata = log.metadata().clone();
    metadata.base_currency = Some(rates.base.clone());
    Ok(log
        .map(|e| {
            let mut e = e.clone();
            if let Some(price) = e.unit_price.as_mut() {
                let rate = rates.rate(&price.currency).expect("checked above");
                price.amount *= rate;
                price.currency = rates.base.clone();
            }
            e
        })
        .with_metadata(metadata))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DedupPolicy {
    pub session_gap_ms: i64,
    pub glitch_window_ms: i64,
}

impl Default for DedupPolicy {
    fn default() -> Self {
        DedupPolicy {
            session_gap_ms: 30 * 60 * 1000,
            glitch_window_ms: 2_000,
        }
    }
}

impl DedupPolicy {
    pub fn is_valid(&self) -> bool {
        self.glitch_window_ms >= 0 && self.glitch_window_ms < self.session_gap_ms
    }
}

/// Key identifying "the same action" for glitch detection.
fn action_key(e: &Event) -> (EventType, String) {
    match e.event_type {
        EventType::Hit => {
            let products: Vec<&str> = e.recommended_products.iter().map(|r| r.product_id.as_str()).collect();
            (
                EventType::Hit,
                format!(
                    "{:?}|{}|{}",
                    e.page_type,
                    e.widget_id.as_deref().unwrap_or(""),
                    products.join(",")
                ),
            )
        }
        t => (t, e.product_id.clone().unwrap_or_default()),
    }
}

/// Removes warehousing glitches (same action repeated within the glitch
/// window) and repeated BUY/ATC of one product within a session.
pub fn deduplicate(log: &EventLog, policy: &DedupPolicy) -> (EventLog, CleaningReport) {
    deduplicate_with(log, policy, Execution::default())
}

pub fn deduplicate_with(log: &EventLog, policy: &DedupPolicy, exec: Execution) -> (EventLog, CleaningReport) {
    let groups: Vec<Vec<&Event>> = log.by_customer().into_values().collect();
    let results = par::map_slice(exec, &groups, |events| dedup_customer(events, policy));

    let mut dropped_glitch = 0;
    let mut dropped_session = 0;
    let mut keep = BTreeSet::new();
    for (kept, glitch, session) in results {
        dropped_glitch += glitch;
        dropped_session += session;
        keep.extend(kept);
    }
    // events without any identity pass through untouched
    let out = log.retain(|e| e.customer_key().is_none() || keep.contains(e.event_id.as_str()));

    let mut report = CleaningReport::default();
    report.push(
        RuleOutcome {
            records_removed: dropped_glitch,
            ..RuleOutcome::new("dedup_glitch")
        }
        .param("glitch_window_ms", policy.glitch_window_ms),
    );
    report.push(
        RuleOutcome {
            records_removed: dropped_session,
            ..RuleOutcome::new("dedup_session_repeat")
        }
        .param("session_gap_ms", policy.session_gap_ms),
    );
    (out, report)
}

fn dedup_customer<'a>(events: &[&'a Event], policy: &DedupPolicy) -> (Vec<&'a str>, usize, usize) {
    // glitch pass: compare each event with the last retained one of the same key
    let mut last_kept: HashMap<(EventType, String), i64> = HashMap::new();
    let mut after_glitch: Vec<&Event> = Vec::with_capacity(events.len());
    let mut glitch = 0;
    for e in events {
        let key = action_key(e);
        match last_kept.get(&key) {
            Some(&t) if e.timestamp_utc - t <= policy.glitch_window_ms => glitch += 1,
            _ => {
                last_kept.insert(key, e.timestamp_utc);
                after_glitch.push(e);
            }
        }
    }

    let times: Vec<i64> = after_glitch.iter().map(|e| e.timestamp_utc).collect();
    let sessions = session_ids(&times, policy.session_gap_ms);
    let mut seen: HashMap<(usize, EventType, &str), ()> = HashMap::new();
    let mut kept = Vec::with_capacity(after_glitch.len());
    let mut session_repeat = 0;
    for (e, &s) in after_glitch.iter().zip(&sessions) {
        if matches!(e.event_type, EventType::Buy | EventType::Atc) {
            let product = e.product_id.as_deref().unwrap_or("");
            if seen.insert((s, e.event_type, product), ()).is_some() {
                session_repeat += 1;
                continue;
            }
        }
        kept.push(e.event_id.as_str());
    }
    (kept, glitch, session_repeat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::*;
    use crate::model::Money;

    const MIN: i64 = 60_000;

    fn buy(id: &str, t: i64, cust: &str, product: &str) -> Event {
        action(id, EventType::Buy, t, cust, product)
    }

    #[test]
    fn empty_stream_gives_empty_log() {
        let (log, rejects) =
            parse_events(&b""[..], InputFormat::Jsonl, &Default::default(), Default::default()).unwrap();
        assert!(log.is_empty());
        assert!(rejects.rejects.is_empty());
    }

    #[test]
    fn invalid_rows_are_reported_by_line() {
        let input = concat!(
            r#"{"event_id":"a","event_type":"CLICK","timestamp_utc":30,"cookie_id":"c","page_type":"PDP","product_id":"p"}"#,
            "\n",
            r#"{"event_id":"b","event_type":"CLICK","timestamp_utc":10,"page_type":"PDP","product_id":"p"}"#,
            "\n",
            r#"{"event_id":"c","event_type":"CLICK","timestamp_utc":20,"user_id":"u","page_type":"PDP","product_id":"p"}"#,
            "\n",
            "not json\n",
            r#"{"event_id":"d","event_type":"HIT","timestamp_utc":5,"user_id":"u","page_type":"HOME","recommended_products":["p"]}"#,
            "\n",
        );
        let (log, rejects) = parse_events(
            input.as_bytes(),
            InputFormat::Jsonl,
            &Default::default(),
            Default::default(),
        )
        .unwrap();
        let ids: Vec<&str> = log.events().iter().map(|e| e.event_id.as_str()).collect();
        assert_eq!(ids, vec!["d", "c", "a"]);
        assert_eq!(rejects.rejects.len(), 2);
        assert_eq!(rejects.rejects[0].line, 2);
        assert_eq!(rejects.rejects[0].reason, RejectReason::MissingIdentity);
        assert_eq!(rejects.rejects[1].line, 4);
    }

    #[test]
    fn csv_maps_columns_by_header() {
        let input = "product_id,event_type,event_id,timestamp_utc,cookie_id,page_type,unit_price_amount,currency\n\
                     p1,BUY,e1,100,c1,CART,10.5,usd\n\
                     ,HIT,e2,50,c1,HOME,,\n";
        let (log, rejects) = parse_events(
            input.as_bytes(),
            InputFormat::Csv,
            &Default::default(),
            Default::default(),
        )
        .unwrap();
        assert_eq!(log.len(), 1);
        assert_eq!(
            log.events()[0].unit_price,
            Some(Money {
                amount: 10.5,
                currency: "USD".into()
            })
        );
        assert_eq!(rejects.rejects[0].line, 3);
        assert_eq!(rejects.rejects[0].reason, RejectReason::HitWithoutProducts);
    }

    #[test]
    fn unknown_format_string() {
        assert!(matches!(
            "xml".parse::<InputFormat>(),
            Err(IngestError::UnknownFormat(_))
        ));
    }

    fn priced(id: &str, amount: f64, currency: &str) -> Event {
        let mut e = buy(id, 0, "c", "p");
        e.unit_price = Some(Money {
            amount,
            currency: currency.into(),
        });
        e
    }

    #[test]
    fn currency_conversion() {
        let rates = RateTable::new("USD", [("XYZ".to_string(), 2.5)]).unwrap();
        let log = log(vec![priced("a", 10.0, "USD"), priced("b", 10.0, "XYZ")]);
        let out = normalize_currency(&log, &rates).unwrap();
        let prices: Vec<_> = out.events().iter().map(|e| e.unit_price.clone().unwrap()).collect();
        assert_eq!(
            prices[0],
            Money {
                amount: 10.0,
                currency: "USD".into()
            }
        );
        assert_eq!(
            prices[1],
            Money {
                amount: 25.0,
                currency: "USD".into()
            }
        );
        assert_eq!(out.metadata().base_currency.as_deref(), Some("USD"));

        let bad = crate::model::fixtures::log(vec![priced("a", 1.0, "YYY")]);
        assert!(matches!(normalize_currency(&bad, &rates), Err(IngestError::MissingRate(c)) if c == "YYY"));
    }

    #[test]
    fn rate_table_invariants() {
        assert!(RateTable::new("USD", [("EUR".to_string(), 0.0)]).is_err());
        assert!(RateTable::new("USD", [("USD".to_string(), 2.0)]).is_err());
        assert_eq!(RateTable::new("usd", []).unwrap().rate("USD"), Some(1.0));
    }

    #[test]
    fn glitch_duplicates_collapse() {
        let l = log(vec![buy("a", 0, "c", "p"), buy("b", 500, "c", "p")]);
        let (out, report) = deduplicate(&l, &DedupPolicy::default());
        assert_eq!(out.len(), 1);
        assert_eq!(out.events()[0].event_id, "a");
        assert_eq!(report.rule("dedup_glitch").unwrap().records_removed, 1);
    }

    #[test]
    fn same_session_repeat_buy_collapses() {
        // activity every 10 minutes keeps the session open
        let l = log(vec![
            buy("a", 0, "c", "p"),
            action("x", EventType::Click, 10 * MIN, "c", "q"),
            action("y", EventType::Click, 20 * MIN, "c", "r"),
            action("z", EventType::Click, 30 * MIN, "c", "s"),
            buy("b", 40 * MIN, "c", "p"),
        ]);
        let (out, report) = deduplicate(&l, &DedupPolicy::default());
        assert_eq!(out.len(), 4);
        assert!(out.events().iter().all(|e| e.event_id != "b"));
        assert_eq!(report.rule("dedup_session_repeat").unwrap().records_removed, 1);
    }

    #[test]
    fn different_days_are_kept() {
        let l = log(vec![buy("a", 0, "c", "p"), buy("b", 86_400_000, "c", "p")]);
        assert_eq!(deduplicate(&l, &DedupPolicy::default()).0.len(), 2);
    }

    #[test]
    fn session_clicks_are_not_collapsed() {
        let l = log(vec![
            action("a", EventType::Click, 0, "c", "p"),
            action("b", EventType::Click, 60_000, "c", "p"),
            action("c", EventType::Click, 60_100, "c", "p"),
        ]);
        let (out, _) = deduplicate(&l, &DedupPolicy::default());
        let ids: Vec<&str> = out.events().iter().map(|e| e.event_id.as_str()).collect();
        assert_eq!(ids, vec!["a", "b"]);
    }

    #[test]
    fn dedup_is_idempotent_on_fixture() {
        let l = log(vec![
            buy("a", 0, "c", "p"),
            buy("b", 1_000, "c", "p"),
            buy("c", 25 * MIN, "c", "p"),
            action("d", EventType::Click, 50 * MIN, "c", "p"),
            buy("e", 51 * MIN, "c", "p"),
        ]);
        let (once, _) = deduplicate(&l, &DedupPolicy::default());
        let (twice, report) = deduplicate(&once, &DedupPolicy::default());
        assert_eq!(once, twice);
        assert_eq!(report.records_removed(), 0);
    }
}
