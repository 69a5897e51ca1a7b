//! Loopback JSON API behind the outlier inspector.
//!
//! Endpoints:
//! - `GET /api/population?metric=views|buys`
//! - `POST /api/bootlier` with `{metric, limit, N, k, iters, seed}`
//! - `POST /api/decision` with `{metric, limit, N, overwrite}`
//! - `GET /api/decision?metric=...`
//!
//! Any other `GET` is answered from the static directory, if one is set.
//! Recomputation is serialized per metric; other requests run concurrently.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io;
use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use clickprep_core::model::EventLog;
use clickprep_core::outliers::{
    bootlier_histogram, decision_for_limit, median, modality, ActivityMetric, ActivityPopulation, BootlierParams,
    LimitSearch, OutlierDecision, OutlierError, ProminenceThresholds,
};
use serde::de::IgnoredAny;
use serde::Deserialize;
use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("port {0} is already in use")]
    PortBusy(u16),
    #[error("no activity population loaded")]
    NoPopulationLoaded,
    #[error("cannot start server: {0}")]
    Bind(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    pub status: u16,
    pub content_type: &'static str,
    pub body: Vec<u8>,
}

impl Response {
    fn json(status: u16, value: &Value) -> Self {
        Response {
            status,
            content_type: "application/json",
            body: serde_json::to_vec(value).expect("json value"),
        }
    }

    fn error(status: u16, code: &str, message: impl ToString) -> Self {
        Self::json(status, &json!({ "error": code, "message": message.to_string() }))
    }

    pub fn body_json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap_or(Value::Null)
    }
}

struct Slot {
    population: ActivityPopulation,
    /// Held for the whole of a recomputation. Maps a normalized request to its response body.
    cache: Mutex<HashMap<String, Vec<u8>>>,
}

/// Request handling, independent of the transport.
pub struct Api {
    slots: BTreeMap<ActivityMetric, Slot>,
    decisions_dir: PathBuf,
    static_dir: Option<PathBuf>,
    decision_lock: Mutex<()>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BootlierRequest {
    #[serde(default)]
    metric: Option<String>,
    #[serde(default)]
    limit: Option<u64>,
    #[serde(default, rename = "N", alias = "n", alias = "sample_size")]
    sample_size: Option<usize>,
    #[serde(default, alias = "trim")]
    k: Option<usize>,
    #[serde(default, alias = "iterations")]
    iters: Option<usize>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    prominence: Option<ProminenceThresholds>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DecisionRequest {
    metric: String,
    limit: u64,
    #[serde(default, rename = "N", alias = "n", alias = "sample_size")]
    sample_size: Option<usize>,
    #[serde(default)]
    overwrite: bool,
    /// Bootlier settings echoed by the inspector; accepted and ignored.
    #[serde(default, rename = "params")]
    _params: Option<IgnoredAny>,
}

fn query_param<'a>(query: &'a str, key: &str) -> Option<&'a str> {
    query
        .split('&')
        .filter_map(|kv| kv.split_once('='))
        .find(|(k, _)| *k == key)
        .map(|(_, v)| v)
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js") | Some("mjs") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("svg") => "image/svg+xml",
        Some("png") => "image/png",
        _ => "application/octet-stream",
    }
}

impl Api {
    /// Builds the view and buy populations from a resolved log.
    pub fn new(log: &EventLog, decisions_dir: PathBuf, static_dir: Option<PathBuf>) -> Result<Self, ServeError> {
        let slots: BTreeMap<_, _> = [ActivityMetric::ViewsPerDay, ActivityMetric::BuysPerDay]
            .into_iter()
            .map(|m| {
                (
                    m,
                    Slot {
                        population: ActivityPopulation::from_log(log, m),
                        cache: Mutex::new(HashMap::new()),
                    },
                )
            })
            .filter(|(_, s)| !s.population.is_empty())
            .collect();
        if slots.is_empty() {
            return Err(ServeError::NoPopulationLoaded);
        }
        fs::create_dir_all(&decisions_dir)?;
        Ok(Api {
            slots,
            decisions_dir,
            static_dir,
            decision_lock: Mutex::new(()),
        })
    }

    pub fn handle(&self, method: &str, url: &str, body: &[u8]) -> Response {
        let (path, query) = url.split_once('?').unwrap_or((url, ""));
        match (method, path) {
            ("GET", "/api/population") => self.population(query),
            ("POST", "/api/bootlier") => self.bootlier(body),
            ("POST", "/api/decision") => self.record_decision(body),
            ("GET", "/api/decision") => self.decision(query),
            ("GET", p) if !p.starts_with("/api/") => self.static_file(p),
            (_, p) if p.starts_with("/api/") => Response::error(405, "MethodNotAllowed", format!("{method} {p}")),
            _ => Response::error(404, "NotFound", path),
        }
    }

    fn slot(&self, raw: Option<&str>) -> Result<(ActivityMetric, &Slot), Response> {
        let metric: ActivityMetric = raw
            .unwrap_or("views")
            .parse()
            .map_err(|e: String| Response::error(400, "InvalidMetric", e))?;
        match self.slots.get(&metric) {
            Some(s) => Ok((metric, s)),
            None => Err(Response::error(
                404,
                "NoPopulationLoaded",
                format!("no {} in the loaded log", metric.short_name()),
            )),
        }
    }

    fn population(&self, query: &str) -> Response {
        let (metric, slot) = match self.slot(query_param(query, "metric")) {
            Ok(s) => s,
            Err(r) => return r,
        };
        let pop = &slot.population;
        let values: Vec<f64> = pop.values().into_iter().map(|v| v as f64).collect();
        Response::json(
            200,
            &json!({
                "metric": metric,
                "size": pop.len(),
                "median": median(&values).ok(),
                "max": pop.max(),
                "entries": pop.entries,
            }),
        )
    }

    fn bootlier(&self, body: &[u8]) -> Response {
        let req: BootlierRequest = match serde_json::from_slice(body) {
            Ok(r) => r,
            Err(e) => return Response::error(400, "InvalidRequest", e),
        };
        let (metric, slot) = match self.slot(req.metric.as_deref()) {
            Ok(s) => s,
            Err(r) => return r,
        };
        let defaults = LimitSearch::for_metric(metric);
        let limit = req.limit.or(slot.population.max()).unwrap_or(0);
        let pop = slot.population.restricted(limit);
        let trim = req.k.unwrap_or(defaults.bootlier.trim);
        let search = LimitSearch {
            bootlier: BootlierParams {
                trim,
                ..defaults.bootlier
            },
            ..defaults
        };
        let params = BootlierParams {
            sample_size: req.sample_size.unwrap_or_else(|| search.sample_size_for(pop.len())),
            trim,
            iterations: req.iters.unwrap_or(defaults.bootlier.iterations),
            seed: req.seed.unwrap_or(defaults.bootlier.seed),
            prominence: req.prominence.unwrap_or_default(),
        };
        let key = serde_json::to_string(&(limit, &params)).expect("params serialize");

        let mut cache = slot.cache.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(body) = cache.get(&key) {
            return Response {
                status: 200,
                content_type: "application/json",
                body: body.clone(),
            };
        }
        let hist = match bootlier_histogram(&pop, &params) {
            Ok(h) => h,
            Err(e @ OutlierError::InsufficientPopulation { needed, available }) => {
                return Response::json(
                    422,
                    &json!({
                        "error": "InsufficientPopulation",
                        "message": e.to_string(),
                        "needed": needed,
                        "available": available,
                    }),
                )
            }
            Err(e @ OutlierError::EmptyPopulation) => return Response::error(422, "EmptyPopulation", e),
            Err(e) => return Response::error(400, "InvalidParams", e),
        };
        let m = modality(&hist, &params.prominence);
        let response = Response::json(
            200,
            &json!({
                "metric": metric,
                "limit": limit,
                "histogram": hist,
                "modality": m,
            }),
        );
        cache.insert(key, response.body.clone());
        response
    }

    fn decision_path(&self, metric: ActivityMetric) -> PathBuf {
        self.decisions_dir
            .join(format!("{}_decision.json", metric.short_name()))
    }

    fn history_path(&self, metric: ActivityMetric) -> PathBuf {
        self.decisions_dir.join(format!("{}_history.json", metric.short_name()))
    }

    fn load<T: serde::de::DeserializeOwned>(path: &Path) -> Option<T> {
        fs::read(path).ok().and_then(|b| serde_json::from_slice(&b).ok())
    }

    fn store(path: &Path, value: &impl serde::Serialize) -> io::Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(io::Error::other)?;
        bytes.push(b'\n');
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, bytes)?;
        fs::rename(tmp, path)
    }

    fn record_decision(&self, body: &[u8]) -> Response {
        let req: DecisionRequest = match serde_json::from_slice(body) {
            Ok(r) => r,
            Err(e) => return Response::error(400, "InvalidRequest", e),
        };
        let (metric, slot) = match self.slot(Some(&req.metric)) {
            Ok(s) => s,
            Err(r) => return r,
        };
        let _guard = self.decision_lock.lock().unwrap_or_else(|p| p.into_inner());
        let existing: Option<OutlierDecision> = Self::load(&self.decision_path(metric));
        if let (Some(prev), false) = (&existing, req.overwrite) {
            return Response::json(
                409,
                &json!({
                    "error": "DecisionExists",
                    "message": format!("a {} decision exists; resend with overwrite", metric.short_name()),
                    "existing": prev,
                }),
            );
        }
        let pop = &slot.population;
        let kept = pop.restricted(req.limit).len();
        let n = req
            .sample_size
            .unwrap_or_else(|| LimitSearch::for_metric(metric).sample_size_for(kept));
        let decision = decision_for_limit(pop, req.limit, n);
        if let Some(prev) = &existing {
            let mut history: Vec<OutlierDecision> = Self::load(&self.history_path(metric)).unwrap_or_default();
            history.push(prev.clone());
            if let Err(e) = Self::store(&self.history_path(metric), &history) {
                return Response::error(500, "StorageError", e);
            }
        }
        if let Err(e) = Self::store(&self.decision_path(metric), &decision) {
            return Response::error(500, "StorageError", e);
        }
        Response::json(
            201,
            &json!({
                "metric": metric,
                "limit": decision.final_limit,
                "customers_flagged": decision.customers_flagged.len(),
                "flagged_fraction": decision.flagged_fraction,
                "archived": existing.map(|d| d.final_limit),
                "decision": decision,
            }),
        )
    }

    fn decision(&self, query: &str) -> Response {
        let (metric, _) = match self.slot(query_param(query, "metric")) {
            Ok(s) => s,
            Err(r) => return r,
        };
        let _guard = self.decision_lock.lock().unwrap_or_else(|p| p.into_inner());
        match Self::load::<OutlierDecision>(&self.decision_path(metric)) {
            Some(d) => {
                let history: Vec<OutlierDecision> = Self::load(&self.history_path(metric)).unwrap_or_default();
                Response::json(
                    200,
                    &json!({
                        "metric": metric,
                        "limit": d.final_limit,
                        "flagged_fraction": d.flagged_fraction,
                        "decision": d,
                        "history": history,
                    }),
                )
            }
            None => Response::error(
                404,
                "NoDecision",
                format!("no {} decision recorded", metric.short_name()),
            ),
        }
    }

    fn static_file(&self, path: &str) -> Response {
        let Some(root) = &self.static_dir else {
            return Response::error(404, "NotFound", path);
        };
        let rel = Path::new(path.trim_start_matches('/'));
        if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
            return Response::error(404, "NotFound", path);
        }
        let mut file = root.join(rel);
        if file.is_dir() {
            file = file.join("index.html");
        }
        match fs::read(&file) {
            Ok(body) => Response {
                status: 200,
                content_type: content_type(&file),
                body,
            },
            Err(_) => Response::error(404, "NotFound", path),
        }
    }
}

/// A running server bound to the loopback interface.
pub struct Server {
    http: Arc<tiny_http::Server>,
    addr: SocketAddr,
    workers: Vec<JoinHandle<()>>,
}

impl Server {
    /// Binds `127.0.0.1:port` (0 picks a free port) and starts `workers` threads.
    pub fn start(api: Api, port: u16, workers: usize) -> Result<Server, ServeError> {
        let http = match tiny_http::Server::http(("127.0.0.1", port)) {
            Ok(s) => Arc::new(s),
            Err(e) => {
                return Err(match e.downcast_ref::<io::Error>() {
                    Some(io) if io.kind() == io::ErrorKind::AddrInUse => ServeError::PortBusy(port),
                    _ => ServeError::Bind(e.to_string()),
                })
            }
        };
        let addr = http
            .server_addr()
            .to_ip()
            .ok_or_else(|| ServeError::Bind("not an IP listener".into()))?;
        let api = Arc::new(api);
        let workers = (0..workers.max(1))
            .map(|_| {
                let http = Arc::clone(&http);
                let api = Arc::clone(&api);
                std::thread::spawn(move || {
                    while let Ok(rq) = http.recv() {
                        serve_one(&api, rq);
                    }
                })
            })
            .collect();
        Ok(Server { http, addr, workers })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the workers exit.
    pub fn wait(self) {
        for w in self.workers {
            let _ = w.join();
        }
    }

    pub fn shutdown(self) {
        for _ in &self.workers {
            self.http.unblock();
        }
        self.wait();
    }
}

fn serve_one(api: &Api, mut rq: tiny_http::Request) {
    let mut body = Vec::new();
    let response = match rq.as_reader().read_to_end(&mut body) {
        Ok(_) => api.handle(rq.method().as_str(), rq.url(), &body),
        Err(e) => Response::error(400, "UnreadableBody", e),
    };
    let header =
        tiny_http::Header::from_bytes(&b"Content-Type"[..], response.content_type.as_bytes()).expect("static header");
    let reply = tiny_http::Response::from_data(response.body)
        .with_status_code(response.status)
        .with_header(header);
    let _ = rq.respond(reply);
}

#[cfg(test)]
mod tests {
    use super::*;
    use clickprep_core::model::{Event, EventType, LogMetadata, PageType};

    fn click(id: usize, cust: &str, day: i64, n: usize) -> Event {
        Event {
            event_id: format!("e{id}-{n}"),
            event_type: EventType::Click,
            timestamp_utc: day * 86_400_000 + n as i64 * 1000,
            cookie_id: Some(cust.into()),
            user_id: None,
            cust_id: Some(cust.into()),
            product_id: Some("p".into()),
            recommended_products: Vec::new(),
            page_type: PageType::Pdp,
            page_number: None,
            widget_id: None,
            quantity: 1,
            unit_price: None,
            user_agent: None,
            ip: None,
            segment_flag: None,
            excluded_from_metrics: false,
        }
    }

    fn api(dir: &Path) -> Api {
        let mut events = Vec::new();
        for c in 0..300 {
            let views = 1 + (c * 7) % 9 + if c == 0 { 200 } else { 0 };
            for n in 0..views {
                events.push(click(c, &format!("c{c}"), 0, n));
            }
        }
        let log = EventLog::new(events, LogMetadata::default()).unwrap();
        Api::new(&log, dir.to_path_buf(), None).unwrap()
    }

    fn tmp(name: &str) -> PathBuf {
        let d = std::env::temp_dir().join(format!("clickprep-server-{name}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&d);
        d
    }

    #[test]
    fn bootlier_is_repeatable_and_rejects_large_n() {
        let api = api(&tmp("boot"));
        let body = br#"{"metric":"views","k":7,"iters":1000,"seed":3,"N":50}"#;
        let a = api.handle("POST", "/api/bootlier", body);
        assert_eq!(a.status, 200, "{}", String::from_utf8_lossy(&a.body));
        assert_eq!(a, api.handle("POST", "/api/bootlier", body));
        let big = api.handle("POST", "/api/bootlier", br#"{"N":5000,"iters":1000}"#);
        assert_eq!(big.status, 422);
        assert_eq!(big.body_json()["error"], "InsufficientPopulation");
    }

    #[test]
    fn decisions_round_trip_and_archive() {
        let dir = tmp("decision");
        let api = api(&dir);
        assert_eq!(api.handle("GET", "/api/decision?metric=views", b"").status, 404);
        let r = api.handle("POST", "/api/decision", br#"{"metric":"views","limit":9}"#);
        assert_eq!(r.status, 201);
        assert_eq!(r.body_json()["customers_flagged"], 1);
        let got = api.handle("GET", "/api/decision?metric=views", b"").body_json();
        assert_eq!(got["limit"], 9);
        assert_eq!(
            api.handle("POST", "/api/decision", br#"{"metric":"views","limit":8}"#)
                .status,
            409
        );
        let r = api.handle(
            "POST",
            "/api/decision",
            br#"{"metric":"views","limit":8,"overwrite":true}"#,
        );
        assert_eq!(r.body_json()["archived"], 9);
        let got = api.handle("GET", "/api/decision?metric=views", b"").body_json();
        assert_eq!(got["limit"], 8);
        assert_eq!(got["history"][0]["final_limit"], 9);
    }

    #[test]
    fn missing_metric_and_paths() {
        let api = api(&tmp("paths"));
        assert_eq!(
            api.handle("GET", "/api/population?metric=buys", b"").body_json()["error"],
            "NoPopulationLoaded"
        );
        assert_eq!(api.handle("GET", "/api/population?metric=clicks", b"").status, 400);
        let pop = api.handle("GET", "/api/population?metric=views", b"").body_json();
        assert_eq!(pop["size"], 300);
        assert_eq!(api.handle("GET", "/index.html", b"").status, 404);
        assert_eq!(api.handle("DELETE", "/api/decision", b"").status, 405);
    }

    #[test]
    fn empty_log_has_no_population() {
        let log = EventLog::default();
        assert!(matches!(
            Api::new(&log, tmp("empty"), None),
            Err(ServeError::NoPopulationLoaded)
        ));
    }
}
