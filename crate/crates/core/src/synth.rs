//! Synthetic clickstream generator with labeled pathologies.
//!
//! Every customer is generated from its own RNG stream, so output depends only
//! on the seed. The ground truth records exactly what was injected: customer
//! labels, glitch duplicates, anonymous rows on shared cookies, the true owner
//! of every event and the combo catalog.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::journey::ComboMap;
use crate::model::{Event, EventLog, EventType, LogMetadata, Money, PageType, RecommendedProduct, Segment, DAY_MS};
use crate::par::{self, Execution};
use crate::validation::assign_segments;

const SEC: i64 = 1000;
const MIN: i64 = 60 * SEC;
const HOUR: i64 = 60 * MIN;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("infeasible configuration: {0}")]
    InfeasibleConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BotMix {
    /// Bursts well above one event per second.
    pub fast: usize,
    /// Metronome-like clicking.
    pub regular: usize,
    /// Human pace, but a crawler user agent.
    pub signature: usize,
}

impl Default for BotMix {
    fn default() -> Self {
        BotMix {
            fast: 10,
            regular: 10,
            signature: 10,
        }
    }
}

impl BotMix {
    pub fn total(&self) -> usize {
        self.fast + self.regular + self.signature
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub customers: usize,
    pub days: u32,
    /// Midnight UTC of the first day, in milliseconds.
    pub start_ms: i64,
    pub catalog_size: usize,
    pub products_per_hit: usize,
    pub plp_products_per_hit: usize,

    /// Median of the per-day step count is `exp(steps_mu)`, scaled by engagement.
    pub steps_mu: f64,
    pub steps_sigma: f64,
    pub max_steps_per_day: usize,
    pub active_day_prob: f64,
    /// Log-normal spread of per-customer engagement.
    pub engagement_sigma: f64,
    /// Median gap between human page views, in seconds.
    pub human_gap_median_s: f64,
    pub human_gap_sigma: f64,
    pub organic_view_prob: f64,

    pub base_ctr: f64,
    pub base_atctr: f64,
    pub base_btr: f64,
    /// Log-normal spread of the day-level CTR multiplier.
    pub day_ctr_sigma: f64,
    /// CTR multiplier applied to segment A2.
    pub segment_ctr_multiplier: f64,
    pub segment_seed: u64,
    pub stamp_segments: bool,
    /// CTR multipliers for a customer's 1st, 2nd, ... click.
    pub new_customer_ramp: Vec<f64>,

    /// Share of clean customers with an account.
    pub registered_fraction: f64,
    /// Share of all customers using two devices. Drawn from registered customers.
    pub multi_device_fraction: f64,
    /// Share of customers sharing a cookie with one other customer.
    pub shared_cookie_fraction: f64,
    /// Probability that a registered customer's day starts logged out.
    pub anonymous_start_prob: f64,

    pub bounce_fraction: f64,
    pub bots: BotMix,
    pub b2b_count: usize,
    pub b2b_buys_per_day: usize,
    pub duplicate_glitch_prob: f64,
    pub outlier_customers: usize,
    pub outlier_views: (u32, u32),

    pub combo_count: usize,
    pub combo_size: (usize, usize),
    pub price_range: (f64, f64),
    pub base_currency: String,
    /// Value of one unit of each currency in the base currency.
    pub currencies: BTreeMap<String, f64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 1,
            customers: 6000,
            days: 7,
            start_ms: 1_704_067_200_000,
            catalog_size: 2000,
            products_per_hit: 8,
            plp_products_per_hit: 12,
            steps_mu: 1.6,
            steps_sigma: 0.6,
            max_steps_per_day: 40,
            active_day_prob: 0.45,
            engagement_sigma: 0.8,
            human_gap_median_s: 20.0,
            human_gap_sigma: 0.8,
            organic_view_prob: 0.3,
            base_ctr: 0.07,
            base_atctr: 0.02,
            base_btr: 0.01,
            day_ctr_sigma: 0.2,
            segment_ctr_multiplier: 1.0,
            segment_seed: 7,
            stamp_segments: true,
            new_customer_ramp: vec![0.6],
            registered_fraction: 0.6,
            multi_device_fraction: 0.1,
            shared_cookie_fraction: 0.004,
            anonymous_start_prob: 0.3,
            bounce_fraction: 0.3,
            bots: BotMix::default(),
            b2b_count: 3,
            b2b_buys_per_day: 20,
            duplicate_glitch_prob: 0.01,
            outlier_customers: 6,
            outlier_views: (200, 460),
            combo_count: 40,
            combo_size: (2, 3),
            price_range: (5.0, 150.0),
            base_currency: "USD".into(),
            currencies: [("USD", 1.0), ("EUR", 1.1), ("GBP", 1.25)]
                .map(|(c, r)| (c.to_string(), r))
                .into_iter()
                .collect(),
        }
    }
}

impl SynthConfig {
    /// Default population with every pathology switched off.
    pub fn clean() -> Self {
        SynthConfig {
            new_customer_ramp: Vec::new(),
            shared_cookie_fraction: 0.0,
            bounce_fraction: 0.0,
            bots: BotMix {
                fast: 0,
                regular: 0,
                signature: 0,
            },
            b2b_count: 0,
            duplicate_glitch_prob: 0.0,
            outlier_customers: 0,
            ..SynthConfig::default()
        }
    }

    pub fn bounce_count(&self) -> usize {
        (self.bounce_fraction * self.customers as f64).round() as usize
    }

    pub fn multi_device_count(&self) -> usize {
        (self.multi_device_fraction * self.customers as f64).round() as usize
    }

    fn shared_pairs(&self) -> usize {
        (self.shared_cookie_fraction * self.customers as f64 / 2.0).round() as usize
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InfeasibleConfig(m));
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        for (name, v) in [
            ("active_day_prob", self.active_day_prob),
            ("organic_view_prob", self.organic_view_prob),
            ("registered_fraction", self.registered_fraction),
            ("multi_device_fraction", self.multi_device_fraction),
            ("shared_cookie_fraction", self.shared_cookie_fraction),
            ("anonymous_start_prob", self.anonymous_start_prob),
            ("bounce_fraction", self.bounce_fraction),
            ("duplicate_glitch_prob", self.duplicate_glitch_prob),
        ] {
            if !unit(v) {
                return bad(format!("{name} = {v} is not in [0, 1]"));
            }
        }
        for (name, v) in [
            ("base_ctr", self.base_ctr),
            ("base_atctr", self.base_atctr),
            ("base_btr", self.base_btr),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("{name} = {v} is not in (0, 1)"));
            }
        }
        if self.base_btr > self.base_atctr || self.base_atctr > self.base_ctr {
            return bad("rates must satisfy btr <= atctr <= ctr".into());
        }
        if self.customers == 0 || self.days == 0 || self.catalog_size < self.plp_products_per_hit {
            return bad("need customers, days and a catalog larger than one PLP page".into());
        }
        if self.products_per_hit == 0 || self.plp_products_per_hit < self.products_per_hit {
            return bad("products_per_hit must be positive and at most plp_products_per_hit".into());
        }
        let special = self.bounce_count() + self.bots.total() + self.b2b_count + self.outlier_customers;
        if special > self.customers {
            return bad(format!(
                "{special} labeled customers (bounces, bots, B2B, outliers) exceed {} customers",
                self.customers
            ));
        }
        let clean = self.customers - special;
        if 2 * self.shared_pairs() > clean {
            return bad("not enough clean customers to share cookies".into());
        }
        let registered_floor =
            (self.registered_fraction * clean as f64 * 0.9) as usize + self.b2b_count + self.outlier_customers;
        if self.multi_device_count() > registered_floor {
            return bad("multi-device customers must be registered; raise registered_fraction".into());
        }
        if self.outlier_views.0 == 0 || self.outlier_views.0 > self.outlier_views.1 {
            return bad("outlier_views must be a non-empty positive range".into());
        }
        if self.combo_count > 0 && (self.combo_size.0 < 2 || self.combo_size.0 > self.combo_size.1) {
            return bad("combos need at least two SKUs".into());
        }
        if !(self.price_range.0 >= 0.0 && self.price_range.0 <= self.price_range.1) {
            return bad("invalid price range".into());
        }
        if self.currencies.get(&self.base_currency) != Some(&1.0)
            || self.currencies.values().any(|r| r.is_nan() || *r <= 0.0)
        {
            return bad("currencies must be positive and include the base at rate 1".into());
        }
        if self.segment_ctr_multiplier < 0.0 || self.new_customer_ramp.iter().any(|m| *m < 0.0) {
            return bad("CTR multipliers must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CustomerLabel {
    Clean,
    Bounce,
    Bot,
    B2b,
    Outlier,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// True customer id -> label. Registered customers are keyed by user id,
    /// anonymous ones by their cookie.
    pub customers: BTreeMap<String, CustomerLabel>,
    pub glitch_duplicates: BTreeSet<String>,
    pub multi_device_customers: BTreeSet<String>,
    /// Anonymous rows on cookies shared by two registered customers.
    pub ambiguous_events: BTreeSet<String>,
    /// event id -> true customer id.
    pub event_customer: BTreeMap<String, String>,
    /// cookie -> customers with at least one event on it.
    pub cookie_owners: BTreeMap<String, BTreeSet<String>>,
    pub combos: ComboMap,
    pub day_ctr_multipliers: Vec<f64>,
}

impl GroundTruth {
    pub fn with_label(&self, label: CustomerLabel) -> BTreeSet<&str> {
        self.customers
            .iter()
            .filter(|(_, l)| **l == label)
            .map(|(c, _)| c.as_str())
            .collect()
    }
}

struct Item {
    id: String,
    usd: f64,
    /// SKUs and their prices when the item is a combo.
    members: Vec<(String, f64)>,
}

struct Catalog {
    items: Vec<Item>,
}

impl Catalog {
    fn new(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        let (lo, hi) = cfg.price_range;
        let price = |rng: &mut ChaCha8Rng| ((lo + rng.gen::<f64>() * (hi - lo)) * 100.0).round() / 100.0;
        let mut items: Vec<Item> = (0..cfg.catalog_size)
            .map(|i| Item {
                id: format!("P{i:05}"),
                usd: price(rng),
                members: Vec::new(),
            })
            .collect();
        for k in 0..cfg.combo_count {
            let n = rng.gen_range(cfg.combo_size.0..=cfg.combo_size.1);
            let members: Vec<(String, f64)> = (0..n).map(|j| (format!("K{k:03}-{j}"), price(rng) / 2.0)).collect();
            items.push(Item {
                id: format!("K{k:03}"),
                usd: members.iter().map(|(_, p)| p).sum(),
                members,
            });
        }
        Catalog { items }
    }

    fn pick(&self, rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
        rand::seq::index::sample(rng, self.items.len(), n).into_vec()
    }
}

#[derive(Clone)]
struct Device {
    cookie: String,
    user_agent: String,
    shared: bool,
}

struct Persona {
    index: usize,
    label: CustomerLabel,
    bot_kind: Option<BotKind>,
    id: String,
    user: Option<String>,
    devices: Vec<Device>,
    ip: String,
    currency: String,
    engagement: f64,
    segment: Option<Segment>,
}

#[derive(Clone, Copy, PartialEq)]
enum BotKind {
    Fast,
    Regular,
    Signature,
}

const BROWSERS: [&str; 4] = [
    "Mozilla/5.0 (Windows NT 10.0; Win64; x64) AppleWebKit/537.36 (KHTML, like Gecko) Chrome/120.0 Safari/537.36",
    "Mozilla/5.0 (Macintosh; Intel Mac OS X 14_1) AppleWebKit/605.1.15 (KHTML, like Gecko) Version/17.1 Safari/605.1.15",
    "Mozilla/5.0 (iPhone; CPU iPhone OS 17_1 like Mac OS X) AppleWebKit/605.1.15 (KHTML, like Gecko) Mobile/15E148",
    "Mozilla/5.0 (X11; Linux x86_64; rv:121.0) Gecko/20100101 Firefox/121.0",
];
const CRAWLERS: [&str; 3] = [
    "Mozilla/5.0 (compatible; Googlebot/2.1; +http://www.google.com/bot.html)",
    "Mozilla/5.0 (compatible; bingbot/2.0; +http://www.bing.com/bingbot.htm)",
    "python-requests/2.31.0",
];

/// Event factory for one customer.
struct Emitter<'a> {
    cfg: &'a SynthConfig,
    persona: &'a Persona,
    rng: ChaCha8Rng,
    events: Vec<Event>,
    seq: usize,
}

impl<'a> Emitter<'a> {
    fn base(&mut self, kind: EventType, t: i64, device: &Device, logged_in: bool) -> Event {
        self.seq += 1;
        Event {
            event_id: format!("e{:06}-{:05}", self.persona.index, self.seq),
            event_type: kind,
            timestamp_utc: t,
            cookie_id: Some(device.cookie.clone()),
            user_id: if logged_in { self.persona.user.clone() } else { None },
            cust_id: None,
            product_id: None,
            recommended_products: Vec::new(),
            page_type: PageType::Pdp,
            page_number: None,
            widget_id: None,
            quantity: 1,
            unit_price: None,
            user_agent: Some(device.user_agent.clone()),
            ip: Some(self.persona.ip.clone()),
            segment_flag: if self.cfg.stamp_segments {
                self.persona.segment
            } else {
                None
            },
            excluded_from_metrics: false,
        }
    }

    fn hit(&mut self, t: i64, device: &Device, logged_in: bool, page: PageType, products: &[&str]) -> usize {
        let mut e = self.base(EventType::Hit, t, device, logged_in);
        e.page_type = page;
        e.widget_id = Some(
            match page {
                PageType::Home => "home_top",
                PageType::Plp => "plp_grid",
                PageType::Pdp => "pdp_similar",
                PageType::Cart => "cart_upsell",
            }
            .into(),
        );
        if page == PageType::Plp {
            e.page_number = Some(if self.rng.gen_bool(0.8) {
                1
            } else {
                self.rng.gen_range(2..=3)
            });
        }
        e.recommended_products = products
            .iter()
            .enumerate()
            .map(|(i, p)| RecommendedProduct {
                product_id: p.to_string(),
                slot_index: i as u32,
            })
            .collect();
        self.events.push(e);
        self.events.len() - 1
    }

    fn interaction(&mut self, kind: EventType, t: i64, device: &Device, logged_in: bool, product: &str) -> &mut Event {
        let mut e = self.base(kind, t, device, logged_in);
        e.product_id = Some(product.to_string());
        self.events.push(e);
        self.events.last_mut().expect("just pushed")
    }

    fn local_price(&self, usd: f64) -> Money {
        let rate = self.cfg.currencies[&self.persona.currency];
        Money {
            amount: (usd / rate * 100.0).round() / 100.0,
            currency: self.persona.currency.clone(),
        }
    }

    fn gap(&mut self) -> i64 {
        let d = LogNormal::new((self.cfg.human_gap_median_s * 1000.0).ln(), self.cfg.human_gap_sigma).expect("valid");
        2 * SEC + d.sample(&mut self.rng) as i64
    }

    fn page(&mut self) -> PageType {
        match self.rng.gen_range(0..10) {
            0..=1 => PageType::Home,
            2..=4 => PageType::Plp,
            5..=8 => PageType::Pdp,
            _ => PageType::Cart,
        }
    }
}

struct World<'a> {
    cfg: &'a SynthConfig,
    catalog: Catalog,
    day_mult: Vec<f64>,
}

/// State carried across a human customer's days.
struct Journey {
    rec_clicks: usize,
    carted: BTreeSet<(i64, usize)>,
}

impl World<'_> {
    fn click_prob(&self, p: &Persona, day: usize, ordinal: usize) -> f64 {
        let mut ctr = self.cfg.base_ctr * self.day_mult[day];
        if p.segment == Some(Segment::A2) {
            ctr *= self.cfg.segment_ctr_multiplier;
        }
        if let Some(m) = self.cfg.new_customer_ramp.get(ordinal - 1) {
            ctr *= m;
        }
        ctr.min(0.95)
    }

    /// A human page view: one hit, maybe a recommended click leading to a
    /// cart and a purchase, maybe an organic product view.
    fn human_step(&self, em: &mut Emitter, st: &mut Journey, day: usize, t: i64, device: &Device, logged_in: bool) {
        let cfg = self.cfg;
        let page = em.page();
        let n = if page == PageType::Plp {
            cfg.plp_products_per_hit
        } else {
            cfg.products_per_hit
        };
        let shown = self.catalog.pick(&mut em.rng, n);
        let ids: Vec<&str> = shown.iter().map(|&i| self.catalog.items[i].id.as_str()).collect();
        em.hit(t, device, logged_in, page, &ids);

        if em.rng.gen::<f64>() < self.click_prob(em.persona, day, st.rec_clicks + 1) {
            st.rec_clicks += 1;
            let slot = em.rng.gen_range(0..cfg.products_per_hit);
            let item = &self.catalog.items[shown[slot]];
            let tc = t + em.rng.gen_range(3 * SEC..240 * SEC);
            em.interaction(EventType::Click, tc, device, logged_in, &item.id);
            let key = (day as i64, shown[slot]);
            if em.rng.gen::<f64>() < cfg.base_atctr / cfg.base_ctr && st.carted.insert(key) {
                let ta = tc + em.rng.gen_range(10 * SEC..1500 * SEC);
                em.interaction(EventType::Atc, ta, device, logged_in, &item.id);
                if em.rng.gen::<f64>() < cfg.base_btr / cfg.base_atctr {
                    let tb = ta + em.rng.gen_range(MIN..6 * HOUR);
                    self.buy(em, tb, device, logged_in, shown[slot]);
                }
            }
        }
        if em.rng.gen::<f64>() < cfg.organic_view_prob {
            let other = em.rng.gen_range(0..self.catalog.items.len());
            let id = self.catalog.items[other].id.clone();
            let tv = t + em.rng.gen_range(5 * SEC..60 * SEC);
            em.interaction(EventType::Click, tv, device, logged_in, &id);
        }
    }

    fn buy(&self, em: &mut Emitter, t: i64, device: &Device, logged_in: bool, item: usize) {
        let item = &self.catalog.items[item];
        if item.members.is_empty() {
            let qty = if em.rng.gen_bool(0.9) { 1 } else { 2 };
            let price = em.local_price(item.usd);
            let e = em.interaction(EventType::Buy, t, device, logged_in, &item.id);
            e.quantity = qty;
            e.unit_price = Some(price);
        } else {
            // the shop records one purchase row per SKU of the combo
            for (j, (sku, usd)) in item.members.iter().enumerate() {
                let price = em.local_price(*usd);
                let e = em.interaction(EventType::Buy, t + j as i64 * 150, device, logged_in, sku);
                e.unit_price = Some(price);
            }
        }
    }

    fn human(&self, em: &mut Emitter) {
        let cfg = self.cfg;
        let p = em.persona;
        let steps = LogNormal::new(cfg.steps_mu + p.engagement.ln(), cfg.steps_sigma).expect("valid");
        let active_prob = (cfg.active_day_prob * p.engagement.sqrt()).min(1.0);
        let mut days: Vec<usize> = (0..cfg.days as usize)
            .filter(|_| em.rng.gen_bool(active_prob))
            .collect();
        if days.is_empty() {
            days.push(em.rng.gen_range(0..cfg.days as usize));
        }
        let own_devices = p.devices.iter().filter(|d| !d.shared).count();
        while days.len() < own_devices.min(cfg.days as usize) {
            let d = em.rng.gen_range(0..cfg.days as usize);
            if !days.contains(&d) {
                days.push(d);
                days.sort_unstable();
            }
        }
        if p.label == CustomerLabel::B2b {
            days = (0..cfg.days as usize).collect();
        }
        let outlier_day = (p.label == CustomerLabel::Outlier).then(|| days[em.rng.gen_range(0..days.len())]);

        let mut st = Journey {
            rec_clicks: 0,
            carted: BTreeSet::new(),
        };
        for (n, day) in days.into_iter().enumerate() {
            let device = self.day_device(em, n);
            let mut anonymous: u32 = if p.user.is_some() && em.rng.gen_bool(cfg.anonymous_start_prob) {
                em.rng.gen_range(1..=3)
            } else {
                0
            };
            let mut t = cfg.start_ms + day as i64 * DAY_MS + em.rng.gen_range(HOUR..14 * HOUR);
            let n = (steps.sample(&mut em.rng).ceil() as usize).clamp(2, cfg.max_steps_per_day);
            for _ in 0..n {
                let logged_in = p.user.is_some() && anonymous == 0;
                anonymous = anonymous.saturating_sub(1);
                self.human_step(em, &mut st, day, t, &device, logged_in);
                t += em.gap();
            }
            if p.label == CustomerLabel::B2b {
                self.bulk_order(em, &mut st, day, t, &device);
            }
            if outlier_day == Some(day) {
                let views = em.rng.gen_range(cfg.outlier_views.0..=cfg.outlier_views.1);
                for _ in 0..views {
                    let id = self.catalog.items[em.rng.gen_range(0..self.catalog.items.len())]
                        .id
                        .clone();
                    em.interaction(EventType::Click, t, &device, true, &id);
                    t += em.gap();
                }
            }
        }
    }

    fn bulk_order(&self, em: &mut Emitter, st: &mut Journey, day: usize, mut t: i64, device: &Device) {
        let mut bought = 0;
        while bought < self.cfg.b2b_buys_per_day {
            let item = em.rng.gen_range(0..self.cfg.catalog_size);
            if !st.carted.insert((day as i64, item)) {
                continue;
            }
            let id = self.catalog.items[item].id.clone();
            em.interaction(EventType::Click, t, device, true, &id);
            em.interaction(EventType::Atc, t + 20 * SEC, device, true, &id);
            let price = em.local_price(self.catalog.items[item].usd);
            let e = em.interaction(EventType::Buy, t + 40 * SEC, device, true, &id);
            e.unit_price = Some(price);
            bought += 1;
            t += MIN + em.gap();
        }
    }

    /// Device for the `n`-th active day. Every own device is used at least once.
    fn day_device(&self, em: &mut Emitter, n: usize) -> Device {
        let devices = &em.persona.devices;
        let own: Vec<&Device> = devices.iter().filter(|d| !d.shared).collect();
        if n < own.len() {
            return own[n].clone();
        }
        if let Some(shared) = devices.iter().find(|d| d.shared) {
            if em.rng.gen_bool(0.3) {
                return shared.clone();
            }
        }
        own[em.rng.gen_range(0..own.len())].clone()
    }

    fn bounce(&self, em: &mut Emitter) {
        let day = em.rng.gen_range(0..self.cfg.days as i64);
        let t = self.cfg.start_ms + day * DAY_MS + em.rng.gen_range(0..DAY_MS);
        let page = if em.rng.gen_bool(0.5) {
            PageType::Home
        } else {
            PageType::Plp
        };
        let shown = self.catalog.pick(&mut em.rng, self.cfg.products_per_hit);
        let ids: Vec<&str> = shown.iter().map(|&i| self.catalog.items[i].id.as_str()).collect();
        let device = em.persona.devices[0].clone();
        let i = em.hit(t, &device, false, page, &ids);
        em.events[i].page_number = (page == PageType::Plp).then_some(1);
    }

    fn bot(&self, em: &mut Emitter, kind: BotKind) {
        let device = em.persona.devices[0].clone();
        let sessions = em.rng.gen_range(1..=3);
        for _ in 0..sessions {
            let day = em.rng.gen_range(0..self.cfg.days as i64);
            let mut t = self.cfg.start_ms + day * DAY_MS + em.rng.gen_range(0..20 * HOUR);
            let (clicks, period) = match kind {
                BotKind::Fast => (em.rng.gen_range(20..=40), 0),
                BotKind::Regular => (em.rng.gen_range(40..=80), em.rng.gen_range(3 * SEC..8 * SEC)),
                BotKind::Signature => (em.rng.gen_range(20..=60), 0),
            };
            for c in 0..clicks {
                if c % 5 == 0 {
                    let shown = self.catalog.pick(&mut em.rng, self.cfg.products_per_hit);
                    let ids: Vec<&str> = shown.iter().map(|&i| self.catalog.items[i].id.as_str()).collect();
                    let page = em.page();
                    em.hit(t - 50, &device, false, page, &ids);
                }
                let id = self.catalog.items[em.rng.gen_range(0..self.catalog.items.len())]
                    .id
                    .clone();
                em.interaction(EventType::Click, t, &device, false, &id);
                t += match kind {
                    BotKind::Fast => em.rng.gen_range(150..700),
                    BotKind::Regular => period + em.rng.gen_range(-(period / 100)..=period / 100),
                    BotKind::Signature => em.gap(),
                };
            }
        }
    }

    /// Warehousing glitches: copies of interactions a moment later.
    fn glitches(&self, em: &mut Emitter) -> Vec<String> {
        let mut dups = Vec::new();
        let n = em.events.len();
        for i in 0..n {
            if em.events[i].event_type.is_interaction() && em.rng.gen_bool(self.cfg.duplicate_glitch_prob) {
                let mut d = em.events[i].clone();
                d.event_id.push_str("-dup");
                d.timestamp_utc += em.rng.gen_range(100..=1500);
                dups.push(d.event_id.clone());
                em.events.push(d);
            }
        }
        dups
    }
}

struct CustomerOutput {
    events: Vec<Event>,
    glitches: Vec<String>,
}

/// Generates a log and the ground truth describing it.
pub fn generate(cfg: &SynthConfig) -> Result<(EventLog, GroundTruth), SynthError> {
    generate_with(cfg, Execution::default())
}

pub fn generate_with(cfg: &SynthConfig, exec: Execution) -> Result<(EventLog, GroundTruth), SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX);
    let catalog = Catalog::new(cfg, &mut rng);
    let day_dist = LogNormal::new(-cfg.day_ctr_sigma.powi(2) / 2.0, cfg.day_ctr_sigma.max(0.0)).expect("valid");
    let day_mult: Vec<f64> = (0..cfg.days).map(|_| day_dist.sample(&mut rng)).collect();
    let personas = personas(cfg, &mut rng);
    let world = World { cfg, catalog, day_mult };

    let outputs = par::map_slice(exec, &personas, |p| {
        let mut crng = ChaCha8Rng::seed_from_u64(cfg.seed);
        crng.set_stream(p.index as u64);
        let mut em = Emitter {
            cfg,
            persona: p,
            rng: crng,
            events: Vec::new(),
            seq: 0,
        };
        match p.label {
            CustomerLabel::Bounce => world.bounce(&mut em),
            CustomerLabel::Bot => world.bot(&mut em, p.bot_kind.expect("bots have a kind")),
            _ => world.human(&mut em),
        }
        ensure_logins(&mut em.events, p);
        let glitches = world.glitches(&mut em);
        CustomerOutput {
            events: em.events,
            glitches,
        }
    });

    let mut truth = GroundTruth {
        day_ctr_multipliers: world.day_mult.clone(),
        combos: ComboMap::new(
            world
                .catalog
                .items
                .iter()
                .flat_map(|it| it.members.iter().map(|(sku, _)| (sku.clone(), it.id.clone()))),
        )
        .expect("generated SKUs are unique"),
        ..Default::default()
    };
    let mut events = Vec::new();
    for (p, out) in personas.iter().zip(outputs) {
        truth.customers.insert(p.id.clone(), p.label);
        if p.devices.iter().filter(|d| !d.shared).count() > 1 {
            truth.multi_device_customers.insert(p.id.clone());
        }
        for e in &out.events {
            truth.event_customer.insert(e.event_id.clone(), p.id.clone());
            if let Some(c) = &e.cookie_id {
                truth.cookie_owners.entry(c.clone()).or_default().insert(p.id.clone());
            }
        }
        truth.glitch_duplicates.extend(out.glitches);
        events.extend(out.events);
    }
    for e in &events {
        if e.user_id.is_none() {
            if let Some(c) = &e.cookie_id {
                if truth.cookie_owners.get(c).is_some_and(|o| o.len() > 1) {
                    truth.ambiguous_events.insert(e.event_id.clone());
                }
            }
        }
    }
    let metadata = LogMetadata {
        source: format!("synth:seed={}", cfg.seed),
        ingested_at_ms: cfg.start_ms,
        base_currency: None,
    };
    let log = EventLog::new(events, metadata).expect("generated ids are unique");
    Ok((log, truth))
}

/// Every cookie of a registered customer carries at least one logged-in row,
/// so the true owner is observable.
fn ensure_logins(events: &mut [Event], p: &Persona) {
    let Some(user) = &p.user else { return };
    for d in &p.devices {
        let on_device: Vec<usize> = (0..events.len())
            .filter(|&i| events[i].cookie_id.as_deref() == Some(d.cookie.as_str()))
            .collect();
        if !on_device.is_empty() && on_device.iter().all(|&i| events[i].user_id.is_none()) {
            let last = *on_device.last().expect("non-empty");
            events[last].user_id = Some(user.clone());
        }
    }
}

fn personas(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Persona> {
    let mut kinds: Vec<(CustomerLabel, Option<BotKind>)> = Vec::with_capacity(cfg.customers);
    kinds.extend(std::iter::repeat_n((CustomerLabel::Bounce, None), cfg.bounce_count()));
    kinds.extend(std::iter::repeat_n(
        (CustomerLabel::Bot, Some(BotKind::Fast)),
        cfg.bots.fast,
    ));
    kinds.extend(std::iter::repeat_n(
        (CustomerLabel::Bot, Some(BotKind::Regular)),
        cfg.bots.regular,
    ));
    kinds.extend(std::iter::repeat_n(
        (CustomerLabel::Bot, Some(BotKind::Signature)),
        cfg.bots.signature,
    ));
    kinds.extend(std::iter::repeat_n((CustomerLabel::B2b, None), cfg.b2b_count));
    kinds.extend(std::iter::repeat_n(
        (CustomerLabel::Outlier, None),
        cfg.outlier_customers,
    ));
    kinds.resize(cfg.customers, (CustomerLabel::Clean, None));
    kinds.shuffle(rng);

    let currencies: Vec<&String> = cfg.currencies.keys().collect();
    let engagement = LogNormal::new(0.0, cfg.engagement_sigma).expect("valid");
    let mut out: Vec<Persona> = kinds
        .into_iter()
        .enumerate()
        .map(|(index, (label, bot_kind))| {
            let human = matches!(
                label,
                CustomerLabel::Clean | CustomerLabel::B2b | CustomerLabel::Outlier
            );
            let registered = matches!(label, CustomerLabel::B2b | CustomerLabel::Outlier)
                || (label == CustomerLabel::Clean && rng.gen_bool(cfg.registered_fraction));
            let devices = vec![Device {
                cookie: format!("k{index:06}-0"),
                user_agent: match bot_kind {
                    Some(BotKind::Signature) => CRAWLERS[rng.gen_range(0..CRAWLERS.len())].to_string(),
                    _ => BROWSERS[rng.gen_range(0..BROWSERS.len())].to_string(),
                },
                shared: false,
            }];
            let user = registered.then(|| format!("u{index:06}"));
            Persona {
                index,
                label,
                bot_kind,
                id: user.clone().unwrap_or_else(|| devices[0].cookie.clone()),
                user,
                devices,
                ip: format!(
                    "10.{}.{}.{}",
                    rng.gen_range(0..256),
                    rng.gen_range(0..256),
                    rng.gen_range(1..255)
                ),
                currency: if human {
                    currencies[rng.gen_range(0..currencies.len())].clone()
                } else {
                    cfg.base_currency.clone()
                },
                engagement: if label == CustomerLabel::Clean {
                    engagement.sample(rng)
                } else {
                    1.0
                },
                segment: None,
            }
        })
        .collect();

    let mut registered: Vec<usize> = out.iter().filter(|p| p.user.is_some()).map(|p| p.index).collect();
    registered.shuffle(rng);
    for &i in registered.iter().take(cfg.multi_device_count()) {
        out[i].devices.push(Device {
            cookie: format!("k{i:06}-1"),
            user_agent: BROWSERS[rng.gen_range(0..BROWSERS.len())].to_string(),
            shared: false,
        });
    }

    // pairs of registered clean customers that also use one common cookie
    let mut candidates: Vec<usize> = out
        .iter()
        .filter(|p| p.label == CustomerLabel::Clean && p.user.is_some())
        .map(|p| p.index)
        .collect();
    candidates.shuffle(rng);
    for (j, pair) in candidates.chunks_exact(2).take(cfg.shared_pairs()).enumerate() {
        let cookie = format!("s{j:05}");
        for &i in pair {
            let ua = out[i].devices[0].user_agent.clone();
            out[i].devices.push(Device {
                cookie: cookie.clone(),
                user_agent: ua,
                shared: true,
            });
        }
    }

    let segments = assign_segments(out.iter().map(|p| p.id.as_str()), cfg.segment_seed);
    for p in &mut out {
        p.segment = segments.segment_of(&p.id);
    }
    out
}
