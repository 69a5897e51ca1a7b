//! Unique-customer resolution from browser cookies and login ids.
//!
//! Every event ends up with a `cust_id`: the login id when present, else the
//! single login id ever observed with its cookie, else the cookie itself.
//! Anonymous rows on a cookie shared by several logins cannot be attributed
//! and are dropped.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::model::{Event, EventLog};
use crate::par::{self, Execution};

/// cookie id -> every user id observed on the same record.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityMap {
    pub cookies: BTreeMap<String, BTreeSet<String>>,
}

impl IdentityMap {
    pub fn users_of(&self, cookie: &str) -> Option<&BTreeSet<String>> {
        self.cookies.get(cookie)
    }

    /// Union of two maps; associative and commutative.
    pub fn merge(mut self, other: IdentityMap) -> IdentityMap {
        for (cookie, users) in other.cookies {
            self.cookies.entry(cookie).or_default().extend(users);
        }
        self
    }

    pub fn multi_user_cookies(&self) -> impl Iterator<Item = &str> {
        self.cookies
            .iter()
            .filter(|(_, users)| users.len() > 1)
            .map(|(c, _)| c.as_str())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub input_events: usize,
    pub eliminated_no_ids: usize,
    pub eliminated_ambiguous: usize,
    pub backfilled_from_map: usize,
    pub cookie_only: usize,
    /// Share of distinct cookies linked to more than one user id.
    pub multi_user_cookie_fraction: f64,
}

const SHARD: usize = 4096;

pub fn build_identity_map(log: &EventLog) -> IdentityMap {
    build_identity_map_with(log, Execution::default())
}

pub fn build_identity_map_with(log: &EventLog, exec: Execution) -> IdentityMap {
    let shards: Vec<&[Event]> = log.events().chunks(SHARD).collect();
    par::map_slice(exec, &shards, |events| {
        let mut map = IdentityMap::default();
        for e in *events {
            if let (Some(c), Some(u)) = (&e.cookie_id, &e.user_id) {
                map.cookies.entry(c.clone()).or_default().insert(u.clone());
            }
        }
        map
    })
    .into_iter()
    .fold(IdentityMap::default(), IdentityMap::merge)
}

/// Assigns `cust_id` to every event that can be attributed to one customer.
pub fn resolve(log: &EventLog, map: &IdentityMap) -> (EventLog, IdentityReport) {
    let mut report = IdentityReport {
        input_events: log.len(),
        ..Default::default()
    };
    let mut out = Vec::with_capacity(log.len());
    for e in log.events() {
        let cust = match (&e.user_id, &e.cookie_id) {
            (None, None) => {
                report.eliminated_no_ids += 1;
                continue;
            }
            (Some(user), _) => user.clone(),
            (None, Some(cookie)) => match map.users_of(cookie) {
                Some(users) if users.len() > 1 => {
                    report.eliminated_ambiguous += 1;
                    continue;
                }
                Some(users) => {
                    report.backfilled_from_map += 1;
                    users.iter().next().expect("non-empty user set").clone()
                }
                None => {
                    report.cookie_only += 1;
                    cookie.clone()
                }
            },
        };
        let mut e = e.clone();
        e.cust_id = Some(cust);
        out.push(e);
    }

    let cookies: BTreeSet<&str> = log.events().iter().filter_map(|e| e.cookie_id.as_deref()).collect();
    let multi = map.multi_user_cookies().filter(|c| cookies.contains(c)).count();
    report.multi_user_cookie_fraction = if cookies.is_empty() {
        0.0
    } else {
        multi as f64 / cookies.len() as f64
    };
    (EventLog::from_subset(out, log.metadata().clone()), report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::*;
    use crate::model::EventType;

    fn ev(id: &str, cookie: Option<&str>, user: Option<&str>) -> Event {
        let mut e = action(id, EventType::Click, id.len() as i64, "x", "p");
        e.cust_id = None;
        e.cookie_id = cookie.map(Into::into);
        e.user_id = user.map(Into::into);
        e
    }

    fn map_of(pairs: &[(&str, &[&str])]) -> IdentityMap {
        IdentityMap {
            cookies: pairs
                .iter()
                .map(|(c, us)| (c.to_string(), us.iter().map(|u| u.to_string()).collect()))
                .collect(),
        }
    }

    #[test]
    fn map_collects_pairs() {
        let l = log(vec![
            ev("a", Some("c1"), Some("u1")),
            ev("b", Some("c1"), Some("u1")),
            ev("c", Some("c2"), None),
        ]);
        assert_eq!(build_identity_map(&l), map_of(&[("c1", &["u1"])]));

        let l = log(vec![ev("a", Some("c1"), Some("u1")), ev("b", Some("c1"), Some("u2"))]);
        assert_eq!(build_identity_map(&l), map_of(&[("c1", &["u1", "u2"])]));
    }

    #[test]
    fn pseudocode_paths() {
        let single = map_of(&[("c1", &["u1"])]);
        let shared = map_of(&[("c1", &["u1", "u2"])]);

        let (out, _) = resolve(&log(vec![ev("a", Some("c1"), Some("u1"))]), &single);
        assert_eq!(out.events()[0].cust_id.as_deref(), Some("u1"));

        let (out, r) = resolve(&log(vec![ev("a", Some("c1"), None)]), &single);
        assert_eq!(out.events()[0].cust_id.as_deref(), Some("u1"));
        assert_eq!(r.backfilled_from_map, 1);

        let (out, r) = resolve(&log(vec![ev("a", Some("c3"), None)]), &single);
        assert_eq!(out.events()[0].cust_id.as_deref(), Some("c3"));
        assert_eq!(r.cookie_only, 1);

        let (out, r) = resolve(&log(vec![ev("a", Some("c1"), None)]), &shared);
        assert!(out.is_empty());
        assert_eq!(r.eliminated_ambiguous, 1);
    }

    #[test]
    fn logged_in_rows_on_shared_cookie_survive() {
        let l = log(vec![
            ev("a", Some("c1"), Some("u1")),
            ev("bb", Some("c1"), Some("u2")),
            ev("ccc", Some("c1"), None),
        ]);
        let map = build_identity_map(&l);
        let (out, r) = resolve(&l, &map);
        assert_eq!(out.len(), 2);
        assert_eq!(r.eliminated_ambiguous, 1);
        assert_eq!(r.multi_user_cookie_fraction, 1.0);
    }

    #[test]
    fn rows_without_any_id_are_eliminated() {
        let l = EventLog::from_subset(vec![ev("a", None, None)], Default::default());
        let (out, r) = resolve(&l, &IdentityMap::default());
        assert!(out.is_empty());
        assert_eq!(r.eliminated_no_ids, 1);
    }

    #[test]
    fn resolve_is_idempotent() {
        let l = log(vec![
            ev("a", Some("c1"), None),
            ev("bb", Some("c1"), Some("u1")),
            ev("ccc", Some("c2"), None),
            ev("dddd", Some("c3"), Some("u2")),
            ev("eeeee", Some("c3"), Some("u3")),
            ev("ffffff", Some("c3"), None),
        ]);
        let (once, _) = resolve(&l, &build_identity_map(&l));
        let (twice, _) = resolve(&once, &build_identity_map(&once));
        assert_eq!(once, twice);
    }
}
