//! Reference semantics: nested loops over the trace.
//!
//! Each arriving tuple joins every combination of earlier tuples, one per
//! other relation of the query, that satisfies all predicates and, for every
//! pair, `newer.ts - older.ts <= window(older)`. Results carry the arriving
//! tuple's timestamp.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tuple::{sort_events, Event, JoinResult, TupleRef};
use crate::catalog::{Catalog, Query};

pub fn oracle_join(catalog: &Catalog, queries: &[Query], trace: &[Event]) -> Vec<JoinResult> {
    let mut events = trace.to_vec();
    sort_events(&mut events);
    let window = |rel: &str| catalog.relation(rel).map_or(0, |r| r.window);
    let w_max = catalog
        .relations()
        .values()
        .map(|r| r.window)
        .max()
        .unwrap_or(0);
    let mut by_rel: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, e) in events.iter().enumerate() {
        by_rel.entry(e.rel.as_str()).or_default().push(i);
    }
    let mut out = Vec::new();
    for q in queries {
        let rels: Vec<&String> = q.relations().iter().collect();
        for (i, u) in events.iter().enumerate() {
            if !q.relations().contains(&u.rel) {
                continue;
            }
            let others: Vec<&str> = rels
                .iter()
                .filter(|r| **r != &u.rel)
                .map(|r| r.as_str())
                .collect();
            let mut chosen = vec![i];
            let scope = Scope {
                newest: i,
                oldest_ts: u.ts.saturating_sub(w_max),
            };
            enumerate(
                &events,
                &by_rel,
                q,
                &others,
                scope,
                &window,
                &mut chosen,
                &mut |combo| {
                    let mut tuples: Vec<TupleRef> = combo
                        .iter()
                        .map(|&j| TupleRef {
                            rel: events[j].rel.clone(),
                            ts: events[j].ts,
                            seq: events[j].seq,
                        })
                        .collect();
                    tuples.sort();
                    out.push(JoinResult {
                        query: q.id.clone(),
                        ts: u.ts,
                        tuples,
                    });
                },
            );
        }
    }
    out.sort();
    out
}

/// Candidates are trace positions before `newest` with `ts >= oldest_ts`;
/// anything older fails every window.
#[derive(Clone, Copy)]
struct Scope {
    newest: usize,
    oldest_ts: u64,
}

#[allow(clippy::too_many_arguments)]
fn enumerate(
    events: &[Event],
    by_rel: &BTreeMap<&str, Vec<usize>>,
    q: &Query,
    others: &[&str],
    scope: Scope,
    window: &impl Fn(&str) -> u64,
    chosen: &mut Vec<usize>,
    emit: &mut impl FnMut(&[usize]),
) {
    let Some((rel, rest)) = others.split_first() else {
        emit(chosen);
        return;
    };
    let Some(cands) = by_rel.get(rel) else {
        return;
    };
    let first = cands.partition_point(|&j| events[j].ts < scope.oldest_ts);
    for &j in &cands[first..] {
        if j >= scope.newest {
            break;
        }
        let v = &events[j];
        let fits = chosen.iter().all(|&c| {
            let w = &events[c];
            let windowed = if w.ts >= v.ts {
                w.ts - v.ts <= window(&v.rel)
            } else {
                v.ts - w.ts <= window(&w.rel)
            };
            windowed
                && q.predicates.iter().all(|p| {
                    let pair = if p.left.relation == v.rel && p.right.relation == w.rel {
                        Some((&p.left.attribute, &p.right.attribute))
                    } else if p.right.relation == v.rel && p.left.relation == w.rel {
                        Some((&p.right.attribute, &p.left.attribute))
                    } else {
                        None
                    };
                    pair.is_none_or(|(a, b)| v.attrs.get(a) == w.attrs.get(b))
                })
        });
        if fits {
            chosen.push(j);
            enumerate(events, by_rel, q, rest, scope, window, chosen, emit);
            chosen.pop();
        }
    }
}

/// When results of a query count: from `from` on, before `until`, and only
/// for constituents of each listed relation at or after the given tick.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lifetime {
    pub query: String,
    pub from: u64,
    pub until: Option<u64>,
    pub complete_from: BTreeMap<String, u64>,
}

impl Lifetime {
    pub fn covers(&self, r: &JoinResult) -> bool {
        r.query == self.query
            && r.ts >= self.from
            && self.until.is_none_or(|u| r.ts < u)
            && r.tuples.iter().all(|t| {
                self.complete_from
                    .get(&t.rel)
                    .is_none_or(|from| t.ts >= *from)
            })
    }
}

/// Results some lifetime covers.
pub fn restrict(results: &[JoinResult], lifetimes: &[Lifetime]) -> Vec<JoinResult> {
    results
        .iter()
        .filter(|r| lifetimes.iter().any(|l| l.covers(r)))
        .cloned()
        .collect()
}
