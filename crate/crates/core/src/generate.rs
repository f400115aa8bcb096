//! Seeded synthetic workloads and traces.
//!
//! Every pair of relations has one potential join on a random attribute
//! pair. A query starts at a random relation and grows by random potential
//! joins to relations not yet in it. Trace values are drawn uniformly from a
//! domain of `ceil(1/selectivity)` values shared by all attributes a
//! predicate links, so a random pair matches with the configured selectivity.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{
    validate_workload, AttrRef, Catalog, CatalogError, JoinPredicate, Query, Relation,
};
use crate::cost::Statistics;
use crate::runtime::tuple::Event;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GenError {
    #[error("only {generated} distinct queries after {attempts} attempts, {requested} requested")]
    GenerationExhausted {
        generated: usize,
        requested: usize,
        attempts: usize,
    },
    #[error("invalid generator configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkloadConfig {
    pub n_relations: usize,
    pub attrs_per_relation: usize,
    pub n_queries: usize,
    pub query_size: usize,
    pub rate: f64,
    pub window: u64,
    pub parallelism: u32,
    pub seed: u64,
    /// Attempts per requested query before giving up.
    pub retry_factor: usize,
    /// Return fewer queries instead of failing when attempts run out.
    pub allow_fewer: bool,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            n_relations: 10,
            attrs_per_relation: 3,
            n_queries: 10,
            query_size: 3,
            rate: 100.0,
            window: 1,
            parallelism: 4,
            seed: 1,
            retry_factor: 50,
            allow_fewer: false,
        }
    }
}

pub fn relation_name(i: usize) -> String {
    format!("r{i}")
}

pub fn attribute_name(i: usize) -> String {
    format!("a{i}")
}

pub fn gen_workload(cfg: &WorkloadConfig) -> Result<Catalog, GenError> {
    if cfg.n_relations < 2 || cfg.attrs_per_relation == 0 || cfg.query_size < 2 {
        return Err(GenError::InvalidConfig(
            "need at least two relations, one attribute and query size two".into(),
        ));
    }
    if cfg.query_size > cfg.n_relations {
        return Err(GenError::InvalidConfig(format!(
            "query size {} exceeds {} relations",
            cfg.query_size, cfg.n_relations
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let relations: Vec<Relation> = (0..cfg.n_relations)
        .map(|i| Relation {
            name: relation_name(i),
            attributes: (0..cfg.attrs_per_relation).map(attribute_name).collect(),
            rate: cfg.rate,
            window: cfg.window,
            parallelism: cfg.parallelism,
        })
        .collect();
    let selectivity = 1.0 / cfg.rate.max(1.0);

    let mut joins: HashMap<(usize, usize), (usize, usize)> = HashMap::new();
    for i in 0..cfg.n_relations {
        for j in i + 1..cfg.n_relations {
            let a = rng.gen_range(0..cfg.attrs_per_relation);
            let b = rng.gen_range(0..cfg.attrs_per_relation);
            joins.insert((i, j), (a, b));
        }
    }

    let mut queries: Vec<Query> = Vec::new();
    let budget = cfg.n_queries.saturating_mul(cfg.retry_factor.max(1));
    let mut attempts = 0;
    while queries.len() < cfg.n_queries {
        if attempts == budget {
            if cfg.allow_fewer {
                break;
            }
            return Err(GenError::GenerationExhausted {
                generated: queries.len(),
                requested: cfg.n_queries,
                attempts,
            });
        }
        attempts += 1;
        let mut members = vec![rng.gen_range(0..cfg.n_relations)];
        let mut preds = Vec::new();
        while members.len() < cfg.query_size {
            let mut options = Vec::new();
            for &m in &members {
                for o in 0..cfg.n_relations {
                    if !members.contains(&o) {
                        options.push((m, o));
                    }
                }
            }
            let &(m, o) = options
                .choose(&mut rng)
                .expect("query smaller than relation count");
            let (lo, hi) = (m.min(o), m.max(o));
            let (a, b) = joins[&(lo, hi)];
            preds.push(
                JoinPredicate::new(
                    AttrRef::new(relation_name(lo), attribute_name(a)),
                    AttrRef::new(relation_name(hi), attribute_name(b)),
                )
                .with_selectivity(selectivity),
            );
            members.push(o);
        }
        let q = Query::new(
            format!("q{}", queries.len() + 1),
            members.iter().map(|m| relation_name(*m)),
            preds,
        );
        if !queries.iter().any(|k| k.same_shape(&q)) {
            queries.push(q);
        }
    }
    Ok(validate_workload(queries, relations)?)
}

/// Domain size per attribute: attributes linked by predicates share one
/// domain sized by the smallest selectivity among those predicates.
pub fn value_domains(catalog: &Catalog, stats: &Statistics) -> BTreeMap<AttrRef, u64> {
    let mut parent: BTreeMap<AttrRef, AttrRef> = BTreeMap::new();
    fn find(p: &mut BTreeMap<AttrRef, AttrRef>, a: &AttrRef) -> AttrRef {
        let mut r = a.clone();
        while let Some(n) = p.get(&r) {
            if n == &r {
                break;
            }
            r = n.clone();
        }
        r
    }
    for r in catalog.relations().values() {
        for a in &r.attributes {
            let x = AttrRef::new(r.name.clone(), a.clone());
            parent.insert(x.clone(), x);
        }
    }
    let mut min_sel: BTreeMap<AttrRef, f64> = BTreeMap::new();
    for (k, s) in &stats.selectivities {
        let (a, b) = (find(&mut parent, &k.left), find(&mut parent, &k.right));
        if a != b {
            parent.insert(a.clone(), b.clone());
            let sa = min_sel.remove(&a).unwrap_or(1.0);
            let e = min_sel.entry(b).or_insert(1.0);
            *e = e.min(sa).min(*s);
        } else {
            let e = min_sel.entry(a).or_insert(1.0);
            *e = e.min(*s);
        }
    }
    let attrs: Vec<AttrRef> = parent.keys().cloned().collect();
    attrs
        .into_iter()
        .map(|a| {
            let root = find(&mut parent, &a);
            let s = min_sel.get(&root).copied().unwrap_or_else(|| {
                let r = &catalog.relations()[&a.relation];
                crate::cost::default_selectivity(r.rate, r.window)
            });
            let d = (1.0 / s.max(1e-12)).ceil().max(1.0) as u64;
            (a, d)
        })
        .collect()
}

/// `floor((t+1) * rate) - floor(t * rate)` arrivals per relation at tick `t`,
/// values uniform over each attribute's domain. Events come sorted by
/// (tick, relation, sequence).
pub fn gen_trace(catalog: &Catalog, duration: u64, seed: u64) -> Vec<Event> {
    gen_trace_with(catalog, &Statistics::configured(catalog), duration, seed)
}

pub fn gen_trace_with(
    catalog: &Catalog,
    stats: &Statistics,
    duration: u64,
    seed: u64,
) -> Vec<Event> {
    let domains = value_domains(catalog, stats);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let used: BTreeSet<&String> = catalog
        .queries()
        .iter()
        .flat_map(|q| q.relations().iter())
        .collect();
    let mut events = Vec::new();
    let mut seq = 0u64;
    for t in 0..duration {
        for rel in catalog.relations().values() {
            if !used.contains(&rel.name) {
                continue;
            }
            let rate = stats.rates.get(&rel.name).copied().unwrap_or(rel.rate);
            let n = ((t + 1) as f64 * rate).floor() as u64 - (t as f64 * rate).floor() as u64;
            for _ in 0..n {
                let attrs = rel
                    .attributes
                    .iter()
                    .map(|a| {
                        let d = domains[&AttrRef::new(rel.name.clone(), a.clone())];
                        (a.clone(), format!("v{}", rng.gen_range(0..d)))
                    })
                    .collect();
                events.push(Event {
                    rel: rel.name.clone(),
                    ts: t,
                    attrs,
                    seq,
                });
                seq += 1;
            }
        }
    }
    events
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn workloads_are_deterministic_and_connected() {
        let cfg = WorkloadConfig {
            n_queries: 100,
            ..Default::default()
        };
        let a = gen_workload(&cfg).unwrap();
        let b = gen_workload(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.queries().len(), 100);
        for q in a.queries() {
            assert_eq!(q.relations().len(), 3);
            assert!(q.is_connected(q.relations()));
        }
    }

    #[test]
    fn small_space_is_exhausted() {
        let cfg = WorkloadConfig {
            n_relations: 3,
            n_queries: 10,
            ..Default::default()
        };
        assert!(matches!(
            gen_workload(&cfg),
            Err(GenError::GenerationExhausted { generated: 3, .. })
        ));
        let fewer = gen_workload(&WorkloadConfig {
            allow_fewer: true,
            ..cfg
        })
        .unwrap();
        assert_eq!(fewer.queries().len(), 3);
    }

    #[test]
    fn trace_schedule_and_determinism() {
        let cfg = WorkloadConfig {
            n_relations: 3,
            n_queries: 1,
            rate: 10.0,
            ..Default::default()
        };
        let c = gen_workload(&cfg).unwrap();
        let t = gen_trace(&c, 10, 7);
        let per_rel = t.iter().filter(|e| e.rel == "r0").count();
        assert_eq!(per_rel, 100);
        assert_eq!(t, gen_trace(&c, 10, 7));
        assert_ne!(t, gen_trace(&c, 10, 8));
    }

    #[test]
    fn empirical_selectivity_near_configured() {
        let cfg = WorkloadConfig {
            n_relations: 2,
            n_queries: 1,
            query_size: 2,
            rate: 20.0,
            ..Default::default()
        };
        let c = gen_workload(&cfg).unwrap();
        let q = &c.queries()[0];
        let p = &q.predicates[0];
        let trace = gen_trace(&c, 50, 3);
        let left: Vec<&String> = trace
            .iter()
            .filter(|e| e.rel == p.left.relation)
            .map(|e| &e.attrs[&p.left.attribute])
            .collect();
        let right: Vec<&String> = trace
            .iter()
            .filter(|e| e.rel == p.right.relation)
            .map(|e| &e.attrs[&p.right.attribute])
            .collect();
        let mut counts: HashMap<&String, u64> = HashMap::new();
        for v in &right {
            *counts.entry(v).or_default() += 1;
        }
        let matches: u64 = left
            .iter()
            .map(|v| counts.get(v).copied().unwrap_or(0))
            .sum();
        let pairs = (left.len() * right.len()) as f64;
        assert!(pairs >= 1e4);
        let observed = matches as f64 / pairs;
        let s = p.selectivity.unwrap();
        assert!(
            (observed - s).abs() <= 0.2 * s,
            "observed {observed}, configured {s}"
        );
    }
}
