//! Cardinality estimates and probe costs.
//!
//! A step sends the partial join of its head to the target store. Its cost is
//! the expected number of head tuples created by arrivals of the start
//! relation (a `1/k` share of the head's join size when the head has `k`
//! relations), times the fan-out `chi` of the target store.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{AttrRef, Catalog, JoinKey, JoinScope};
use crate::mir::{MirId, MirSet};
use crate::orders::{prefixes, PartitionedOrder, StepKey};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("missing statistic: {0}")]
    MissingStatistic(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsSource {
    Configured,
    Epoch(u64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Statistics {
    /// Tuples per tick.
    pub rates: BTreeMap<String, f64>,
    pub selectivities: BTreeMap<JoinKey, f64>,
    pub source: StatsSource,
}

impl Statistics {
    /// Rates from the relations; selectivities as configured, else the default
    /// `1 / max(1, rate_left * window_left)`.
    pub fn configured(catalog: &Catalog) -> Self {
        let rates: BTreeMap<String, f64> = catalog
            .relations()
            .values()
            .map(|r| (r.name.clone(), r.rate))
            .collect();
        let configured = catalog.configured_selectivities();
        let mut selectivities = BTreeMap::new();
        for q in catalog.queries() {
            for k in &q.scope().predicates {
                let s = configured.get(k).copied().unwrap_or_else(|| {
                    let left = &catalog.relations()[&k.left.relation];
                    default_selectivity(left.rate, left.window)
                });
                selectivities.insert(k.clone(), s);
            }
        }
        Self {
            rates,
            selectivities,
            source: StatsSource::Configured,
        }
    }
}

pub fn default_selectivity(rate: f64, window: u64) -> f64 {
    1.0 / (rate * window as f64).max(1.0)
}

/// Everything the cost model reads. Immutable per optimization round.
#[derive(Clone, Debug, PartialEq)]
pub struct CostContext {
    pub stats: Statistics,
    pub windows: BTreeMap<String, u64>,
    pub parallelism: BTreeMap<String, u32>,
}

impl CostContext {
    pub fn new(catalog: &Catalog, stats: Statistics) -> Self {
        Self {
            stats,
            windows: catalog
                .relations()
                .values()
                .map(|r| (r.name.clone(), r.window))
                .collect(),
            parallelism: catalog
                .relations()
                .values()
                .map(|r| (r.name.clone(), r.parallelism))
                .collect(),
        }
    }

    pub fn configured(catalog: &Catalog) -> Self {
        Self::new(catalog, Statistics::configured(catalog))
    }

    fn rate(&self, rel: &str) -> Result<f64, CostError> {
        self.stats
            .rates
            .get(rel)
            .copied()
            .ok_or_else(|| CostError::MissingStatistic(format!("rate of {rel}")))
    }

    fn window(&self, rel: &str) -> Result<u64, CostError> {
        self.windows
            .get(rel)
            .copied()
            .ok_or_else(|| CostError::MissingStatistic(format!("window of {rel}")))
    }

    pub fn selectivity(&self, key: &JoinKey) -> Result<f64, CostError> {
        if let Some(s) = self.stats.selectivities.get(key) {
            return Ok(*s);
        }
        let rel = &key.left.relation;
        Ok(default_selectivity(self.rate(rel)?, self.window(rel)?))
    }

    /// A MIR store runs with the largest parallelism among its relations.
    pub fn store_parallelism(&self, mirs: &MirSet, mir: MirId) -> u32 {
        mirs.get(mir)
            .relations()
            .iter()
            .filter_map(|r| self.parallelism.get(r))
            .copied()
            .max()
            .unwrap_or(1)
    }
}

/// Product of `rate * window` over relations times the product of
/// selectivities.
pub fn estimate_cardinality(
    relations: &BTreeSet<String>,
    predicates: &BTreeSet<JoinKey>,
    ctx: &CostContext,
) -> Result<f64, CostError> {
    let mut card = 1.0;
    for r in relations {
        card *= ctx.rate(r)? * ctx.window(r)? as f64;
    }
    for p in predicates {
        card *= ctx.selectivity(p)?;
    }
    Ok(card)
}

/// 1 when a predicate equates a head attribute with the partitioning
/// attribute, otherwise the target store's parallelism.
pub fn chi(
    target_parallelism: u32,
    partition: &AttrRef,
    head: &BTreeSet<String>,
    predicates: &BTreeSet<JoinKey>,
) -> u32 {
    if head.contains(&partition.relation) {
        return 1;
    }
    let known = predicates.iter().any(|p| {
        p.split(head)
            .is_some_and(|(_, outside)| outside == partition)
    });
    if known {
        1
    } else {
        target_parallelism
    }
}

pub fn step_cost(step: &StepKey, mirs: &MirSet, ctx: &CostContext) -> Result<f64, CostError> {
    let head = step.head(mirs);
    let head_preds: BTreeSet<JoinKey> = step
        .predicates
        .iter()
        .filter(|p| p.within(&head))
        .cloned()
        .collect();
    let card = estimate_cardinality(&head, &head_preds, ctx)?;
    let (target, partition) = step.target();
    let fanout = chi(
        ctx.store_parallelism(mirs, target),
        partition,
        &head,
        &step.predicates,
    );
    Ok(card / head.len() as f64 * fanout as f64)
}

pub fn probe_order_cost(
    order: &PartitionedOrder,
    scope: &JoinScope,
    mirs: &MirSet,
    ctx: &CostContext,
) -> Result<f64, CostError> {
    prefixes(order, scope, mirs)
        .iter()
        .map(|s| step_cost(s, mirs, ctx))
        .sum()
}

/// Unshared cost of a query: the plain sum over one order per start.
pub fn query_pcost(
    orders: &[PartitionedOrder],
    scope: &JoinScope,
    mirs: &MirSet,
    ctx: &CostContext,
) -> Result<f64, CostError> {
    orders
        .iter()
        .map(|o| probe_order_cost(o, scope, mirs, ctx))
        .sum()
}

/// The two-query instance with pinned selectivities.
pub mod fixtures {
    use super::*;
    use crate::catalog::fixtures::{eq, rel};
    use crate::catalog::{validate_workload, Query, Relation};

    /// q1 = R(a),S(a,b),T(b), q2 = S(b),T(b,c),U(c); every store has one
    /// worker, S-T joins produce 150 tuples, the others 100.
    pub fn mqo_example() -> Catalog {
        let one = |r: Relation| Relation {
            parallelism: 1,
            ..r
        };
        let rels = vec![
            one(rel("R", &["a"])),
            one(rel("S", &["a", "b"])),
            one(rel("T", &["b", "c"])),
            one(rel("U", &["c"])),
        ];
        let q1 = Query::new(
            "q1",
            ["R", "S", "T"],
            [
                eq(("R", "a"), ("S", "a")).with_selectivity(0.01),
                eq(("S", "b"), ("T", "b")).with_selectivity(0.015),
            ],
        );
        let q2 = Query::new(
            "q2",
            ["S", "T", "U"],
            [
                eq(("S", "b"), ("T", "b")).with_selectivity(0.015),
                eq(("T", "c"), ("U", "c")).with_selectivity(0.01),
            ],
        );
        validate_workload(vec![q1, q2], rels).unwrap()
    }
}
