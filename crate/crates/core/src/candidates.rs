//! The candidate space handed to the optimizer: partitioned probe orders per
//! (query, start) and per (MIR, input), with interned steps and their costs.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{AttrRef, Query};
use crate::cost::{step_cost, CostContext, CostError};
use crate::mir::{enumerate_mirs, MirId, MirSet};
use crate::orders::{
    apply_partitioning, construct_probe_orders, prefixes, subquery_probe_orders, PartitionedOrder,
    StepKey, Target,
};
use crate::par::Execution;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CandId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StepId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupId(pub usize);

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GroupKey {
    Query { query: String, start: String },
    Subquery { mir: MirId, start: String },
}

impl GroupKey {
    pub fn start(&self) -> &str {
        match self {
            GroupKey::Query { start, .. } | GroupKey::Subquery { start, .. } => start,
        }
    }
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupKey::Query { query, start } => write!(f, "{query}/{start}"),
            GroupKey::Subquery { mir, start } => write!(f, "{mir}/{start}"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Group {
    pub id: GroupId,
    pub key: GroupKey,
    pub candidates: Vec<CandId>,
    /// Query groups must pick one candidate; subquery groups only when a
    /// selected candidate uses their MIR.
    pub required: bool,
}

#[derive(Clone, Debug)]
pub struct Candidate {
    pub id: CandId,
    pub group: GroupId,
    pub order: PartitionedOrder,
    /// One per hop, in order.
    pub steps: Vec<StepId>,
    pub pcost: f64,
    /// Subquery groups that must be served when this candidate is chosen:
    /// one per input relation of each materialized hop.
    pub requires: Vec<GroupId>,
}

#[derive(Clone, Debug)]
pub struct StepInfo {
    pub key: StepKey,
    pub cost: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BuildOptions {
    /// Allow MIR hops. Off means every hop is a base relation.
    pub materialize: bool,
    pub execution: Execution,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            materialize: true,
            execution: Execution::default(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CandidateError {
    #[error("no probe order covers {0}")]
    NoCandidates(String),
    #[error(transparent)]
    Cost(#[from] CostError),
}

#[derive(Clone, Debug)]
pub struct CandidateSet {
    pub mirs: MirSet,
    pub queries: Vec<Query>,
    pub groups: Vec<Group>,
    pub candidates: Vec<Candidate>,
    pub steps: Vec<StepInfo>,
    /// Partitioning choices actually offered per MIR; single-worker stores
    /// keep only their first candidate.
    pub partitionings: Vec<Vec<AttrRef>>,
    step_index: HashMap<StepKey, StepId>,
    subquery_groups: BTreeMap<(MirId, String), GroupId>,
}

impl CandidateSet {
    pub fn build(
        queries: &[Query],
        ctx: &CostContext,
        opts: BuildOptions,
    ) -> Result<Self, CandidateError> {
        let mirs = enumerate_mirs(queries);
        let partitionings: Vec<Vec<AttrRef>> = mirs
            .iter()
            .map(|m| {
                let all = mirs.candidates(m.id);
                if ctx.store_parallelism(&mirs, m.id) == 1 {
                    all.iter().take(1).cloned().collect()
                } else {
                    all.to_vec()
                }
            })
            .collect();

        let mut set = CandidateSet {
            mirs,
            queries: queries.to_vec(),
            groups: Vec::new(),
            candidates: Vec::new(),
            steps: Vec::new(),
            partitionings,
            step_index: HashMap::new(),
            subquery_groups: BTreeMap::new(),
        };

        let query_work: Vec<(usize, String)> = queries
            .iter()
            .enumerate()
            .flat_map(|(i, q)| q.relations().iter().map(move |s| (i, s.clone())))
            .collect();
        let generated = opts.execution.map(&query_work, |(i, start)| {
            let q = &queries[*i];
            let orders = construct_probe_orders(
                q.scope(),
                Target::Query(q.id.clone()),
                &set.mirs,
                start,
                opts.materialize,
            );
            let parted = apply_partitioning(&orders, |m| &set.partitionings[m.0]);
            parted
                .into_iter()
                .map(|o| {
                    let keys = prefixes(&o, q.scope(), &set.mirs);
                    (o, keys)
                })
                .collect::<Vec<_>>()
        });
        for ((i, start), orders) in query_work.iter().zip(generated) {
            let key = GroupKey::Query {
                query: queries[*i].id.clone(),
                start: start.clone(),
            };
            if orders.is_empty() {
                return Err(CandidateError::NoCandidates(key.to_string()));
            }
            set.add_group(key, true, orders, ctx)?;
        }

        // Subquery groups for every materialized hop, transitively.
        let mut pending: BTreeSet<MirId> = set.materialized_hops(0);
        let mut done: BTreeSet<MirId> = BTreeSet::new();
        while let Some(m) = pending.pop_first() {
            if !done.insert(m) {
                continue;
            }
            let first_new = set.candidates.len();
            let scope = set.mirs.get(m).scope.clone();
            for (start, orders) in subquery_probe_orders(m, &set.mirs, opts.materialize) {
                let parted = apply_partitioning(&orders, |h| &set.partitionings[h.0]);
                let with_keys: Vec<_> = parted
                    .into_iter()
                    .map(|o| {
                        let keys = prefixes(&o, &scope, &set.mirs);
                        (o, keys)
                    })
                    .collect();
                let key = GroupKey::Subquery {
                    mir: m,
                    start: start.clone(),
                };
                if with_keys.is_empty() {
                    return Err(CandidateError::NoCandidates(key.to_string()));
                }
                let g = set.add_group(key, false, with_keys, ctx)?;
                set.subquery_groups.insert((m, start), g);
            }
            pending.extend(set.materialized_hops(first_new).difference(&done));
        }

        for c in 0..set.candidates.len() {
            let mut requires = Vec::new();
            for h in set.candidates[c].order.base.hops.clone() {
                let mir = set.mirs.get(h);
                if mir.is_base() {
                    continue;
                }
                for r in mir.relations() {
                    requires.push(set.subquery_groups[&(h, r.clone())]);
                }
            }
            set.candidates[c].requires = requires;
        }
        Ok(set)
    }

    fn materialized_hops(&self, from: usize) -> BTreeSet<MirId> {
        self.candidates[from..]
            .iter()
            .flat_map(|c| c.order.base.hops.iter().copied())
            .filter(|h| !self.mirs.get(*h).is_base())
            .collect()
    }

    fn add_group(
        &mut self,
        key: GroupKey,
        required: bool,
        orders: Vec<(PartitionedOrder, Vec<StepKey>)>,
        ctx: &CostContext,
    ) -> Result<GroupId, CandidateError> {
        let gid = GroupId(self.groups.len());
        let mut members = Vec::with_capacity(orders.len());
        for (order, keys) in orders {
            let mut steps = Vec::with_capacity(keys.len());
            let mut pcost = 0.0;
            for k in keys {
                let sid = self.intern(k, ctx)?;
                pcost += self.steps[sid.0].cost;
                steps.push(sid);
            }
            let cid = CandId(self.candidates.len());
            self.candidates.push(Candidate {
                id: cid,
                group: gid,
                order,
                steps,
                pcost,
                requires: Vec::new(),
            });
            members.push(cid);
        }
        self.groups.push(Group {
            id: gid,
            key,
            candidates: members,
            required,
        });
        Ok(gid)
    }

    fn intern(&mut self, key: StepKey, ctx: &CostContext) -> Result<StepId, CandidateError> {
        if let Some(id) = self.step_index.get(&key) {
            return Ok(*id);
        }
        let cost = step_cost(&key, &self.mirs, ctx)?;
        let id = StepId(self.steps.len());
        self.step_index.insert(key.clone(), id);
        self.steps.push(StepInfo { key, cost });
        Ok(id)
    }

    pub fn step_id(&self, key: &StepKey) -> Option<StepId> {
        self.step_index.get(key).copied()
    }

    pub fn subquery_group(&self, mir: MirId, start: &str) -> Option<GroupId> {
        self.subquery_groups.get(&(mir, start.to_string())).copied()
    }

    pub fn group(&self, id: GroupId) -> &Group {
        &self.groups[id.0]
    }

    pub fn candidate(&self, id: CandId) -> &Candidate {
        &self.candidates[id.0]
    }

    pub fn query_group(&self, query: &str, start: &str) -> Option<&Group> {
        self.groups.iter().find(|g| {
            matches!(&g.key, GroupKey::Query { query: q, start: s } if q == query && s == start)
        })
    }

    /// Shorthand form such as `<R,S[b],T[c]>`.
    pub fn display(&self, id: CandId) -> String {
        self.candidates[id.0].order.display(&self.mirs)
    }

    /// Unpartitioned probe orders, counting each distinct (target, start, hops)
    /// once.
    pub fn unpartitioned_order_count(&self) -> usize {
        self.candidates
            .iter()
            .map(|c| &c.order.base)
            .collect::<std::collections::HashSet<_>>()
            .len()
    }

    /// The scope an order of this group has to cover.
    pub fn scope_of(&self, group: GroupId) -> &crate::catalog::JoinScope {
        match &self.groups[group.0].key {
            GroupKey::Query { query, .. } => self
                .queries
                .iter()
                .find(|q| &q.id == query)
                .expect("group of a known query")
                .scope(),
            GroupKey::Subquery { mir, .. } => &self.mirs.get(*mir).scope,
        }
    }
}
