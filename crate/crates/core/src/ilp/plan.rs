//! Selected plans: the orders a solution installs and the MIRs it
//! materializes.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use thiserror::Error;

use super::model::{fnv1a, IlpModel};
use super::solver::IlpSolution;
use crate::candidates::{CandId, CandidateSet, GroupKey};
use crate::catalog::{AttrRef, JoinScope, Query};
use crate::cost::{step_cost, CostContext, CostError};
use crate::mir::{enumerate_mirs, MirId, MirSet};
use crate::orders::{prefixes, PartitionedOrder, StepKey, Target};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("inconsistent solution: {0}")]
    InconsistentSolution(String),
    #[error(transparent)]
    Cost(#[from] CostError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaterializedMir {
    /// Every partitioning some selected order probes this MIR with.
    pub partitions: BTreeSet<AttrRef>,
    /// One order per input relation, shared by all partitionings.
    pub orders: BTreeMap<String, PartitionedOrder>,
}

#[derive(Clone, Debug)]
pub struct SelectedPlan {
    pub queries: Vec<Query>,
    pub mirs: MirSet,
    /// Keyed by (query, start relation).
    pub orders: BTreeMap<(String, String), PartitionedOrder>,
    pub materialized: BTreeMap<MirId, MaterializedMir>,
    /// Shared cost: every distinct step counted once.
    pub cost: f64,
}

impl SelectedPlan {
    /// Builds a plan from one candidate per query group plus any number of
    /// subquery candidates; the first subquery candidate per (MIR, input)
    /// wins. Cost is recomputed from the steps of the kept orders.
    pub fn from_choices(
        set: &CandidateSet,
        chosen: impl IntoIterator<Item = CandId>,
        ctx: &CostContext,
    ) -> Result<Self, PlanError> {
        let mut chosen: Vec<CandId> = chosen.into_iter().collect();
        chosen.sort();
        let mut orders = BTreeMap::new();
        let mut sub_choice: BTreeMap<(MirId, String), CandId> = BTreeMap::new();
        for c in &chosen {
            let cand = set.candidate(*c);
            match &set.group(cand.group).key {
                GroupKey::Query { query, start } => {
                    let key = (query.clone(), start.clone());
                    if orders.insert(key, cand.order.clone()).is_some() {
                        return Err(PlanError::InconsistentSolution(format!(
                            "two orders selected for {query}/{start}"
                        )));
                    }
                }
                GroupKey::Subquery { mir, start } => {
                    sub_choice.entry((*mir, start.clone())).or_insert(*c);
                }
            }
        }
        for q in &set.queries {
            for start in q.relations() {
                if !orders.contains_key(&(q.id.clone(), start.clone())) {
                    return Err(PlanError::InconsistentSolution(format!(
                        "no order selected for {}/{start}",
                        q.id
                    )));
                }
            }
        }

        let mut materialized: BTreeMap<MirId, MaterializedMir> = BTreeMap::new();
        let mut pending: Vec<(MirId, AttrRef)> = orders
            .values()
            .flat_map(|o: &PartitionedOrder| {
                o.hops().map(|(m, p)| (m, p.clone())).collect::<Vec<_>>()
            })
            .collect();
        while let Some((m, p)) = pending.pop() {
            let mir = set.mirs.get(m);
            if mir.is_base() {
                continue;
            }
            let first_visit = !materialized.contains_key(&m);
            let entry = materialized.entry(m).or_insert_with(|| MaterializedMir {
                partitions: BTreeSet::new(),
                orders: BTreeMap::new(),
            });
            entry.partitions.insert(p);
            if !first_visit {
                continue;
            }
            for r in mir.relations() {
                let Some(c) = sub_choice.get(&(m, r.clone())) else {
                    return Err(PlanError::InconsistentSolution(format!(
                        "{} is probed but has no order for input {r}",
                        mir.label
                    )));
                };
                let order = set.candidate(*c).order.clone();
                pending.extend(order.hops().map(|(h, hp)| (h, hp.clone())));
                entry.orders.insert(r.clone(), order);
            }
        }

        let mut plan = SelectedPlan {
            queries: set.queries.clone(),
            mirs: set.mirs.clone(),
            orders,
            materialized,
            cost: 0.0,
        };
        plan.cost = plan.recost(ctx)?;
        Ok(plan)
    }

    pub fn scope_of(&self, target: &Target) -> &JoinScope {
        match target {
            Target::Query(q) => self
                .queries
                .iter()
                .find(|x| &x.id == q)
                .expect("plan covers its queries")
                .scope(),
            Target::Mir(m) => &self.mirs.get(*m).scope,
        }
    }

    /// Every installed order: query orders first, then subquery orders.
    pub fn all_orders(&self) -> Vec<&PartitionedOrder> {
        let mut out: Vec<&PartitionedOrder> = self.orders.values().collect();
        for m in self.materialized.values() {
            out.extend(m.orders.values());
        }
        out
    }

    /// Distinct steps of all installed orders.
    pub fn steps(&self) -> Vec<StepKey> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for o in self.all_orders() {
            for s in prefixes(o, self.scope_of(&o.base.target), &self.mirs) {
                if seen.insert(s.clone()) {
                    out.push(s);
                }
            }
        }
        out
    }

    pub fn recost(&self, ctx: &CostContext) -> Result<f64, CostError> {
        self.steps()
            .iter()
            .map(|s| step_cost(s, &self.mirs, ctx))
            .sum()
    }

    pub fn step_costs(&self, ctx: &CostContext) -> Result<Vec<(StepKey, f64)>, CostError> {
        self.steps()
            .into_iter()
            .map(|s| {
                let c = step_cost(&s, &self.mirs, ctx)?;
                Ok((s, c))
            })
            .collect()
    }

    /// Structural check: one order per (query, start) and every probed MIR
    /// materialized with that partitioning and an order per input.
    pub fn validate(&self) -> Result<(), PlanError> {
        for q in &self.queries {
            for s in q.relations() {
                if !self.orders.contains_key(&(q.id.clone(), s.clone())) {
                    return Err(PlanError::InconsistentSolution(format!(
                        "missing order {}/{s}",
                        q.id
                    )));
                }
            }
        }
        for o in self.all_orders() {
            for (m, p) in o.hops() {
                let mir = self.mirs.get(m);
                if mir.is_base() {
                    continue;
                }
                let Some(mat) = self.materialized.get(&m) else {
                    return Err(PlanError::InconsistentSolution(format!(
                        "{} probed but not materialized",
                        mir.label
                    )));
                };
                if !mat.partitions.contains(p) {
                    return Err(PlanError::InconsistentSolution(format!(
                        "{} not materialized with partitioning {p}",
                        mir.label
                    )));
                }
                if mat.orders.len() != mir.relations().len() {
                    return Err(PlanError::InconsistentSolution(format!(
                        "{} lacks input orders",
                        mir.label
                    )));
                }
            }
        }
        Ok(())
    }

    /// No orders, no materializations.
    pub fn empty(queries: Vec<Query>) -> Self {
        Self {
            mirs: enumerate_mirs(&queries),
            queries,
            orders: BTreeMap::new(),
            materialized: BTreeMap::new(),
            cost: 0.0,
        }
    }

    /// The same orders over the MIR set of `queries`. Orders of queries not
    /// listed are dropped, then materializations no order reaches. Cost is
    /// recomputed; the result is not validated since listed queries may still
    /// lack orders.
    pub fn rebase(&self, queries: Vec<Query>, ctx: &CostContext) -> Result<Self, PlanError> {
        let mut plan = Self::empty(queries);
        let keep: BTreeSet<&str> = plan.queries.iter().map(|q| q.id.as_str()).collect();
        for ((q, start), o) in &self.orders {
            if keep.contains(q.as_str()) {
                if let Some(o) = remap_order(o, &self.mirs, &plan.mirs) {
                    plan.orders.insert((q.clone(), start.clone()), o);
                }
            }
        }
        for (m, mat) in &self.materialized {
            let Some(id) = plan.mirs.lookup(&self.mirs.get(*m).scope) else {
                continue;
            };
            let orders: Option<BTreeMap<_, _>> = mat
                .orders
                .iter()
                .map(|(r, o)| remap_order(o, &self.mirs, &plan.mirs).map(|o| (r.clone(), o)))
                .collect();
            if let Some(orders) = orders {
                plan.materialized.insert(
                    id,
                    MaterializedMir {
                        partitions: BTreeSet::new(),
                        orders,
                    },
                );
            }
        }
        plan.prune();
        plan.cost = plan.recost(ctx)?;
        Ok(plan)
    }

    /// Recomputes materialized partitions from the probes that reach each MIR
    /// and drops MIRs nothing probes.
    pub fn prune(&mut self) {
        let mut reached: BTreeMap<MirId, BTreeSet<AttrRef>> = BTreeMap::new();
        let mut pending: Vec<(MirId, AttrRef)> = self
            .orders
            .values()
            .flat_map(|o| o.hops().map(|(m, p)| (m, p.clone())).collect::<Vec<_>>())
            .collect();
        while let Some((m, p)) = pending.pop() {
            let Some(mat) = self.materialized.get(&m) else {
                continue;
            };
            let first = !reached.contains_key(&m);
            reached.entry(m).or_default().insert(p);
            if first {
                for o in mat.orders.values() {
                    pending.extend(o.hops().map(|(h, hp)| (h, hp.clone())));
                }
            }
        }
        self.materialized.retain(|m, _| reached.contains_key(m));
        for (m, parts) in reached {
            if let Some(mat) = self.materialized.get_mut(&m) {
                mat.partitions = parts;
            }
        }
    }

    /// Order-independent text form: equal for plans that route identically,
    /// whatever MIR numbering they use.
    pub fn canonical(&self) -> String {
        let mut lines: Vec<String> = self
            .orders
            .iter()
            .map(|((q, _), o)| format!("{q}: {}", o.display(&self.mirs)))
            .collect();
        for (m, mat) in &self.materialized {
            let scope = &self.mirs.get(*m).scope;
            let parts: Vec<String> = mat.partitions.iter().map(|p| p.to_string()).collect();
            let name = scope
                .predicates
                .iter()
                .map(|k| k.to_string())
                .collect::<Vec<_>>()
                .join("&");
            lines.push(format!("[{name}] partitioned {}", parts.join(",")));
            for o in mat.orders.values() {
                lines.push(format!("[{name}]: {}", o.display(&self.mirs)));
            }
        }
        lines.sort();
        lines.join("\n")
    }

    pub fn fingerprint(&self) -> u64 {
        fnv1a(self.canonical().as_bytes())
    }

    pub fn display_orders(&self) -> Vec<String> {
        self.all_orders()
            .iter()
            .map(|o| format!("{}: {}", o.base.target, o.display(&self.mirs)))
            .collect()
    }
}

/// Rewrites MIR ids between two MIR sets; `None` when a MIR has no
/// counterpart.
pub fn remap_order(o: &PartitionedOrder, from: &MirSet, to: &MirSet) -> Option<PartitionedOrder> {
    let mut o = o.clone();
    for h in &mut o.base.hops {
        *h = to.lookup(&from.get(*h).scope)?;
    }
    if let Target::Mir(m) = o.base.target {
        o.base.target = Target::Mir(to.lookup(&from.get(m).scope)?);
    }
    Some(o)
}

/// Reads the selected orders off a solution; the plan's recomputed cost must
/// equal the objective.
pub fn extract_plan(
    model: &IlpModel,
    solution: &IlpSolution,
    set: &CandidateSet,
    ctx: &CostContext,
) -> Result<SelectedPlan, PlanError> {
    let chosen = set
        .candidates
        .iter()
        .filter(|c| solution.value(model.x(c.id)))
        .map(|c| c.id);
    let plan = SelectedPlan::from_choices(set, chosen, ctx)?;
    let tol = 1e-9 * solution.objective.abs().max(1.0);
    if (plan.cost - solution.objective).abs() > tol {
        return Err(PlanError::InconsistentSolution(format!(
            "plan costs {} but the objective is {}",
            plan.cost, solution.objective
        )));
    }
    plan.validate()?;
    Ok(plan)
}
