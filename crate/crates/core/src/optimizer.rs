//! One optimization round: candidates, model, solve, plan.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::candidates::{BuildOptions, CandidateError, CandidateSet};
use crate::catalog::Query;
use crate::cost::{CostContext, CostError};
use crate::ilp::{
    build_ilp, extract_plan, remap_order, solve, IlpModel, MaterializedMir, PlanError,
    SelectedPlan, SolveError, SolveStatus, DEFAULT_TIME_LIMIT,
};
use crate::mir::enumerate_mirs;
use crate::orders::PartitionedOrder;
use crate::par::Execution;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Shared,
    Individual,
}

#[derive(Clone, Copy, Debug)]
pub struct OptimizeOptions {
    pub mode: Mode,
    pub materialize: bool,
    pub time_limit: Duration,
    pub execution: Execution,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        Self {
            mode: Mode::Shared,
            materialize: true,
            time_limit: DEFAULT_TIME_LIMIT,
            execution: Execution::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error(transparent)]
    Candidates(#[from] CandidateError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Cost(#[from] CostError),
}

#[derive(Debug)]
pub struct Optimized {
    pub plan: SelectedPlan,
    /// Shared mode: the ILP objective. Individual mode: the sum of the
    /// per-query optima, with no sharing between queries.
    pub objective: f64,
    pub status: SolveStatus,
    pub variables: usize,
    pub probe_orders: usize,
    pub elapsed: Duration,
    /// Shared mode only.
    pub model: Option<IlpModel>,
}

fn build_opts(opts: &OptimizeOptions) -> BuildOptions {
    BuildOptions {
        materialize: opts.materialize,
        execution: opts.execution,
    }
}

pub fn optimize(
    queries: &[Query],
    ctx: &CostContext,
    opts: OptimizeOptions,
) -> Result<Optimized, OptimizeError> {
    match opts.mode {
        Mode::Shared => optimize_shared(queries, ctx, opts),
        Mode::Individual => optimize_individual(queries, ctx, opts),
    }
}

fn optimize_shared(
    queries: &[Query],
    ctx: &CostContext,
    opts: OptimizeOptions,
) -> Result<Optimized, OptimizeError> {
    let started = Instant::now();
    let set = CandidateSet::build(queries, ctx, build_opts(&opts))?;
    let model = build_ilp(&set);
    let solution = solve(&model, opts.time_limit)?;
    let plan = extract_plan(&model, &solution, &set, ctx)?;
    Ok(Optimized {
        objective: solution.objective,
        status: solution.status,
        variables: model.vars.len(),
        probe_orders: set.unpartitioned_order_count(),
        elapsed: started.elapsed(),
        plan,
        model: Some(model),
    })
}

fn optimize_individual(
    queries: &[Query],
    ctx: &CostContext,
    opts: OptimizeOptions,
) -> Result<Optimized, OptimizeError> {
    let started = Instant::now();
    let single = OptimizeOptions {
        mode: Mode::Shared,
        execution: Execution::Sequential,
        ..opts
    };
    let results = opts.execution.map(queries, |q| {
        optimize_shared(std::slice::from_ref(q), ctx, single)
    });
    let mut parts = Vec::with_capacity(results.len());
    for r in results {
        parts.push(r?);
    }
    let objective = parts.iter().map(|p| p.objective).sum();
    let status = if parts.iter().all(|p| p.status == SolveStatus::Optimal) {
        SolveStatus::Optimal
    } else {
        SolveStatus::Timeout
    };
    let variables = parts.iter().map(|p| p.variables).sum();
    let probe_orders = parts.iter().map(|p| p.probe_orders).sum();
    let plans: Vec<SelectedPlan> = parts.into_iter().map(|p| p.plan).collect();
    let plan = merge_plans(queries, &plans, ctx)?;
    Ok(Optimized {
        plan,
        objective,
        status,
        variables,
        probe_orders,
        elapsed: started.elapsed(),
        model: None,
    })
}

/// Unions per-query plans over one MIR set. Subquery orders of a MIR come
/// from the first plan that materializes it.
pub fn merge_plans(
    queries: &[Query],
    plans: &[SelectedPlan],
    ctx: &CostContext,
) -> Result<SelectedPlan, OptimizeError> {
    let mirs = enumerate_mirs(queries);
    let remap = |plan: &SelectedPlan, o: &PartitionedOrder| -> PartitionedOrder {
        remap_order(o, &plan.mirs, &mirs).expect("every per-query MIR is a workload MIR")
    };
    let mut orders = BTreeMap::new();
    let mut materialized: BTreeMap<_, MaterializedMir> = BTreeMap::new();
    for plan in plans {
        for (k, o) in &plan.orders {
            orders.insert(k.clone(), remap(plan, o));
        }
        for (m, mat) in &plan.materialized {
            let id = mirs
                .lookup(&plan.mirs.get(*m).scope)
                .expect("every per-query MIR is a workload MIR");
            let entry = materialized.entry(id).or_insert_with(|| MaterializedMir {
                partitions: Default::default(),
                orders: mat
                    .orders
                    .iter()
                    .map(|(r, o)| (r.clone(), remap(plan, o)))
                    .collect(),
            });
            entry.partitions.extend(mat.partitions.iter().cloned());
        }
    }
    let mut plan = SelectedPlan {
        queries: queries.to_vec(),
        mirs,
        orders,
        materialized,
        cost: 0.0,
    };
    plan.cost = plan.recost(ctx)?;
    plan.validate()?;
    Ok(plan)
}
