//! Helpers shared by the integration test targets.

use probejoin::cost::CostContext;
use probejoin::ilp::SelectedPlan;
use probejoin::orders::{apply_partitioning, construct_probe_orders, Target};

/// A plan with one (query, start) order replaced by another base-only order.
pub fn alternative(plan: &SelectedPlan, ctx: &CostContext) -> Option<SelectedPlan> {
    for ((q, start), current) in &plan.orders {
        let query = plan.queries.iter().find(|x| &x.id == q)?;
        let orders = construct_probe_orders(
            query.scope(),
            Target::Query(q.clone()),
            &plan.mirs,
            start,
            false,
        );
        let shown = current.display(&plan.mirs);
        let other = apply_partitioning(&orders, |m| plan.mirs.candidates(m))
            .into_iter()
            .find(|o| o.display(&plan.mirs) != shown);
        if let Some(o) = other {
            let mut p = plan.clone();
            p.orders.insert((q.clone(), start.clone()), o);
            p.prune();
            p.cost = p.recost(ctx).ok()?;
            return Some(p);
        }
    }
    None
}
