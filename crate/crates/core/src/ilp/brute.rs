//! Exhaustive reference optimizer.
//!
//! Enumerates one candidate per open group, opening subquery groups on
//! demand, and prices each complete combination by costing its distinct step
//! keys from scratch. Shares only the candidate space with the ILP path.
//! Step costs are nonnegative, so a branch whose committed steps already
//! cost no less than the best plan is dropped.

use std::collections::HashMap;

use thiserror::Error;

use super::plan::{PlanError, SelectedPlan};
use crate::candidates::{CandId, CandidateSet};
use crate::cost::{step_cost, CostContext, CostError};
use crate::orders::StepKey;

/// Search nodes visited before giving up.
pub const DEFAULT_BOUND: u64 = 10_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BruteError {
    #[error("more than {0} combinations")]
    TooLarge(u64),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Plan(#[from] PlanError),
}

struct Enumeration<'a> {
    set: &'a CandidateSet,
    ctx: &'a CostContext,
    choice: Vec<Option<CandId>>,
    demand: Vec<u32>,
    steps: HashMap<StepKey, u32>,
    costs: HashMap<StepKey, f64>,
    nodes: u64,
    partial: f64,
    bound: u64,
    best: Option<(f64, Vec<CandId>)>,
}

impl Enumeration<'_> {
    fn next_open(&self) -> Option<usize> {
        self.set
            .groups
            .iter()
            .position(|g| self.choice[g.id.0].is_none() && (g.required || self.demand[g.id.0] > 0))
    }

    fn cost(&mut self, key: &StepKey) -> Result<f64, BruteError> {
        if let Some(c) = self.costs.get(key) {
            return Ok(*c);
        }
        let c = step_cost(key, &self.set.mirs, self.ctx)?;
        self.costs.insert(key.clone(), c);
        Ok(c)
    }

    fn run(&mut self) -> Result<(), BruteError> {
        self.nodes += 1;
        if self.nodes > self.bound {
            return Err(BruteError::TooLarge(self.bound));
        }
        if let Some((b, _)) = &self.best {
            if self.partial >= b - 1e-9 * b.abs().max(1.0) {
                return Ok(());
            }
        }
        let Some(g) = self.next_open() else {
            let total: f64 = self.steps.keys().map(|k| self.costs[k]).sum();
            let better = match &self.best {
                None => true,
                Some((b, _)) => total < b - 1e-9 * b.abs().max(1.0),
            };
            if better {
                let chosen = self.choice.iter().flatten().copied().collect();
                self.best = Some((total, chosen));
            }
            return Ok(());
        };
        let set = self.set;
        for &c in &set.groups[g].candidates {
            let cand = set.candidate(c);
            self.choice[g] = Some(c);
            for s in &cand.steps {
                let key = &set.steps[s.0].key;
                let n = self.steps.entry(key.clone()).or_insert(0);
                *n += 1;
                if *n == 1 {
                    self.partial += self.cost(key)?;
                }
            }
            for h in &cand.requires {
                self.demand[h.0] += 1;
            }
            let r = self.run();
            for h in &cand.requires {
                self.demand[h.0] -= 1;
            }
            for s in &cand.steps {
                let key = &set.steps[s.0].key;
                let n = self.steps.get_mut(key).expect("counted on entry");
                *n -= 1;
                if *n == 0 {
                    self.steps.remove(key);
                    self.partial -= self.costs[key];
                }
            }
            self.choice[g] = None;
            r?;
        }
        Ok(())
    }
}

/// Cheapest shared plan by exhaustive enumeration; the earliest combination
/// wins ties.
pub fn brute_force_plan(
    set: &CandidateSet,
    ctx: &CostContext,
    bound: u64,
) -> Result<SelectedPlan, BruteError> {
    let mut e = Enumeration {
        set,
        ctx,
        choice: vec![None; set.groups.len()],
        demand: vec![0; set.groups.len()],
        steps: HashMap::new(),
        costs: HashMap::new(),
        nodes: 0,
        partial: 0.0,
        bound,
        best: None,
    };
    e.run()?;
    let (cost, chosen) = e.best.unwrap_or((0.0, Vec::new()));
    let mut plan = SelectedPlan::from_choices(set, chosen, ctx)?;
    plan.cost = cost;
    Ok(plan)
}
