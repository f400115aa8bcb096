//! Exact depth-first branch-and-bound for models produced by `build_ilp`.
//!
//! Step variables are implied: a step is paid iff some selected order contains
//! it. The search assigns one candidate per open group.
//!
//! Bounds come from per-required-group trees: a tree holds one copy of every
//! subquery group the group may trigger, and each copy carries a multiplier
//! per step it could use. While the multipliers of a step sum to at most its
//! cost, the cheapest tree per required group, summed, bounds the unpaid cost.
//! Subgradient optimization sets the multipliers once per component. During
//! the search, open groups that share no unpaid step or triggered group are
//! completed independently, each class taking over the unclaimed cost of its
//! steps. Bounds round up to the coarsest common quantum of the step costs.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use super::model::{IlpModel, RowKind, VarId, VarKind};
use crate::candidates::GroupId;

pub const DEFAULT_TIME_LIMIT: Duration = Duration::from_secs(10);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    Timeout,
}

#[derive(Clone, Debug)]
pub struct IlpSolution {
    pub values: Vec<bool>,
    pub objective: f64,
    pub status: SolveStatus,
    pub nodes: u64,
    pub elapsed: Duration,
}

impl IlpSolution {
    pub fn value(&self, v: VarId) -> bool {
        self.values[v.0]
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("model is infeasible: {0}")]
    Infeasible(String),
    #[error("solver produced an assignment violating rows {0:?}")]
    InvalidSolution(Vec<usize>),
}

struct Group {
    cands: Vec<u32>,
    required: bool,
}

struct Problem {
    groups: Vec<Group>,
    cand_var: Vec<VarId>,
    cand_group: Vec<u32>,
    cand_steps: Vec<Vec<u32>>,
    cand_trig: Vec<Vec<u32>>,
    step_cost: Vec<f64>,
    step_var: Vec<VarId>,
    /// Distinct steps over a group's candidates.
    group_steps: Vec<Vec<u32>>,
    /// Candidate steps as positions in the group's `group_steps`.
    cand_local: Vec<Vec<u32>>,
}

impl Problem {
    fn from_model(model: &IlpModel) -> Result<Self, SolveError> {
        let mut cand_of_var: Vec<Option<u32>> = vec![None; model.vars.len()];
        let mut cand_var = Vec::new();
        for (i, v) in model.vars.iter().enumerate() {
            if let VarKind::Order(_) = v.kind {
                cand_of_var[i] = Some(cand_var.len() as u32);
                cand_var.push(VarId(i));
            }
        }
        let mut step_of_var: Vec<Option<u32>> = vec![None; model.vars.len()];
        let mut step_var = Vec::new();
        let mut step_cost = Vec::new();
        for (v, c) in &model.goal {
            step_of_var[v.0] = Some(step_var.len() as u32);
            step_var.push(*v);
            step_cost.push(*c);
        }

        let n = cand_var.len();
        let mut cand_group = vec![u32::MAX; n];
        let mut cand_steps = vec![Vec::new(); n];
        let mut cand_trig = vec![Vec::new(); n];
        let mut groups: Vec<Group> = Vec::new();
        let mut group_of_key: HashMap<GroupId, u32> = HashMap::new();

        let mut register =
            |key: GroupId, members: Vec<u32>, required: bool, groups: &mut Vec<Group>| {
                let id = *group_of_key.entry(key).or_insert_with(|| {
                    groups.push(Group {
                        cands: members.clone(),
                        required,
                    });
                    groups.len() as u32 - 1
                });
                groups[id as usize].required |= required;
                id
            };

        for row in &model.rows {
            match row.kind {
                RowKind::OneOf { group } => {
                    let members = row
                        .coeffs
                        .iter()
                        .filter_map(|(v, _)| cand_of_var[v.0])
                        .collect();
                    register(group, members, true, &mut groups);
                }
                RowKind::Subquery { group, .. } => {
                    let mut trigger = None;
                    let mut members = Vec::new();
                    for (v, c) in &row.coeffs {
                        let Some(k) = cand_of_var[v.0] else { continue };
                        if *c < 0.0 {
                            trigger = Some(k);
                        } else {
                            members.push(k);
                        }
                    }
                    let g = register(group, members, false, &mut groups);
                    if let Some(t) = trigger {
                        cand_trig[t as usize].push(g);
                    }
                }
                RowKind::Cost { .. } => {
                    let mut cand = None;
                    let mut steps = Vec::new();
                    for (v, c) in &row.coeffs {
                        if *c < 0.0 || cand_of_var[v.0].is_some() {
                            cand = cand_of_var[v.0];
                        } else if let Some(s) = step_of_var[v.0] {
                            steps.push(s);
                        }
                    }
                    if let Some(k) = cand {
                        cand_steps[k as usize] = steps;
                    }
                }
            }
        }
        for (gi, g) in groups.iter().enumerate() {
            for &k in &g.cands {
                cand_group[k as usize] = gi as u32;
            }
        }
        for t in &mut cand_trig {
            t.sort_unstable();
            t.dedup();
        }
        let mut group_steps = Vec::with_capacity(groups.len());
        let mut cand_local = vec![Vec::new(); n];
        for g in &groups {
            let mut steps: Vec<u32> = g
                .cands
                .iter()
                .flat_map(|k| cand_steps[*k as usize].iter().copied())
                .collect();
            steps.sort_unstable();
            steps.dedup();
            for &k in &g.cands {
                cand_local[k as usize] = cand_steps[k as usize]
                    .iter()
                    .map(|s| steps.binary_search(s).expect("own step") as u32)
                    .collect();
            }
            group_steps.push(steps);
        }
        Ok(Self {
            group_steps,
            cand_local,
            groups,
            cand_var,
            cand_group,
            cand_steps,
            cand_trig,
            step_cost,
            step_var,
        })
    }

    /// Groups linked by a shared step or a trigger, each list sorted.
    fn components(&self) -> Vec<Vec<u32>> {
        let n = self.groups.len();
        let mut parent: Vec<u32> = (0..n as u32).collect();
        fn find(p: &mut [u32], x: u32) -> u32 {
            let mut r = x;
            while p[r as usize] != r {
                r = p[r as usize];
            }
            let mut x = x;
            while p[x as usize] != r {
                let nx = p[x as usize];
                p[x as usize] = r;
                x = nx;
            }
            r
        }
        let mut owner: Vec<Option<u32>> = vec![None; self.step_cost.len()];
        for (gi, g) in self.groups.iter().enumerate() {
            for &k in &g.cands {
                for &s in &self.cand_steps[k as usize] {
                    match owner[s as usize] {
                        None => owner[s as usize] = Some(gi as u32),
                        Some(o) => {
                            let (a, b) = (find(&mut parent, o), find(&mut parent, gi as u32));
                            parent[a as usize] = b;
                        }
                    }
                }
                for &h in &self.cand_trig[k as usize] {
                    let (a, b) = (find(&mut parent, h), find(&mut parent, gi as u32));
                    parent[a as usize] = b;
                }
            }
        }
        let mut by_root: HashMap<u32, Vec<u32>> = HashMap::new();
        for g in 0..n as u32 {
            let r = find(&mut parent, g);
            by_root.entry(r).or_default().push(g);
        }
        let mut comps: Vec<Vec<u32>> = by_root.into_values().collect();
        comps.sort_by_key(|c| c[0]);
        comps
    }
}

/// One occurrence of a group in the trigger tree below a required group.
struct Copy {
    group: u32,
    /// (triggered group, child copy), sorted by group.
    children: Vec<(u32, u32)>,
    /// Offset of this copy's step multipliers in `Search::w`.
    off: usize,
}

struct Search<'a> {
    p: &'a Problem,
    comp: Vec<u32>,
    /// Position of each group in `comp`.
    slot: Vec<usize>,
    copies: Vec<Copy>,
    roots: Vec<u32>,
    /// Multiplier per (copy, group step). Summed over copies, a step's
    /// multipliers never exceed its cost.
    w: Vec<f64>,
    assign: Vec<i64>,
    demand: Vec<u32>,
    step_ref: Vec<u32>,
    paid: f64,
    best: f64,
    best_assign: Vec<i64>,
    /// Every feasible objective is a multiple of this, when positive.
    quantum: f64,
    nodes: u64,
    deadline: Instant,
    timed_out: bool,
}

const EPS: f64 = 1e-9;
const LAGRANGE_ITERS: usize = 20_000;
/// Non-improving iterations before the step size halves.
const LAGRANGE_PATIENCE: usize = 40;
const LAGRANGE_MIN_STEP: f64 = 1e-3;
const MAX_DESCENTS: usize = 50;

fn add_copy(p: &Problem, copies: &mut Vec<Copy>, off: &mut usize, g: u32) -> u32 {
    let id = copies.len() as u32;
    copies.push(Copy {
        group: g,
        children: Vec::new(),
        off: *off,
    });
    *off += p.group_steps[g as usize].len();
    let mut trig: Vec<u32> = p.groups[g as usize]
        .cands
        .iter()
        .flat_map(|k| p.cand_trig[*k as usize].iter().copied())
        .collect();
    trig.sort_unstable();
    trig.dedup();
    for t in trig {
        let c = add_copy(p, copies, off, t);
        copies[id as usize].children.push((t, c));
    }
    id
}

impl<'a> Search<'a> {
    fn new(p: &'a Problem, comp: Vec<u32>, deadline: Instant) -> Self {
        let n_groups = p.groups.len();
        let mut copies = Vec::new();
        let mut off = 0;
        let roots = comp
            .iter()
            .filter(|g| p.groups[**g as usize].required)
            .map(|g| add_copy(p, &mut copies, &mut off, *g))
            .collect();
        let mut slot = vec![usize::MAX; n_groups];
        for (i, g) in comp.iter().enumerate() {
            slot[*g as usize] = i;
        }
        Self {
            p,
            comp,
            slot,
            copies,
            roots,
            w: vec![0.0; off],
            assign: vec![-1; n_groups],
            demand: vec![0; n_groups],
            step_ref: vec![0; p.step_cost.len()],
            paid: 0.0,
            best: f64::INFINITY,
            best_assign: Vec::new(),
            quantum: 0.0,
            nodes: 0,
            deadline,
            timed_out: false,
        }
    }

    fn tol(&self) -> f64 {
        EPS * self.best.abs().max(1.0)
    }

    fn child(&self, c: u32, t: u32) -> u32 {
        let ch = &self.copies[c as usize].children;
        let i = ch
            .binary_search_by_key(&t, |x| x.0)
            .expect("trigger has a child copy");
        ch[i].1
    }

    fn apply(&mut self, k: u32) {
        let g = self.p.cand_group[k as usize];
        self.assign[g as usize] = k as i64;
        for &s in &self.p.cand_steps[k as usize] {
            if self.step_ref[s as usize] == 0 {
                self.paid += self.p.step_cost[s as usize];
            }
            self.step_ref[s as usize] += 1;
        }
        for &h in &self.p.cand_trig[k as usize] {
            self.demand[h as usize] += 1;
        }
    }

    fn undo(&mut self, k: u32) {
        let g = self.p.cand_group[k as usize];
        self.assign[g as usize] = -1;
        for &s in &self.p.cand_steps[k as usize] {
            self.step_ref[s as usize] -= 1;
            if self.step_ref[s as usize] == 0 {
                self.paid -= self.p.step_cost[s as usize];
            }
        }
        for &h in &self.p.cand_trig[k as usize] {
            self.demand[h as usize] -= 1;
        }
    }

    fn is_open(&self, g: u32) -> bool {
        self.assign[g as usize] < 0
            && (self.p.groups[g as usize].required || self.demand[g as usize] > 0)
    }

    fn marginal(&self, k: u32) -> f64 {
        self.p.cand_steps[k as usize]
            .iter()
            .filter(|s| self.step_ref[**s as usize] == 0)
            .map(|s| self.p.step_cost[*s as usize])
            .sum()
    }

    /// Tree minimum of every copy, children first. Assigned groups keep
    /// their candidate and paid steps are free.
    fn relaxed(&self, w: &[f64], val: &mut [f64], arg: &mut [u32]) {
        for c in (0..self.copies.len()).rev() {
            let cp = &self.copies[c];
            let steps = &self.p.group_steps[cp.group as usize];
            let a = self.assign[cp.group as usize];
            let fixed = [a as u32];
            let cands: &[u32] = if a >= 0 {
                &fixed
            } else {
                &self.p.groups[cp.group as usize].cands
            };
            let mut best = f64::INFINITY;
            let mut bk = u32::MAX;
            for &k in cands {
                let mut v = 0.0;
                for &j in &self.p.cand_local[k as usize] {
                    if self.step_ref[steps[j as usize] as usize] == 0 {
                        v += w[cp.off + j as usize];
                    }
                }
                for &t in &self.p.cand_trig[k as usize] {
                    v += val[self.child(c as u32, t) as usize];
                }
                if v < best {
                    best = v;
                    bk = k;
                }
            }
            val[c] = best;
            arg[c] = bk;
        }
    }

    /// Marks the multipliers a relaxed tree uses; with `choice`, also
    /// records the first candidate seen per group.
    fn mark_tree(&self, c: u32, arg: &[u32], used: &mut [bool], mut choice: Option<&mut [i64]>) {
        let cp = &self.copies[c as usize];
        let k = arg[c as usize];
        if k == u32::MAX {
            return;
        }
        for j in &self.p.cand_local[k as usize] {
            used[cp.off + *j as usize] = true;
        }
        if let Some(ch) = choice.as_deref_mut() {
            let slot = &mut ch[self.slot[cp.group as usize]];
            if *slot < 0 {
                *slot = k as i64;
            }
        }
        for &t in &self.p.cand_trig[k as usize] {
            self.mark_tree(self.child(c, t), arg, used, choice.as_deref_mut());
        }
    }

    /// Starting multipliers: each step's cost split evenly over the copies
    /// that can use it.
    fn even_split(&mut self) {
        let mut share = vec![0u32; self.p.step_cost.len()];
        for cp in &self.copies {
            for &s in &self.p.group_steps[cp.group as usize] {
                share[s as usize] += 1;
            }
        }
        for cp in &self.copies {
            for (j, &s) in self.p.group_steps[cp.group as usize].iter().enumerate() {
                self.w[cp.off + j] = self.p.step_cost[s as usize] / share[s as usize] as f64;
            }
        }
    }

    /// Subgradient optimization of the multipliers, with nothing assigned.
    /// Relaxing `y_s >= use` per copy leaves one independent tree problem
    /// per required group plus a penalty for every step whose multipliers
    /// exceed its cost. The best multipliers, scaled back to feasibility,
    /// replace `w`. Relaxed trees double as incumbents.
    fn lagrange(&mut self, iters: usize) {
        debug_assert!(self.comp.iter().all(|g| self.assign[*g as usize] < 0));
        let n = self.w.len();
        if n == 0 {
            return;
        }
        let p = self.p;
        let mut step_of = vec![0u32; n];
        let mut steps: Vec<u32> = Vec::new();
        let mut seen = vec![false; p.step_cost.len()];
        for cp in &self.copies {
            for (j, &s) in p.group_steps[cp.group as usize].iter().enumerate() {
                step_of[cp.off + j] = s;
                if !seen[s as usize] {
                    seen[s as usize] = true;
                    steps.push(s);
                }
            }
        }
        let mut w = self.w.clone();
        let mut val = vec![0.0; self.copies.len()];
        let mut arg = vec![u32::MAX; self.copies.len()];
        let mut load = vec![0.0f64; p.step_cost.len()];
        let mut over = vec![false; p.step_cost.len()];
        let mut used = vec![false; n];
        let mut grad = vec![0i8; n];
        let mut choice = vec![-1i64; self.comp.len()];
        let mut best_w = w.clone();
        let mut best_l = f64::NEG_INFINITY;
        let mut lambda = 1.0;
        let mut stall = 0;
        for it in 0..iters {
            if it % 16 == 0 && Instant::now() >= self.deadline {
                break;
            }
            self.relaxed(&w, &mut val, &mut arg);
            for &s in &steps {
                load[s as usize] = 0.0;
            }
            for i in 0..n {
                load[step_of[i] as usize] += w[i];
            }
            let mut l: f64 = self.roots.iter().map(|r| val[*r as usize]).sum();
            for &s in &steps {
                let excess = load[s as usize] - p.step_cost[s as usize];
                over[s as usize] = excess > 0.0;
                l -= excess.max(0.0);
            }
            if l > best_l + self.tol() {
                best_l = l;
                best_w.copy_from_slice(&w);
                stall = 0;
            } else {
                stall += 1;
                if stall >= LAGRANGE_PATIENCE {
                    lambda /= 2.0;
                    stall = 0;
                }
            }
            if self.round_up(best_l) >= self.best - self.tol() || lambda < LAGRANGE_MIN_STEP {
                break;
            }
            used.fill(false);
            let heuristic = it % 8 == 0;
            if heuristic {
                choice.fill(-1);
            }
            for &r in &self.roots {
                self.mark_tree(r, &arg, &mut used, heuristic.then_some(&mut choice[..]));
            }
            if heuristic {
                if let Some((c, fixed)) = self.evaluate(&choice) {
                    if c < self.best - self.tol() {
                        self.best = c;
                        self.best_assign = fixed.clone();
                    }
                    if it % 64 == 0 {
                        self.local_search(&fixed);
                    }
                }
            }
            let mut norm = 0usize;
            for i in 0..n {
                let g = used[i] as i8 - over[step_of[i] as usize] as i8;
                grad[i] = g;
                norm += (g * g) as usize;
            }
            if norm == 0 {
                break;
            }
            let t = lambda * (self.best - l).max(self.tol()) / norm as f64;
            for i in 0..n {
                if grad[i] != 0 {
                    w[i] = (w[i] + t * grad[i] as f64).max(0.0);
                }
            }
        }
        for &s in &steps {
            load[s as usize] = 0.0;
        }
        for i in 0..n {
            load[step_of[i] as usize] += best_w[i];
        }
        for i in 0..n {
            let s = step_of[i] as usize;
            if load[s] > p.step_cost[s] {
                best_w[i] *= p.step_cost[s] / load[s];
            }
        }
        self.w = best_w;
    }

    fn cand_value(&self, c: u32, k: u32) -> f64 {
        let cp = &self.copies[c as usize];
        let steps = &self.p.group_steps[cp.group as usize];
        let mut v = 0.0;
        for &j in &self.p.cand_local[k as usize] {
            if self.step_ref[steps[j as usize] as usize] == 0 {
                v += self.w[cp.off + j as usize];
            }
        }
        for &t in &self.p.cand_trig[k as usize] {
            v += self.inner(self.child(c, t));
        }
        v
    }

    fn copy_min(&self, c: u32) -> f64 {
        self.p.groups[self.copies[c as usize].group as usize]
            .cands
            .iter()
            .map(|k| self.cand_value(c, *k))
            .fold(f64::INFINITY, f64::min)
    }

    /// Lower bound on the unpaid cost of a copy's subtree.
    fn inner(&self, c: u32) -> f64 {
        let a = self.assign[self.copies[c as usize].group as usize];
        if a >= 0 {
            self.p.cand_trig[a as usize]
                .iter()
                .map(|t| self.inner(self.child(c, *t)))
                .sum()
        } else {
            self.copy_min(c)
        }
    }

    fn greedy_score(&self, k: u32) -> f64 {
        let mut score = self.marginal(k);
        for &h in &self.p.cand_trig[k as usize] {
            if self.assign[h as usize] < 0 && self.demand[h as usize] == 0 {
                score += self.p.groups[h as usize]
                    .cands
                    .iter()
                    .map(|c| self.marginal(*c))
                    .fold(f64::INFINITY, f64::min);
            }
        }
        score
    }

    /// Local search from the incumbent; the search state must be empty.
    fn improve(&mut self) {
        if self.best_assign.is_empty() {
            return;
        }
        let start = self.best_assign.clone();
        self.local_search(&start);
    }

    /// Loads `sol`, descends with single-group changes and step-opening moves,
    /// and keeps the result if it beats the incumbent. The search state must
    /// be empty and is empty again on return.
    fn local_search(&mut self, sol: &[i64]) {
        let comp = self.comp.clone();
        for &k in sol.iter().filter(|k| **k >= 0) {
            self.apply(k as u32);
        }
        let mut journal = Vec::new();
        self.settle(comp.clone(), &mut journal);
        let users = self.step_users();
        'descent: for _ in 0..MAX_DESCENTS {
            let mut improved = false;
            for &g in &comp {
                if Instant::now() >= self.deadline {
                    break 'descent;
                }
                if self.assign[g as usize] < 0 {
                    continue;
                }
                for &k in &self.p.groups[g as usize].cands {
                    if self.assign[g as usize] == k as i64 || self.assign[g as usize] < 0 {
                        continue;
                    }
                    let before = self.paid;
                    journal.clear();
                    self.switch(g, k, &mut journal);
                    if self.paid < before - self.tol() {
                        improved = true;
                    } else {
                        self.revert(&mut journal);
                    }
                }
            }
            for (s, groups) in &users {
                if self.step_ref[*s as usize] > 0 {
                    continue;
                }
                let before = self.paid;
                journal.clear();
                for &g in groups {
                    if self.assign[g as usize] < 0 {
                        continue;
                    }
                    let k = self.p.groups[g as usize]
                        .cands
                        .iter()
                        .copied()
                        .filter(|k| self.p.cand_steps[*k as usize].contains(s))
                        .min_by(|a, b| {
                            self.marginal(*a)
                                .total_cmp(&self.marginal(*b))
                                .then(a.cmp(b))
                        })
                        .expect("step user");
                    if self.assign[g as usize] != k as i64 {
                        self.switch(g, k, &mut journal);
                    }
                }
                if self.paid < before - self.tol() {
                    improved = true;
                } else {
                    self.revert(&mut journal);
                }
            }
            if !improved {
                break;
            }
        }
        let complete = self.comp.iter().all(|g| !self.is_open(*g));
        if complete && (self.paid < self.best - self.tol() || self.best_assign.is_empty()) {
            self.best = self.paid;
            self.best_assign = comp.iter().map(|g| self.assign[*g as usize]).collect();
        }
        for &g in &comp {
            let a = self.assign[g as usize];
            if a >= 0 {
                self.undo(a as u32);
            }
        }
    }

    /// Groups of the component per step they could use, steps in id order.
    fn step_users(&self) -> Vec<(u32, Vec<u32>)> {
        let mut users: std::collections::BTreeMap<u32, Vec<u32>> = Default::default();
        for &g in &self.comp {
            for &s in &self.p.group_steps[g as usize] {
                users.entry(s).or_default().push(g);
            }
        }
        users.into_iter().collect()
    }

    fn switch(&mut self, g: u32, k: u32, journal: &mut Vec<(bool, u32)>) {
        let a = self.assign[g as usize];
        let mut work = self.p.cand_trig[k as usize].clone();
        if a >= 0 {
            self.undo(a as u32);
            journal.push((false, a as u32));
            work.extend_from_slice(&self.p.cand_trig[a as usize]);
        }
        self.apply(k);
        journal.push((true, k));
        self.settle(work, journal);
    }

    /// Drops subquery choices nothing triggers and fills newly triggered
    /// groups greedily, starting from `work`, until stable.
    fn settle(&mut self, mut work: Vec<u32>, journal: &mut Vec<(bool, u32)>) {
        while let Some(g) = work.pop() {
            let gi = g as usize;
            let a = self.assign[gi];
            if a >= 0 && !self.p.groups[gi].required && self.demand[gi] == 0 {
                self.undo(a as u32);
                journal.push((false, a as u32));
                work.extend_from_slice(&self.p.cand_trig[a as usize]);
            } else if self.is_open(g) && !self.p.groups[gi].cands.is_empty() {
                let k = *self.p.groups[gi]
                    .cands
                    .iter()
                    .min_by(|a, b| {
                        self.greedy_score(**a)
                            .total_cmp(&self.greedy_score(**b))
                            .then(a.cmp(b))
                    })
                    .expect("non-empty");
                self.apply(k);
                journal.push((true, k));
                work.extend_from_slice(&self.p.cand_trig[k as usize]);
            }
        }
    }

    fn revert(&mut self, journal: &mut Vec<(bool, u32)>) {
        while let Some((applied, k)) = journal.pop() {
            if applied {
                self.undo(k);
            } else {
                self.apply(k);
            }
        }
    }

    /// Cost of a choice vector after activating exactly the groups it needs;
    /// inactive groups are cleared and newly needed ones take their first
    /// candidate.
    fn evaluate(&self, choice: &[i64]) -> Option<(f64, Vec<i64>)> {
        let mut active = vec![false; self.comp.len()];
        let mut out = vec![-1i64; self.comp.len()];
        let mut stack: Vec<usize> = self
            .comp
            .iter()
            .enumerate()
            .filter(|(_, g)| self.p.groups[**g as usize].required)
            .map(|(i, _)| i)
            .collect();
        let mut steps = Vec::new();
        while let Some(i) = stack.pop() {
            if active[i] {
                continue;
            }
            active[i] = true;
            let g = self.comp[i];
            let k = if choice[i] >= 0 {
                choice[i] as u32
            } else {
                *self.p.groups[g as usize].cands.first()?
            };
            out[i] = k as i64;
            steps.extend_from_slice(&self.p.cand_steps[k as usize]);
            for h in &self.p.cand_trig[k as usize] {
                stack.push(self.slot[*h as usize]);
            }
        }
        steps.sort_unstable();
        steps.dedup();
        let total = steps.iter().map(|s| self.p.step_cost[*s as usize]).sum();
        Some((total, out))
    }

    fn round_up(&self, b: f64) -> f64 {
        if self.quantum > 0.0 {
            (b / self.quantum - 1e-6).ceil() * self.quantum
        } else {
            b
        }
    }

    /// Largest q such that every step cost in the component is an integer
    /// multiple of q, or 0 when none is coarse enough to help.
    fn find_quantum(&mut self) {
        let mut costs: Vec<f64> = Vec::new();
        for cp in &self.copies {
            for &s in &self.p.group_steps[cp.group as usize] {
                costs.push(self.p.step_cost[s as usize]);
            }
        }
        let top = costs.iter().copied().fold(0.0, f64::max);
        if top <= 0.0 {
            return;
        }
        let tol = 1e-9 * top;
        let mut q = 0.0f64;
        for c in costs {
            let (mut a, mut b) = (q.max(c), q.min(c));
            while b > tol {
                let r = a % b;
                a = b;
                b = if r > b - tol { 0.0 } else { r };
            }
            q = a;
        }
        if q > 1e-6 * top {
            self.quantum = q;
        }
    }

    /// Topmost unassigned copies at or below `c`.
    fn open_copies(&self, c: u32, out: &mut Vec<u32>) {
        let a = self.assign[self.copies[c as usize].group as usize];
        if a >= 0 {
            for &t in &self.p.cand_trig[a as usize] {
                self.open_copies(self.child(c, t), out);
            }
        } else {
            out.push(c);
        }
    }

    /// Partitions open copies into classes that share no unpaid step and no
    /// group anywhere in their subtrees; such classes complete independently.
    fn split(&self, open: &[u32]) -> Vec<Vec<u32>> {
        fn find(p: &mut [usize], x: usize) -> usize {
            let mut r = x;
            while p[r] != r {
                r = p[r];
            }
            let mut x = x;
            while p[x] != r {
                let n = p[x];
                p[x] = r;
                x = n;
            }
            r
        }
        let mut parent: Vec<usize> = (0..open.len()).collect();
        let mut by_group: HashMap<u32, usize> = HashMap::new();
        let mut by_step: HashMap<u32, usize> = HashMap::new();
        let mut stack = Vec::new();
        for (i, &c) in open.iter().enumerate() {
            stack.push(c);
            while let Some(d) = stack.pop() {
                let g = self.copies[d as usize].group;
                let a = self.assign[g as usize];
                if a >= 0 {
                    for &t in &self.p.cand_trig[a as usize] {
                        stack.push(self.child(d, t));
                    }
                    continue;
                }
                let o = *by_group.entry(g).or_insert(i);
                let (x, y) = (find(&mut parent, o), find(&mut parent, i));
                parent[x] = y;
                for &st in &self.p.group_steps[g as usize] {
                    if self.step_ref[st as usize] == 0 {
                        let o = *by_step.entry(st).or_insert(i);
                        let (x, y) = (find(&mut parent, o), find(&mut parent, i));
                        parent[x] = y;
                    }
                }
                stack.extend(self.copies[d as usize].children.iter().map(|ch| ch.1));
            }
        }
        let mut classes: Vec<Vec<u32>> = Vec::new();
        let mut slot: HashMap<usize, usize> = HashMap::new();
        for (i, &c) in open.iter().enumerate() {
            let r = find(&mut parent, i);
            let k = *slot.entry(r).or_insert_with(|| {
                classes.push(Vec::new());
                classes.len() - 1
            });
            classes[k].push(c);
        }
        classes
    }

    fn class_bound(&self, class: &[u32]) -> f64 {
        self.round_up(class.iter().map(|c| self.copy_min(*c)).sum())
    }

    /// Cheapest completion of the open copies `open` that adds less than
    /// `cutoff` to the paid cost, with the candidates it assigns. The state
    /// is unchanged on return.
    fn complete(&mut self, open: Vec<u32>, cutoff: f64) -> Option<(f64, Vec<u32>)> {
        if open.is_empty() {
            return (cutoff > self.tol()).then(Vec::new).map(|v| (0.0, v));
        }
        let classes = self.split(&open);
        let bounds: Vec<f64> = classes.iter().map(|c| self.class_bound(c)).collect();
        let mut rest: f64 = bounds.iter().sum();
        if rest >= cutoff - self.tol() {
            return None;
        }
        let mut extra = 0.0;
        let mut choices = Vec::new();
        for (class, b) in classes.into_iter().zip(bounds) {
            rest -= b;
            let (x, ch) = self.branch(class, cutoff - extra - rest)?;
            extra += x;
            choices.extend(ch);
        }
        Some((extra, choices))
    }

    /// Hands each unpaid step's unclaimed cost to the unassigned copies below
    /// `open` that can use it, in equal parts. Valid because no copy outside
    /// the class competes for those steps. Returns the overwritten values.
    fn tighten(&mut self, open: &[u32]) -> Vec<(usize, f64)> {
        let mut below = Vec::new();
        let mut stack: Vec<u32> = open.to_vec();
        while let Some(d) = stack.pop() {
            let a = self.assign[self.copies[d as usize].group as usize];
            if a >= 0 {
                for &t in &self.p.cand_trig[a as usize] {
                    stack.push(self.child(d, t));
                }
            } else {
                below.push(d);
                stack.extend(self.copies[d as usize].children.iter().map(|ch| ch.1));
            }
        }
        let mut claim: HashMap<u32, (f64, u32)> = HashMap::new();
        for &d in &below {
            let cp = &self.copies[d as usize];
            for (j, &st) in self.p.group_steps[cp.group as usize].iter().enumerate() {
                if self.step_ref[st as usize] == 0 {
                    let e = claim.entry(st).or_insert((0.0, 0));
                    e.0 += self.w[cp.off + j];
                    e.1 += 1;
                }
            }
        }
        let mut saved = Vec::new();
        for &d in &below {
            let cp = &self.copies[d as usize];
            for (j, &st) in self.p.group_steps[cp.group as usize].iter().enumerate() {
                if let Some(&(sum, n)) = claim.get(&st) {
                    let extra = (self.p.step_cost[st as usize] - sum) / n as f64;
                    if extra > EPS * self.p.step_cost[st as usize] {
                        saved.push((cp.off + j, self.w[cp.off + j]));
                        self.w[cp.off + j] += extra;
                    }
                }
            }
        }
        saved
    }

    /// `complete` for one independent class, branching on one of its groups.
    fn branch(&mut self, open: Vec<u32>, cutoff: f64) -> Option<(f64, Vec<u32>)> {
        let saved = self.tighten(&open);
        let r = self.branch_class(open, cutoff);
        for (i, v) in saved.into_iter().rev() {
            self.w[i] = v;
        }
        r
    }

    fn branch_class(&mut self, open: Vec<u32>, cutoff: f64) -> Option<(f64, Vec<u32>)> {
        self.nodes += 1;
        if self.nodes.is_multiple_of(64) && Instant::now() >= self.deadline {
            self.timed_out = true;
        }
        if self.timed_out {
            return None;
        }
        let mut runs: Vec<(u32, u32, f64)> = open
            .iter()
            .map(|c| (self.copies[*c as usize].group, *c, self.copy_min(*c)))
            .collect();
        let bound = self.round_up(runs.iter().map(|r| r.2).sum());
        if bound >= cutoff - self.tol() {
            return None;
        }
        // Branch on the group whose best candidate leads the runner-up by the
        // widest margin; totals sum over the group's open copies.
        runs.sort_by_key(|r| (r.0, r.1));
        let mut pick: Option<(f64, Vec<(f64, u32)>)> = None;
        let mut pick_key = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for run in runs.chunk_by(|a, b| a.0 == b.0) {
            let g = run[0].0;
            let base: f64 = run.iter().map(|r| r.2).sum();
            let totals: Vec<(f64, u32)> = self.p.groups[g as usize]
                .cands
                .iter()
                .map(|&k| (run.iter().map(|r| self.cand_value(r.1, k)).sum(), k))
                .collect();
            let mut lo = f64::INFINITY;
            let mut second = f64::INFINITY;
            for (t, _) in &totals {
                if *t < lo {
                    second = lo;
                    lo = *t;
                } else if *t < second {
                    second = *t;
                }
            }
            let key = (second - lo, base);
            if pick.is_none() || key > pick_key {
                pick_key = key;
                pick = Some((base, totals));
            }
        }
        let (base, mut totals) = pick.expect("open copies");
        let unrounded: f64 = runs.iter().map(|r| r.2).sum();
        totals.sort_by(|a, b| {
            a.0.total_cmp(&b.0)
                .then_with(|| self.marginal(a.1).total_cmp(&self.marginal(b.1)))
                .then(a.1.cmp(&b.1))
        });
        let mut best: Option<(f64, Vec<u32>)> = None;
        let mut limit = cutoff;
        for (t, k) in totals {
            if self.round_up(unrounded - base + t) >= limit - self.tol() {
                break;
            }
            let before = self.paid;
            self.apply(k);
            let inc = self.paid - before;
            let mut next = Vec::new();
            for &c in &open {
                self.open_copies(c, &mut next);
            }
            let found = self.complete(next, limit - inc);
            self.undo(k);
            if self.timed_out {
                return None;
            }
            if let Some((x, mut ch)) = found {
                ch.push(k);
                limit = inc + x;
                best = Some((limit, ch));
            }
        }
        best
    }
}

/// Solves the model to optimality, or returns the best assignment found when
/// the time limit expires.
pub fn solve(model: &IlpModel, time_limit: Duration) -> Result<IlpSolution, SolveError> {
    let started = Instant::now();
    let deadline = started + time_limit;
    let p = Problem::from_model(model)?;
    for (i, g) in p.groups.iter().enumerate() {
        if g.required && g.cands.is_empty() {
            return Err(SolveError::Infeasible(format!(
                "group {i} has no candidates"
            )));
        }
    }

    let mut chosen: Vec<i64> = vec![-1; p.groups.len()];
    let mut status = SolveStatus::Optimal;
    let mut nodes = 0;
    for comp in p.components() {
        if comp.iter().all(|g| !p.groups[*g as usize].required) {
            continue;
        }
        let mut s = Search::new(&p, comp.clone(), deadline);
        s.local_search(&vec![-1; comp.len()]);
        if s.best_assign.is_empty() {
            return Err(SolveError::Infeasible(
                "an activated subquery group has no candidates".into(),
            ));
        }
        s.find_quantum();
        s.even_split();
        s.lagrange(LAGRANGE_ITERS);
        s.improve();
        let cutoff = s.best;
        if let Some((cost, choices)) = s.complete(s.roots.clone(), cutoff) {
            s.best = cost;
            s.best_assign = vec![-1; s.comp.len()];
            for k in choices {
                s.best_assign[s.slot[p.cand_group[k as usize] as usize]] = k as i64;
            }
        }
        nodes += s.nodes;
        if s.timed_out {
            status = SolveStatus::Timeout;
        }
        for (g, k) in comp.iter().zip(&s.best_assign) {
            chosen[*g as usize] = *k;
        }
    }

    let mut values = vec![false; model.vars.len()];
    for k in chosen.iter().filter(|k| **k >= 0) {
        let k = *k as usize;
        values[p.cand_var[k].0] = true;
        for &s in &p.cand_steps[k] {
            values[p.step_var[s as usize].0] = true;
        }
    }
    let violated = model.violated_rows(&values);
    if !violated.is_empty() {
        return Err(SolveError::InvalidSolution(violated));
    }
    Ok(IlpSolution {
        objective: model.objective(&values),
        values,
        status,
        nodes,
        elapsed: started.elapsed(),
    })
}
