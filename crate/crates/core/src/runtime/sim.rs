//! Deterministic simulation of compiled plans over a trace.
//!
//! Time is cut into epochs and every epoch owns a slice: its own plan,
//! topology and store containers. A tuple enters the slice of every epoch its
//! window reaches back into, and is stored and probed there. Only the slice of
//! the oldest constituent's epoch emits a result, so each result leaves once
//! even while neighbouring slices route differently. Static mode runs a single
//! slice for the whole trace.
//!
//! At the start of epoch `b` the observations of epoch `b - 1` become
//! statistics, and those decide the plan of epoch `b + 1`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::epoch::{Timeline, DEFAULT_EPOCH_LEN};
use super::metrics::{EpochMetrics, MetricsLog};
use super::oracle::Lifetime;
use super::stats::{collect_statistics, EpochObservation};
use super::tuple::{sort_events, Composite, Event, JoinResult, TupleRef};
use crate::catalog::{validate_workload, AttrRef, Catalog, CatalogError, JoinKey, Query};
use crate::cost::{default_selectivity, probe_order_cost, CostContext, CostError, Statistics};
use crate::ilp::{PlanError, SelectedPlan, SolveStatus, DEFAULT_TIME_LIMIT};
use crate::mir::MirId;
use crate::optimizer::{optimize, OptimizeError, OptimizeOptions};
use crate::orders::{apply_partitioning, construct_probe_orders, Target};
use crate::topology::{compile, partition_route, EdgeLabel, RuleKind, StoreKey, TopologyError};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    #[default]
    Static,
    Adaptive,
}

#[derive(Clone, Debug)]
pub enum LifecycleOp {
    Register(Query),
    Remove(String),
}

/// Applied before the first event with `ts >= at`.
#[derive(Clone, Debug)]
pub struct Lifecycle {
    pub at: u64,
    pub op: LifecycleOp,
}

#[derive(Clone, Debug)]
pub struct SimConfig {
    pub mode: SimMode,
    pub epoch_len: u64,
    /// Recorded for reproducibility; the simulation itself draws no random
    /// numbers.
    pub seed: u64,
    /// Initial plan; optimized under configured statistics when absent.
    pub plan: Option<SelectedPlan>,
    /// Adaptive mode: plans imposed on given epochs.
    pub forced: BTreeMap<u64, SelectedPlan>,
    /// Adaptive mode: statistics that override an epoch's observations.
    pub injected: BTreeMap<u64, Statistics>,
    pub lifecycle: Vec<Lifecycle>,
    pub time_limit: Duration,
    pub materialize: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            mode: SimMode::Static,
            epoch_len: DEFAULT_EPOCH_LEN,
            seed: 0,
            plan: None,
            forced: BTreeMap::new(),
            injected: BTreeMap::new(),
            lifecycle: Vec::new(),
            time_limit: DEFAULT_TIME_LIMIT,
            materialize: true,
        }
    }
}

/// A query added mid-run. Results involving a tuple of relation `r` older
/// than `complete_from[r]` are withheld: a store serving the query did not
/// exist yet when that tuple arrived.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registration {
    pub query: String,
    pub at: u64,
    pub complete_from: BTreeMap<String, u64>,
}

#[derive(Clone, Debug)]
pub struct SimOutput {
    /// Sorted.
    pub results: Vec<JoinResult>,
    pub metrics: MetricsLog,
    pub registrations: Vec<Registration>,
    /// One per query activation, in activation order.
    pub lifetimes: Vec<Lifetime>,
}

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("epoch {0} is not configured")]
    UnknownEpoch(u64),
    #[error("unknown query {0}")]
    UnknownQuery(String),
    #[error("query id {0} is already registered")]
    DuplicateQueryId(String),
    #[error("invalid trace: {0}")]
    InvalidTrace(String),
    #[error(transparent)]
    Optimize(#[from] OptimizeError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Cost(#[from] CostError),
}

/// Relation index and attribute position.
type Slot = (u16, u16);

struct Schema {
    names: Vec<String>,
    index: HashMap<String, u16>,
    windows: Vec<u64>,
    attrs: Vec<Vec<String>>,
}

impl Schema {
    fn new(catalog: &Catalog) -> Self {
        let rels: Vec<_> = catalog.relations().values().collect();
        Self {
            names: rels.iter().map(|r| r.name.clone()).collect(),
            index: rels
                .iter()
                .enumerate()
                .map(|(i, r)| (r.name.clone(), i as u16))
                .collect(),
            windows: rels.iter().map(|r| r.window).collect(),
            attrs: rels.iter().map(|r| r.attributes.clone()).collect(),
        }
    }

    fn slot(&self, a: &AttrRef) -> Result<Slot, RuntimeError> {
        let r = *self.index.get(&a.relation).ok_or_else(|| unknown_attr(a))?;
        let p = self.attrs[r as usize]
            .iter()
            .position(|x| *x == a.attribute)
            .ok_or_else(|| unknown_attr(a))?;
        Ok((r, p as u16))
    }
}

fn unknown_attr(a: &AttrRef) -> RuntimeError {
    PlanError::InconsistentSolution(format!("plan refers to unknown attribute {a}")).into()
}

struct Ev {
    rel: u16,
    ts: u64,
    seq: u64,
    /// Value ids by attribute position.
    vals: Vec<u32>,
}

struct Env {
    schema: Schema,
    events: Vec<Ev>,
    values: Vec<String>,
    timeline: Timeline,
    adaptive: bool,
}

impl Env {
    fn new(catalog: &Catalog, trace: &[Event], cfg: &SimConfig) -> Result<Self, RuntimeError> {
        for w in trace.windows(2) {
            if w[1].ts < w[0].ts {
                return Err(RuntimeError::InvalidTrace(format!(
                    "timestamp {} follows {}",
                    w[1].ts, w[0].ts
                )));
            }
        }
        let schema = Schema::new(catalog);
        let mut sorted = trace.to_vec();
        sort_events(&mut sorted);
        let mut ids: HashMap<String, u32> = HashMap::new();
        let mut values = Vec::new();
        let mut events = Vec::with_capacity(sorted.len());
        for e in sorted {
            let rel = *schema
                .index
                .get(&e.rel)
                .ok_or_else(|| RuntimeError::InvalidTrace(format!("unknown relation {}", e.rel)))?;
            let mut vals = Vec::with_capacity(schema.attrs[rel as usize].len());
            for a in &schema.attrs[rel as usize] {
                let v = e.attrs.get(a).ok_or_else(|| {
                    RuntimeError::InvalidTrace(format!(
                        "event {} of {} lacks attribute {a}",
                        e.seq, e.rel
                    ))
                })?;
                let id = *ids.entry(v.clone()).or_insert_with(|| {
                    values.push(v.clone());
                    (values.len() - 1) as u32
                });
                vals.push(id);
            }
            events.push(Ev {
                rel,
                ts: e.ts,
                seq: e.seq,
                vals,
            });
        }
        Ok(Self {
            schema,
            events,
            values,
            timeline: Timeline::new(cfg.epoch_len),
            adaptive: cfg.mode == SimMode::Adaptive,
        })
    }

    fn value(&self, c: &Composite, (r, a): Slot) -> Option<u32> {
        c.get(r).map(|e| self.events[e as usize].vals[a as usize])
    }

    fn ev(&self, e: u32) -> &Ev {
        &self.events[e as usize]
    }

    /// Pairwise windows between the constituents of two disjoint composites.
    fn within_windows(&self, a: &Composite, b: &Composite) -> bool {
        a.parts.iter().all(|&(_, x)| {
            b.parts.iter().all(|&(_, y)| {
                let (x, y) = (self.ev(x), self.ev(y));
                let (old, new) = if x.ts <= y.ts { (x, y) } else { (y, x) };
                new.ts - old.ts <= self.schema.windows[old.rel as usize]
            })
        })
    }
}

enum Dest {
    Output(String),
    Rules(Vec<usize>),
}

struct RuleProg {
    store: usize,
    kind: RuleKind,
    /// (incoming, stored)
    preds: Vec<(Slot, Slot)>,
    route: Option<Slot>,
    outs: Vec<Dest>,
    step: Option<String>,
}

struct StoreProg {
    key: StoreKey,
    parallelism: u32,
}

/// A plan compiled against the schema.
struct Program {
    plan: SelectedPlan,
    stores: Vec<StoreProg>,
    rules: Vec<RuleProg>,
    /// Indexed by relation.
    sources: Vec<Vec<Dest>>,
}

impl Program {
    fn new(plan: SelectedPlan, ctx: &CostContext, schema: &Schema) -> Result<Self, RuntimeError> {
        let topo = compile(&plan, ctx)?;
        let mut by_edge: HashMap<&EdgeLabel, Vec<usize>> = HashMap::new();
        let mut flat = Vec::new();
        for (si, s) in topo.stores.iter().enumerate() {
            for (label, rules) in &s.rules {
                for r in rules {
                    by_edge.entry(label).or_default().push(flat.len());
                    flat.push((si, r));
                }
            }
        }
        let dest = |e: &EdgeLabel| -> Result<Dest, RuntimeError> {
            match e.output_query() {
                Some(q) => Ok(Dest::Output(q.to_string())),
                None => by_edge
                    .get(e)
                    .cloned()
                    .map(Dest::Rules)
                    .ok_or_else(|| TopologyError::UnroutableEdge(e.0.clone()).into()),
            }
        };
        let mut rules = Vec::with_capacity(flat.len());
        for (si, r) in &flat {
            rules.push(RuleProg {
                store: *si,
                kind: r.kind,
                preds: r
                    .predicates
                    .iter()
                    .map(|p| Ok((schema.slot(&p.incoming)?, schema.slot(&p.stored)?)))
                    .collect::<Result<_, RuntimeError>>()?,
                route: r.route.as_ref().map(|a| schema.slot(a)).transpose()?,
                outs: r.out_edges.iter().map(&dest).collect::<Result<_, _>>()?,
                step: r.step.clone(),
            });
        }
        let mut sources: Vec<Vec<Dest>> = (0..schema.names.len()).map(|_| Vec::new()).collect();
        for s in &topo.sources {
            let Some(&r) = schema.index.get(&s.relation) else {
                continue;
            };
            sources[r as usize] = s.out_edges.iter().map(&dest).collect::<Result<_, _>>()?;
        }
        let stores = topo
            .stores
            .iter()
            .map(|s| StoreProg {
                key: s.key.clone(),
                parallelism: s.parallelism,
            })
            .collect();
        Ok(Self {
            plan,
            stores,
            rules,
            sources,
        })
    }

    /// Base stores per relation.
    fn base_variants(&self) -> BTreeMap<String, Vec<(usize, AttrRef)>> {
        let mut out: BTreeMap<String, Vec<(usize, AttrRef)>> = BTreeMap::new();
        for (i, s) in self.stores.iter().enumerate() {
            if s.key.scope.relations.len() == 1 {
                let r = s.key.scope.relations.iter().next().expect("one relation");
                out.entry(r.clone())
                    .or_default()
                    .push((i, s.key.partition.clone()));
            }
        }
        out
    }
}

#[derive(Default)]
struct Worker {
    tuples: Vec<Composite>,
    /// Built on first lookup, maintained on insert.
    index: HashMap<Slot, HashMap<u32, Vec<u32>>>,
}

impl Worker {
    fn insert(&mut self, c: Composite, env: &Env) {
        let i = self.tuples.len() as u32;
        for (slot, idx) in self.index.iter_mut() {
            if let Some(v) = env.value(&c, *slot) {
                idx.entry(v).or_default().push(i);
            }
        }
        self.tuples.push(c);
    }

    fn ensure_index(&mut self, slot: Slot, env: &Env) {
        if self.index.contains_key(&slot) {
            return;
        }
        let mut idx: HashMap<u32, Vec<u32>> = HashMap::new();
        for (i, c) in self.tuples.iter().enumerate() {
            if let Some(v) = env.value(c, slot) {
                idx.entry(v).or_default().push(i as u32);
            }
        }
        self.index.insert(slot, idx);
    }

    /// Stored tuples joining `c` under `preds` and the windows.
    fn probe(
        &mut self,
        c: &Composite,
        preds: &[(Slot, Slot)],
        env: &Env,
        out: &mut Vec<Composite>,
    ) {
        let fits = |d: &Composite| {
            preds
                .iter()
                .all(|&(a, b)| env.value(c, a).is_some() && env.value(c, a) == env.value(d, b))
                && env.within_windows(c, d)
        };
        let Some(&(inc, sto)) = preds.first() else {
            out.extend(self.tuples.iter().filter(|d| fits(d)).map(|d| c.join(d)));
            return;
        };
        let Some(v) = env.value(c, inc) else {
            return;
        };
        self.ensure_index(sto, env);
        if let Some(ids) = self.index[&sto].get(&v) {
            for &i in ids {
                let d = &self.tuples[i as usize];
                if fits(d) {
                    out.push(c.join(d));
                }
            }
        }
    }

    /// Drops tuples with a constituent no future arrival can join.
    fn compact(&mut self, horizon: u64, env: &Env) {
        let before = self.tuples.len();
        self.tuples.retain(|c| {
            c.parts.iter().all(|&(_, e)| {
                let e = env.ev(e);
                e.ts + env.schema.windows[e.rel as usize] >= horizon
            })
        });
        if self.tuples.len() != before {
            self.index.clear();
        }
    }
}

struct StoreState {
    /// First tick whose tuples this container holds completely.
    since: u64,
    workers: Vec<Worker>,
}

impl StoreState {
    fn new(since: u64, parallelism: u32) -> Self {
        Self {
            since,
            workers: (0..parallelism.max(1)).map(|_| Worker::default()).collect(),
        }
    }
}

struct Slice {
    start: u64,
    program: Program,
    /// Aligned with `program.stores`.
    state: Vec<StoreState>,
}

impl Slice {
    fn new(start: u64, program: Program) -> Self {
        let state = program
            .stores
            .iter()
            .map(|s| StoreState::new(start, s.parallelism))
            .collect();
        Self {
            start,
            program,
            state,
        }
    }

    /// Swaps the program; containers of stores that persist keep their state,
    /// new ones start empty at `now`.
    fn install(&mut self, program: Program, now: u64) {
        let mut old: HashMap<StoreKey, StoreState> = self
            .program
            .stores
            .iter()
            .map(|s| s.key.clone())
            .zip(self.state.drain(..))
            .collect();
        self.state = program
            .stores
            .iter()
            .map(|s| {
                old.remove(&s.key)
                    .unwrap_or_else(|| StoreState::new(now, s.parallelism))
            })
            .collect();
        self.program = program;
    }
}

struct Emitter<'a> {
    env: &'a Env,
    slice: u64,
    now: u64,
    /// Per query: (relation, first complete tick).
    filters: &'a HashMap<String, Vec<(u16, u64)>>,
    results: &'a mut Vec<JoinResult>,
    metrics: &'a mut MetricsLog,
}

impl Emitter<'_> {
    fn emit(&mut self, query: &str, c: &Composite) {
        let env = self.env;
        if env.adaptive {
            let owner = c
                .parts
                .iter()
                .map(|&(_, e)| env.timeline.epoch_of(env.ev(e).ts))
                .min();
            if owner != Some(self.slice) {
                return;
            }
        }
        if let Some(f) = self.filters.get(query) {
            if f.iter()
                .any(|&(r, from)| c.get(r).is_some_and(|e| env.ev(e).ts < from))
            {
                return;
            }
        }
        let mut tuples: Vec<TupleRef> = c
            .parts
            .iter()
            .map(|&(r, e)| TupleRef {
                rel: env.schema.names[r as usize].clone(),
                ts: env.ev(e).ts,
                seq: env.ev(e).seq,
            })
            .collect();
        tuples.sort();
        let newest = tuples.iter().map(|t| t.ts).max().unwrap_or(self.now);
        let totals = &mut self.metrics.totals;
        *totals.results.entry(query.to_string()).or_default() += 1;
        let latency = self.now - newest;
        totals.latency_sum += latency;
        totals.latency_max = totals.latency_max.max(latency);
        self.results.push(JoinResult {
            query: query.to_string(),
            ts: self.now,
            tuples,
        });
    }
}

fn deliver(prog: &Program, state: &mut [StoreState], em: &mut Emitter, dest: &Dest, c: &Composite) {
    match dest {
        Dest::Output(q) => em.emit(q, c),
        Dest::Rules(rules) => {
            for &r in rules {
                apply(prog, state, em, r, c);
            }
        }
    }
}

fn apply(prog: &Program, state: &mut [StoreState], em: &mut Emitter, rule: usize, c: &Composite) {
    let env = em.env;
    let rule = &prog.rules[rule];
    let value = rule.route.and_then(|s| env.value(c, s));
    let workers = partition_route(
        value.map(|v| env.values[v as usize].as_str()),
        prog.stores[rule.store].parallelism,
    );
    let st = &mut state[rule.store];
    match rule.kind {
        RuleKind::Store => {
            for w in workers {
                st.workers[w as usize].insert(c.clone(), env);
                em.metrics.totals.tuples_stored += 1;
            }
        }
        RuleKind::Probe => {
            em.metrics.totals.probe_messages += workers.len() as u64;
            if let Some(step) = &rule.step {
                let counter = em.metrics.steps.entry(step.clone()).or_default();
                counter.probes += 1;
                counter.messages += workers.len() as u64;
            }
            let mut found = Vec::new();
            for w in workers {
                st.workers[w as usize].probe(c, &rule.preds, env, &mut found);
            }
            for m in &found {
                for o in &rule.outs {
                    deliver(prog, state, em, o, m);
                }
            }
        }
    }
}

/// Number of active queries each store serves, directly or through the
/// materializations it feeds.
pub fn store_refcounts(plan: &SelectedPlan) -> BTreeMap<StoreKey, usize> {
    let mut out = BTreeMap::new();
    for q in &plan.queries {
        let mut pending: Vec<(MirId, AttrRef)> = plan
            .orders
            .iter()
            .filter(|((id, _), _)| *id == q.id)
            .flat_map(|(_, o)| o.hops().map(|(m, p)| (m, p.clone())).collect::<Vec<_>>())
            .collect();
        let mut seen = BTreeSet::new();
        while let Some((m, p)) = pending.pop() {
            let key = StoreKey {
                scope: plan.mirs.get(m).scope.clone(),
                partition: p,
            };
            if seen.insert(key) {
                if let Some(mat) = plan.materialized.get(&m) {
                    for o in mat.orders.values() {
                        pending.extend(o.hops().map(|(h, hp)| (h, hp.clone())));
                    }
                }
            }
        }
        for k in seen {
            *out.entry(k).or_default() += 1;
        }
    }
    out
}

/// Adds base-only orders for `q` to `plan`, rebased onto `queries`. Every hop
/// prefers the existing store variants of its relation with the smallest
/// `since`, then a variant chosen for the same registration elsewhere, then
/// any partitioning candidate; among those the cheapest order wins.
fn bootstrap(
    plan: &SelectedPlan,
    q: &Query,
    queries: Vec<Query>,
    ctx: &CostContext,
    existing: &BTreeMap<String, Vec<(AttrRef, u64)>>,
    fresh: &mut BTreeMap<String, AttrRef>,
) -> Result<SelectedPlan, RuntimeError> {
    let mut next = plan.rebase(queries, ctx)?;
    let mut options: BTreeMap<MirId, Vec<AttrRef>> = BTreeMap::new();
    for r in q.relations() {
        let Some(m) = next.mirs.base(r) else {
            continue;
        };
        let list = match existing.get(r).filter(|v| !v.is_empty()) {
            Some(vs) => {
                let min = vs.iter().map(|v| v.1).min().expect("non-empty");
                vs.iter()
                    .filter(|v| v.1 == min)
                    .map(|v| v.0.clone())
                    .collect()
            }
            None => match fresh.get(r) {
                Some(p) => vec![p.clone()],
                None => next.mirs.candidates(m).to_vec(),
            },
        };
        options.insert(m, list);
    }
    for s in q.relations() {
        let orders =
            construct_probe_orders(q.scope(), Target::Query(q.id.clone()), &next.mirs, s, false);
        let partitioned =
            apply_partitioning(&orders, |h| options.get(&h).map_or(&[][..], Vec::as_slice));
        let mut best = None;
        for o in partitioned {
            let c = probe_order_cost(&o, q.scope(), &next.mirs, ctx)?;
            if best.as_ref().is_none_or(|(b, _)| c < *b) {
                best = Some((c, o));
            }
        }
        let Some((_, o)) = best else {
            return Err(PlanError::InconsistentSolution(format!(
                "no base-only order for {} from {s}",
                q.id
            ))
            .into());
        };
        for (h, p) in o.hops() {
            if let Some(r) = next.mirs.get(h).base_relation() {
                if !existing.contains_key(r) {
                    fresh.entry(r.to_string()).or_insert_with(|| p.clone());
                }
            }
        }
        next.orders.insert((q.id.clone(), s.clone()), o);
    }
    next.prune();
    next.cost = next.recost(ctx)?;
    Ok(next)
}

struct Sim<'a> {
    catalog: &'a Catalog,
    cfg: &'a SimConfig,
    env: Env,
    active: Vec<Query>,
    /// Latest statistics; the fallback for unobserved values.
    prior: Statistics,
    slices: BTreeMap<u64, Slice>,
    /// Adaptive mode: the plan decided for the epoch after the current one.
    next: Option<(u64, Program)>,
    epoch: u64,
    obs: EpochObservation,
    last_routing: Option<u64>,
    w_max: u64,
    filters: HashMap<String, Vec<(u16, u64)>>,
    results: Vec<JoinResult>,
    metrics: MetricsLog,
    registrations: Vec<Registration>,
    lifetimes: Vec<Lifetime>,
}

pub fn run_simulation(
    catalog: &Catalog,
    trace: &[Event],
    cfg: &SimConfig,
) -> Result<SimOutput, RuntimeError> {
    let env = Env::new(catalog, trace, cfg)?;
    Sim::new(catalog, cfg, env)?.run()
}

impl<'a> Sim<'a> {
    fn new(catalog: &'a Catalog, cfg: &'a SimConfig, env: Env) -> Result<Self, RuntimeError> {
        let active = catalog.queries().to_vec();
        let mut sim = Self {
            catalog,
            cfg,
            env,
            prior: Statistics::configured(catalog),
            slices: BTreeMap::new(),
            next: None,
            epoch: 0,
            obs: EpochObservation::default(),
            last_routing: None,
            w_max: catalog
                .relations()
                .values()
                .map(|r| r.window)
                .max()
                .unwrap_or(0),
            filters: HashMap::new(),
            results: Vec::new(),
            metrics: MetricsLog::default(),
            registrations: Vec::new(),
            lifetimes: active
                .iter()
                .map(|q| Lifetime {
                    query: q.id.clone(),
                    from: 0,
                    until: None,
                    complete_from: BTreeMap::new(),
                })
                .collect(),
            active,
        };
        let ctx = sim.ctx();
        let initial = match &cfg.plan {
            Some(p) => sim.adopt(p)?,
            None if sim.active.is_empty() => SelectedPlan::empty(Vec::new()),
            None => optimize(&sim.active, &ctx, sim.opts())?.plan,
        };
        let first = match cfg.forced.get(&0).filter(|_| sim.env.adaptive) {
            Some(p) => sim.adopt(p)?,
            None => initial.clone(),
        };
        let program = Program::new(first, &ctx, &sim.env.schema)?;
        sim.slices.insert(0, Slice::new(0, program));
        if sim.env.adaptive {
            let second = match cfg.forced.get(&1) {
                Some(p) => sim.adopt(p)?,
                None => initial,
            };
            sim.next = Some((1, Program::new(second, &ctx, &sim.env.schema)?));
        }
        Ok(sim)
    }

    fn ctx(&self) -> CostContext {
        CostContext::new(self.catalog, self.prior.clone())
    }

    fn opts(&self) -> OptimizeOptions {
        OptimizeOptions {
            materialize: self.cfg.materialize,
            time_limit: self.cfg.time_limit,
            ..OptimizeOptions::default()
        }
    }

    /// A given plan over the active queries; queries it lacks get bootstrap
    /// orders.
    fn adopt(&self, plan: &SelectedPlan) -> Result<SelectedPlan, RuntimeError> {
        let ctx = self.ctx();
        let mut out = plan.rebase(self.active.clone(), &ctx)?;
        let mut fresh = BTreeMap::new();
        for q in &self.active {
            let complete = q
                .relations()
                .iter()
                .all(|s| out.orders.contains_key(&(q.id.clone(), s.clone())));
            if !complete {
                out = bootstrap(
                    &out,
                    q,
                    self.active.clone(),
                    &ctx,
                    &BTreeMap::new(),
                    &mut fresh,
                )?;
            }
        }
        out.validate()?;
        Ok(out)
    }

    fn run(mut self) -> Result<SimOutput, RuntimeError> {
        let mut ops: Vec<&Lifecycle> = self.cfg.lifecycle.iter().collect();
        ops.sort_by_key(|l| l.at);
        let mut op = 0;
        for i in 0..self.env.events.len() {
            let ts = self.env.events[i].ts;
            while self.env.timeline.epoch_of(ts) > self.epoch {
                self.boundary()?;
            }
            while op < ops.len() && ops[op].at <= ts {
                self.apply_op(ops[op])?;
                op += 1;
            }
            self.process(i)?;
        }
        for l in &ops[op..] {
            self.apply_op(l)?;
        }
        if !self.env.events.is_empty() {
            self.close(self.epoch)?;
        }
        self.results.sort();
        Ok(SimOutput {
            results: self.results,
            metrics: self.metrics,
            registrations: self.registrations,
            lifetimes: self.lifetimes,
        })
    }

    fn process(&mut self, i: usize) -> Result<(), RuntimeError> {
        let env = &self.env;
        let ev = &env.events[i];
        let rel = ev.rel as usize;
        self.obs.record(
            &env.schema.names[rel],
            env.schema.attrs[rel]
                .iter()
                .zip(&ev.vals)
                .map(|(a, v)| (a.as_str(), *v)),
        );
        let range = if env.adaptive {
            env.timeline.epochs_for(ev.ts, self.w_max)
        } else {
            0..=0
        };
        let single = Composite::single(ev.rel, i as u32);
        for k in range {
            let Slice { program, state, .. } = self
                .slices
                .get_mut(&k)
                .ok_or(RuntimeError::UnknownEpoch(k))?;
            let mut em = Emitter {
                env,
                slice: k,
                now: ev.ts,
                filters: &self.filters,
                results: &mut self.results,
                metrics: &mut self.metrics,
            };
            for d in &program.sources[rel] {
                deliver(program, state, &mut em, d, &single);
            }
        }
        Ok(())
    }

    /// Start of epoch `epoch + 1`.
    fn boundary(&mut self) -> Result<(), RuntimeError> {
        let b = self.epoch + 1;
        let stats = self.close(self.epoch)?;
        let start = self.env.timeline.epoch(b).start;
        if self.env.adaptive {
            let (id, current) = self.next.take().expect("adaptive runs decide ahead");
            debug_assert_eq!(id, b);
            let decided = self.decide(b + 1, &current.plan, stats)?;
            let ctx = self.ctx();
            self.next = Some((b + 1, Program::new(decided, &ctx, &self.env.schema)?));
            self.slices.insert(b, Slice::new(start, current));
            let oldest = self.env.timeline.epoch_of(start.saturating_sub(self.w_max));
            self.slices.retain(|id, _| *id >= oldest);
        }
        for s in self.slices.values_mut() {
            for st in &mut s.state {
                for w in &mut st.workers {
                    w.compact(start, &self.env);
                }
            }
        }
        self.epoch = b;
        self.obs = EpochObservation::default();
        Ok(())
    }

    /// The plan for `epoch`: a forced one, else the optimum under `stats`
    /// when it is proven optimal and routes differently, else the incumbent.
    fn decide(
        &mut self,
        epoch: u64,
        incumbent: &SelectedPlan,
        stats: Statistics,
    ) -> Result<SelectedPlan, RuntimeError> {
        if let Some(p) = self.cfg.forced.get(&epoch) {
            return self.adopt(p);
        }
        if self.active.is_empty() {
            return Ok(incumbent.clone());
        }
        let ctx = CostContext::new(self.catalog, stats);
        let o = optimize(&self.active, &ctx, self.opts())?;
        if o.status == SolveStatus::Optimal && o.plan.canonical() != incumbent.canonical() {
            Ok(o.plan)
        } else {
            Ok(incumbent.clone())
        }
    }

    /// Closes `epoch`: statistics and its metrics line.
    fn close(&mut self, epoch: u64) -> Result<Statistics, RuntimeError> {
        let predicates: BTreeSet<JoinKey> = self
            .active
            .iter()
            .flat_map(|q| q.scope().predicates.iter().cloned())
            .collect();
        let mut stats = collect_statistics(
            &self.obs,
            epoch,
            self.env.timeline.len(),
            &predicates,
            &self.prior,
        );
        if let Some(inj) = self.cfg.injected.get(&epoch) {
            stats.rates.extend(inj.rates.clone());
            stats.selectivities.extend(inj.selectivities.clone());
        }
        self.prior = stats.clone();
        let id = if self.env.adaptive { epoch } else { 0 };
        let slice = self
            .slices
            .get(&id)
            .ok_or(RuntimeError::UnknownEpoch(epoch))?;
        let routing = slice.program.plan.fingerprint();
        self.metrics.epochs.push(EpochMetrics {
            epoch,
            routing,
            orders: slice.program.plan.display_orders(),
            switched: self.last_routing.is_some_and(|r| r != routing),
            counters: self.metrics.totals.clone(),
            arrivals: self.obs.arrivals.clone(),
            rates: stats.rates.clone(),
            selectivities: stats
                .selectivities
                .iter()
                .map(|(k, v)| (k.to_string(), *v))
                .collect(),
        });
        self.last_routing = Some(routing);
        Ok(stats)
    }

    fn apply_op(&mut self, l: &Lifecycle) -> Result<(), RuntimeError> {
        match &l.op {
            LifecycleOp::Register(q) => self.register(q, l.at),
            LifecycleOp::Remove(id) => self.remove(id, l.at),
        }
    }

    fn register(&mut self, q: &Query, at: u64) -> Result<(), RuntimeError> {
        if self.active.iter().any(|a| a.id == q.id) {
            return Err(RuntimeError::DuplicateQueryId(q.id.clone()));
        }
        let relations = self.catalog.relations().values().cloned().collect();
        let checked = validate_workload(vec![q.clone()], relations)?;
        let q = checked.queries()[0].clone();
        for p in &q.predicates {
            let key = p.key();
            let s = p.selectivity.unwrap_or_else(|| {
                let left = &self.catalog.relations()[&key.left.relation];
                default_selectivity(left.rate, left.window)
            });
            self.prior.selectivities.entry(key).or_insert(s);
        }
        self.active.push(q.clone());
        let ctx = self.ctx();
        let mut fresh = BTreeMap::new();
        let mut complete_from: BTreeMap<String, u64> = BTreeMap::new();
        for slice in self.slices.values_mut() {
            let existing: BTreeMap<String, Vec<(AttrRef, u64)>> = slice
                .program
                .base_variants()
                .into_iter()
                .map(|(r, vs)| {
                    let vs = vs
                        .into_iter()
                        .map(|(i, p)| (p, slice.state[i].since))
                        .collect();
                    (r, vs)
                })
                .collect();
            let plan = bootstrap(
                &slice.program.plan,
                &q,
                self.active.clone(),
                &ctx,
                &existing,
                &mut fresh,
            )?;
            slice.install(Program::new(plan, &ctx, &self.env.schema)?, at);
            for ((id, _), o) in &slice.program.plan.orders {
                if *id != q.id {
                    continue;
                }
                for (m, p) in o.hops() {
                    let key = StoreKey {
                        scope: slice.program.plan.mirs.get(m).scope.clone(),
                        partition: p.clone(),
                    };
                    let Some(i) = slice.program.stores.iter().position(|s| s.key == key) else {
                        continue;
                    };
                    let since = slice.state[i].since;
                    if since > slice.start {
                        for r in &key.scope.relations {
                            let e = complete_from.entry(r.clone()).or_default();
                            *e = (*e).max(since);
                        }
                    }
                }
            }
        }
        if let Some((id, program)) = self.next.take() {
            let existing = program
                .base_variants()
                .into_iter()
                .map(|(r, vs)| (r, vs.into_iter().map(|(_, p)| (p, 0)).collect()))
                .collect();
            let plan = bootstrap(
                &program.plan,
                &q,
                self.active.clone(),
                &ctx,
                &existing,
                &mut fresh,
            )?;
            self.next = Some((id, Program::new(plan, &ctx, &self.env.schema)?));
        }
        let filter = complete_from
            .iter()
            .map(|(r, t)| (self.env.schema.index[r], *t))
            .collect();
        self.filters.insert(q.id.clone(), filter);
        self.registrations.push(Registration {
            query: q.id.clone(),
            at,
            complete_from: complete_from.clone(),
        });
        self.lifetimes.push(Lifetime {
            query: q.id.clone(),
            from: at,
            until: None,
            complete_from,
        });
        Ok(())
    }

    /// Deregisters at once: stores no remaining query reaches are dropped
    /// together with their containers.
    fn remove(&mut self, id: &str, at: u64) -> Result<(), RuntimeError> {
        let pos = self
            .active
            .iter()
            .position(|q| q.id == id)
            .ok_or_else(|| RuntimeError::UnknownQuery(id.to_string()))?;
        self.active.remove(pos);
        let ctx = self.ctx();
        for slice in self.slices.values_mut() {
            let plan = slice.program.plan.rebase(self.active.clone(), &ctx)?;
            slice.install(Program::new(plan, &ctx, &self.env.schema)?, at);
        }
        if let Some((e, program)) = self.next.take() {
            let plan = program.plan.rebase(self.active.clone(), &ctx)?;
            self.next = Some((e, Program::new(plan, &ctx, &self.env.schema)?));
        }
        self.filters.remove(id);
        if let Some(l) = self
            .lifetimes
            .iter_mut()
            .rev()
            .find(|l| l.query == id && l.until.is_none())
        {
            l.until = Some(at);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::fixtures::{eq, rel};
    use crate::catalog::Relation;
    use crate::generate::gen_trace;
    use crate::runtime::oracle::{oracle_join, restrict};

    fn relation(name: &str, attrs: &[&str], window: u64, parallelism: u32) -> Relation {
        Relation {
            rate: 1.0,
            window,
            parallelism,
            ..rel(name, attrs)
        }
    }

    fn relations() -> Vec<Relation> {
        vec![
            relation("R", &["a"], 6, 2),
            relation("S", &["a", "b"], 4, 3),
            relation("T", &["b"], 8, 2),
        ]
    }

    fn rs(id: &str) -> Query {
        Query::new(id, ["R", "S"], [eq(("R", "a"), ("S", "a"))])
    }

    fn st(id: &str) -> Query {
        Query::new(id, ["S", "T"], [eq(("S", "b"), ("T", "b"))])
    }

    fn rst(id: &str) -> Query {
        Query::new(
            id,
            ["R", "S", "T"],
            [eq(("R", "a"), ("S", "a")), eq(("S", "b"), ("T", "b"))],
        )
    }

    fn catalog(queries: Vec<Query>) -> Catalog {
        validate_workload(queries, relations()).unwrap()
    }

    /// Simulates and compares against the oracle restricted to lifetimes.
    fn check(catalog: &Catalog, trace: &[Event], cfg: &SimConfig) -> SimOutput {
        let out = run_simulation(catalog, trace, cfg).unwrap();
        let mut queries = catalog.queries().to_vec();
        for l in &cfg.lifecycle {
            if let LifecycleOp::Register(q) = &l.op {
                queries.push(q.clone());
            }
        }
        let expected = restrict(&oracle_join(catalog, &queries, trace), &out.lifetimes);
        assert_eq!(out.results, expected);
        out
    }

    /// The plan with one hop moved to another partitioning.
    fn variant(plan: &SelectedPlan, ctx: &CostContext) -> SelectedPlan {
        let mut p = plan.clone();
        'outer: for o in p.orders.values_mut() {
            for i in 0..o.partitions.len() {
                let cands = plan.mirs.candidates(o.base.hops[i]);
                if let Some(other) = cands.iter().find(|c| **c != o.partitions[i]) {
                    o.partitions[i] = other.clone();
                    break 'outer;
                }
            }
        }
        p.prune();
        p.cost = p.recost(ctx).unwrap();
        assert_ne!(p.canonical(), plan.canonical());
        p
    }

    #[test]
    fn static_mode_matches_the_oracle() {
        let c = catalog(vec![rst("q1"), st("q2")]);
        for seed in 0..5 {
            let trace = gen_trace(&c, 60, seed);
            let out = check(&c, &trace, &SimConfig::default());
            assert!(!out.results.is_empty());
        }
    }

    #[test]
    fn adaptive_mode_matches_the_oracle_across_a_forced_switch() {
        let c = catalog(vec![rst("q1"), st("q2")]);
        let ctx = CostContext::configured(&c);
        let base = optimize(c.queries(), &ctx, OptimizeOptions::default())
            .unwrap()
            .plan;
        let cfg = SimConfig {
            mode: SimMode::Adaptive,
            plan: Some(base.clone()),
            forced: BTreeMap::from([(3, variant(&base, &ctx))]),
            ..SimConfig::default()
        };
        for seed in 0..5 {
            let out = check(&c, &gen_trace(&c, 80, seed), &cfg);
            let e2 = out.metrics.epoch(2).unwrap();
            let e3 = out.metrics.epoch(3).unwrap();
            assert_ne!(e2.routing, e3.routing);
            assert!(e3.switched);
        }
    }

    #[test]
    fn emission_carries_the_newest_timestamp() {
        let c = catalog(vec![rst("q1")]);
        let out = check(&c, &gen_trace(&c, 40, 9), &SimConfig::default());
        for r in &out.results {
            assert_eq!(r.ts, r.tuples.iter().map(|t| t.ts).max().unwrap());
        }
        assert_eq!(out.metrics.totals.latency_max, 0);
    }

    #[test]
    fn registering_a_twin_query_reuses_its_stores() {
        let c = catalog(vec![rs("q1")]);
        let cfg = SimConfig {
            mode: SimMode::Adaptive,
            lifecycle: vec![Lifecycle {
                at: 23,
                op: LifecycleOp::Register(rs("q2")),
            }],
            ..SimConfig::default()
        };
        let trace = gen_trace(&c, 60, 3);
        let out = check(&c, &trace, &cfg);
        assert_eq!(out.registrations[0].complete_from, BTreeMap::new());
        let first = out
            .results
            .iter()
            .filter(|r| r.query == "q2")
            .map(|r| r.ts)
            .min();
        assert!(first.is_some_and(|t| t < 30));
    }

    #[test]
    fn registering_over_an_unstored_relation_is_complete_later() {
        let c = catalog(vec![rs("q1")]);
        for mode in [SimMode::Static, SimMode::Adaptive] {
            let cfg = SimConfig {
                mode,
                lifecycle: vec![Lifecycle {
                    at: 25,
                    op: LifecycleOp::Register(st("q2")),
                }],
                ..SimConfig::default()
            };
            let out = check(&c, &gen_trace(&c, 60, 5), &cfg);
            let from = &out.registrations[0].complete_from;
            assert_eq!(from.get("T"), Some(&25));
        }
    }

    #[test]
    fn removal_stops_results_and_drops_unshared_stores() {
        let c = catalog(vec![rs("q1"), st("q2")]);
        let cfg = SimConfig {
            mode: SimMode::Adaptive,
            lifecycle: vec![Lifecycle {
                at: 31,
                op: LifecycleOp::Remove("q2".into()),
            }],
            ..SimConfig::default()
        };
        let out = check(&c, &gen_trace(&c, 60, 1), &cfg);
        assert!(out.results.iter().any(|r| r.query == "q2"));
        assert!(out
            .results
            .iter()
            .filter(|r| r.query == "q2")
            .all(|r| r.ts < 31));
        let last = out.metrics.epochs.last().unwrap();
        assert!(last.orders.iter().all(|o| !o.starts_with("q2")));
    }

    #[test]
    fn shared_stores_are_counted_per_query() {
        let c = catalog(vec![rs("q1"), rs("q2")]);
        let ctx = CostContext::configured(&c);
        let one = optimize(c.queries(), &ctx, OptimizeOptions::default())
            .unwrap()
            .plan;
        let twins = bootstrap(
            &one,
            &rs("q2"),
            vec![rs("q1"), rs("q2")],
            &ctx,
            &BTreeMap::new(),
            &mut BTreeMap::new(),
        )
        .unwrap();
        let counts = store_refcounts(&twins);
        assert!(!counts.is_empty());
        assert!(counts.values().all(|n| *n == 2));
        let single = twins.rebase(vec![rs("q1")], &ctx).unwrap();
        assert!(store_refcounts(&single).values().all(|n| *n == 1));
    }

    #[test]
    fn lifecycle_errors() {
        let c = catalog(vec![rs("q1")]);
        let trace = gen_trace(&c, 20, 0);
        let dup = SimConfig {
            lifecycle: vec![Lifecycle {
                at: 5,
                op: LifecycleOp::Register(st("q1")),
            }],
            ..SimConfig::default()
        };
        assert!(matches!(
            run_simulation(&c, &trace, &dup),
            Err(RuntimeError::DuplicateQueryId(_))
        ));
        let unknown = SimConfig {
            lifecycle: vec![Lifecycle {
                at: 5,
                op: LifecycleOp::Remove("nope".into()),
            }],
            ..SimConfig::default()
        };
        assert!(matches!(
            run_simulation(&c, &trace, &unknown),
            Err(RuntimeError::UnknownQuery(_))
        ));
    }

    #[test]
    fn empty_trace_yields_nothing() {
        let c = catalog(vec![rst("q1")]);
        let out = run_simulation(&c, &[], &SimConfig::default()).unwrap();
        assert!(out.results.is_empty());
        assert_eq!(out.metrics, MetricsLog::default());
    }

    #[test]
    fn decreasing_timestamps_are_rejected() {
        let c = catalog(vec![rs("q1")]);
        let mut trace = gen_trace(&c, 5, 0);
        trace.reverse();
        assert!(matches!(
            run_simulation(&c, &trace, &SimConfig::default()),
            Err(RuntimeError::InvalidTrace(_))
        ));
    }

    #[test]
    fn steady_statistics_keep_the_plan() {
        let c = catalog(vec![rst("q1"), st("q2")]);
        let cfg = SimConfig {
            mode: SimMode::Adaptive,
            ..SimConfig::default()
        };
        let a = run_simulation(&c, &gen_trace(&c, 50, 2), &cfg).unwrap();
        let b = run_simulation(&c, &gen_trace(&c, 50, 2), &cfg).unwrap();
        assert_eq!(a.results, b.results);
        assert_eq!(a.metrics, b.metrics);
    }
}
