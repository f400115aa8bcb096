//! On-disk formats: workload and plan JSON, trace, result and metrics JSONL,
//! lifecycle scripts.
//!
//! Plan files name MIRs by their relations. Within an order's target scope
//! the relations fix the predicates too, so a plan file reads back into the
//! MIR set of any workload containing the same queries.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{
    AttrRef, Catalog, CatalogError, JoinKey, JoinScope, Query, QuerySpec, Workload,
};
use crate::cost::{CostContext, CostError};
use crate::ilp::{MaterializedMir, PlanError, SelectedPlan};
use crate::mir::{MirId, MirSet};
use crate::orders::{PartitionedOrder, ProbeOrder, Target};
use crate::runtime::{EpochMetrics, Event, JoinResult, Lifecycle, LifecycleOp, MetricsLog};
use crate::topology::{compile, TopologyError, TopologySummary};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}:{line}", path.display())]
    Json {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },
    #[error("{}:{line}: {reason}", path.display())]
    Format {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error("plan: {0}")]
    Plan(String),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn json_err(path: &Path, line: usize) -> impl FnOnce(serde_json::Error) -> IoError + '_ {
    move |source| IoError::Json {
        path: path.to_path_buf(),
        line,
        source,
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(json_err(path, 0))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value).expect("plain data serializes");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn write_lines<T: Serialize>(
    path: &Path,
    items: impl IntoIterator<Item = T>,
) -> Result<(), IoError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(&item).expect("plain data serializes");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_workload(path: &Path) -> Result<Catalog, IoError> {
    let w: Workload = read_json(path)?;
    Ok(w.validate()?)
}

pub fn write_workload(path: &Path, catalog: &Catalog) -> Result<(), IoError> {
    write_json(path, &catalog.to_workload())
}

/// One line per event; `seq` is the line's position among non-empty lines.
/// Attribute values may be strings, numbers or booleans and compare by their
/// text.
pub fn read_trace(path: &Path) -> Result<Vec<Event>, IoError> {
    #[derive(Deserialize)]
    struct Raw {
        rel: String,
        ts: u64,
        attrs: BTreeMap<String, serde_json::Value>,
    }
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: Raw = serde_json::from_str(&line).map_err(json_err(path, i + 1))?;
        let mut attrs = BTreeMap::new();
        for (a, v) in raw.attrs {
            let text = match v {
                serde_json::Value::String(s) => s,
                serde_json::Value::Number(n) => n.to_string(),
                serde_json::Value::Bool(b) => b.to_string(),
                other => {
                    return Err(IoError::Format {
                        path: path.to_path_buf(),
                        line: i + 1,
                        reason: format!("attribute {a} has unsupported value {other}"),
                    })
                }
            };
            attrs.insert(a, text);
        }
        out.push(Event {
            rel: raw.rel,
            ts: raw.ts,
            attrs,
            seq: out.len() as u64,
        });
    }
    Ok(out)
}

pub fn write_trace(path: &Path, events: &[Event]) -> Result<(), IoError> {
    write_lines(path, events)
}

pub fn write_results(path: &Path, results: &[JoinResult]) -> Result<(), IoError> {
    write_lines(path, results)
}

pub fn read_results(path: &Path) -> Result<Vec<JoinResult>, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(json_err(path, i + 1)))
        .collect()
}

#[derive(Serialize)]
struct MetricsSummary<'a> {
    totals: &'a crate::runtime::Counters,
    steps: &'a BTreeMap<String, crate::runtime::StepCounter>,
}

/// One line per closed epoch, then a line with the run totals and per-step
/// counters.
pub fn write_metrics(path: &Path, metrics: &MetricsLog) -> Result<(), IoError> {
    let mut lines: Vec<serde_json::Value> = metrics
        .epochs
        .iter()
        .map(|e: &EpochMetrics| serde_json::to_value(e).expect("plain data serializes"))
        .collect();
    lines.push(
        serde_json::to_value(MetricsSummary {
            totals: &metrics.totals,
            steps: &metrics.steps,
        })
        .expect("plain data serializes"),
    );
    write_lines(path, lines)
}

/// `{"at": 20, "register": {query}}` or `{"at": 30, "remove": "q2"}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LifecycleSpec {
    pub at: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub register: Option<QuerySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub remove: Option<String>,
}

pub fn read_lifecycle(path: &Path) -> Result<Vec<Lifecycle>, IoError> {
    let specs: Vec<LifecycleSpec> = read_json(path)?;
    specs
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let op = match (s.register, s.remove) {
                (Some(q), None) => LifecycleOp::Register(Query::from(q)),
                (None, Some(id)) => LifecycleOp::Remove(id),
                _ => {
                    return Err(IoError::Format {
                        path: path.to_path_buf(),
                        line: i + 1,
                        reason: "entry needs exactly one of register and remove".into(),
                    })
                }
            };
            Ok(Lifecycle { at: s.at, op })
        })
        .collect()
}

/// A probed MIR and the partitioning it is probed under.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HopSpec {
    pub relations: Vec<String>,
    pub partition: AttrRef,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderSpec {
    pub start: String,
    pub hops: Vec<HopSpec>,
    /// Informational.
    pub display: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryOrderSpec {
    pub query: String,
    #[serde(flatten)]
    pub order: OrderSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaterializedSpec {
    pub relations: Vec<String>,
    pub predicates: Vec<JoinKey>,
    pub partitions: Vec<AttrRef>,
    pub orders: Vec<OrderSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    pub mode: String,
    pub objective: f64,
    /// Shared cost of the installed steps.
    pub cost: f64,
    pub status: String,
    pub orders: Vec<QueryOrderSpec>,
    pub materialized: Vec<MaterializedSpec>,
    /// Informational.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topology: Option<TopologySummary>,
}

fn order_spec(o: &PartitionedOrder, mirs: &MirSet) -> OrderSpec {
    OrderSpec {
        start: o.base.start.clone(),
        hops: o
            .hops()
            .map(|(m, p)| HopSpec {
                relations: mirs.get(m).relations().iter().cloned().collect(),
                partition: p.clone(),
            })
            .collect(),
        display: o.display(mirs),
    }
}

impl PlanFile {
    pub fn new(
        plan: &SelectedPlan,
        mode: &str,
        objective: f64,
        status: &str,
        ctx: &CostContext,
    ) -> Result<Self, IoError> {
        let orders = plan
            .orders
            .iter()
            .map(|((q, _), o)| QueryOrderSpec {
                query: q.clone(),
                order: order_spec(o, &plan.mirs),
            })
            .collect();
        let materialized = plan
            .materialized
            .iter()
            .map(|(m, mat)| {
                let mir = plan.mirs.get(*m);
                MaterializedSpec {
                    relations: mir.relations().iter().cloned().collect(),
                    predicates: mir.scope.predicates.iter().cloned().collect(),
                    partitions: mat.partitions.iter().cloned().collect(),
                    orders: mat
                        .orders
                        .values()
                        .map(|o| order_spec(o, &plan.mirs))
                        .collect(),
                }
            })
            .collect();
        Ok(Self {
            mode: mode.to_string(),
            objective,
            cost: plan.cost,
            status: status.to_string(),
            orders,
            materialized,
            topology: Some(compile(plan, ctx)?.summary()),
        })
    }

    /// Resolves the file against the catalog's queries and recosts it.
    pub fn to_plan(&self, catalog: &Catalog, ctx: &CostContext) -> Result<SelectedPlan, IoError> {
        let mut plan = SelectedPlan::empty(catalog.queries().to_vec());
        let resolve = |o: &OrderSpec, target: Target, scope: &JoinScope, mirs: &MirSet| {
            let mut hops = Vec::with_capacity(o.hops.len());
            let mut partitions = Vec::with_capacity(o.hops.len());
            for h in &o.hops {
                let rels: BTreeSet<String> = h.relations.iter().cloned().collect();
                let preds = scope.predicates_within(&rels);
                let id = mirs.lookup(&JoinScope::new(rels, preds)).ok_or_else(|| {
                    IoError::Plan(format!("no MIR over {:?} in {}", h.relations, o.display))
                })?;
                hops.push(id);
                partitions.push(h.partition.clone());
            }
            Ok::<_, IoError>(PartitionedOrder {
                base: ProbeOrder {
                    target,
                    start: o.start.clone(),
                    hops,
                },
                partitions,
            })
        };
        for spec in &self.orders {
            let q = catalog
                .query(&spec.query)
                .ok_or_else(|| IoError::Plan(format!("unknown query {}", spec.query)))?;
            let o = resolve(
                &spec.order,
                Target::Query(q.id.clone()),
                q.scope(),
                &plan.mirs,
            )?;
            plan.orders.insert((q.id.clone(), o.base.start.clone()), o);
        }
        for spec in &self.materialized {
            let scope = JoinScope::new(
                spec.relations.iter().cloned().collect(),
                spec.predicates.iter().cloned().collect(),
            );
            let id: MirId = plan
                .mirs
                .lookup(&scope)
                .ok_or_else(|| IoError::Plan(format!("no MIR over {:?}", spec.relations)))?;
            let mut orders = BTreeMap::new();
            for o in &spec.orders {
                let o = resolve(o, Target::Mir(id), &scope, &plan.mirs)?;
                orders.insert(o.base.start.clone(), o);
            }
            plan.materialized.insert(
                id,
                MaterializedMir {
                    partitions: spec.partitions.iter().cloned().collect(),
                    orders,
                },
            );
        }
        plan.validate()
            .map_err(|e: PlanError| IoError::Plan(e.to_string()))?;
        plan.cost = plan.recost(ctx)?;
        Ok(plan)
    }
}

pub fn write_plan(path: &Path, plan: &PlanFile) -> Result<(), IoError> {
    write_json(path, plan)
}

pub fn read_plan(path: &Path) -> Result<PlanFile, IoError> {
    read_json(path)
}
