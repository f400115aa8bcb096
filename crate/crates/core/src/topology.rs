//! Compiled plans: probe trees, stores and per-store rulesets.
//!
//! Orders that start at the same relation merge into a tree wherever their
//! steps coincide, so a shared step is sent once. Every tree edge gets a
//! label of its own even when two trees contain equal steps; labels name
//! routes while stores hold state. One store exists per distinct
//! (MIR, partitioning) node label.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{AttrRef, JoinScope};
use crate::cost::CostContext;
use crate::ilp::{fnv1a, SelectedPlan};
use crate::mir::MirId;
use crate::orders::{prefixes, StepKey, Target};

pub const OUTPUT_PREFIX: &str = "output:";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("edge {0} has no registered rule")]
    UnroutableEdge(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EdgeLabel(pub String);

impl EdgeLabel {
    pub fn output(query: &str) -> Self {
        Self(format!("{OUTPUT_PREFIX}{query}"))
    }

    /// The query a pseudo-edge delivers to.
    pub fn output_query(&self) -> Option<&str> {
        self.0.strip_prefix(OUTPUT_PREFIX)
    }
}

impl std::fmt::Display for EdgeLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Store identity, stable across MIR numberings.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StoreKey {
    pub scope: JoinScope,
    pub partition: AttrRef,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeNode {
    /// `None` for the root, which is the input relation itself.
    pub step: Option<StepKey>,
    pub parent: Option<usize>,
    /// Edge from the parent; `None` for the root.
    pub edge: Option<EdgeLabel>,
    /// Queries whose order ends here.
    pub outputs: Vec<String>,
    /// MIRs whose input order ends here.
    pub materializes: Vec<MirId>,
}

/// Nodes are in breadth-first order, children sorted by node label, so edge
/// labels grow with depth.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeTree {
    pub root: String,
    pub nodes: Vec<TreeNode>,
}

impl ProbeTree {
    pub fn children(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(move |(_, n)| n.parent == Some(node))
            .map(|(i, _)| i)
    }

    /// Edges as `(label, from, to)` with node labels such as `S[d]`.
    pub fn edges(&self, plan: &SelectedPlan) -> Vec<(EdgeLabel, String, String)> {
        self.nodes
            .iter()
            .filter_map(|n| {
                let edge = n.edge.clone()?;
                let parent = &self.nodes[n.parent?];
                Some((
                    edge,
                    self.node_label(parent, plan),
                    self.node_label(n, plan),
                ))
            })
            .collect()
    }

    pub fn node_label(&self, node: &TreeNode, plan: &SelectedPlan) -> String {
        match &node.step {
            None => self.root.clone(),
            Some(s) => {
                let (m, p) = s.target();
                format!("{}[{}]", plan.mirs.get(m).label, p.attribute)
            }
        }
    }
}

/// One tree per input relation that starts an installed order, sorted by
/// relation. Edge labels `s1, s2, ...` run across the whole forest.
pub fn merge_probe_trees(plan: &SelectedPlan) -> Vec<ProbeTree> {
    let mut by_start: BTreeMap<&str, Vec<(Target, Vec<StepKey>)>> = BTreeMap::new();
    for o in plan.all_orders() {
        let steps = prefixes(o, plan.scope_of(&o.base.target), &plan.mirs);
        by_start
            .entry(o.base.start.as_str())
            .or_default()
            .push((o.base.target.clone(), steps));
    }
    let mut next = 1;
    let mut forest = Vec::new();
    for (start, orders) in by_start {
        // trie over steps; entry 0 is the root
        let mut trie: Vec<(Option<StepKey>, Option<usize>, Vec<usize>)> =
            vec![(None, None, vec![])];
        let mut index: BTreeMap<StepKey, usize> = BTreeMap::new();
        let mut ends: BTreeMap<usize, Vec<Target>> = BTreeMap::new();
        for (target, steps) in orders {
            let mut at = 0;
            for s in steps {
                at = *index.entry(s.clone()).or_insert_with(|| {
                    trie.push((Some(s), Some(at), vec![]));
                    let id = trie.len() - 1;
                    trie[at].2.push(id);
                    id
                });
            }
            ends.entry(at).or_default().push(target);
        }
        let label = |i: usize| -> (String, StepKey) {
            let s = trie[i].0.clone().expect("only the root lacks a step");
            let (m, p) = s.target();
            (format!("{}[{}]", plan.mirs.get(m).label, p.attribute), s)
        };
        let mut nodes = Vec::with_capacity(trie.len());
        let mut queue = VecDeque::from([(0usize, None::<usize>)]);
        while let Some((t, parent)) = queue.pop_front() {
            let me = nodes.len();
            let mut outputs = Vec::new();
            let mut materializes = Vec::new();
            for target in ends.get(&t).into_iter().flatten() {
                match target {
                    Target::Query(q) => outputs.push(q.clone()),
                    Target::Mir(m) => materializes.push(*m),
                }
            }
            outputs.sort();
            materializes.sort();
            let edge = parent.map(|_| {
                let l = EdgeLabel(format!("s{next}"));
                next += 1;
                l
            });
            nodes.push(TreeNode {
                step: trie[t].0.clone(),
                parent,
                edge,
                outputs,
                materializes,
            });
            let mut kids = trie[t].2.clone();
            kids.sort_by_cached_key(|k| label(*k));
            queue.extend(kids.into_iter().map(|k| (k, Some(me))));
        }
        forest.push(ProbeTree {
            root: start.to_string(),
            nodes,
        });
    }
    forest
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    Store,
    Probe,
}

/// An equality between an attribute of the incoming tuple and one of the
/// stored tuples.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OrientedPredicate {
    pub incoming: AttrRef,
    pub stored: AttrRef,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub kind: RuleKind,
    pub in_edge: EdgeLabel,
    /// Probe rules only; the first one drives the index lookup.
    pub predicates: Vec<OrientedPredicate>,
    /// Incoming attribute that carries the partitioning value. Store rules
    /// always carry it; probe rules without one broadcast.
    pub route: Option<AttrRef>,
    pub out_edges: Vec<EdgeLabel>,
    /// The step a probe rule executes, for accounting.
    pub step: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Store {
    pub key: StoreKey,
    pub label: String,
    pub parallelism: u32,
    /// Stored attributes some probe looks up.
    pub indexes: BTreeSet<AttrRef>,
    pub rules: BTreeMap<EdgeLabel, Vec<Rule>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub label: EdgeLabel,
    /// A relation name for source edges, otherwise a store label.
    pub from: String,
    pub to: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Source {
    pub relation: String,
    pub out_edges: Vec<EdgeLabel>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Topology {
    pub stores: Vec<Store>,
    pub edges: Vec<Edge>,
    pub sources: Vec<Source>,
}

impl Topology {
    pub fn edge(&self, label: &EdgeLabel) -> Option<&Edge> {
        self.edges.iter().find(|e| &e.label == label)
    }

    pub fn store(&self, key: &StoreKey) -> Option<&Store> {
        self.stores.iter().find(|s| &s.key == key)
    }

    pub fn source(&self, relation: &str) -> Option<&Source> {
        self.sources.iter().find(|s| s.relation == relation)
    }

    pub fn summary(&self) -> TopologySummary {
        TopologySummary {
            stores: self
                .stores
                .iter()
                .map(|s| StoreSummary {
                    label: s.label.clone(),
                    relations: s.key.scope.relations.iter().cloned().collect(),
                    partition: s.key.partition.clone(),
                    parallelism: s.parallelism,
                    indexes: s.indexes.iter().cloned().collect(),
                })
                .collect(),
            edges: self
                .edges
                .iter()
                .map(|e| EdgeSummary {
                    label: e.label.clone(),
                    from: e.from.clone(),
                    to: self.stores[e.to].label.clone(),
                })
                .collect(),
            sources: self
                .sources
                .iter()
                .map(|s| SourceSummary {
                    relation: s.relation.clone(),
                    out_edges: s.out_edges.clone(),
                })
                .collect(),
            rules: self
                .stores
                .iter()
                .flat_map(|s| {
                    s.rules.values().flatten().map(|r| RuleSummary {
                        store: s.label.clone(),
                        rule: r.clone(),
                    })
                })
                .collect(),
        }
    }
}

fn store_label(plan: &SelectedPlan, mir: MirId, partition: &AttrRef) -> String {
    format!("{}[{}]", plan.mirs.get(mir).label, partition.attribute)
}

/// Registers the rules of every tree at the stores its edges lead to. Base
/// tuples reach each store of their relation over a store edge, results of
/// MIR input orders reach each partitioning of that MIR.
pub fn build_rulesets(
    forest: &[ProbeTree],
    plan: &SelectedPlan,
    ctx: &CostContext,
) -> Result<Topology, TopologyError> {
    let mut stores: Vec<Store> = Vec::new();
    let mut by_key: BTreeMap<StoreKey, usize> = BTreeMap::new();
    let mut store_of = |mir: MirId, p: &AttrRef, stores: &mut Vec<Store>| -> usize {
        let key = StoreKey {
            scope: plan.mirs.get(mir).scope.clone(),
            partition: p.clone(),
        };
        *by_key.entry(key.clone()).or_insert_with(|| {
            stores.push(Store {
                key,
                label: store_label(plan, mir, p),
                parallelism: ctx.store_parallelism(&plan.mirs, mir),
                indexes: BTreeSet::new(),
                rules: BTreeMap::new(),
            });
            stores.len() - 1
        })
    };

    // node stores first so store order follows the trees
    let mut node_store: Vec<Vec<Option<usize>>> = Vec::new();
    for tree in forest {
        let ids = tree
            .nodes
            .iter()
            .map(|n| {
                n.step.as_ref().map(|s| {
                    let (m, p) = s.target();
                    store_of(m, p, &mut stores)
                })
            })
            .collect();
        node_store.push(ids);
    }

    let mut edges: Vec<Edge> = Vec::new();
    let mut next = forest
        .iter()
        .flat_map(|t| t.nodes.iter())
        .filter(|n| n.edge.is_some())
        .count()
        + 1;
    let mut fresh = || {
        let l = EdgeLabel(format!("s{next}"));
        next += 1;
        l
    };

    // base relations: one store edge per stored partitioning
    let mut base_edges: BTreeMap<String, Vec<EdgeLabel>> = BTreeMap::new();
    for i in 0..stores.len() {
        let s = &stores[i];
        if s.key.scope.relations.len() != 1 {
            continue;
        }
        let rel = s
            .key
            .scope
            .relations
            .iter()
            .next()
            .expect("one relation")
            .clone();
        let label = fresh();
        let rule = Rule {
            kind: RuleKind::Store,
            in_edge: label.clone(),
            predicates: Vec::new(),
            route: Some(s.key.partition.clone()),
            out_edges: Vec::new(),
            step: None,
        };
        stores[i].rules.insert(label.clone(), vec![rule]);
        edges.push(Edge {
            label: label.clone(),
            from: rel.clone(),
            to: i,
        });
        base_edges.entry(rel).or_default().push(label);
    }

    // MIR materializations: the stores of every selected partitioning
    let mut mir_stores: BTreeMap<MirId, Vec<usize>> = BTreeMap::new();
    for (m, mat) in &plan.materialized {
        for p in &mat.partitions {
            let id = store_of(*m, p, &mut stores);
            mir_stores.entry(*m).or_default().push(id);
        }
    }

    let mut sources = Vec::new();
    for (t, tree) in forest.iter().enumerate() {
        let mut outs: Vec<Vec<EdgeLabel>> = vec![Vec::new(); tree.nodes.len()];
        for n in &tree.nodes {
            if let (Some(p), Some(e)) = (n.parent, &n.edge) {
                outs[p].push(e.clone());
            }
        }
        for (i, n) in tree.nodes.iter().enumerate() {
            for m in &n.materializes {
                for &st in mir_stores.get(m).into_iter().flatten() {
                    let label = fresh();
                    let from = match node_store[t][i] {
                        Some(s) => stores[s].label.clone(),
                        None => tree.root.clone(),
                    };
                    let route = Some(stores[st].key.partition.clone());
                    stores[st].rules.insert(
                        label.clone(),
                        vec![Rule {
                            kind: RuleKind::Store,
                            in_edge: label.clone(),
                            predicates: Vec::new(),
                            route,
                            out_edges: Vec::new(),
                            step: None,
                        }],
                    );
                    edges.push(Edge {
                        label: label.clone(),
                        from,
                        to: st,
                    });
                    outs[i].push(label);
                }
            }
            outs[i].extend(n.outputs.iter().map(|q| EdgeLabel::output(q)));
        }
        for (i, n) in tree.nodes.iter().enumerate() {
            let (Some(step), Some(edge), Some(parent)) = (&n.step, &n.edge, n.parent) else {
                continue;
            };
            let st = node_store[t][i].expect("non-root nodes have stores");
            let head = step.head(&plan.mirs);
            let stored: BTreeSet<String> = stores[st].key.scope.relations.clone();
            let predicates: Vec<OrientedPredicate> = step
                .predicates
                .iter()
                .filter_map(|k| k.between(&head, &stored))
                .map(|(a, b)| OrientedPredicate {
                    incoming: a.clone(),
                    stored: b.clone(),
                })
                .collect();
            let partition = &stores[st].key.partition;
            let route = predicates
                .iter()
                .find(|p| &p.stored == partition)
                .map(|p| p.incoming.clone());
            stores[st]
                .indexes
                .extend(predicates.iter().map(|p| p.stored.clone()));
            let from = match node_store[t][parent] {
                Some(s) => stores[s].label.clone(),
                None => tree.root.clone(),
            };
            stores[st].rules.insert(
                edge.clone(),
                vec![Rule {
                    kind: RuleKind::Probe,
                    in_edge: edge.clone(),
                    predicates,
                    route,
                    out_edges: outs[i].clone(),
                    step: Some(step.display(&plan.mirs)),
                }],
            );
            edges.push(Edge {
                label: edge.clone(),
                from,
                to: st,
            });
        }
        let mut out_edges = base_edges.remove(&tree.root).unwrap_or_default();
        out_edges.extend(outs[0].iter().cloned());
        sources.push(Source {
            relation: tree.root.clone(),
            out_edges,
        });
    }
    // relations that start no order but are stored
    for (rel, out_edges) in base_edges {
        sources.push(Source {
            relation: rel,
            out_edges,
        });
    }
    sources.sort_by(|a, b| a.relation.cmp(&b.relation));
    edges.sort_by_key(|e| e.label.0[1..].parse::<usize>().unwrap_or(usize::MAX));

    let topo = Topology {
        stores,
        edges,
        sources,
    };
    for e in &topo.edges {
        if !topo.stores[e.to].rules.contains_key(&e.label) {
            return Err(TopologyError::UnroutableEdge(e.label.0.clone()));
        }
    }
    for s in &topo.sources {
        for e in &s.out_edges {
            if e.output_query().is_none() && topo.edge(e).is_none() {
                return Err(TopologyError::UnroutableEdge(e.0.clone()));
            }
        }
    }
    for s in &topo.stores {
        for r in s.rules.values().flatten() {
            for e in &r.out_edges {
                if e.output_query().is_none() && topo.edge(e).is_none() {
                    return Err(TopologyError::UnroutableEdge(e.0.clone()));
                }
            }
        }
    }
    Ok(topo)
}

pub fn compile(plan: &SelectedPlan, ctx: &CostContext) -> Result<Topology, TopologyError> {
    build_rulesets(&merge_probe_trees(plan), plan, ctx)
}

/// Routing hash of an attribute value.
pub fn value_hash(value: &str) -> u64 {
    fnv1a(value.as_bytes())
}

/// Workers a tuple goes to: the hashed partition when its value is known,
/// otherwise all of them.
pub fn partition_route(value: Option<&str>, parallelism: u32) -> Vec<u32> {
    let p = parallelism.max(1);
    match value {
        Some(v) => vec![(value_hash(v) % p as u64) as u32],
        None => (0..p).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreSummary {
    pub label: String,
    pub relations: Vec<String>,
    pub partition: AttrRef,
    pub parallelism: u32,
    pub indexes: Vec<AttrRef>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeSummary {
    pub label: EdgeLabel,
    pub from: String,
    pub to: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceSummary {
    pub relation: String,
    pub out_edges: Vec<EdgeLabel>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleSummary {
    pub store: String,
    #[serde(flatten)]
    pub rule: Rule,
}

/// The JSON view of a topology.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopologySummary {
    pub stores: Vec<StoreSummary>,
    pub edges: Vec<EdgeSummary>,
    pub sources: Vec<SourceSummary>,
    pub rules: Vec<RuleSummary>,
}
