//! Materializable intermediate results.
//!
//! A MIR is a connected, proper subset of some query's relations together with
//! the predicates among them. Base relations are MIRs too; they are the stores
//! every tuple lands in.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::catalog::{AttrRef, JoinScope, Query};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MirId(pub usize);

impl fmt::Display for MirId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mir {
    pub id: MirId,
    /// Relation names joined with `+`, suffixed `#n` when two MIRs cover the
    /// same relations with different predicates.
    pub label: String,
    pub scope: JoinScope,
    pub defining_queries: BTreeSet<String>,
}

impl Mir {
    pub fn relations(&self) -> &BTreeSet<String> {
        &self.scope.relations
    }

    pub fn is_base(&self) -> bool {
        self.scope.relations.len() == 1
    }

    pub fn base_relation(&self) -> Option<&str> {
        if self.is_base() {
            self.scope.relations.iter().next().map(String::as_str)
        } else {
            None
        }
    }
}

/// All MIRs of a workload, ordered by (size, relations, predicates), with their
/// partitioning candidates.
#[derive(Clone, Debug)]
pub struct MirSet {
    mirs: Vec<Mir>,
    candidates: Vec<Vec<AttrRef>>,
    by_scope: HashMap<JoinScope, MirId>,
    base: BTreeMap<String, MirId>,
}

impl MirSet {
    pub fn len(&self) -> usize {
        self.mirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mirs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Mir> {
        self.mirs.iter()
    }

    pub fn get(&self, id: MirId) -> &Mir {
        &self.mirs[id.0]
    }

    pub fn lookup(&self, scope: &JoinScope) -> Option<MirId> {
        self.by_scope.get(scope).copied()
    }

    pub fn base(&self, relation: &str) -> Option<MirId> {
        self.base.get(relation).copied()
    }

    pub fn by_label(&self, label: &str) -> Option<&Mir> {
        self.mirs.iter().find(|m| m.label == label)
    }

    pub fn labels(&self) -> Vec<&str> {
        self.mirs.iter().map(|m| m.label.as_str()).collect()
    }

    /// Partitioning candidates of `id` under the workload the set was built from.
    pub fn candidates(&self, id: MirId) -> &[AttrRef] {
        &self.candidates[id.0]
    }
}

/// Enumerates every MIR of every query, deduplicated by relations and
/// internal predicates.
pub fn enumerate_mirs(queries: &[Query]) -> MirSet {
    let mut found: BTreeMap<(usize, JoinScope), BTreeSet<String>> = BTreeMap::new();
    for q in queries {
        for subset in connected_subsets(q.scope()) {
            if subset.len() == q.relations().len() {
                continue;
            }
            let scope = JoinScope::new(subset.clone(), q.scope().predicates_within(&subset));
            found
                .entry((subset.len(), scope))
                .or_default()
                .insert(q.id.clone());
        }
    }

    let mut per_rel_set: HashMap<BTreeSet<String>, usize> = HashMap::new();
    let mut mirs = Vec::with_capacity(found.len());
    for (i, ((_, scope), defining_queries)) in found.into_iter().enumerate() {
        let mut label = scope
            .relations
            .iter()
            .map(String::as_str)
            .collect::<Vec<_>>()
            .join("+");
        let seen = per_rel_set.entry(scope.relations.clone()).or_insert(0);
        *seen += 1;
        if *seen > 1 {
            label = format!("{label}#{seen}");
        }
        mirs.push(Mir {
            id: MirId(i),
            label,
            scope,
            defining_queries,
        });
    }

    let candidates = mirs
        .iter()
        .map(|m| partitioning_candidates(m, queries))
        .collect();
    let by_scope = mirs.iter().map(|m| (m.scope.clone(), m.id)).collect();
    let base = mirs
        .iter()
        .filter_map(|m| m.base_relation().map(|r| (r.to_string(), m.id)))
        .collect();
    MirSet {
        mirs,
        candidates,
        by_scope,
        base,
    }
}

/// Attributes of `mir` that join, in some query, with a relation outside it.
pub fn partitioning_candidates(mir: &Mir, queries: &[Query]) -> Vec<AttrRef> {
    let mut out = BTreeSet::new();
    for q in queries {
        for p in &q.scope().predicates {
            if let Some((inside, _)) = p.split(mir.relations()) {
                out.insert(inside.clone());
            }
        }
    }
    out.into_iter().collect()
}

/// All connected non-empty subsets of the scope's relations, grown one
/// adjacent relation at a time.
pub fn connected_subsets(scope: &JoinScope) -> Vec<BTreeSet<String>> {
    let mut adjacency: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for p in &scope.predicates {
        let (l, r) = p.relations();
        adjacency.entry(l).or_default().insert(r);
        adjacency.entry(r).or_default().insert(l);
    }
    let mut seen: HashSet<BTreeSet<String>> = HashSet::new();
    let mut frontier: Vec<BTreeSet<String>> = scope
        .relations
        .iter()
        .map(|r| BTreeSet::from([r.clone()]))
        .collect();
    let mut out = Vec::new();
    while let Some(set) = frontier.pop() {
        if !seen.insert(set.clone()) {
            continue;
        }
        for rel in &set {
            for &n in adjacency.get(rel.as_str()).into_iter().flatten() {
                if !set.contains(n) {
                    let mut next = set.clone();
                    next.insert(n.to_string());
                    if !seen.contains(&next) {
                        frontier.push(next);
                    }
                }
            }
        }
        out.push(set);
    }
    out.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    out
}
