//! Relations, queries and workload validation.
//!
//! A workload is a set of streamed relations plus a set of equi-join queries
//! over them. Validation normalizes every query (canonical predicate
//! orientation, sorted relation sets), rejects cross-product queries and
//! self-joins, and drops exact duplicates.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A qualified attribute, `relation.attribute`. Serialized as `["R", "a"]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "(String, String)", into = "(String, String)")]
pub struct AttrRef {
    pub relation: String,
    pub attribute: String,
}

impl AttrRef {
    pub fn new(relation: impl Into<String>, attribute: impl Into<String>) -> Self {
        Self {
            relation: relation.into(),
            attribute: attribute.into(),
        }
    }
}

impl From<(String, String)> for AttrRef {
    fn from((relation, attribute): (String, String)) -> Self {
        Self {
            relation,
            attribute,
        }
    }
}

impl From<AttrRef> for (String, String) {
    fn from(a: AttrRef) -> Self {
        (a.relation, a.attribute)
    }
}

impl fmt::Display for AttrRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.relation, self.attribute)
    }
}

/// Canonical identity of an equi-join predicate: the two sides ordered so
/// that `left < right`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct JoinKey {
    pub left: AttrRef,
    pub right: AttrRef,
}

impl JoinKey {
    pub fn new(a: AttrRef, b: AttrRef) -> Self {
        if a <= b {
            Self { left: a, right: b }
        } else {
            Self { left: b, right: a }
        }
    }

    pub fn relations(&self) -> (&str, &str) {
        (&self.left.relation, &self.right.relation)
    }

    pub fn within(&self, rels: &BTreeSet<String>) -> bool {
        rels.contains(&self.left.relation) && rels.contains(&self.right.relation)
    }

    /// If exactly one side lies in `side`, returns `(inside, outside)`.
    pub fn split(&self, side: &BTreeSet<String>) -> Option<(&AttrRef, &AttrRef)> {
        match (
            side.contains(&self.left.relation),
            side.contains(&self.right.relation),
        ) {
            (true, false) => Some((&self.left, &self.right)),
            (false, true) => Some((&self.right, &self.left)),
            _ => None,
        }
    }

    /// Orients the predicate from `from` to `to`: returns `(attr in from, attr in to)`.
    pub fn between(
        &self,
        from: &BTreeSet<String>,
        to: &BTreeSet<String>,
    ) -> Option<(&AttrRef, &AttrRef)> {
        if from.contains(&self.left.relation) && to.contains(&self.right.relation) {
            Some((&self.left, &self.right))
        } else if from.contains(&self.right.relation) && to.contains(&self.left.relation) {
            Some((&self.right, &self.left))
        } else {
            None
        }
    }
}

impl fmt::Display for JoinKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}={}", self.left, self.right)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Relation {
    pub name: String,
    pub attributes: Vec<String>,
    /// Tuples per tick.
    pub rate: f64,
    /// Ticks.
    pub window: u64,
    pub parallelism: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JoinPredicate {
    pub left: AttrRef,
    pub right: AttrRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selectivity: Option<f64>,
}

impl JoinPredicate {
    pub fn new(left: AttrRef, right: AttrRef) -> Self {
        Self {
            left,
            right,
            selectivity: None,
        }
    }

    pub fn with_selectivity(mut self, s: f64) -> Self {
        self.selectivity = Some(s);
        self
    }

    pub fn key(&self) -> JoinKey {
        JoinKey::new(self.left.clone(), self.right.clone())
    }
}

/// The relations and predicates a probe order has to cover: either a query or
/// the subquery behind a materialized intermediate result.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct JoinScope {
    pub relations: BTreeSet<String>,
    pub predicates: BTreeSet<JoinKey>,
}

impl JoinScope {
    pub fn new(relations: BTreeSet<String>, predicates: BTreeSet<JoinKey>) -> Self {
        Self {
            relations,
            predicates,
        }
    }

    pub fn predicates_within(&self, rels: &BTreeSet<String>) -> BTreeSet<JoinKey> {
        self.predicates
            .iter()
            .filter(|p| p.within(rels))
            .cloned()
            .collect()
    }

    pub fn connects(&self, a: &BTreeSet<String>, b: &BTreeSet<String>) -> bool {
        self.predicates.iter().any(|p| p.between(a, b).is_some())
    }

    /// True iff the subgraph induced on `subset` is connected. Singletons are
    /// connected; the empty set is not.
    pub fn is_connected(&self, subset: &BTreeSet<String>) -> bool {
        let Some(first) = subset.iter().next() else {
            return false;
        };
        let mut seen = BTreeSet::new();
        let mut queue = VecDeque::from([first.as_str()]);
        seen.insert(first.as_str());
        while let Some(rel) = queue.pop_front() {
            for p in &self.predicates {
                if !p.within(subset) {
                    continue;
                }
                let (l, r) = p.relations();
                let next = if l == rel {
                    r
                } else if r == rel {
                    l
                } else {
                    continue;
                };
                if seen.insert(next) {
                    queue.push_back(next);
                }
            }
        }
        seen.len() == subset.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub id: String,
    /// Canonically oriented, sorted, without duplicates.
    pub predicates: Vec<JoinPredicate>,
    scope: JoinScope,
}

impl Query {
    /// Builds a query, normalizing predicate orientation. Structural checks
    /// happen in [`validate_workload`].
    pub fn new(
        id: impl Into<String>,
        relations: impl IntoIterator<Item = impl Into<String>>,
        predicates: impl IntoIterator<Item = JoinPredicate>,
    ) -> Self {
        let relations: BTreeSet<String> = relations.into_iter().map(Into::into).collect();
        let mut by_key: BTreeMap<JoinKey, Option<f64>> = BTreeMap::new();
        for p in predicates {
            let entry = by_key.entry(p.key()).or_insert(None);
            if entry.is_none() {
                *entry = p.selectivity;
            }
        }
        let predicates = by_key
            .iter()
            .map(|(k, s)| JoinPredicate {
                left: k.left.clone(),
                right: k.right.clone(),
                selectivity: *s,
            })
            .collect();
        let scope = JoinScope::new(relations, by_key.into_keys().collect());
        Self {
            id: id.into(),
            predicates,
            scope,
        }
    }

    pub fn relations(&self) -> &BTreeSet<String> {
        &self.scope.relations
    }

    pub fn scope(&self) -> &JoinScope {
        &self.scope
    }

    /// Two queries are exact duplicates when relation and predicate sets match.
    pub fn same_shape(&self, other: &Query) -> bool {
        self.scope == other.scope
    }

    pub fn join_graph(&self) -> JoinGraph {
        join_graph(self)
    }

    pub fn is_connected(&self, subset: &BTreeSet<String>) -> bool {
        self.scope.is_connected(subset)
    }
}

/// Adjacency view of a query's join graph.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JoinGraph {
    pub nodes: Vec<String>,
    /// One edge per predicate.
    pub edges: Vec<JoinKey>,
    pub neighbors: BTreeMap<String, Vec<String>>,
}

pub fn join_graph(query: &Query) -> JoinGraph {
    let nodes: Vec<String> = query.relations().iter().cloned().collect();
    let mut neighbors: BTreeMap<String, BTreeSet<String>> =
        nodes.iter().map(|n| (n.clone(), BTreeSet::new())).collect();
    let edges: Vec<JoinKey> = query.scope.predicates.iter().cloned().collect();
    for e in &edges {
        let (l, r) = e.relations();
        neighbors
            .entry(l.to_string())
            .or_default()
            .insert(r.to_string());
        neighbors
            .entry(r.to_string())
            .or_default()
            .insert(l.to_string());
    }
    JoinGraph {
        nodes,
        edges,
        neighbors: neighbors
            .into_iter()
            .map(|(k, v)| (k, v.into_iter().collect()))
            .collect(),
    }
}

pub fn is_connected(subset: &BTreeSet<String>, query: &Query) -> bool {
    query.is_connected(subset)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CatalogError {
    #[error("query {query}: unknown relation {relation}")]
    UnknownRelation { query: String, relation: String },
    #[error("query {query}: unknown attribute {attribute}")]
    UnknownAttribute { query: String, attribute: String },
    #[error("query {query}: join graph is not connected")]
    DisconnectedQuery { query: String },
    #[error("query {query}: self-join on relation {relation}")]
    SelfJoin { query: String, relation: String },
    #[error("query {query}: needs at least two relations")]
    TooFewRelations { query: String },
    #[error("duplicate query id {0} with a different definition")]
    DuplicateQueryId(String),
    #[error("duplicate relation {0}")]
    DuplicateRelation(String),
    #[error("relation {relation}: {reason}")]
    InvalidRelation { relation: String, reason: String },
    #[error("query {query}: selectivity {value} outside [0, 1]")]
    InvalidSelectivity { query: String, value: f64 },
}

/// A validated workload. Immutable after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct Catalog {
    relations: BTreeMap<String, Relation>,
    queries: Vec<Query>,
}

impl Catalog {
    pub fn relations(&self) -> &BTreeMap<String, Relation> {
        &self.relations
    }

    pub fn relation(&self, name: &str) -> Option<&Relation> {
        self.relations.get(name)
    }

    pub fn queries(&self) -> &[Query] {
        &self.queries
    }

    pub fn query(&self, id: &str) -> Option<&Query> {
        self.queries.iter().find(|q| q.id == id)
    }

    /// Same relations, a different query set; revalidated.
    pub fn with_queries(&self, queries: Vec<Query>) -> Result<Catalog, CatalogError> {
        validate_workload(queries, self.relations.values().cloned().collect())
    }

    /// Selectivities given explicitly in the workload, first occurrence wins.
    pub fn configured_selectivities(&self) -> BTreeMap<JoinKey, f64> {
        let mut out = BTreeMap::new();
        for q in &self.queries {
            for p in &q.predicates {
                if let Some(s) = p.selectivity {
                    out.entry(p.key()).or_insert(s);
                }
            }
        }
        out
    }

    /// Largest window over every relation sharing a query with `relation`
    /// (including its own).
    pub fn max_co_window(&self, relation: &str) -> u64 {
        let own = self.relations.get(relation).map_or(0, |r| r.window);
        self.queries
            .iter()
            .filter(|q| q.relations().contains(relation))
            .flat_map(|q| q.relations().iter())
            .filter_map(|r| self.relations.get(r))
            .map(|r| r.window)
            .fold(own, u64::max)
    }

    pub fn to_workload(&self) -> Workload {
        Workload {
            relations: self.relations.values().cloned().collect(),
            queries: self.queries.iter().map(QuerySpec::from).collect(),
        }
    }
}

/// Validates queries against relations; drops exact duplicate queries,
/// keeping the first occurrence.
pub fn validate_workload(
    queries: Vec<Query>,
    relations: Vec<Relation>,
) -> Result<Catalog, CatalogError> {
    let mut rels = BTreeMap::new();
    for r in relations {
        let attrs: BTreeSet<&String> = r.attributes.iter().collect();
        if attrs.len() != r.attributes.len() {
            return Err(CatalogError::InvalidRelation {
                relation: r.name.clone(),
                reason: "duplicate attribute name".into(),
            });
        }
        if !(r.rate >= 0.0) || !r.rate.is_finite() {
            return Err(CatalogError::InvalidRelation {
                relation: r.name.clone(),
                reason: format!("rate {} must be a finite non-negative number", r.rate),
            });
        }
        if r.window < 1 {
            return Err(CatalogError::InvalidRelation {
                relation: r.name.clone(),
                reason: "window must be at least 1".into(),
            });
        }
        if r.parallelism < 1 {
            return Err(CatalogError::InvalidRelation {
                relation: r.name.clone(),
                reason: "parallelism must be at least 1".into(),
            });
        }
        if rels.contains_key(&r.name) {
            return Err(CatalogError::DuplicateRelation(r.name));
        }
        rels.insert(r.name.clone(), r);
    }

    let mut kept: Vec<Query> = Vec::with_capacity(queries.len());
    for q in queries {
        check_query(&q, &rels)?;
        if let Some(prev) = kept.iter().find(|k| k.id == q.id) {
            if prev.same_shape(&q) {
                continue;
            }
            return Err(CatalogError::DuplicateQueryId(q.id));
        }
        if kept.iter().any(|k| k.same_shape(&q)) {
            continue;
        }
        kept.push(q);
    }
    Ok(Catalog {
        relations: rels,
        queries: kept,
    })
}

fn check_query(q: &Query, rels: &BTreeMap<String, Relation>) -> Result<(), CatalogError> {
    for r in q.relations() {
        if !rels.contains_key(r) {
            return Err(CatalogError::UnknownRelation {
                query: q.id.clone(),
                relation: r.clone(),
            });
        }
    }
    for p in &q.predicates {
        for side in [&p.left, &p.right] {
            if !q.relations().contains(&side.relation) {
                return Err(CatalogError::UnknownRelation {
                    query: q.id.clone(),
                    relation: side.relation.clone(),
                });
            }
            let rel = &rels[&side.relation];
            if !rel.attributes.contains(&side.attribute) {
                return Err(CatalogError::UnknownAttribute {
                    query: q.id.clone(),
                    attribute: side.to_string(),
                });
            }
        }
        if p.left.relation == p.right.relation {
            return Err(CatalogError::SelfJoin {
                query: q.id.clone(),
                relation: p.left.relation.clone(),
            });
        }
        if let Some(s) = p.selectivity {
            if !(0.0..=1.0).contains(&s) {
                return Err(CatalogError::InvalidSelectivity {
                    query: q.id.clone(),
                    value: s,
                });
            }
        }
    }
    if q.relations().len() < 2 {
        return Err(CatalogError::TooFewRelations {
            query: q.id.clone(),
        });
    }
    if !q.is_connected(q.relations()) {
        return Err(CatalogError::DisconnectedQuery {
            query: q.id.clone(),
        });
    }
    Ok(())
}

/// On-disk workload layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub relations: Vec<Relation>,
    pub queries: Vec<QuerySpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuerySpec {
    pub id: String,
    pub relations: Vec<String>,
    pub predicates: Vec<JoinPredicate>,
}

impl From<&Query> for QuerySpec {
    fn from(q: &Query) -> Self {
        Self {
            id: q.id.clone(),
            relations: q.relations().iter().cloned().collect(),
            predicates: q.predicates.clone(),
        }
    }
}

impl From<QuerySpec> for Query {
    fn from(s: QuerySpec) -> Self {
        Query::new(s.id, s.relations, s.predicates)
    }
}

impl Workload {
    pub fn validate(self) -> Result<Catalog, CatalogError> {
        validate_workload(
            self.queries.into_iter().map(Query::from).collect(),
            self.relations,
        )
    }
}

/// Small catalogs shared by unit and integration tests.
pub mod fixtures {
    use super::*;

    pub fn rel(name: &str, attrs: &[&str]) -> Relation {
        Relation {
            name: name.into(),
            attributes: attrs.iter().map(|a| a.to_string()).collect(),
            rate: 100.0,
            window: 1,
            parallelism: 4,
        }
    }

    pub fn eq(l: (&str, &str), r: (&str, &str)) -> JoinPredicate {
        JoinPredicate::new(AttrRef::new(l.0, l.1), AttrRef::new(r.0, r.1))
    }

    /// q1 = R(b),S(b,c),T(c); q2 = S(c),T(c,d),U(d).
    pub fn overlapping_chains() -> Catalog {
        let rels = vec![
            rel("R", &["b"]),
            rel("S", &["b", "c"]),
            rel("T", &["c", "d"]),
            rel("U", &["d"]),
        ];
        let q1 = Query::new(
            "q1",
            ["R", "S", "T"],
            [eq(("R", "b"), ("S", "b")), eq(("S", "c"), ("T", "c"))],
        );
        let q2 = Query::new(
            "q2",
            ["S", "T", "U"],
            [eq(("S", "c"), ("T", "c")), eq(("T", "d"), ("U", "d"))],
        );
        validate_workload(vec![q1, q2], rels).unwrap()
    }

    pub fn clique(n: usize) -> Catalog {
        let names: Vec<String> = (0..n).map(|i| format!("R{i}")).collect();
        let attrs: Vec<String> = (0..n).map(|i| format!("a{i}")).collect();
        let attr_refs: Vec<&str> = attrs.iter().map(String::as_str).collect();
        let rels = names.iter().map(|n| rel(n, &attr_refs)).collect();
        let mut preds = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                preds.push(eq((&names[i], &attrs[j]), (&names[j], &attrs[i])));
            }
        }
        validate_workload(vec![Query::new("q", names.clone(), preds)], rels).unwrap()
    }

    pub fn chain(n: usize) -> Catalog {
        let names: Vec<String> = (0..n).map(|i| format!("R{i}")).collect();
        let rels = names.iter().map(|n| rel(n, &["l", "r"])).collect();
        let preds = (0..n - 1).map(|i| eq((&names[i], "r"), (&names[i + 1], "l")));
        validate_workload(vec![Query::new("q", names.clone(), preds)], rels).unwrap()
    }
}
