//! Probe orders: construction by head extension, partitioning decoration and
//! prefix steps.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::catalog::{AttrRef, JoinKey, JoinScope};
use crate::mir::{MirId, MirSet};

/// What a probe order produces: a query's results or a MIR's content.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Target {
    Query(String),
    Mir(MirId),
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Query(q) => write!(f, "{q}"),
            Target::Mir(m) => write!(f, "{m}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ProbeOrder {
    pub target: Target,
    pub start: String,
    pub hops: Vec<MirId>,
}

impl ProbeOrder {
    pub fn display(&self, mirs: &MirSet) -> String {
        let mut parts = vec![self.start.clone()];
        parts.extend(self.hops.iter().map(|h| mirs.get(*h).label.clone()));
        format!("<{}>", parts.join(","))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PartitionedOrder {
    pub base: ProbeOrder,
    /// One partitioning attribute per hop.
    pub partitions: Vec<AttrRef>,
}

impl PartitionedOrder {
    pub fn display(&self, mirs: &MirSet) -> String {
        let mut parts = vec![self.base.start.clone()];
        for (h, p) in self.base.hops.iter().zip(&self.partitions) {
            parts.push(format!("{}[{}]", mirs.get(*h).label, p.attribute));
        }
        format!("<{}>", parts.join(","))
    }

    pub fn hops(&self) -> impl Iterator<Item = (MirId, &AttrRef)> {
        self.base.hops.iter().copied().zip(self.partitions.iter())
    }
}

/// Identity of a probe-order prefix. Equal keys are the same step no matter
/// which query or subquery they come from.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StepKey {
    pub start: String,
    pub hops: Vec<(MirId, AttrRef)>,
    /// Scope predicates among the prefix's relations.
    pub predicates: BTreeSet<JoinKey>,
}

impl StepKey {
    /// Relations already joined when the last hop is probed.
    pub fn head(&self, mirs: &MirSet) -> BTreeSet<String> {
        let mut head = BTreeSet::from([self.start.clone()]);
        for (m, _) in &self.hops[..self.hops.len() - 1] {
            head.extend(mirs.get(*m).relations().iter().cloned());
        }
        head
    }

    pub fn target(&self) -> (MirId, &AttrRef) {
        let (m, p) = self.hops.last().expect("a step has at least one hop");
        (*m, p)
    }

    pub fn relations(&self, mirs: &MirSet) -> BTreeSet<String> {
        let mut rels = BTreeSet::from([self.start.clone()]);
        for (m, _) in &self.hops {
            rels.extend(mirs.get(*m).relations().iter().cloned());
        }
        rels
    }

    pub fn display(&self, mirs: &MirSet) -> String {
        let mut parts = vec![self.start.clone()];
        for (h, p) in &self.hops {
            parts.push(format!("{}[{}]", mirs.get(*h).label, p.attribute));
        }
        format!("<{}>", parts.join(","))
    }
}

/// MIRs that can extend `head` within `scope`: contained in the scope,
/// disjoint from the head, linked to it by a scope predicate, and carrying
/// exactly the scope's predicates among their relations. Sorted by label.
/// With `materialize` off only base relations qualify.
pub fn joinable(
    scope: &JoinScope,
    head: &BTreeSet<String>,
    mirs: &MirSet,
    materialize: bool,
) -> Vec<MirId> {
    let mut out: Vec<MirId> = mirs
        .iter()
        .filter(|m| materialize || m.is_base())
        .filter(|m| m.relations().is_subset(&scope.relations))
        .filter(|m| m.relations().is_disjoint(head))
        .filter(|m| m.relations().len() < scope.relations.len())
        .filter(|m| scope.connects(head, m.relations()))
        .filter(|m| m.scope.predicates == scope.predicates_within(m.relations()))
        .map(|m| m.id)
        .collect();
    out.sort_by(|a, b| mirs.get(*a).label.cmp(&mirs.get(*b).label));
    out
}

/// Every MIR sequence that starts at `start` and covers the scope without
/// cross products, ordered lexicographically by hop labels.
pub fn construct_probe_orders(
    scope: &JoinScope,
    target: Target,
    mirs: &MirSet,
    start: &str,
    materialize: bool,
) -> Vec<ProbeOrder> {
    fn extend(
        scope: &JoinScope,
        mirs: &MirSet,
        materialize: bool,
        head: &mut BTreeSet<String>,
        hops: &mut Vec<MirId>,
        out: &mut Vec<Vec<MirId>>,
    ) {
        if head.len() == scope.relations.len() {
            out.push(hops.clone());
            return;
        }
        for m in joinable(scope, head, mirs, materialize) {
            let rels = mirs.get(m).relations();
            head.extend(rels.iter().cloned());
            hops.push(m);
            extend(scope, mirs, materialize, head, hops, out);
            hops.pop();
            for r in rels {
                head.remove(r);
            }
        }
    }

    if !scope.relations.contains(start) {
        return Vec::new();
    }
    let mut head = BTreeSet::from([start.to_string()]);
    let mut found = Vec::new();
    extend(
        scope,
        mirs,
        materialize,
        &mut head,
        &mut Vec::new(),
        &mut found,
    );
    found.sort_by(|a, b| {
        let la = a.iter().map(|m| mirs.get(*m).label.as_str());
        let lb = b.iter().map(|m| mirs.get(*m).label.as_str());
        la.cmp(lb)
    });
    found
        .into_iter()
        .map(|hops| ProbeOrder {
            target: target.clone(),
            start: start.to_string(),
            hops,
        })
        .collect()
}

/// Orders that compute a MIR's content, one list per input relation in
/// relation order. Empty for base relations.
pub fn subquery_probe_orders(
    mir: MirId,
    mirs: &MirSet,
    materialize: bool,
) -> Vec<(String, Vec<ProbeOrder>)> {
    let m = mirs.get(mir);
    if m.is_base() {
        return Vec::new();
    }
    m.relations()
        .iter()
        .map(|start| {
            (
                start.clone(),
                construct_probe_orders(&m.scope, Target::Mir(mir), mirs, start, materialize),
            )
        })
        .collect()
}

/// Cartesian expansion over per-hop partitioning choices; the first hop
/// varies fastest.
pub fn apply_partitioning<'a>(
    orders: &[ProbeOrder],
    candidates: impl Fn(MirId) -> &'a [AttrRef],
) -> Vec<PartitionedOrder> {
    let mut out = Vec::new();
    for order in orders {
        let choices: Vec<&[AttrRef]> = order.hops.iter().map(|h| candidates(*h)).collect();
        if choices.iter().any(|c| c.is_empty()) {
            continue;
        }
        let mut idx = vec![0usize; choices.len()];
        loop {
            out.push(PartitionedOrder {
                base: order.clone(),
                partitions: idx
                    .iter()
                    .zip(&choices)
                    .map(|(i, c)| c[*i].clone())
                    .collect(),
            });
            let mut k = 0;
            loop {
                if k == idx.len() {
                    break;
                }
                idx[k] += 1;
                if idx[k] < choices[k].len() {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
            if k == idx.len() {
                break;
            }
        }
    }
    out
}

/// The steps of an order: prefix j carries hops 1..=j.
pub fn prefixes(order: &PartitionedOrder, scope: &JoinScope, mirs: &MirSet) -> Vec<StepKey> {
    let mut rels = BTreeSet::from([order.base.start.clone()]);
    let mut hops = Vec::with_capacity(order.base.hops.len());
    let mut out = Vec::with_capacity(order.base.hops.len());
    for (m, p) in order.hops() {
        rels.extend(mirs.get(m).relations().iter().cloned());
        hops.push((m, p.clone()));
        out.push(StepKey {
            start: order.base.start.clone(),
            hops: hops.clone(),
            predicates: scope.predicates_within(&rels),
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::fixtures::*;
    use crate::catalog::{validate_workload, Query};
    use crate::mir::enumerate_mirs;

    fn names(orders: &[ProbeOrder], mirs: &MirSet) -> Vec<String> {
        orders.iter().map(|o| o.display(mirs)).collect()
    }

    #[test]
    fn fig4_orders_per_start() {
        let c = overlapping_chains();
        let mirs = enumerate_mirs(c.queries());
        let q1 = c.query("q1").unwrap();
        let t = Target::Query("q1".into());
        let r = construct_probe_orders(q1.scope(), t.clone(), &mirs, "R", true);
        assert_eq!(names(&r, &mirs), ["<R,S,T>", "<R,S+T>"]);
        let s = construct_probe_orders(q1.scope(), t.clone(), &mirs, "S", true);
        assert_eq!(names(&s, &mirs), ["<S,R,T>", "<S,T,R>"]);
        let tt = construct_probe_orders(q1.scope(), t, &mirs, "T", true);
        assert_eq!(names(&tt, &mirs), ["<T,R+S>", "<T,S,R>"]);
    }

    #[test]
    fn joinable_respects_connectivity() {
        let rels = vec![rel("R", &["a"]), rel("S", &["a", "b"]), rel("T", &["b"])];
        let q = Query::new(
            "q",
            ["R", "S", "T"],
            [eq(("R", "a"), ("S", "a")), eq(("S", "b"), ("T", "b"))],
        );
        let c = validate_workload(vec![q], rels).unwrap();
        let mirs = enumerate_mirs(c.queries());
        let head = BTreeSet::from(["R".to_string()]);
        let j = joinable(c.queries()[0].scope(), &head, &mirs, true);
        let labels: Vec<_> = j.iter().map(|m| mirs.get(*m).label.as_str()).collect();
        assert_eq!(labels, ["S", "S+T"]);
        let base_only = joinable(c.queries()[0].scope(), &head, &mirs, false);
        assert_eq!(base_only.len(), 1);
    }

    #[test]
    fn two_relation_query() {
        let c = chain(2);
        let mirs = enumerate_mirs(c.queries());
        let q = &c.queries()[0];
        let o = construct_probe_orders(q.scope(), Target::Query("q".into()), &mirs, "R0", true);
        assert_eq!(names(&o, &mirs), ["<R0,R1>"]);
    }

    #[test]
    fn clique4_has_thirteen_orders_per_start() {
        let c = clique(4);
        let mirs = enumerate_mirs(c.queries());
        let q = &c.queries()[0];
        for start in q.relations() {
            let o =
                construct_probe_orders(q.scope(), Target::Query("q".into()), &mirs, start, true);
            assert_eq!(o.len(), 13, "start {start}");
        }
    }

    #[test]
    fn fig4_subquery_orders() {
        let c = overlapping_chains();
        let mirs = enumerate_mirs(c.queries());
        let st = mirs.by_label("S+T").unwrap().id;
        let sub = subquery_probe_orders(st, &mirs, true);
        assert_eq!(sub.len(), 2);
        assert_eq!(sub[0].0, "S");
        assert_eq!(names(&sub[0].1, &mirs), ["<S,T>"]);
        assert_eq!(names(&sub[1].1, &mirs), ["<T,S>"]);
        assert!(subquery_probe_orders(mirs.base("S").unwrap(), &mirs, true).is_empty());
    }

    #[test]
    fn fig4_partitioned_candidates_in_order() {
        let c = overlapping_chains();
        let mirs = enumerate_mirs(c.queries());
        let q1 = c.query("q1").unwrap();
        let orders =
            construct_probe_orders(q1.scope(), Target::Query("q1".into()), &mirs, "R", true);
        let parted = apply_partitioning(&orders, |m| mirs.candidates(m));
        let shown: Vec<_> = parted.iter().map(|o| o.display(&mirs)).collect();
        assert_eq!(
            shown,
            [
                "<R,S[b],T[c]>",
                "<R,S[c],T[c]>",
                "<R,S[b],T[d]>",
                "<R,S[c],T[d]>",
                "<R,S+T[b]>",
                "<R,S+T[d]>",
            ]
        );
    }

    #[test]
    fn shared_prefix_identity() {
        let c = overlapping_chains();
        let mirs = enumerate_mirs(c.queries());
        let q1 = c.query("q1").unwrap();
        let orders =
            construct_probe_orders(q1.scope(), Target::Query("q1".into()), &mirs, "R", true);
        let parted = apply_partitioning(&orders, |m| mirs.candidates(m));
        let p1 = prefixes(&parted[0], q1.scope(), &mirs);
        let p3 = prefixes(&parted[2], q1.scope(), &mirs);
        assert_eq!(p1.len(), 2);
        assert_eq!(p1[0], p3[0]);
        assert_ne!(p1[1], p3[1]);
        assert_eq!(p1[0].display(&mirs), "<R,S[b]>");
        let single = prefixes(&parted[4], q1.scope(), &mirs);
        assert_eq!(single.len(), 1);
    }
}
