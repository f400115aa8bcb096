//! Input events and joined tuples.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// One input arrival. `seq` is the event's position in its trace and is not
/// part of the on-disk form.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub rel: String,
    pub ts: u64,
    pub attrs: BTreeMap<String, String>,
    #[serde(skip)]
    pub seq: u64,
}

/// A joined tuple: one event per relation, sorted by relation index.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Composite {
    pub parts: Vec<(u16, u32)>,
}

impl Composite {
    pub fn single(rel: u16, event: u32) -> Self {
        Self {
            parts: vec![(rel, event)],
        }
    }

    pub fn get(&self, rel: u16) -> Option<u32> {
        self.parts
            .binary_search_by_key(&rel, |p| p.0)
            .ok()
            .map(|i| self.parts[i].1)
    }

    /// Union of two composites over disjoint relations.
    pub fn join(&self, other: &Composite) -> Composite {
        let mut parts = Vec::with_capacity(self.parts.len() + other.parts.len());
        parts.extend_from_slice(&self.parts);
        parts.extend_from_slice(&other.parts);
        parts.sort_unstable();
        Composite { parts }
    }

    pub fn len(&self) -> usize {
        self.parts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }
}

/// A constituent of a result, identified by its trace position.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TupleRef {
    pub rel: String,
    pub ts: u64,
    pub seq: u64,
}

/// One join result, constituents sorted by relation name.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct JoinResult {
    pub query: String,
    pub ts: u64,
    pub tuples: Vec<TupleRef>,
}

/// The processing order: timestamp, relation name, trace position.
pub fn sort_events(events: &mut [Event]) {
    events.sort_by(|a, b| (a.ts, &a.rel, a.seq).cmp(&(b.ts, &b.rel, b.seq)));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn join_keeps_relation_order() {
        let a = Composite::single(2, 10);
        let b = Composite {
            parts: vec![(0, 3), (5, 1)],
        };
        let j = a.join(&b);
        assert_eq!(j.parts, vec![(0, 3), (2, 10), (5, 1)]);
        assert_eq!(j.get(2), Some(10));
        assert_eq!(j.get(1), None);
    }

    #[test]
    fn event_json_shape() {
        let e: Event = serde_json::from_str(r#"{"rel":"R","ts":12,"attrs":{"a":"v7"}}"#).unwrap();
        assert_eq!(e.ts, 12);
        assert_eq!(e.attrs["a"], "v7");
        assert!(!serde_json::to_string(&e).unwrap().contains("seq"));
    }
}
