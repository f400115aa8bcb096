//! Per-epoch observations and the statistics derived from them.
//!
//! A relation's rate is its arrivals over the epoch length. A predicate's
//! selectivity is the share of matching pairs among all pairs of arrivals of
//! its two relations in the epoch, smoothed by one pair. Relations without
//! arrivals and predicates without pairs keep their prior value.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::catalog::{AttrRef, JoinKey};
use crate::cost::{Statistics, StatsSource};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochObservation {
    pub arrivals: BTreeMap<String, u64>,
    /// Occurrences per value id of every observed attribute.
    pub values: BTreeMap<AttrRef, HashMap<u32, u64>>,
}

impl EpochObservation {
    pub fn record<'a>(&mut self, relation: &str, attrs: impl IntoIterator<Item = (&'a str, u32)>) {
        *self.arrivals.entry(relation.to_string()).or_default() += 1;
        for (a, v) in attrs {
            *self
                .values
                .entry(AttrRef::new(relation, a))
                .or_default()
                .entry(v)
                .or_default() += 1;
        }
    }

    /// Pairs of arrivals of the predicate's relations that agree on it.
    pub fn matches(&self, key: &JoinKey) -> u64 {
        let (Some(l), Some(r)) = (self.values.get(&key.left), self.values.get(&key.right)) else {
            return 0;
        };
        let (small, large) = if l.len() <= r.len() { (l, r) } else { (r, l) };
        small
            .iter()
            .map(|(v, n)| n * large.get(v).copied().unwrap_or(0))
            .sum()
    }

    pub fn pairs(&self, key: &JoinKey) -> u64 {
        let n = |rel: &str| self.arrivals.get(rel).copied().unwrap_or(0);
        n(&key.left.relation) * n(&key.right.relation)
    }
}

pub fn collect_statistics(
    obs: &EpochObservation,
    epoch: u64,
    epoch_len: u64,
    predicates: &BTreeSet<JoinKey>,
    prior: &Statistics,
) -> Statistics {
    let mut rates = prior.rates.clone();
    for (rel, n) in &obs.arrivals {
        if *n > 0 {
            rates.insert(rel.clone(), *n as f64 / epoch_len.max(1) as f64);
        }
    }
    let mut selectivities = prior.selectivities.clone();
    for k in predicates {
        let pairs = obs.pairs(k);
        if pairs > 0 {
            let s = (obs.matches(k) + 1) as f64 / (pairs + 1) as f64;
            selectivities.insert(k.clone(), s);
        }
    }
    Statistics {
        rates,
        selectivities,
        source: StatsSource::Epoch(epoch),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn key() -> JoinKey {
        JoinKey::new(AttrRef::new("R", "a"), AttrRef::new("S", "a"))
    }

    fn prior() -> Statistics {
        Statistics {
            rates: BTreeMap::from([("R".into(), 5.0), ("S".into(), 5.0)]),
            selectivities: BTreeMap::from([(key(), 0.5)]),
            source: StatsSource::Configured,
        }
    }

    #[test]
    fn rate_is_arrivals_per_tick() {
        let mut obs = EpochObservation::default();
        for _ in 0..1000 {
            obs.record("R", [("a", 1)]);
        }
        let s = collect_statistics(&obs, 3, 10, &BTreeSet::from([key()]), &prior());
        assert_eq!(s.rates["R"], 100.0);
        assert_eq!(s.rates["S"], 5.0);
        assert_eq!(s.source, StatsSource::Epoch(3));
    }

    #[test]
    fn no_pairs_keeps_the_prior() {
        let mut obs = EpochObservation::default();
        obs.record("R", [("a", 1)]);
        let s = collect_statistics(&obs, 0, 10, &BTreeSet::from([key()]), &prior());
        assert_eq!(s.selectivities[&key()], 0.5);
    }

    #[test]
    fn uniform_values_estimate_the_selectivity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let domain = 50u32;
        let mut obs = EpochObservation::default();
        for _ in 0..400 {
            obs.record("R", [("a", rng.gen_range(0..domain))]);
            obs.record("S", [("a", rng.gen_range(0..domain))]);
        }
        let s = collect_statistics(&obs, 0, 10, &BTreeSet::from([key()]), &prior());
        let est = s.selectivities[&key()];
        let truth = 1.0 / domain as f64;
        assert!((est - truth).abs() <= 0.2 * truth, "{est} vs {truth}");
    }
}
