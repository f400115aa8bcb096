//! Counters a simulation run reports.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    /// One per worker a probing tuple is sent to.
    pub probe_messages: u64,
    pub tuples_stored: u64,
    pub results: BTreeMap<String, u64>,
    /// Emission tick minus the newest constituent's timestamp, summed.
    pub latency_sum: u64,
    pub latency_max: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepCounter {
    /// Tuples that executed the step.
    pub probes: u64,
    /// Messages they caused; `messages / probes` is the fan-out.
    pub messages: u64,
}

/// One line of the metrics log. Counters are cumulative up to the epoch end.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u64,
    /// Fingerprint of the plan that routes tuples of this epoch.
    pub routing: u64,
    pub orders: Vec<String>,
    /// Whether the routing differs from the previous epoch's.
    pub switched: bool,
    pub counters: Counters,
    pub arrivals: BTreeMap<String, u64>,
    pub rates: BTreeMap<String, f64>,
    /// Keyed by the predicate's text form.
    pub selectivities: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub totals: Counters,
    /// Keyed by the step's text form.
    pub steps: BTreeMap<String, StepCounter>,
    pub epochs: Vec<EpochMetrics>,
}

impl MetricsLog {
    pub fn epoch(&self, id: u64) -> Option<&EpochMetrics> {
        self.epochs.iter().find(|e| e.epoch == id)
    }
}
