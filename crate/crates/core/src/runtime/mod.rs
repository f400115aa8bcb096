//! Deterministic simulation of compiled plans.

pub mod epoch;
pub mod metrics;
pub mod oracle;
pub mod sim;
pub mod stats;
pub mod tuple;

pub use epoch::{Epoch, Timeline, DEFAULT_EPOCH_LEN};
pub use metrics::{Counters, EpochMetrics, MetricsLog, StepCounter};
pub use oracle::{oracle_join, restrict, Lifetime};
pub use sim::{
    run_simulation, store_refcounts, Lifecycle, LifecycleOp, Registration, RuntimeError, SimConfig,
    SimMode, SimOutput,
};
pub use stats::{collect_statistics, EpochObservation};
pub use tuple::{Composite, Event, JoinResult, TupleRef};
