//! Shared plan selection as a 0-1 program.

pub mod brute;
pub mod lp;
pub mod model;
pub mod plan;
pub mod solver;

pub use brute::{brute_force_plan, BruteError, DEFAULT_BOUND};
pub use lp::{export_lp, LpStyle};
pub use model::{build_ilp, fnv1a, Cmp, IlpModel, Row, RowKind, VarId, VarKind, Variable};
pub use plan::{extract_plan, remap_order, MaterializedMir, PlanError, SelectedPlan};
pub use solver::{solve, IlpSolution, SolveError, SolveStatus, DEFAULT_TIME_LIMIT};
