//! Individual-vs-shared optimization sweeps.

use std::io::{Read, Write};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::CostContext;
use crate::generate::{gen_workload, GenError, WorkloadConfig};
use crate::optimizer::{optimize, Mode, OptimizeError, OptimizeOptions};
use crate::par::Execution;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub n_relations: usize,
    pub attrs_per_relation: usize,
    pub n_queries: Vec<usize>,
    pub query_size: usize,
    pub seed: u64,
    pub repetitions: usize,
    pub rate: f64,
    pub parallelism: u32,
    pub time_limit_ms: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n_relations: 10,
            attrs_per_relation: 3,
            n_queries: (1..=10).map(|i| i * 10).collect(),
            query_size: 3,
            seed: 1,
            repetitions: 5,
            rate: 100.0,
            parallelism: 4,
            time_limit_ms: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub n_q: usize,
    pub individual_cost: f64,
    pub mqo_cost: f64,
    pub variables: f64,
    pub probe_orders: f64,
    pub solve_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid bench configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Generate(#[from] GenError),
    #[error(transparent)]
    Optimize(#[from] OptimizeError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("shared cost {mqo} exceeds individual cost {individual} at n_q={n_q}")]
    SharingRegression {
        n_q: usize,
        mqo: f64,
        individual: f64,
    },
}

struct Sample {
    individual: f64,
    mqo: f64,
    variables: f64,
    probe_orders: f64,
    solve_ms: f64,
}

/// Runs every (n_q, repetition) point, with repetition `r` using seed
/// `seed + r`; reports medians per n_q.
pub fn bench(cfg: &BenchConfig, execution: Execution) -> Result<BenchReport, BenchError> {
    if cfg.repetitions == 0 || cfg.n_queries.contains(&0) {
        return Err(BenchError::InvalidConfig(
            "repetitions and query counts must be positive".into(),
        ));
    }
    let points: Vec<(usize, usize)> = cfg
        .n_queries
        .iter()
        .flat_map(|n| (0..cfg.repetitions).map(move |r| (*n, r)))
        .collect();
    let samples = execution
        .map(&points, |(n, r)| run_point(cfg, *n, *r))
        .into_iter()
        .collect::<Result<Vec<Sample>, BenchError>>()?;
    let mut rows = Vec::new();
    for (i, &n_q) in cfg.n_queries.iter().enumerate() {
        let group = &samples[i * cfg.repetitions..(i + 1) * cfg.repetitions];
        let row = BenchRow {
            n_q,
            individual_cost: median(group.iter().map(|s| s.individual)),
            mqo_cost: median(group.iter().map(|s| s.mqo)),
            variables: median(group.iter().map(|s| s.variables)),
            probe_orders: median(group.iter().map(|s| s.probe_orders)),
            solve_ms: median(group.iter().map(|s| s.solve_ms)),
        };
        for s in group {
            if s.mqo > s.individual * (1.0 + 1e-9) {
                return Err(BenchError::SharingRegression {
                    n_q,
                    mqo: s.mqo,
                    individual: s.individual,
                });
            }
        }
        rows.push(row);
    }
    Ok(BenchReport { rows })
}

fn run_point(cfg: &BenchConfig, n_q: usize, rep: usize) -> Result<Sample, BenchError> {
    let catalog = gen_workload(&WorkloadConfig {
        n_relations: cfg.n_relations,
        attrs_per_relation: cfg.attrs_per_relation,
        n_queries: n_q,
        query_size: cfg.query_size,
        rate: cfg.rate,
        window: 1,
        parallelism: cfg.parallelism,
        seed: cfg.seed.wrapping_add(rep as u64),
        ..Default::default()
    })?;
    let ctx = CostContext::configured(&catalog);
    let opts = OptimizeOptions {
        time_limit: Duration::from_millis(cfg.time_limit_ms),
        execution: Execution::Sequential,
        ..Default::default()
    };
    let shared = optimize(catalog.queries(), &ctx, opts)?;
    let individual = optimize(
        catalog.queries(),
        &ctx,
        OptimizeOptions {
            mode: Mode::Individual,
            ..opts
        },
    )?;
    Ok(Sample {
        individual: individual.objective,
        mqo: shared.objective,
        variables: shared.variables as f64,
        probe_orders: shared.probe_orders as f64,
        solve_ms: shared.elapsed.as_secs_f64() * 1e3,
    })
}

fn median(xs: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = xs.collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl BenchReport {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut wr = csv::Writer::from_writer(w);
        for r in &self.rows {
            wr.serialize(r)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, csv::Error> {
        let mut rd = csv::Reader::from_reader(r);
        let rows = rd.deserialize().collect::<Result<Vec<BenchRow>, _>>()?;
        Ok(Self { rows })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let report = BenchReport {
            rows: vec![BenchRow {
                n_q: 10,
                individual_cost: 4000.0,
                mqo_cost: 2500.5,
                variables: 321.0,
                probe_orders: 80.0,
                solve_ms: 1.25,
            }],
        };
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("n_q,individual_cost,mqo_cost,variables,probe_orders,solve_ms"));
        assert_eq!(BenchReport::read_csv(&buf[..]).unwrap(), report);
    }

    #[test]
    fn single_query_has_nothing_to_share() {
        let cfg = BenchConfig {
            n_queries: vec![1],
            repetitions: 3,
            ..Default::default()
        };
        let r = bench(&cfg, Execution::Sequential).unwrap();
        let row = &r.rows[0];
        assert!((row.mqo_cost - row.individual_cost).abs() < 1e-9);
    }
}
