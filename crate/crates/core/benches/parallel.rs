use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use probejoin::bench::{bench, BenchConfig};
use probejoin::candidates::{BuildOptions, CandidateSet};
use probejoin::cost::CostContext;
use probejoin::generate::{gen_workload, WorkloadConfig};
use probejoin::par::Execution;

const STRATEGIES: [(&str, Execution); 2] = [
    ("sequential", Execution::Sequential),
    ("parallel", Execution::Parallel),
];

fn candidate_build(c: &mut Criterion) {
    let mut group = c.benchmark_group("candidate_build");
    for relations in [10, 100] {
        let catalog = gen_workload(&WorkloadConfig {
            n_relations: relations,
            n_queries: 100,
            seed: 1,
            ..Default::default()
        })
        .unwrap();
        let ctx = CostContext::configured(&catalog);
        for (name, execution) in STRATEGIES {
            group.bench_with_input(
                BenchmarkId::new(name, relations),
                &execution,
                |b, &execution| {
                    b.iter(|| {
                        CandidateSet::build(
                            catalog.queries(),
                            &ctx,
                            BuildOptions {
                                materialize: true,
                                execution,
                            },
                        )
                        .unwrap()
                    })
                },
            );
        }
    }
    group.finish();
}

fn sweep(c: &mut Criterion) {
    let mut group = c.benchmark_group("sweep");
    group.sample_size(10);
    let cfg = BenchConfig {
        n_queries: vec![10, 20, 30, 40, 50],
        repetitions: 2,
        ..BenchConfig::default()
    };
    for (name, execution) in STRATEGIES {
        group.bench_function(name, |b| b.iter(|| bench(&cfg, execution).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, candidate_build, sweep);
criterion_main!(benches);
