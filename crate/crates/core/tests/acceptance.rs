//! Acceptance criteria 1 to 10. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use probejoin::bench::{bench, BenchConfig, BenchReport};
use probejoin::candidates::{BuildOptions, CandidateSet};
use probejoin::catalog::fixtures::{eq, overlapping_chains, rel};
use probejoin::catalog::{validate_workload, AttrRef, Catalog, Query, Relation};
use probejoin::cost::fixtures::mqo_example;
use probejoin::cost::{probe_order_cost, step_cost, CostContext, Statistics};
use probejoin::generate::{gen_trace, gen_workload, WorkloadConfig};
use probejoin::ilp::model::RowKind;
use probejoin::ilp::{
    brute_force_plan, build_ilp, extract_plan, solve, BruteError, SelectedPlan, SolveStatus,
    DEFAULT_BOUND, DEFAULT_TIME_LIMIT,
};
use probejoin::mir::enumerate_mirs;
use probejoin::optimizer::{optimize, Mode, OptimizeOptions};
use probejoin::orders::{apply_partitioning, construct_probe_orders, prefixes, Target};
use probejoin::par::Execution;
use probejoin::runtime::{
    oracle_join, restrict, run_simulation, Lifecycle, LifecycleOp, SimConfig, SimMode,
};

mod common;

use common::alternative;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Integral value within floating-point noise.
fn exact(x: f64, want: i64) -> bool {
    (x - want as f64).abs() < 1e-9 * (1.0 + want.abs() as f64)
}

fn opts(materialize: bool) -> OptimizeOptions {
    OptimizeOptions {
        materialize,
        ..Default::default()
    }
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let c = mqo_example();
    let ctx = CostContext::configured(&c);
    let mirs = enumerate_mirs(c.queries());
    let q1 = c.query("q1").unwrap();
    let orders = construct_probe_orders(q1.scope(), Target::Query("q1".into()), &mirs, "S", false);
    let orders = apply_partitioning(&orders, |m| mirs.candidates(m));
    let find = |shown: &str| {
        orders
            .iter()
            .find(|o| o.base.display(&mirs) == shown)
            .unwrap_or_else(|| panic!("{shown} not constructed"))
    };
    let srt = find("<S,R,T>");
    let str_ = find("<S,T,R>");
    let srt_steps = prefixes(srt, q1.scope(), &mirs);
    let str_steps = prefixes(str_, q1.scope(), &mirs);
    let first = step_cost(&srt_steps[0], &mirs, &ctx).unwrap();
    let st = step_cost(&str_steps[1], &mirs, &ctx).unwrap();
    let other = step_cost(&srt_steps[1], &mirs, &ctx).unwrap();
    let p_srt = probe_order_cost(srt, q1.scope(), &mirs, &ctx).unwrap();
    let p_str = probe_order_cost(str_, q1.scope(), &mirs, &ctx).unwrap();
    let elapsed = started.elapsed();
    let single = optimize(std::slice::from_ref(q1), &ctx, opts(false))
        .unwrap()
        .objective;
    let both = optimize(
        c.queries(),
        &ctx,
        OptimizeOptions {
            mode: Mode::Individual,
            ..opts(false)
        },
    )
    .unwrap()
    .objective;
    let got = [first, st, other, p_srt, p_str, single, both];
    let want = [100, 75, 50, 150, 175, 475, 950];
    ensure(got.iter().zip(want).all(|(g, w)| exact(*g, w)), || {
        format!("costs {got:?}, expected {want:?}")
    })?;
    ensure(elapsed < Duration::from_millis(1), || {
        format!("cost evaluation took {elapsed:?}")
    })?;
    Ok(format!(
        "steps 100/75/50, PCost 150/175, individual 475 and 950 in {elapsed:?}"
    ))
}

fn criterion_2() -> Outcome {
    let c = mqo_example();
    let ctx = CostContext::configured(&c);
    let started = Instant::now();
    let o = optimize(c.queries(), &ctx, opts(false)).unwrap();
    let elapsed = started.elapsed();
    let chosen = o.plan.orders[&("q1".to_string(), "S".to_string())].display(&o.plan.mirs);
    let set = CandidateSet::build(
        c.queries(),
        &ctx,
        BuildOptions {
            materialize: false,
            ..Default::default()
        },
    )
    .unwrap();
    let brute = brute_force_plan(&set, &ctx, DEFAULT_BOUND).unwrap();
    ensure(chosen == "<S,T[b],R[a]>", || {
        format!("(q1,S) uses {chosen}")
    })?;
    ensure(exact(o.objective, 800) && exact(brute.cost, 800), || {
        format!("objective {} brute force {}", o.objective, brute.cost)
    })?;
    ensure(o.objective < 950.0, || "no saving over 950".into())?;
    ensure(elapsed < Duration::from_millis(10), || {
        format!("optimization took {elapsed:?}")
    })?;
    Ok(format!(
        "(q1,S) -> {chosen}, objective 800 = brute force < 950, {elapsed:?}"
    ))
}

fn criterion_3() -> Outcome {
    let c = overlapping_chains();
    let ctx = CostContext::configured(&c);
    let set = CandidateSet::build(c.queries(), &ctx, BuildOptions::default()).unwrap();
    let model = build_ilp(&set);
    let labels: BTreeSet<&str> = set.mirs.labels().into_iter().collect();
    let want: BTreeSet<&str> = ["R", "S", "T", "U", "R+S", "S+T", "T+U"].into();
    ensure(labels == want, || format!("MIRs {labels:?}"))?;

    let g = set.query_group("q1", "R").unwrap();
    let shown: Vec<String> = g.candidates.iter().map(|c| set.display(*c)).collect();
    let want_shown = [
        "<R,S[b],T[c]>",
        "<R,S[c],T[c]>",
        "<R,S[b],T[d]>",
        "<R,S[c],T[d]>",
        "<R,S+T[b]>",
        "<R,S+T[d]>",
    ];
    let shown_set: BTreeSet<&str> = shown.iter().map(String::as_str).collect();
    ensure(shown_set == want_shown.into(), || {
        format!("(q1,R) candidates {shown:?}")
    })?;
    let sigma = |s: &str| g.candidates[shown.iter().position(|x| x == s).unwrap()];

    let xs: BTreeSet<_> = g.candidates.iter().map(|c| model.x(*c)).collect();
    let one_of = model
        .rows
        .iter()
        .filter(|r| matches!(r.kind, RowKind::OneOf { group } if group == g.id))
        .collect::<Vec<_>>();
    ensure(one_of.len() == 1, || {
        format!("{} one-of rows", one_of.len())
    })?;
    let row_vars: BTreeSet<_> = one_of[0].coeffs.iter().map(|c| c.0).collect();
    ensure(
        row_vars == xs && one_of[0].coeffs.iter().all(|c| c.1 == 1.0) && one_of[0].rhs == 1.0,
        || "one-of row is not the sum of the six x = 1".into(),
    )?;

    let s5 = sigma("<R,S+T[b]>");
    let sub_rows: Vec<_> = model
        .rows
        .iter()
        .filter(|r| matches!(r.kind, RowKind::Subquery { candidate, .. } if candidate == s5))
        .collect();
    ensure(sub_rows.len() == 2, || {
        format!("{} subquery rows for sigma5", sub_rows.len())
    })?;
    for r in &sub_rows {
        let coeffs = r.aggregated_coeffs();
        let own = coeffs.iter().find(|c| c.0 == model.x(s5)).map(|c| c.1);
        let others = coeffs.iter().filter(|c| c.0 != model.x(s5)).count();
        ensure(own == Some(-2.0) && others == 2, || {
            format!("subquery row {coeffs:?}")
        })?;
    }

    let (s1, s3) = (sigma("<R,S[b],T[c]>"), sigma("<R,S[b],T[d]>"));
    let shared = set.candidate(s1).steps[0];
    ensure(set.candidate(s3).steps[0] == shared, || {
        "sigma1 and sigma3 differ in step 1".into()
    })?;
    let y = model.y(shared);
    let y_uses = model
        .rows
        .iter()
        .filter(
            |r| matches!(r.kind, RowKind::Cost { candidate } if candidate == s1 || candidate == s3),
        )
        .filter(|r| r.coeffs.iter().any(|c| c.0 == y))
        .count();
    ensure(y_uses == 2, || {
        format!("shared y appears in {y_uses} cost rows")
    })?;
    ensure(
        model
            .vars
            .iter()
            .filter(|v| v.name == model.var(y).name)
            .count()
            == 1,
        || "prefix variable is duplicated".into(),
    )?;
    Ok(
        "7 MIRs, sigma1..6, one-of row, two -2 subquery rows for sigma5, shared <R,S[b]> prefix"
            .into(),
    )
}

/// Small random workload for solver and simulator checks.
fn random_workload(
    seed: u64,
    relations: usize,
    queries: usize,
    size: usize,
    p: u32,
) -> Option<Catalog> {
    gen_workload(&WorkloadConfig {
        n_relations: relations,
        attrs_per_relation: 2 + (seed % 2) as usize,
        n_queries: queries,
        query_size: size.min(relations),
        rate: [1.0, 10.0, 100.0][(seed % 3) as usize],
        window: 1 + seed % 4,
        parallelism: p,
        seed,
        allow_fewer: true,
        ..Default::default()
    })
    .ok()
}

fn criterion_4() -> Outcome {
    let started = Instant::now();
    let (mut checked, mut skipped) = (0, 0);
    let mut seed = 0u64;
    while checked < 200 {
        ensure(seed < 5000, || {
            format!("only {checked} comparable workloads")
        })?;
        let c = random_workload(
            seed,
            3 + (seed % 6) as usize,
            1 + ((seed / 3) % 5) as usize,
            2 + ((seed / 7) % 3) as usize,
            1 + (seed % 4) as u32,
        );
        let materialize = seed.is_multiple_of(2);
        seed += 1;
        let Some(c) = c else { continue };
        let ctx = CostContext::configured(&c);
        let set = CandidateSet::build(
            c.queries(),
            &ctx,
            BuildOptions {
                materialize,
                execution: Execution::Sequential,
            },
        )
        .unwrap();
        let brute = match brute_force_plan(&set, &ctx, 30_000) {
            Ok(p) => p,
            Err(BruteError::TooLarge(_)) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(format!("seed {}: {e}", seed - 1)),
        };
        let model = build_ilp(&set);
        let sol = solve(&model, DEFAULT_TIME_LIMIT).unwrap();
        ensure(sol.status == SolveStatus::Optimal, || {
            format!("seed {} timed out", seed - 1)
        })?;
        let tol = 1e-9 * brute.cost.abs().max(1.0);
        ensure((sol.objective - brute.cost).abs() <= tol, || {
            format!(
                "seed {}: solver {} brute force {}",
                seed - 1,
                sol.objective,
                brute.cost
            )
        })?;
        let plan = extract_plan(&model, &sol, &set, &ctx).unwrap();
        let recost = plan.recost(&ctx).unwrap();
        ensure(
            (recost - sol.objective).abs() <= 1e-9 * sol.objective.abs().max(1.0),
            || {
                format!(
                    "seed {}: extracted plan costs {recost}, objective {}",
                    seed - 1,
                    sol.objective
                )
            },
        )?;
        checked += 1;
    }
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(60), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "{checked} workloads equal ({skipped} over the enumeration bound skipped), {elapsed:.1?}"
    ))
}

fn criterion_5() -> Outcome {
    let started = Instant::now();
    let (mut pairs, mut events_max, mut results, mut switches) = (0, 0, 0usize, 0);
    let mut seed = 0u64;
    while pairs < 100 {
        ensure(seed < 1000, || format!("only {pairs} usable pairs"))?;
        let s = seed;
        seed += 1;
        let relations = 3 + (s % 4) as usize;
        let queries = 1 + (s % 3) as usize;
        let Ok(full) = gen_workload(&WorkloadConfig {
            n_relations: relations,
            attrs_per_relation: 2,
            n_queries: queries + 1,
            query_size: (2 + (s / 4) % 2) as usize,
            rate: 1.0 + (s % 2) as f64,
            window: 4 + s % 9,
            parallelism: 1 + (s % 4) as u32,
            seed: s,
            allow_fewer: false,
            ..Default::default()
        }) else {
            continue;
        };
        let held_out = full.queries()[queries].clone();
        let c = full
            .with_queries(full.queries()[..queries].to_vec())
            .unwrap();
        let per_tick: f64 = c.relations().values().map(|r| r.rate).sum();
        let duration = (4500.0_f64 / per_tick).min(200.0) as u64;
        let trace = gen_trace(&full, duration, s);
        events_max = events_max.max(trace.len());
        ensure(trace.len() <= 5000, || {
            format!("seed {s}: {} events", trace.len())
        })?;

        let oracle = oracle_join(&c, c.queries(), &trace);
        let stat = run_simulation(&c, &trace, &SimConfig::default()).map_err(|e| e.to_string())?;
        ensure(stat.results == oracle, || {
            format!(
                "seed {s} static: {} results, oracle {}",
                stat.results.len(),
                oracle.len()
            )
        })?;

        let ctx = CostContext::configured(&c);
        let base = optimize(c.queries(), &ctx, OptimizeOptions::default())
            .unwrap()
            .plan;
        let Some(forced) = alternative(&base, &ctx) else {
            continue;
        };
        let cfg = SimConfig {
            mode: SimMode::Adaptive,
            plan: Some(base),
            forced: BTreeMap::from([(3, forced)]),
            lifecycle: vec![
                Lifecycle {
                    at: duration / 3,
                    op: LifecycleOp::Register(held_out.clone()),
                },
                Lifecycle {
                    at: 2 * duration / 3,
                    op: LifecycleOp::Remove(c.queries()[0].id.clone()),
                },
            ],
            ..SimConfig::default()
        };
        let adaptive = run_simulation(&c, &trace, &cfg).map_err(|e| e.to_string())?;
        let mut all = c.queries().to_vec();
        all.push(held_out);
        let expected = restrict(&oracle_join(&c, &all, &trace), &adaptive.lifetimes);
        ensure(adaptive.results == expected, || {
            let missing = expected
                .iter()
                .filter(|r| !adaptive.results.contains(r))
                .count();
            format!(
                "seed {s} adaptive: {} results, expected {}, {missing} missing",
                adaptive.results.len(),
                expected.len()
            )
        })?;
        // the optimizer may adopt the forced plan on its own one epoch earlier
        if adaptive.metrics.epochs.iter().any(|e| e.switched) {
            switches += 1;
        }
        ensure(adaptive.registrations.len() == 1, || {
            format!("seed {s}: no registration")
        })?;
        results += stat.results.len() + adaptive.results.len();
        pairs += 1;
    }
    let elapsed = started.elapsed();
    ensure(switches == pairs, || {
        format!("{switches} of {pairs} adaptive runs switched")
    })?;
    ensure(elapsed < Duration::from_secs(120), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "{pairs} pairs (<= {events_max} events), static and adaptive with switch, registration and removal all equal the oracle ({results} results), {elapsed:.1?}"
    ))
}

fn uniform(name: &str, attrs: &[&str], rate: f64, window: u64, parallelism: u32) -> Relation {
    Relation {
        rate,
        window,
        parallelism,
        ..rel(name, attrs)
    }
}

/// Probe messages per window against the summed step costs of the plan.
fn measured_vs_model(
    c: &Catalog,
    plan: &SelectedPlan,
    duration: u64,
    window: u64,
) -> (f64, f64, BTreeMap<String, (f64, f64)>) {
    let ctx = CostContext::configured(c);
    let trace = gen_trace(c, duration, 11);
    let out = run_simulation(
        c,
        &trace,
        &SimConfig {
            plan: Some(plan.clone()),
            ..SimConfig::default()
        },
    )
    .unwrap();
    let scale = window as f64 / duration as f64;
    let mut per_step = BTreeMap::new();
    for (k, cost) in plan.step_costs(&ctx).unwrap() {
        let shown = k.display(&plan.mirs);
        let measured = out.metrics.steps.get(&shown).map_or(0, |s| s.messages) as f64 * scale;
        per_step.insert(shown, (measured, cost));
    }
    let measured = out.metrics.totals.probe_messages as f64 * scale;
    (measured, plan.recost(&ctx).unwrap(), per_step)
}

fn criterion_6() -> Outcome {
    let window = 10;
    let rels = vec![
        uniform("R", &["a"], 4.0, window, 1),
        uniform("S", &["a", "b"], 4.0, window, 5),
        uniform("T", &["b"], 4.0, window, 1),
    ];
    let q1 = Query::new("q1", ["R", "S"], [eq(("R", "a"), ("S", "a"))]);
    let q2 = Query::new("q2", ["S", "T"], [eq(("S", "b"), ("T", "b"))]);
    let c = validate_workload(vec![q1, q2], rels.clone()).unwrap();
    let ctx = CostContext::configured(&c);
    let mut plan = optimize(c.queries(), &ctx, OptimizeOptions::default())
        .unwrap()
        .plan;
    let key = ("q1".to_string(), "R".to_string());
    let order = plan.orders.get_mut(&key).unwrap();
    order.partitions[0] = AttrRef::new("S", "b");
    plan.prune();
    plan.cost = plan.recost(&ctx).unwrap();
    plan.validate().map_err(|e| e.to_string())?;

    let duration = 500;
    let trace = gen_trace(&c, duration, 11);
    let out = run_simulation(
        &c,
        &trace,
        &SimConfig {
            plan: Some(plan.clone()),
            ..SimConfig::default()
        },
    )
    .unwrap();
    let bcast = &out.metrics.steps["<R,S[b]>"];
    ensure(
        bcast.probes > 0 && bcast.messages == 5 * bcast.probes,
        || {
            format!(
                "broadcast step: {} messages for {} probes",
                bcast.messages, bcast.probes
            )
        },
    )?;
    let (measured, model, _) = measured_vs_model(&c, &plan, duration, window);
    let ratio = measured / model;
    ensure((0.8..=1.2).contains(&ratio), || {
        format!("measured {measured:.1} vs modeled {model:.1} per window")
    })?;

    // three-way chain: later steps are reported, not judged
    let chain = Query::new(
        "q3",
        ["R", "S", "T"],
        [eq(("R", "a"), ("S", "a")), eq(("S", "b"), ("T", "b"))],
    );
    let c3 = validate_workload(vec![chain], rels).unwrap();
    let ctx3 = CostContext::configured(&c3);
    let plan3 = optimize(c3.queries(), &ctx3, opts(false)).unwrap().plan;
    let (m3, p3, steps3) = measured_vs_model(&c3, &plan3, duration, window);
    let detail: Vec<String> = steps3
        .iter()
        .map(|(k, (m, p))| format!("{k} {:.2}", m / p))
        .collect();
    println!(
        "  info: 3-way chain measured/modeled {:.2} overall; per step {}",
        m3 / p3,
        detail.join(", ")
    );
    Ok(format!(
        "fan-out exactly 5 over {} probes; measured/modeled {ratio:.3}",
        bcast.probes
    ))
}

fn sweep(relations: usize, n_q: Vec<usize>, repetitions: usize) -> BenchReport {
    bench(
        &BenchConfig {
            n_relations: relations,
            n_queries: n_q,
            repetitions,
            ..BenchConfig::default()
        },
        Execution::default(),
    )
    .unwrap()
}

fn criterion_7() -> Outcome {
    let started = Instant::now();
    let report = sweep(10, (1..=10).map(|i| i * 10).collect(), 3);
    let elapsed = started.elapsed();
    for r in &report.rows {
        ensure(r.mqo_cost < r.individual_cost, || {
            format!(
                "n_q={}: mqo {} >= individual {}",
                r.n_q, r.mqo_cost, r.individual_cost
            )
        })?;
    }
    let last = report.rows.last().unwrap();
    let ratio = last.mqo_cost / last.individual_cost;
    let series: Vec<String> = report
        .rows
        .iter()
        .map(|r| format!("{:.2}", r.mqo_cost / r.individual_cost))
        .collect();
    ensure((0.44..=0.64).contains(&ratio), || {
        format!(
            "ratio at 100 queries {ratio:.3}; series {}",
            series.join(" ")
        )
    })?;
    ensure(elapsed < Duration::from_secs(300), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "mqo below individual everywhere, ratio at 100 = {ratio:.3} (series {}), {elapsed:.1?}",
        series.join(" ")
    ))
}

/// Least-squares slope of log(y) over log(x).
fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let pts: Vec<(f64, f64)> = points.iter().map(|(x, y)| (x.ln(), y.ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

fn criterion_8() -> Outcome {
    let n_q: Vec<usize> = (1..=10).map(|i| i * 10).collect();
    let small = sweep(10, n_q.clone(), 1);
    let large = sweep(100, n_q, 1);
    let pts = |r: &BenchReport| -> Vec<(f64, f64)> {
        r.rows.iter().map(|r| (r.n_q as f64, r.variables)).collect()
    };
    let s10 = loglog_slope(&pts(&small));
    let counts = |r: &BenchReport| -> Vec<String> {
        r.rows
            .iter()
            .map(|r| format!("{:.0}", r.variables))
            .collect()
    };
    println!(
        "  info: variables at 10 relations {}",
        counts(&small).join(" ")
    );
    println!(
        "  info: variables at 100 relations {}",
        counts(&large).join(" ")
    );
    println!(
        "  info: drawing n_q queries once and dropping duplicates instead: {}",
        drawn_once_variables().join(" ")
    );
    let s100 = loglog_slope(&pts(&large));
    ensure(s10 < 0.9, || {
        format!("10 relations: variables grow with exponent {s10:.2}")
    })?;
    ensure((0.85..=1.15).contains(&s100), || {
        format!("100 relations: variables grow with exponent {s100:.2}")
    })?;

    let c = gen_workload(&WorkloadConfig {
        n_queries: 100,
        ..Default::default()
    })
    .unwrap();
    let ctx = CostContext::configured(&c);
    let o = optimize(c.queries(), &ctx, OptimizeOptions::default()).unwrap();
    ensure(o.status == SolveStatus::Optimal, || {
        "100-query solve timed out".into()
    })?;
    ensure(o.elapsed < Duration::from_secs(2), || {
        format!("100 queries took {:?}", o.elapsed)
    })?;
    Ok(format!(
        "variable growth exponent {s10:.2} at 10 relations, {s100:.2} at 100; 100 queries solved in {:.0?}",
        o.elapsed
    ))
}

/// Distinct queries and ILP variables when n_q queries are drawn once and
/// duplicates are dropped rather than redrawn.
fn drawn_once_variables() -> Vec<String> {
    (1..=10)
        .map(|i| {
            let c = gen_workload(&WorkloadConfig {
                n_queries: i * 10,
                seed: 1,
                retry_factor: 1,
                allow_fewer: true,
                ..Default::default()
            })
            .unwrap();
            let ctx = CostContext::configured(&c);
            let set = CandidateSet::build(c.queries(), &ctx, BuildOptions::default()).unwrap();
            format!("{}:{}", c.queries().len(), build_ilp(&set).vars.len())
        })
        .collect()
}

/// Two chained joins whose best probe orders depend on the S-T selectivity.
fn pipeline_catalog() -> Catalog {
    let rels = vec![
        uniform("R", &["a"], 2.0, 5, 2),
        uniform("S", &["a", "b"], 2.0, 5, 2),
        uniform("T", &["b", "c"], 2.0, 5, 2),
        uniform("U", &["c"], 2.0, 5, 2),
    ];
    let q1 = Query::new(
        "q1",
        ["R", "S", "T"],
        [eq(("R", "a"), ("S", "a")), eq(("S", "b"), ("T", "b"))],
    );
    let q2 = Query::new(
        "q2",
        ["S", "T", "U"],
        [eq(("S", "b"), ("T", "b")), eq(("T", "c"), ("U", "c"))],
    );
    validate_workload(vec![q1, q2], rels).unwrap()
}

fn criterion_9() -> Outcome {
    let c = pipeline_catalog();
    let trace = gen_trace(&c, 120, 5);
    let base_cfg = SimConfig {
        mode: SimMode::Adaptive,
        ..SimConfig::default()
    };
    let i = 4;
    let mut spike = Statistics::configured(&c);
    for (k, s) in spike.selectivities.iter_mut() {
        *s = if k.left.relation == "S" && k.right.relation == "T" {
            1.0
        } else {
            0.001
        };
    }
    let perturbed_cfg = SimConfig {
        injected: BTreeMap::from([(i, spike)]),
        ..base_cfg.clone()
    };
    let base = run_simulation(&c, &trace, &base_cfg).map_err(|e| e.to_string())?;
    let perturbed = run_simulation(&c, &trace, &perturbed_cfg).map_err(|e| e.to_string())?;
    let routing = |o: &probejoin::runtime::SimOutput| -> Vec<u64> {
        o.metrics.epochs.iter().map(|e| e.routing).collect()
    };
    let (a, b) = (routing(&base), routing(&perturbed));
    let first = a.iter().zip(&b).position(|(x, y)| x != y);
    ensure(first.is_some(), || {
        "perturbation never changed routing".into()
    })?;
    let first = first.unwrap() as u64;
    ensure(first >= i + 2, || {
        format!("routing changed in epoch {first}, perturbation in {i}")
    })?;
    ensure(base.results == perturbed.results, || {
        "results differ".into()
    })?;
    Ok(format!(
        "perturbation in epoch {i} first changes routing in epoch {first}; results unchanged"
    ))
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 9] = [
        (1, "worked-example costs", criterion_1),
        (2, "shared-plan selection", criterion_2),
        (3, "ILP structure on the four-relation example", criterion_3),
        (4, "solver equals brute force", criterion_4),
        (5, "simulator equals oracle", criterion_5),
        (6, "broadcast fan-out and cost fidelity", criterion_6),
        (7, "sharing savings trend", criterion_7),
        (8, "scaling shapes", criterion_8),
        (9, "epoch pipeline delay", criterion_9),
    ];
    let mut passed = BTreeMap::new();
    for (n, name, f) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match &outcome {
            Ok(detail) => println!("criterion {n} ({name}): PASS: {detail}"),
            Err(why) => println!("criterion {n} ({name}): FAIL: {why}"),
        }
        passed.insert(n, outcome.is_ok());
    }
    let substitutes = [5, 6, 9].iter().all(|n| passed[n]);
    if substitutes {
        println!("criterion 10 (cluster-scale figures excluded): PASS: substituted by criteria 5, 6 and 9, all passing");
    } else {
        println!("criterion 10 (cluster-scale figures excluded): FAIL: a substitute criterion among 5, 6 and 9 fails");
    }
    passed.insert(10, substitutes);
    let failed: Vec<u32> = passed
        .iter()
        .filter(|(_, ok)| !**ok)
        .map(|(n, _)| *n)
        .collect();
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
