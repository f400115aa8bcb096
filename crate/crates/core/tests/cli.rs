use std::path::Path;
use std::process::{Command, Output};

use probejoin::catalog::fixtures::overlapping_chains;
use probejoin::io;
use tempfile::TempDir;

fn probejoin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_probejoin"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_string_lossy().into_owned()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn generate(dir: &TempDir) -> (String, String) {
    let (w, t) = (path(dir, "w.json"), path(dir, "t.jsonl"));
    ok(&probejoin(&[
        "gen-workload",
        "--relations",
        "4",
        "--queries",
        "3",
        "--rate",
        "2",
        "--window",
        "6",
        "--parallelism",
        "3",
        "--seed",
        "4",
        "--out",
        &w,
    ]));
    ok(&probejoin(&[
        "gen-trace",
        "--workload",
        &w,
        "--duration",
        "60",
        "--seed",
        "9",
        "--out",
        &t,
    ]));
    (w, t)
}

fn read(p: &str) -> String {
    std::fs::read_to_string(Path::new(p)).unwrap()
}

#[test]
fn simulate_output_equals_oracle_output() {
    let dir = TempDir::new().unwrap();
    let (w, t) = generate(&dir);
    let (plan, oracle) = (path(&dir, "plan.json"), path(&dir, "oracle.jsonl"));
    ok(&probejoin(&["optimize", "--workload", &w, "--out", &plan]));
    ok(&probejoin(&[
        "oracle",
        "--workload",
        &w,
        "--trace",
        &t,
        "--out",
        &oracle,
    ]));
    let expected = read(&oracle);
    assert!(!expected.is_empty());
    for (mode, source) in [
        ("static", "--plan"),
        ("adaptive", "--plan"),
        ("adaptive", "--optimize"),
    ] {
        let out = path(&dir, "sim.jsonl");
        let mut args = vec![
            "simulate",
            "--workload",
            &w,
            "--trace",
            &t,
            "--mode",
            mode,
            "--out",
            &out,
        ];
        if source == "--plan" {
            args.extend(["--plan", &plan]);
        } else {
            args.push("--optimize");
        }
        ok(&probejoin(&args));
        assert_eq!(read(&out), expected, "{mode} {source}");
    }
}

#[test]
fn optimize_writes_a_loadable_plan_and_lp() {
    let dir = TempDir::new().unwrap();
    let (w, plan, lp) = (
        path(&dir, "w.json"),
        path(&dir, "plan.json"),
        path(&dir, "m.lp"),
    );
    io::write_workload(Path::new(&w), &overlapping_chains()).unwrap();
    ok(&probejoin(&[
        "optimize",
        "--workload",
        &w,
        "--out",
        &plan,
        "--export-lp",
        &lp,
    ]));
    let file = io::read_plan(Path::new(&plan)).unwrap();
    assert_eq!(file.status, "optimal");
    assert!(file.topology.is_some());
    let catalog = io::read_workload(Path::new(&w)).unwrap();
    let ctx = probejoin::cost::CostContext::configured(&catalog);
    let restored = file.to_plan(&catalog, &ctx).unwrap();
    assert!((restored.cost - file.objective).abs() < 1e-9 * file.objective);
    assert!(read(&lp).contains("Minimize"));

    let ind = path(&dir, "ind.json");
    ok(&probejoin(&[
        "optimize",
        "--workload",
        &w,
        "--out",
        &ind,
        "--mode",
        "individual",
    ]));
    assert!(io::read_plan(Path::new(&ind)).unwrap().objective >= file.objective);
}

#[test]
fn metrics_file_has_one_line_per_epoch_and_a_summary() {
    let dir = TempDir::new().unwrap();
    let (w, t) = generate(&dir);
    let (out, metrics) = (path(&dir, "r.jsonl"), path(&dir, "m.jsonl"));
    ok(&probejoin(&[
        "simulate",
        "--workload",
        &w,
        "--trace",
        &t,
        "--optimize",
        "--mode",
        "adaptive",
        "--epoch-len",
        "20",
        "--out",
        &out,
        "--metrics",
        &metrics,
    ]));
    let lines: Vec<serde_json::Value> = read(&metrics)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[..3].iter().all(|l| l.get("epoch").is_some()));
    assert!(lines[3].get("totals").is_some());
}

#[test]
fn bench_writes_csv_and_json() {
    let dir = TempDir::new().unwrap();
    let (csv, json) = (path(&dir, "b.csv"), path(&dir, "b.json"));
    ok(&probejoin(&[
        "bench",
        "--queries",
        "2,4",
        "--seed",
        "1",
        "--repetitions",
        "1",
        "--out",
        &csv,
        "--json",
        &json,
        "--sequential",
    ]));
    let text = read(&csv);
    assert!(text.starts_with("n_q,individual_cost,mqo_cost,variables,probe_orders,solve_ms"));
    assert_eq!(text.lines().count(), 3);
    assert!(serde_json::from_str::<serde_json::Value>(&read(&json)).is_ok());
}

#[test]
fn input_errors_exit_with_one() {
    let dir = TempDir::new().unwrap();
    let missing = path(&dir, "missing.json");
    let out = probejoin(&[
        "optimize",
        "--workload",
        &missing,
        "--out",
        &path(&dir, "p.json"),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.json"));

    let bad = path(&dir, "bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    let out = probejoin(&[
        "optimize",
        "--workload",
        &bad,
        "--out",
        &path(&dir, "p.json"),
    ]);
    assert_eq!(out.status.code(), Some(1));

    let (w, _) = generate(&dir);
    let trace = path(&dir, "bad.jsonl");
    std::fs::write(&trace, "{\"rel\":\"nope\",\"ts\":1,\"attrs\":{}}\n").unwrap();
    let out = probejoin(&[
        "simulate",
        "--workload",
        &w,
        "--trace",
        &trace,
        "--optimize",
        "--out",
        &path(&dir, "r.jsonl"),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_nonzero() {
    let out = probejoin(&["simulate", "--workload", "w.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
    let out = probejoin(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}
