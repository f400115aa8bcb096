use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};

use probejoin::bench::{bench, BenchConfig};
use probejoin::cost::CostContext;
use probejoin::generate::{gen_trace, gen_workload, WorkloadConfig};
use probejoin::ilp::{export_lp, LpStyle, SolveStatus};
use probejoin::io::{self, IoError, PlanFile};
use probejoin::optimizer::{optimize, Mode, OptimizeOptions};
use probejoin::par::Execution;
use probejoin::runtime::{oracle_join, run_simulation, SimConfig, SimMode, DEFAULT_EPOCH_LEN};

#[derive(Parser)]
#[command(
    name = "probejoin",
    version,
    about = "Shared probe orders for windowed stream joins"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Shared,
    Individual,
}

#[derive(Clone, Copy, ValueEnum)]
enum SimModeArg {
    Static,
    Adaptive,
}

#[derive(Subcommand)]
enum Command {
    /// Select probe orders for a workload.
    Optimize {
        #[arg(long)]
        workload: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        export_lp: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "shared")]
        mode: ModeArg,
        /// Milliseconds.
        #[arg(long, default_value_t = 10_000)]
        time_limit: u64,
        /// Only base relations are probed.
        #[arg(long)]
        no_materialize: bool,
    },
    /// Run a trace through the compiled plan.
    Simulate {
        #[arg(long)]
        workload: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        #[arg(
            long,
            conflicts_with = "optimize",
            required_unless_present = "optimize"
        )]
        plan: Option<PathBuf>,
        #[arg(long)]
        optimize: bool,
        #[arg(long, value_enum, default_value = "static")]
        mode: SimModeArg,
        #[arg(long, default_value_t = DEFAULT_EPOCH_LEN)]
        epoch_len: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// JSON list of registrations and removals.
        #[arg(long)]
        lifecycle: Option<PathBuf>,
        #[arg(long, default_value_t = 10_000)]
        time_limit: u64,
    },
    /// Nested-loop reference results.
    Oracle {
        #[arg(long)]
        workload: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    GenWorkload {
        #[arg(long, default_value_t = 10)]
        relations: usize,
        #[arg(long, default_value_t = 3)]
        attrs: usize,
        #[arg(long, default_value_t = 10)]
        queries: usize,
        #[arg(long, default_value_t = 3)]
        query_size: usize,
        #[arg(long, default_value_t = 100.0)]
        rate: f64,
        #[arg(long, default_value_t = 1)]
        window: u64,
        #[arg(long, default_value_t = 4)]
        parallelism: u32,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    GenTrace {
        #[arg(long)]
        workload: PathBuf,
        #[arg(long)]
        duration: u64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Individual against shared cost over a sweep of query counts.
    Bench {
        #[arg(long, default_value_t = 10)]
        relations: usize,
        #[arg(long, default_value_t = 3)]
        attrs: usize,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "10,20,30,40,50,60,70,80,90,100"
        )]
        queries: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        query_size: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        repetitions: usize,
        #[arg(long, default_value_t = 100.0)]
        rate: f64,
        #[arg(long, default_value_t = 4)]
        parallelism: u32,
        #[arg(long, default_value_t = 10_000)]
        time_limit: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        json: Option<PathBuf>,
        /// Evaluate sweep points one at a time.
        #[arg(long)]
        sequential: bool,
    },
}

/// Input problems exit with 1, everything else with 2.
enum Failure {
    Input(anyhow::Error),
    Internal(anyhow::Error),
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        Failure::Input(e.into())
    }
}

fn internal<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Internal(e.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Internal(e)) => {
            eprintln!("internal error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(Failure::Input)
}

fn status_name(s: SolveStatus) -> &'static str {
    match s {
        SolveStatus::Optimal => "optimal",
        SolveStatus::Timeout => "timeout",
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Optimize {
            workload,
            out,
            export_lp: lp,
            mode,
            time_limit,
            no_materialize,
        } => {
            let catalog = io::read_workload(&workload)?;
            let ctx = CostContext::configured(&catalog);
            let (mode, name) = match mode {
                ModeArg::Shared => (Mode::Shared, "shared"),
                ModeArg::Individual => (Mode::Individual, "individual"),
            };
            let o = optimize(
                catalog.queries(),
                &ctx,
                OptimizeOptions {
                    mode,
                    materialize: !no_materialize,
                    time_limit: Duration::from_millis(time_limit),
                    ..Default::default()
                },
            )
            .map_err(internal)?;
            let file = PlanFile::new(&o.plan, name, o.objective, status_name(o.status), &ctx)?;
            io::write_plan(&out, &file)?;
            if let Some(path) = lp {
                let model = o.model.as_ref().ok_or_else(|| {
                    Failure::Input(anyhow::anyhow!("--export-lp needs --mode shared"))
                })?;
                write_text(&path, &export_lp(model, LpStyle::default()))?;
            }
            eprintln!(
                "{} queries, objective {}, {} variables, {} ms",
                catalog.queries().len(),
                o.objective,
                o.variables,
                o.elapsed.as_millis()
            );
        }
        Command::Simulate {
            workload,
            trace,
            plan,
            optimize: _,
            mode,
            epoch_len,
            seed,
            out,
            metrics,
            lifecycle,
            time_limit,
        } => {
            let catalog = io::read_workload(&workload)?;
            let events = io::read_trace(&trace)?;
            let ctx = CostContext::configured(&catalog);
            let plan = match plan {
                Some(p) => Some(io::read_plan(&p)?.to_plan(&catalog, &ctx)?),
                None => None,
            };
            let lifecycle = match lifecycle {
                Some(p) => io::read_lifecycle(&p)?,
                None => Vec::new(),
            };
            let cfg = SimConfig {
                mode: match mode {
                    SimModeArg::Static => SimMode::Static,
                    SimModeArg::Adaptive => SimMode::Adaptive,
                },
                epoch_len,
                seed,
                plan,
                lifecycle,
                time_limit: Duration::from_millis(time_limit),
                ..Default::default()
            };
            let output = run_simulation(&catalog, &events, &cfg).map_err(|e| {
                use probejoin::runtime::RuntimeError as E;
                match e {
                    E::InvalidTrace(_)
                    | E::Catalog(_)
                    | E::UnknownQuery(_)
                    | E::DuplicateQueryId(_) => Failure::Input(e.into()),
                    _ => internal(e),
                }
            })?;
            io::write_results(&out, &output.results)?;
            if let Some(m) = metrics {
                io::write_metrics(&m, &output.metrics)?;
            }
            eprintln!(
                "{} events, {} results, {} probe messages",
                events.len(),
                output.results.len(),
                output.metrics.totals.probe_messages
            );
        }
        Command::Oracle {
            workload,
            trace,
            out,
        } => {
            let catalog = io::read_workload(&workload)?;
            let events = io::read_trace(&trace)?;
            let results = oracle_join(&catalog, catalog.queries(), &events);
            io::write_results(&out, &results)?;
        }
        Command::GenWorkload {
            relations,
            attrs,
            queries,
            query_size,
            rate,
            window,
            parallelism,
            seed,
            out,
        } => {
            let catalog = gen_workload(&WorkloadConfig {
                n_relations: relations,
                attrs_per_relation: attrs,
                n_queries: queries,
                query_size,
                rate,
                window,
                parallelism,
                seed,
                ..Default::default()
            })
            .map_err(|e| Failure::Input(e.into()))?;
            io::write_workload(&out, &catalog)?;
        }
        Command::GenTrace {
            workload,
            duration,
            seed,
            out,
        } => {
            if duration == 0 {
                return Err(Failure::Input(anyhow::anyhow!("duration must be positive")));
            }
            let catalog = io::read_workload(&workload)?;
            io::write_trace(&out, &gen_trace(&catalog, duration, seed))?;
        }
        Command::Bench {
            relations,
            attrs,
            queries,
            query_size,
            seed,
            repetitions,
            rate,
            parallelism,
            time_limit,
            out,
            json,
            sequential,
        } => {
            let cfg = BenchConfig {
                n_relations: relations,
                attrs_per_relation: attrs,
                n_queries: queries,
                query_size,
                seed,
                repetitions,
                rate,
                parallelism,
                time_limit_ms: time_limit,
            };
            let execution = if sequential {
                Execution::Sequential
            } else {
                Execution::default()
            };
            let report = bench(&cfg, execution).map_err(internal)?;
            let mut csv = Vec::new();
            report.write_csv(&mut csv).map_err(internal)?;
            write_text(&out, &String::from_utf8(csv).expect("csv is utf-8"))?;
            if let Some(path) = json {
                let text = serde_json::to_string_pretty(&report).map_err(internal)?;
                write_text(&path, &text)?;
            }
        }
    }
    Ok(())
}
