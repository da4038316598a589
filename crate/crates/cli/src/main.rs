//! `parplan` — plan and simulate distributed-training parallelizations.
//!
//! Two subcommands compose through plan documents: `plan` turns a model
//! and a cluster description into an execution plan (report on stdout,
//! JSON document via `--output`); `simulate` runs one deterministic
//! training step of a plan — given either a saved document or the same
//! model + cluster inputs — and reports step time, utilization, memory
//! and an optional Chrome trace.
//!
//! Exit codes are a stable contract: 0 success, 1 input error (unreadable
//! or malformed files, schema violations), 2 planning infeasibility
//! (insufficient devices or memory), 3 simulated out-of-memory.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use parplan_core::cluster::{parse_cluster, Cluster};
use parplan_core::model_ir::{parse_model, CompGraph};
use parplan_core::plan::{
    build_plan, with_even_batches, ExecutionPlan, PlanDocument, PlanOptions,
};
use parplan_core::report::{compare_report, plan_report, sim_report};
use parplan_core::schedule_sim::{build_pipeline_schedule, simulate, SimMetrics};
use parplan_core::trace::render_trace;
use parplan_core::PlanError;

// ── Argument surface ─────────────────────────────────────────────────────

#[derive(Parser)]
#[command(name = "parplan", version, about = "Parallelization planner and step simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build an execution plan from a model and a cluster description.
    Plan(PlanArgs),
    /// Simulate one training step of a plan document or of model + cluster.
    Simulate(SimulateArgs),
}

/// Config fields that flags may override.
#[derive(Args, Clone, Copy)]
struct Overrides {
    /// Number of pipeline stages for automatic partitioning.
    #[arg(long)]
    num_task_graph: Option<usize>,
    /// Micro-batches pipelined per step.
    #[arg(long)]
    num_micro_batch: Option<u64>,
    /// Partition automatically even when the model carries annotations.
    #[arg(long)]
    auto_parallel: bool,
    /// Samples per training step.
    #[arg(long)]
    global_batch: Option<u64>,
}

impl Overrides {
    fn apply(&self, graph: &mut CompGraph) {
        if let Some(n) = self.num_task_graph {
            graph.config.num_task_graph = Some(n);
        }
        if let Some(m) = self.num_micro_batch {
            graph.config.num_micro_batch = m;
        }
        if self.auto_parallel {
            graph.config.auto_parallel = true;
        }
        if let Some(b) = self.global_batch {
            graph.config.global_batch = b;
        }
    }
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Format {
    /// Human-readable report.
    Text,
    /// The same data as a JSON document.
    Structured,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum CompareMode {
    /// Report the naive uniform batch allocation, and the speedup the
    /// balanced one achieves over it.
    Even,
    /// Report the balanced allocation (the planner default).
    Balanced,
}

#[derive(Args)]
struct PlanArgs {
    /// Annotated model graph (JSON).
    model: PathBuf,
    /// Cluster description (JSON).
    cluster: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    /// Keep gather/re-partition bridge pairs separate.
    #[arg(long)]
    no_fuse: bool,
    /// Write the plan document here (the report still prints).
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Args)]
struct SimulateArgs {
    /// A plan document, or a model graph when CLUSTER is also given.
    input: PathBuf,
    /// Cluster description; plan from model + cluster instead of a document.
    cluster: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    /// Keep gather/re-partition bridge pairs separate (model + cluster mode).
    #[arg(long)]
    no_fuse: bool,
    /// Write a Chrome trace-event file of the step timeline.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Also simulate the other batch allocation and print the speedup.
    #[arg(long, value_enum)]
    compare: Option<CompareMode>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

// ── Error-to-exit-code mapping ───────────────────────────────────────────

/// Failure plus the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

type CliResult<T> = Result<T, Failure>;

impl From<PlanError> for Failure {
    fn from(e: PlanError) -> Failure {
        Failure {
            code: if e.is_input_error() { 1 } else { 2 },
            message: e.to_string(),
        }
    }
}

fn input_error(message: String) -> Failure {
    Failure { code: 1, message }
}

fn read_file(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path)
        .map_err(|e| input_error(format!("cannot read {}: {e}", path.display())))
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    std::fs::write(path, contents)
        .map_err(|e| input_error(format!("cannot write {}: {e}", path.display())))
}

// ── Subcommands ──────────────────────────────────────────────────────────

fn load_plan(
    model_path: &Path,
    cluster_path: &Path,
    overrides: &Overrides,
    no_fuse: bool,
) -> CliResult<ExecutionPlan> {
    let mut graph = parse_model(&read_file(model_path)?)?;
    overrides.apply(&mut graph);
    let cluster: Cluster = parse_cluster(&read_file(cluster_path)?)?;
    let options = PlanOptions {
        fuse_bridges: !no_fuse,
        ..PlanOptions::default()
    };
    let plan = build_plan(&graph, &cluster, &options)?;
    for warning in &plan.warnings {
        log::warn!("{warning}");
    }
    Ok(plan)
}

fn run_plan(args: &PlanArgs) -> CliResult<u8> {
    let plan = load_plan(&args.model, &args.cluster, &args.overrides, args.no_fuse)?;
    let document = PlanDocument::new(plan);
    if let Some(path) = &args.output {
        write_file(path, &document.to_json())?;
    }
    match args.format {
        Format::Text => print!("{}", plan_report(&document.plan)),
        Format::Structured => println!("{}", document.to_json()),
    }
    Ok(0)
}

fn run_simulate(args: &SimulateArgs) -> CliResult<u8> {
    let plan = match &args.cluster {
        Some(cluster_path) => load_plan(&args.input, cluster_path, &args.overrides, args.no_fuse)?,
        None => PlanDocument::from_json(&read_file(&args.input)?)?.plan,
    };

    let balanced_metrics = simulate(&plan);
    let comparison: Option<(SimMetrics, SimMetrics)> = match args.compare {
        None => None,
        Some(_) => {
            let even_plan = with_even_batches(&plan)?;
            Some((simulate(&even_plan), balanced_metrics.clone()))
        }
    };
    // The reported ("primary") run follows the requested allocation.
    let primary = match args.compare {
        Some(CompareMode::Even) => comparison.as_ref().expect("compare ran").0.clone(),
        _ => balanced_metrics,
    };

    if let Some(path) = &args.trace {
        let events = match args.compare {
            Some(CompareMode::Even) => build_pipeline_schedule(&with_even_batches(&plan)?),
            _ => build_pipeline_schedule(&plan),
        };
        write_file(path, &render_trace(&events))?;
    }

    match args.format {
        Format::Text => {
            print!("{}", sim_report(&primary));
            if let Some((even, balanced)) = &comparison {
                print!("{}", compare_report(even, balanced));
            }
        }
        Format::Structured => {
            let value = match &comparison {
                None => serde_json::to_value(&primary),
                Some((even, balanced)) => serde_json::to_value(serde_json::json!({
                    "even": even,
                    "balanced": balanced,
                    "speedup": even.step_time / balanced.step_time,
                })),
            }
            .expect("metrics serialize");
            println!(
                "{}",
                serde_json::to_string_pretty(&value).expect("metrics serialize")
            );
        }
    }

    if primary.has_oom() {
        for defect in &primary.oom_defects {
            eprintln!("simulated OOM: {defect}");
        }
        return Ok(3);
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PARPLAN_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Plan(args) => run_plan(args),
        Command::Simulate(args) => run_simulate(args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}
