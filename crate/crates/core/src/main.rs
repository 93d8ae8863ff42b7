use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use parplan::cost::{synthetic_profile, CostConfig, FallbackConfig, PlanContext};
use parplan::optimizer::{megatron_baseline, plan, run_trials, BalanceMode, PlanConfig};
use parplan::placement::{anneal, AnnealConfig};
use parplan::report::Report;
use parplan::simulator::simulate;
use parplan::types::{
    load_cluster, load_json, load_model, load_profile, save_json, validate_strategy, Strategy,
};
use parplan::{Cluster, ModelGraph, PlanError, ProfileTable};

const EXIT_FAILURE: u8 = 1;
const EXIT_PROFILE_MISS: u8 = 3;

#[derive(Parser)]
#[command(
    name = "parplan",
    version,
    about = "Search 3D-parallel training strategies for heterogeneous clusters"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Enumerate degrees and micro-batch sizes, rank by estimated cost, simulate the top candidates.
    Plan(PlanArgs),
    /// Simulated annealing over degrees and domino placements.
    Anneal(AnnealArgs),
    /// Simulate one strategy (a strategy file or one entry of a report).
    Simulate(SimulateArgs),
    /// Megatron-style heuristic baseline.
    Baseline(BaselineArgs),
    /// Generate a synthetic profile table from per-layer FLOP counts.
    GenProfile(GenProfileArgs),
}

#[derive(Args)]
struct Inputs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    cluster: PathBuf,
    #[arg(long)]
    profile: PathBuf,
    /// Global batch size.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    gbs: u64,
    /// Fill profile misses analytically from FLOP counts at this device rate (FLOP/s).
    #[arg(long)]
    fallback_flops: Option<f64>,
    #[arg(long, default_value_t = 2.0)]
    bytes_per_param: f64,
}

#[derive(Args)]
struct SearchArgs {
    /// Number of top candidates run through the simulator.
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    budget: u64,
    /// Worker threads; defaults to available parallelism.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
    /// Reject strategies placing more parameters than this on one device.
    #[arg(long)]
    max_params_per_device: Option<u64>,
    /// Rows printed from the ranked table.
    #[arg(long, default_value_t = 10)]
    show: usize,
}

#[derive(Args)]
struct PlanArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    search: SearchArgs,
}

#[derive(Args)]
struct AnnealArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    search: SearchArgs,
    #[arg(long, default_value_t = 200, value_parser = clap::value_parser!(u64).range(1..))]
    iterations: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Record every evaluated neighbour, not only accepted ones.
    #[arg(long)]
    record_all: bool,
    /// Write the per-iteration trace as JSON lines.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    inputs: Inputs,
    /// Strategy JSON, or a report from `plan`/`anneal`/`baseline`.
    #[arg(long)]
    strategy: PathBuf,
    /// Report entry to simulate; defaults to the best simulated entry, else rank 1.
    #[arg(long)]
    rank: Option<usize>,
    /// Write the event trace as JSON lines.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    LayerBalance,
    ParamBalance,
}

#[derive(Args)]
struct BaselineArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long, value_enum, default_value_t = Mode::LayerBalance)]
    mode: Mode,
    #[arg(long, default_value = "baseline.json")]
    out: PathBuf,
    #[arg(long)]
    max_params_per_device: Option<u64>,
}

#[derive(Args)]
struct GenProfileArgs {
    #[arg(long)]
    model: PathBuf,
    /// TMP degrees to profile.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    tmp: Vec<usize>,
    /// Micro-batch sizes to profile.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    mbs: Vec<usize>,
    /// Sustained device rate, FLOP/s.
    #[arg(long)]
    device_flops: f64,
    /// Bandwidth inside a TMP group, bytes/s.
    #[arg(long)]
    bandwidth: f64,
    #[arg(long, default_value = "profile.json")]
    out: PathBuf,
}

struct Loaded {
    model: ModelGraph,
    cluster: Cluster,
    profile: ProfileTable,
}

impl Inputs {
    fn load(&self) -> anyhow::Result<Loaded> {
        Ok(Loaded {
            model: load_model(&self.model)?,
            cluster: load_cluster(&self.cluster)?,
            profile: load_profile(&self.profile)?,
        })
    }

    fn context<'a>(&self, l: &'a Loaded) -> anyhow::Result<PlanContext<'a, f64>> {
        let gbs = usize::try_from(self.gbs).context("gbs out of range")?;
        let cost = CostConfig {
            bytes_per_param: self.bytes_per_param,
            fallback: self
                .fallback_flops
                .map(|device_flops| FallbackConfig { device_flops }),
        };
        Ok(PlanContext::new(&l.model, &l.cluster, &l.profile, gbs).with_cost(cost))
    }
}

fn write_report(report: &Report<f64>, path: &Path, show: usize) -> anyhow::Result<()> {
    report.save(path)?;
    print!("{}", report.table(show));
    if let Some(rank) = report.best_rank {
        println!("best simulated: rank {rank}");
    }
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn cmd_plan(a: &PlanArgs) -> anyhow::Result<()> {
    let loaded = a.inputs.load()?;
    let ctx = a.inputs.context(&loaded)?;
    let cfg = PlanConfig {
        budget: a.search.budget as usize,
        workers: a.search.workers,
        max_params_per_device: a.search.max_params_per_device,
    };
    let outcome = plan(&ctx, &cfg);
    for f in &outcome.failures {
        eprintln!("skipped {} mbs={}: {}", f.degrees, f.mbs, f.reason);
    }
    if outcome.candidates.is_empty() {
        if let Some(miss) = outcome.failures.iter().find(|f| f.kind == "profile-miss") {
            return Err(ProfileMissExit(miss.reason.clone()).into());
        }
        bail!("no feasible candidate");
    }
    write_report(
        &Report::new(&outcome.candidates, outcome.best, outcome.failures),
        &a.search.out,
        a.search.show,
    )
}

fn cmd_anneal(a: &AnnealArgs) -> anyhow::Result<()> {
    let loaded = a.inputs.load()?;
    let ctx = a.inputs.context(&loaded)?;
    let cfg = AnnealConfig {
        iterations: a.iterations as usize,
        seed: a.seed,
        budget: a.search.budget as usize,
        record_all: a.record_all,
        max_params_per_device: a.search.max_params_per_device,
        ..AnnealConfig::default()
    };
    let outcome = parplan::optimizer::with_workers(a.search.workers, || anneal(&ctx, &cfg))?;
    if let Some(path) = &a.trace {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        outcome.write_trace(BufWriter::new(file))?;
    }
    let best = outcome
        .best_trace()
        .last()
        .copied()
        .unwrap_or(outcome.initial_cost);
    eprintln!(
        "initial estimate {:.6}, best recorded {:.6}",
        outcome.initial_cost, best
    );
    write_report(
        &Report::new(&outcome.candidates, outcome.best, Vec::new()),
        &a.search.out,
        a.search.show,
    )
}

fn read_strategy(path: &Path, rank: Option<usize>) -> anyhow::Result<Strategy> {
    let value: serde_json::Value = load_json(path)?;
    if value.get("candidates").is_some() {
        let report: Report<f64> =
            serde_json::from_value(value).with_context(|| format!("{}", path.display()))?;
        let rank = rank.or(report.best_rank).unwrap_or(1);
        let entry = report
            .entry(rank)
            .with_context(|| format!("no rank {rank} in {}", path.display()))?;
        Ok(entry.strategy.clone())
    } else {
        Ok(serde_json::from_value(value).with_context(|| format!("{}", path.display()))?)
    }
}

fn cmd_simulate(a: &SimulateArgs) -> anyhow::Result<()> {
    let loaded = a.inputs.load()?;
    let ctx = a.inputs.context(&loaded)?;
    let s = read_strategy(&a.strategy, a.rank)?;
    let violations = validate_strategy(&s, ctx.model, ctx.cluster, ctx.gbs);
    if !violations.is_empty() {
        for v in &violations {
            eprintln!("invalid strategy: {v}");
        }
        bail!("{} validation error(s)", violations.len());
    }
    let result = simulate(&s, &ctx, a.trace.is_some())?;
    let est = ctx.estimate(&s)?;
    if let Some(path) = &a.trace {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        result.write_trace(BufWriter::new(file))?;
        eprintln!("wrote {}", path.display());
    }
    println!(
        "strategy        {} mbs={} cuts={:?}",
        s.degrees, s.mbs, s.assignment.cuts
    );
    println!("simulated       {:.6}", result.iteration_time);
    println!("  pipeline      {:.6}", result.pipeline_time);
    println!("  dpsync        {:.6}", result.dpsync_time);
    println!("  bubble        {:.4}", result.bubble_fraction);
    println!("estimated       {:.6}", est.total);
    Ok(())
}

fn cmd_baseline(a: &BaselineArgs) -> anyhow::Result<()> {
    let loaded = a.inputs.load()?;
    let ctx = a.inputs.context(&loaded)?;
    let mode = match a.mode {
        Mode::LayerBalance => BalanceMode::LayerBalance,
        Mode::ParamBalance => BalanceMode::ParamBalance,
    };
    let mut records = megatron_baseline(&ctx, mode, a.max_params_per_device);
    if records.is_empty() {
        bail!("no admissible baseline candidate");
    }
    let n = records.len();
    let best = run_trials(&ctx, &mut records, n);
    write_report(&Report::new(&records, best, Vec::new()), &a.out, n)
}

fn cmd_gen_profile(a: &GenProfileArgs) -> anyhow::Result<()> {
    let model: ModelGraph = load_model(&a.model)?;
    let table = synthetic_profile(&model, &a.tmp, &a.mbs, a.device_flops, a.bandwidth)?;
    save_json(&a.out, &table)?;
    eprintln!("wrote {} entries to {}", table.len(), a.out.display());
    Ok(())
}

#[derive(Debug)]
struct ProfileMissExit(String);

impl std::fmt::Display for ProfileMissExit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ProfileMissExit {}

fn exit_code(err: &anyhow::Error) -> u8 {
    let miss = err.downcast_ref::<ProfileMissExit>().is_some()
        || matches!(
            err.downcast_ref::<PlanError>(),
            Some(PlanError::ProfileMiss { .. })
        );
    if miss {
        EXIT_PROFILE_MISS
    } else {
        EXIT_FAILURE
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Plan(a) => cmd_plan(a),
        Command::Anneal(a) => cmd_anneal(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Baseline(a) => cmd_baseline(a),
        Command::GenProfile(a) => cmd_gen_profile(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
