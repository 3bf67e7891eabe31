use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use etune::counters::{derive_counters, interpret_counters};
use etune::energymodel::{self, BoostParams, EnergyModel};
use etune::features::extract;
use etune::measure::{log_append, Backend, DeviceConfig, NvmlBackend, ReplayBackend, SimBackend};
use etune::opspace::{sample_random, Candidate, OperatorSpec, Schedule, SpaceLimits, Tile};
use etune::search::{run_latency_only, run_search, ErrorSemantics, RoundReport, RunArtifact, SearchConfig, SearchMode};
use etune::write_atomic;

const DEFAULT_PROFILE: &str = "a100-like";

#[derive(Parser)]
#[command(name = "etune", version, about = "Energy-aware schedule search for tiled GPU tensor kernels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the evolutionary search and write a run artifact.
    Search(SearchArgs),
    /// Train or evaluate the energy cost model.
    #[command(subcommand)]
    Model(ModelCommand),
    /// Print the analytic counters of one schedule.
    Counters(CountersArgs),
    /// Measure one schedule on the simulated backend.
    SimMeasure(SimMeasureArgs),
    /// Convert a run artifact to CSV.
    Report(ReportArgs),
    /// Measure random schedules and write them as training samples.
    Dataset(DatasetArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    Sim,
    Replay,
    Nvml,
}

#[derive(Clone, Copy, ValueEnum)]
enum SemanticsArg {
    Snr,
    Inverted,
}

#[derive(Args)]
struct ProfileArg {
    /// Device profile: a JSON file, or a name looked up in $ETUNE_PROFILE_DIR.
    #[arg(long, default_value = DEFAULT_PROFILE)]
    profile: String,
}

#[derive(Args)]
struct SearchArgs {
    /// Operator, e.g. mm:1,512,512,512, mv:1,1,4096,1024 or conv:N,H,W,Cin,Cout,K,stride,pad.
    #[arg(long)]
    op: String,
    #[command(flatten)]
    profile: ProfileArg,
    /// Candidates kept per round after the latency filter.
    #[arg(long, default_value_t = 64)]
    m: usize,
    /// Offspring per generation.
    #[arg(long, default_value_t = 256)]
    gen: usize,
    /// SNR threshold (dB) of the measurement-budget controller.
    #[arg(long, default_value_t = 20.0)]
    mu_db: f64,
    /// Maximum number of rounds after the initial one.
    #[arg(long, default_value_t = 30)]
    rounds: usize,
    /// Rounds without improvement before stopping.
    #[arg(long, default_value_t = 5)]
    patience: usize,
    /// Initial measured fraction k.
    #[arg(long, default_value_t = 1.0)]
    k_init: f64,
    /// Step applied to k after each round.
    #[arg(long, default_value_t = 0.2)]
    k_step: f64,
    /// Keep k fixed at --k-init.
    #[arg(long, default_value_t = false)]
    fixed_k: bool,
    /// Direction in which the SNR moves k.
    #[arg(long, value_enum, default_value_t = SemanticsArg::Snr)]
    error_semantics: SemanticsArg,
    /// Select parents by latency only and measure energy once at the end.
    #[arg(long, default_value_t = false)]
    latency_only: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = BackendKind::Sim)]
    backend: BackendKind,
    /// Measurement log replayed by --backend replay.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Run artifact (JSON).
    #[arg(long, default_value = "run.json")]
    out: PathBuf,
    /// Append every energy measurement to this JSONL log.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Suppress per-round progress on stderr.
    #[arg(long, default_value_t = false)]
    quiet: bool,
}

#[derive(Subcommand)]
enum ModelCommand {
    /// Fit a model to JSONL training samples.
    Train(TrainArgs),
    /// Report SNR, rank correlation and per-decile errors on samples.
    Eval(EvalArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Training samples (JSONL).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "model.json")]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    trees: usize,
    #[arg(long, default_value_t = 6)]
    depth: usize,
    #[arg(long, default_value_t = 0.1)]
    learning_rate: f64,
    #[arg(long, default_value_t = 1e-3)]
    min_child_weight: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 1.0)]
    subsample: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    /// Model written by `etune model train`.
    #[arg(long)]
    model: PathBuf,
    /// Held-out samples (JSONL).
    #[arg(long)]
    data: PathBuf,
    /// Print the evaluation as JSON.
    #[arg(long, default_value_t = false)]
    json: bool,
}

#[derive(Args)]
struct CountersArgs {
    #[arg(long)]
    op: String,
    /// `trivial`, a JSON schedule, or e.g. `m=64x4,n=64x4,k=64,u=2,v=4`.
    #[arg(long, default_value = "trivial")]
    schedule: String,
    #[command(flatten)]
    profile: ProfileArg,
    /// Also run the loop-nest interpreter and fail on any difference.
    #[arg(long, default_value_t = false)]
    check: bool,
}

#[derive(Args)]
struct SimMeasureArgs {
    #[arg(long)]
    op: String,
    /// `trivial`, a JSON schedule, or e.g. `m=64x4,n=64x4,k=64,u=2,v=4`.
    #[arg(long, default_value = "trivial")]
    schedule: String,
    #[command(flatten)]
    profile: ProfileArg,
}

#[derive(Args)]
struct ReportArgs {
    /// Run artifact written by `etune search`.
    #[arg(long)]
    run: PathBuf,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DatasetArgs {
    #[arg(long)]
    op: String,
    #[command(flatten)]
    profile: ProfileArg,
    /// Number of distinct random schedules.
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "samples.jsonl")]
    out: PathBuf,
}

fn load_profile(spec: &str) -> Result<DeviceConfig> {
    let direct = Path::new(spec);
    let mut candidates = vec![direct.to_path_buf()];
    if let Some(dir) = std::env::var_os("ETUNE_PROFILE_DIR") {
        let dir = PathBuf::from(dir);
        candidates.push(dir.join(spec));
        candidates.push(dir.join(format!("{spec}.json")));
    }
    for path in &candidates {
        if path.is_file() {
            return DeviceConfig::load(path).with_context(|| format!("loading profile {}", path.display()));
        }
    }
    if spec == DEFAULT_PROFILE {
        return Ok(DeviceConfig::a100_like());
    }
    bail!("profile {spec:?} not found (looked in the working directory and $ETUNE_PROFILE_DIR)")
}

fn parse_op(s: &str) -> Result<OperatorSpec> {
    s.parse().with_context(|| format!("invalid operator {s:?}"))
}

fn parse_tile(v: &str) -> Result<Tile> {
    match v.split_once('x') {
        Some((b, t)) => Ok(Tile::new(b.parse()?, t.parse()?)),
        None => Ok(Tile::new(v.parse()?, 1)),
    }
}

fn parse_schedule(s: &str) -> Result<Schedule> {
    let s = s.trim();
    if s == "trivial" {
        return Ok(Schedule::TRIVIAL);
    }
    if s.starts_with('{') {
        return serde_json::from_str(s).context("invalid JSON schedule");
    }
    let mut out = Schedule::TRIVIAL;
    for part in s.split(',').filter(|p| !p.is_empty()) {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| anyhow!("schedule field {part:?} is not key=value"))?;
        let bad = || format!("invalid value in schedule field {part:?}");
        match key.trim() {
            "b" | "batch" => out.batch = parse_tile(value).with_context(bad)?,
            "m" => out.m = parse_tile(value).with_context(bad)?,
            "n" => out.n = parse_tile(value).with_context(bad)?,
            "k" | "k_split" => out.k_split = value.parse().with_context(bad)?,
            "u" | "unroll" => out.unroll = value.parse().with_context(bad)?,
            "v" | "vector" => out.vector = value.parse().with_context(bad)?,
            other => bail!("unknown schedule field {other:?}"),
        }
    }
    Ok(out)
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)?)
}

fn cmd_search(a: SearchArgs) -> Result<()> {
    let op = parse_op(&a.op)?;
    let dev = load_profile(&a.profile.profile)?;
    let backend: Box<dyn Backend> = match a.backend {
        BackendKind::Sim => Box::new(SimBackend::new(dev.clone())),
        BackendKind::Nvml => Box::new(NvmlBackend::default()),
        BackendKind::Replay => {
            let trace = a.trace.as_ref().ok_or_else(|| anyhow!("--backend replay needs --trace"))?;
            Box::new(ReplayBackend::open(trace).with_context(|| format!("loading trace {}", trace.display()))?)
        }
    };
    let cfg = SearchConfig {
        m: a.m,
        generation_size: a.gen,
        k_init: a.k_init,
        k_step: a.k_step,
        mu_db: a.mu_db,
        max_rounds: a.rounds,
        patience: a.patience,
        rng_seed: a.seed,
        error_semantics: match a.error_semantics {
            SemanticsArg::Snr => ErrorSemantics::Snr,
            SemanticsArg::Inverted => ErrorSemantics::Inverted,
        },
        adapt_k: !a.fixed_k,
        ..SearchConfig::default()
    };
    let quiet = a.quiet;
    let mut progress = |r: &RoundReport| {
        if !quiet {
            let snr = r.snr_db.map_or("-".to_string(), |s| format!("{s:.1}"));
            let energy = r.best_energy_mj.map_or("-".to_string(), |e| format!("{e:.5}"));
            eprintln!(
                "round {:>3}  k {:.1}->{:.1}  snr {snr:>6} dB  measured {:>3} (total {:>5})  best {} {:.5} ms {energy} mJ",
                r.round, r.k_before, r.k_after, r.measurements, r.cumulative_measurements, r.best_id, r.best_latency_ms
            );
        }
    };
    let (mode, outcome) = if a.latency_only {
        (SearchMode::LatencyOnly, run_latency_only(&cfg, &op, backend.as_ref(), &dev, &mut progress)?)
    } else {
        (SearchMode::EnergyAware, run_search(&cfg, &op, backend.as_ref(), &dev, &mut progress)?)
    };
    if let Some(log) = &a.log {
        for r in &outcome.log {
            log_append(log, r).with_context(|| format!("appending to {}", log.display()))?;
        }
    }
    let artifact = RunArtifact::new(mode, op, &cfg, &dev, backend.as_ref(), &outcome);
    write_atomic(&a.out, to_json(&artifact)?.as_bytes()).with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "best {} latency {:.6} ms power {:.2} W energy {:.6} mJ -> {}",
        outcome.best.id,
        outcome.record.latency_ms,
        outcome.record.avg_power_w,
        outcome.record.energy_mj,
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let samples = energymodel::load_samples(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    let params = BoostParams {
        n_trees: a.trees,
        max_depth: a.depth,
        learning_rate: a.learning_rate,
        min_child_weight: a.min_child_weight,
        lambda: a.lambda,
        subsample: a.subsample,
    };
    let model = energymodel::train(&samples, &params, a.seed)?;
    model.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!("trained {} trees on {} samples -> {}", model.trees.len(), samples.len(), a.out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let model = EnergyModel::load(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let samples = energymodel::load_samples(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    let ev = energymodel::evaluate(&model, &samples)?;
    if a.json {
        println!("{}", to_json(&ev)?);
        return Ok(());
    }
    let mut out = String::new();
    writeln!(out, "samples  {}", ev.samples)?;
    writeln!(out, "snr_db   {:.3}", ev.snr_db)?;
    match ev.spearman {
        Some(r) => writeln!(out, "spearman {r:.6}")?,
        None => writeln!(out, "spearman undefined (constant input)")?,
    }
    writeln!(out, "decile  count  mean_measured  mean_predicted  mean_abs_rel_err")?;
    for d in &ev.deciles {
        writeln!(
            out,
            "{:>6}  {:>5}  {:>13.6}  {:>14.6}  {:>16.6}",
            d.decile, d.count, d.mean_measured, d.mean_predicted, d.mean_abs_rel_error
        )?;
    }
    print!("{out}");
    Ok(())
}

fn cmd_counters(a: CountersArgs) -> Result<()> {
    let op = parse_op(&a.op)?;
    let s = parse_schedule(&a.schedule)?;
    let dev = load_profile(&a.profile.profile)?;
    let c = derive_counters(&op, &s, &dev)?;
    if a.check {
        let i = interpret_counters(&op, &s, &dev)?;
        if i != c {
            bail!("analytic counters {c:?} differ from interpreted {i:?}");
        }
    }
    println!("{}", to_json(&c)?);
    Ok(())
}

fn cmd_sim_measure(a: SimMeasureArgs) -> Result<()> {
    let op = parse_op(&a.op)?;
    let s = parse_schedule(&a.schedule)?;
    let dev = load_profile(&a.profile.profile)?;
    let record = SimBackend::new(dev).measure(&Candidate::new(op, s))?;
    println!("{}", serde_json::to_string(&record)?);
    Ok(())
}

fn report_csv(artifact: &RunArtifact) -> String {
    let mut out = String::from("round,k,snr_db,measurements,best_energy,best_latency\n");
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for r in &artifact.reports {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.round,
            r.k_before,
            opt(r.snr_db),
            r.measurements,
            opt(r.best_energy_mj),
            r.best_latency_ms
        ));
    }
    out
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.run).with_context(|| format!("reading {}", a.run.display()))?;
    let artifact: RunArtifact = serde_json::from_str(&text).with_context(|| format!("parsing {}", a.run.display()))?;
    let csv = report_csv(&artifact);
    match &a.out {
        Some(path) => write_atomic(path, csv.as_bytes()).with_context(|| format!("writing {}", path.display()))?,
        None => std::io::stdout().write_all(csv.as_bytes())?,
    }
    Ok(())
}

fn cmd_dataset(a: DatasetArgs) -> Result<()> {
    let op = parse_op(&a.op)?;
    let dev = load_profile(&a.profile.profile)?;
    let backend = SimBackend::new(dev.clone());
    let pool = sample_random(&op, a.n, &SpaceLimits::default(), a.seed)?;
    let raw = pool
        .iter()
        .map(|c| Ok((extract(&op, &c.schedule, &dev)?, backend.measure(c)?.energy_mj)))
        .collect::<Result<Vec<_>>>()?;
    let samples = energymodel::normalize(raw)?;
    energymodel::save_samples(&a.out, &samples).with_context(|| format!("writing {}", a.out.display()))?;
    println!("wrote {} samples -> {}", samples.len(), a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Search(a) => cmd_search(a),
        Command::Model(ModelCommand::Train(a)) => cmd_train(a),
        Command::Model(ModelCommand::Eval(a)) => cmd_eval(a),
        Command::Counters(a) => cmd_counters(a),
        Command::SimMeasure(a) => cmd_sim_measure(a),
        Command::Report(a) => cmd_report(a),
        Command::Dataset(a) => cmd_dataset(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_forms() {
        assert_eq!(parse_schedule("trivial").unwrap(), Schedule::TRIVIAL);
        let s = parse_schedule("m=64x4,n=64x4,k=64,u=2,v=4").unwrap();
        assert_eq!(s.m, Tile::new(64, 4));
        assert_eq!((s.k_split, s.unroll, s.vector), (64, 2, 4));
        assert_eq!(parse_schedule(&serde_json::to_string(&s).unwrap()).unwrap(), s);
        assert!(parse_schedule("q=1").is_err());
        assert!(parse_schedule("m=x").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
