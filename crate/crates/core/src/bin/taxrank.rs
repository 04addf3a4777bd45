use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, LevelFilter};

use taxrank::experiment::{self, Distribution, UtilitySource};
use taxrank::io::{self, format_significant, IdMap, ScoreFormat, SIGNIFICANT_DIGITS};
use taxrank::{metrics, Error, Mode, RankingConfig, Result, ScoreMatrix};

#[derive(Parser)]
#[command(
    name = "taxrank",
    version,
    about = "Fair re-ranking by exposure taxation"
)]
struct Cli {
    /// Log progress (-v) or solver detail (-vv) to standard error.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rank every user once at a single tax rate.
    Rank(RankArgs),
    /// Trade-off table over a grid of tax rates.
    Sweep(SweepArgs),
    /// Metric jumps between neighbouring tax rates, against the item-tax baseline.
    Continuity(ContinuityArgs),
    /// Write a synthetic score matrix.
    Synth(SynthArgs),
    /// Recompute metrics from saved lists.
    Metrics(MetricsArgs),
}

#[derive(Args)]
struct ScoreArgs {
    /// Score matrix CSV.
    #[arg(long)]
    scores: PathBuf,
    /// Score file layout: dense or triplet.
    #[arg(long, default_value = "dense")]
    format: ScoreFormat,
    /// Item bids CSV (`item_id,bid`); item weights become ln(bid).
    #[arg(long)]
    bids: Option<PathBuf>,
    /// Keep unit item weights even when bids are given.
    #[arg(long)]
    gamma_one: bool,
    /// Utility model: exposure or ctr.
    #[arg(long, default_value = "ctr")]
    mode: Mode,
}

#[derive(Args)]
struct SolverArgs {
    /// List size.
    #[arg(long)]
    k: usize,
    /// Entropy coefficient of the transport projection.
    #[arg(long, default_value_t = 0.5)]
    lambda_ot: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RankArgs {
    #[command(flatten)]
    input: ScoreArgs,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long, default_value_t = 1.0)]
    tax_rate: f64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    input: ScoreArgs,
    #[command(flatten)]
    solver: SolverArgs,
    /// Ascending, comma-separated tax rates.
    #[arg(long, value_delimiter = ',', default_values_t = experiment::DEFAULT_T_GRID)]
    t_grid: Vec<f64>,
    /// Evaluate sampled lists instead of expected utilities.
    #[arg(long)]
    realized: bool,
    /// Worker threads (0 = available parallelism).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Trade-off CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ContinuityArgs {
    #[command(flatten)]
    input: ScoreArgs,
    #[command(flatten)]
    solver: SolverArgs,
    /// Comma-separated tax rates; defaults to 200 points spaced by `delta` from 0.
    #[arg(long, value_delimiter = ',')]
    t_grid: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0.02)]
    delta: f64,
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    users: usize,
    #[arg(long)]
    items: usize,
    /// uniform or powerlaw.
    #[arg(long, default_value = "powerlaw")]
    distribution: Distribution,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MetricsArgs {
    #[command(flatten)]
    input: ScoreArgs,
    /// Lists CSV written by `rank`.
    #[arg(long)]
    lists: PathBuf,
    /// Summary CSV; printed to standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the Lorenz curve of item utilities.
    #[arg(long)]
    lorenz: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => LevelFilter::Warn,
        1 => LevelFilter::Info,
        _ => LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();

    let result = match cli.command {
        Command::Rank(args) => rank(args),
        Command::Sweep(args) => sweep(args),
        Command::Continuity(args) => continuity(args),
        Command::Synth(args) => synth(args),
        Command::Metrics(args) => metrics_cmd(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn load(args: &ScoreArgs) -> Result<(ScoreMatrix, IdMap)> {
    let loaded = io::load_scores(&args.scores, args.format, args.mode)?;
    let mut scores = loaded.scores;
    if let Some(path) = &args.bids {
        let bids = io::load_bids(path, &loaded.ids)?;
        scores = scores.with_bids(bids, !args.gamma_one)?;
    }
    info!(
        "loaded {} users x {} items from {}",
        scores.num_users(),
        scores.num_items(),
        args.scores.display()
    );
    Ok((scores, loaded.ids))
}

fn config(solver: &SolverArgs, tax_rate: f64, mode: Mode) -> RankingConfig {
    RankingConfig {
        k: solver.k,
        tax_rate,
        lambda_ot: solver.lambda_ot,
        seed: solver.seed,
        mode,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn push_evaluation(rows: &mut Vec<(String, f64)>, suffix: &str, eval: &experiment::Evaluation) {
    rows.push((format!("ecn_{suffix}"), eval.ecn));
    if let Some(ecpm) = eval.ecpm {
        rows.push((format!("ecpm_{suffix}"), ecpm));
    }
    rows.push((format!("gini_{suffix}"), eval.gini));
}

fn rank(args: RankArgs) -> Result<()> {
    let (scores, ids) = load(&args.input)?;
    let mode = args.input.mode;
    let cfg = config(&args.solver, args.tax_rate, mode);
    let (run, lists) = experiment::rank(&scores, &cfg)?;
    info!(
        "solve {:?}, project {:?} ({} iterations, {} newton steps), sample {:?}",
        run.timings.solve,
        run.timings.project,
        run.state.iterations_run,
        run.state.newton_steps,
        run.timings.sample
    );

    let expected_v = taxrank::expected_utilities(&scores, &run.probs, mode)?;
    let realized_v = taxrank::compute_utilities(&scores, &lists, mode)?;
    let expected = experiment::evaluate(&scores, &expected_v)?;
    let realized = experiment::evaluate(&scores, &realized_v)?;
    let mut rows = Vec::new();
    push_evaluation(&mut rows, "expected", &expected);
    push_evaluation(&mut rows, "realized", &realized);
    rows.push((
        "sinkhorn_iterations".into(),
        run.state.iterations_run as f64,
    ));
    rows.push(("newton_steps".into(), run.state.newton_steps as f64));
    rows.push(("marginal_error".into(), run.state.marginal_error));
    rows.push(("clamped_mass".into(), run.state.clamped_mass));

    let out = &args.out;
    create_dir(out)?;
    io::save_lists(out.join("lists.csv"), &lists, &ids)?;
    io::save_probs(out.join("probs.csv"), &run.probs, &ids)?;
    io::save_summary(out.join("metrics.csv"), &rows)?;
    io::save_lorenz(
        out.join("lorenz.csv"),
        &metrics::lorenz_points(&expected_v, scores.gamma())?,
    )?;
    io::save_id_map(out, &ids)?;
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<()> {
    let (scores, _) = load(&args.input)?;
    let cfg = config(&args.solver, 0.0, args.input.mode);
    let source = if args.realized {
        UtilitySource::Realized
    } else {
        UtilitySource::Expected
    };
    let points = experiment::sweep(&scores, &cfg, &args.t_grid, args.jobs, source)?;
    let bound: Vec<f64> = points
        .iter()
        .map(|p| metrics::pot_bound(scores.num_users(), p.tax_rate))
        .collect();
    io::save_tradeoff(&args.out, &points, Some(&bound))
}

fn continuity(args: ContinuityArgs) -> Result<()> {
    let (scores, _) = load(&args.input)?;
    let cfg = config(&args.solver, 0.0, args.input.mode);
    let grid = args
        .t_grid
        .unwrap_or_else(|| experiment::linear_grid(0.0, args.delta, 200));
    let rows = experiment::continuity(&scores, &cfg, &grid, args.delta, args.jobs)?;

    let f = |v: f64| format_significant(v, SIGNIFICANT_DIGITS);
    let mut out = String::from(
        "t,taxrank_ecn_jump,taxrank_gini_jump,lambda,baseline_ecn_jump,baseline_gini_jump\n",
    );
    for r in &rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            f(r.t),
            f(r.taxrank_ecn_jump),
            f(r.taxrank_gini_jump),
            f(r.lambda),
            f(r.baseline_ecn_jump),
            f(r.baseline_gini_jump)
        ));
    }
    std::fs::write(&args.out, out).map_err(|source| Error::Io {
        path: args.out.clone(),
        source,
    })?;

    let series = |pick: fn(&experiment::ContinuityRow) -> f64| {
        let jumps: Vec<f64> = rows.iter().map(pick).collect();
        let (max, median) = experiment::jump_stats(&jumps);
        max / median
    };
    info!(
        "max/median eCN jump: taxrank {:.3}, baseline {:.3}",
        series(|r| r.taxrank_ecn_jump),
        series(|r| r.baseline_ecn_jump)
    );
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    let scores = experiment::synth(args.users, args.items, args.distribution, args.seed)?;
    let ids = IdMap::sequential(args.users, args.items);
    io::save_scores(&args.out, &scores, &ids)
}

fn metrics_cmd(args: MetricsArgs) -> Result<()> {
    let (scores, ids) = load(&args.input)?;
    let lists = io::load_lists(&args.lists, &ids)?;
    let v = taxrank::compute_utilities(&scores, &lists, args.input.mode)?;
    let eval = experiment::evaluate(&scores, &v)?;
    let mut rows = Vec::new();
    push_evaluation(&mut rows, "realized", &eval);
    match &args.out {
        Some(path) => io::save_summary(path, &rows)?,
        None => {
            println!("metric,value");
            for (key, value) in &rows {
                println!("{key},{}", format_significant(*value, SIGNIFICANT_DIGITS));
            }
        }
    }
    if let Some(path) = &args.lorenz {
        io::save_lorenz(path, &metrics::lorenz_points(&v, scores.gamma())?)?;
    }
    Ok(())
}
