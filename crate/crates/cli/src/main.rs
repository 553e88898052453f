mod opts;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use pipesketch::{
    compare_idealized, generate_zipf, load_trace, run_experiment, write_csv, ExactCounts, ExperimentReport,
    ExperimentSpec, Granularity, ReadOptions, WeightMode, ZipfSpec,
};

use crate::opts::{RunOpts, SEED_ENV};

#[derive(Parser, Debug)]
#[command(name = "pipesketch", version, about = "Heavy-hitter sketches over packet traces")]
struct Cli {
    /// Worker threads for sweep cells [default: available cores].
    #[arg(long, short = 'j', global = true)]
    jobs: Option<usize>,

    /// More log output (-v info, -vv debug).
    #[arg(long, short = 'v', global = true, action = ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded Zipf trace as CSV.
    Generate(GenerateArgs),
    /// Run schemes over a trace and report FN/FP per trial.
    Run(ExperimentArgs),
    /// Space saving vs HashParallel vs HashPipe, with eviction, contributor
    /// and overreporting distributions.
    Compare(ExperimentArgs),
    /// Exact top-k of a trace.
    Topk(TopkArgs),
    /// Summarize a JSON report and check its config hash.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long, default_value_t = 10_000)]
    flows: u64,
    #[arg(long, default_value_t = 1_000_000)]
    packets: u64,
    #[arg(long, default_value_t = 1.0)]
    zipf_alpha: f64,
    /// Falls back to PIPESKETCH_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = Granularity::FiveTuple)]
    granularity: Granularity,
    #[arg(long, short = 'o')]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    #[command(flatten)]
    opts: RunOpts,

    /// TOML file with the same keys as the flags; flags take precedence.
    #[arg(long, short = 'c')]
    config: Option<PathBuf>,

    /// Re-run the config recorded in a JSON report.
    #[arg(long, conflicts_with = "config")]
    replay: Option<PathBuf>,

    /// Report path; `.json` writes JSON, anything else CSV.
    #[arg(long, short = 'o')]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TopkArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, short = 'k', default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = Granularity::FiveTuple)]
    granularity: Granularity,
    #[arg(long, default_value_t = WeightMode::Packets)]
    weight: WeightMode,
}

#[derive(Args, Debug)]
struct InspectArgs {
    report: PathBuf,
    /// Also print every row.
    #[arg(long)]
    rows: bool,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io { path: PathBuf, source: std::io::Error },
    Core(pipesketch::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Io { .. } => 2,
            CliError::Core(e) if e.is_io() => 2,
            CliError::Core(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => f.write_str(msg),
            CliError::Io { path, source } => write!(f, "{}: {source}", path.display()),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<pipesketch::Error> for CliError {
    fn from(e: pipesketch::Error) -> Self {
        CliError::Core(e)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    env_logger::Builder::new()
        .filter_level(match cli.verbose {
            0 => log::LevelFilter::Warn,
            1 => log::LevelFilter::Info,
            _ => log::LevelFilter::Debug,
        })
        .parse_default_env()
        .init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let env_seed = std::env::var(SEED_ENV).ok();
    match cli.command {
        Command::Generate(args) => generate(args, env_seed.as_deref()),
        Command::Run(args) => experiment(args, env_seed.as_deref(), false),
        Command::Compare(args) => experiment(args, env_seed.as_deref(), true),
        Command::Topk(args) => topk(args),
        Command::Inspect(args) => inspect(args),
    }
}

fn generate(args: GenerateArgs, env_seed: Option<&str>) -> Result<(), CliError> {
    let seed = match (args.seed, env_seed) {
        (Some(s), _) => s,
        (None, Some(v)) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{SEED_ENV} must be an unsigned integer, got `{v}`")))?,
        (None, None) => 0,
    };
    let spec = ZipfSpec {
        granularity: args.granularity,
        ..ZipfSpec::new(args.flows, args.packets, args.zipf_alpha, seed)
    };
    let records: Vec<_> = generate_zipf(&spec)?.collect();
    let n = write_csv(&args.out, &records)?;
    println!("wrote {n} packets over {} flows to {}", args.flows, args.out.display());
    Ok(())
}

fn build_spec(args: ExperimentArgs, env_seed: Option<&str>) -> Result<ExperimentSpec, CliError> {
    if let Some(path) = &args.replay {
        if args.opts != RunOpts::default() {
            return Err(CliError::Usage("--replay takes no experiment flags besides --out".into()));
        }
        let mut spec = ExperimentReport::read_json(path)?.config;
        spec.output = args.out;
        return Ok(spec);
    }
    let base = match &args.config {
        Some(path) => read_config(path)?,
        None => RunOpts::default(),
    };
    args.opts.merged_over(base).into_spec(env_seed, args.out)
}

fn read_config(path: &Path) -> Result<RunOpts, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn experiment(args: ExperimentArgs, env_seed: Option<&str>, idealized: bool) -> Result<(), CliError> {
    let spec = build_spec(args, env_seed)?;
    log::info!("config hash {}", spec.config_hash());
    let report = if idealized {
        compare_idealized(&spec)?
    } else {
        run_experiment(&spec)?
    };
    print!("{}", report.summary_table());
    if let Some(extras) = &report.idealized {
        if let Some(p) = extras.eviction_ccdf.last() {
            let tail = pipesketch::metrics::tail_probability(&p.ccdf, 5);
            println!("hashpipe evictions at {}: P[count > 5] = {:.4} over {} samples", p.sweep_value, tail, p.samples);
        }
        for o in &extras.overreport {
            println!("overreport {:<12} factor {:>4}: fn {:.4}±{:.4}", o.scheme.as_str(), o.factor, o.fn_mean, o.fn_stderr);
        }
    }
    println!("config {}", report.config_hash);
    if let Some(out) = &report.config.output {
        report.write(out)?;
        println!("wrote {} rows to {}", report.rows.len(), out.display());
    }
    Ok(())
}

fn topk(args: TopkArgs) -> Result<(), CliError> {
    let opts = ReadOptions {
        granularity: args.granularity,
        weight: args.weight,
        strict: false,
    };
    let (records, summary) = load_trace(&args.trace, opts)?;
    let oracle = ExactCounts::from_records(&records);
    println!(
        "{} records, {} flows, total weight {}{}",
        summary.records,
        oracle.num_flows(),
        oracle.total(),
        if summary.skipped > 0 { format!(", {} skipped", summary.skipped) } else { String::new() }
    );
    println!("{:>5} {:>12}  flow", "rank", "count");
    for (i, (key, count)) in oracle.top_k(args.k).iter().enumerate() {
        println!("{:>5} {:>12}  {}", i + 1, count, key);
    }
    Ok(())
}

fn inspect(args: InspectArgs) -> Result<(), CliError> {
    let report = ExperimentReport::read_json(&args.report)?;
    let recomputed = report.config.config_hash();
    println!("config {}", report.config_hash);
    if recomputed != report.config_hash {
        println!("warning: recorded config hashes to {recomputed}");
    }
    println!("schemes {}, {} trials, {} rows", report.config.schemes.len(), report.config.trials, report.rows.len());
    print!("{}", report.summary_table());
    if args.rows {
        print!("{}", report.to_csv_string()?);
    }
    Ok(())
}
