use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mergewatch::queueing::{hourly_rates_all, ReliabilityTarget, HOUR};
use mergewatch::scenario::{
    pool_regions, read_events, read_rates, read_samples, run_grid, run_scenario, sizing,
    write_csv, write_rates, ScenarioConfig,
};

/// Merge supervision analytics: simulate, detect conflicts, size operator teams.
#[derive(Parser)]
#[command(name = "mergewatch", version)]
struct Cli {
    /// Worker threads for grids and flow reconstruction (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario.
    Run(RunArgs),
    /// Run every (kind, penetration) pair of the scenario's [grid] table.
    Grid(RunArgs),
    /// Size per-region and pooled teams from hourly rate files.
    Pool(PoolArgs),
    /// Extract hourly rates from event and sample exports.
    Rates(RatesArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the scenario's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: the scenario's `out`, else
    /// $MERGEWATCH_OUT/<config name>, else ./mergewatch-out/<config name>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Reliability targets for the sizing report; repeatable.
    #[arg(long = "epsilon", default_values_t = [1e-2, 1e-4, 1e-6])]
    epsilons: Vec<f64>,
}

#[derive(Args)]
struct PoolArgs {
    /// A region's rates.csv, optionally prefixed with `name=`; repeatable.
    #[arg(long = "rates", required = true)]
    regions: Vec<String>,
    #[arg(long = "epsilon", default_values_t = [1e-2, 1e-4, 1e-6])]
    epsilons: Vec<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RatesArgs {
    #[arg(long)]
    events: PathBuf,
    #[arg(long)]
    samples: PathBuf,
    /// Analysis horizon in seconds (multiple of 3600).
    #[arg(long)]
    horizon: u32,
    /// Output file (default: rates.csv next to the events file).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long = "epsilon")]
    epsilons: Vec<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    match cli.command {
        Command::Run(a) => run(a),
        Command::Grid(a) => grid(a),
        Command::Pool(a) => pool(a),
        Command::Rates(a) => rates(a),
    }
}

fn targets(eps: &[f64]) -> Result<Vec<ReliabilityTarget>> {
    eps.iter()
        .map(|&e| ReliabilityTarget::new(e).map_err(Into::into))
        .collect()
}

fn load_config(a: &RunArgs) -> Result<(ScenarioConfig, PathBuf)> {
    let mut cfg = ScenarioConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let out = match (&a.out, &cfg.out) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) => cfg.resolve(o),
        (None, None) => {
            let stem = a.config.file_stem().unwrap_or_default();
            let root = std::env::var_os("MERGEWATCH_OUT")
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("mergewatch-out"));
            root.join(stem)
        }
    };
    Ok((cfg, out))
}

fn run(a: RunArgs) -> Result<()> {
    let eps = targets(&a.epsilons)?;
    let (cfg, out) = load_config(&a)?;
    let started = Instant::now();
    let r = run_scenario(&cfg, &out)?;
    write_csv(&out.join("sizing.csv"), sizing("scenario", &r.hourly, &eps))?;
    println!(
        "{} p={} seed={}: {} vehicles, mean speed {:.2} m/s (std {:.2})",
        r.kind, r.penetration, r.seed, r.spawned, r.mean_speed, r.std_speed
    );
    println!(
        "supervisors max {} mean {:.3}; baseline1 max {} mean {:.3}; baseline2 max {} mean {:.3}",
        r.khat_max, r.khat_mean, r.baseline1_max, r.baseline1_mean, r.baseline2_max, r.baseline2_mean
    );
    println!(
        "{} events, {} guard events, runtime {:.2}s, outputs in {}",
        r.events,
        r.guard_events,
        started.elapsed().as_secs_f64(),
        out.display()
    );
    Ok(())
}

fn grid(a: RunArgs) -> Result<()> {
    let (cfg, out) = load_config(&a)?;
    let cfgs = cfg.expand_grid()?;
    let started = Instant::now();
    let table = run_grid(&cfgs, &out)?;
    print!("{}", table.markdown());
    println!(
        "{} scenarios in {:.2}s, outputs in {}",
        table.rows.len(),
        started.elapsed().as_secs_f64(),
        out.display()
    );
    Ok(())
}

fn region_arg(spec: &str) -> (String, PathBuf) {
    match spec.split_once('=') {
        Some((name, path)) if !name.is_empty() => (name.to_string(), PathBuf::from(path)),
        _ => {
            let path = PathBuf::from(spec);
            // run outputs are all named rates.csv, so fall back to the run directory
            let name = match path.file_stem() {
                Some(stem) if stem != "rates" => Some(stem),
                _ => path.parent().and_then(Path::file_name),
            }
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| spec.to_string());
            (name, path)
        }
    }
}

fn pool(a: PoolArgs) -> Result<()> {
    let eps = targets(&a.epsilons)?;
    let mut regions = Vec::new();
    for spec in &a.regions {
        let (name, path) = region_arg(spec);
        if regions.iter().any(|(n, _)| n == &name) {
            bail!("region name {name:?} given twice; use name=path to disambiguate");
        }
        regions.push((name, read_rates(&path)?));
    }
    let (rows, pooling) = pool_regions(&regions, &eps)?;
    let out = a.out.unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_csv(&out.join("sizing.csv"), &rows)?;
    write_csv(&out.join("pooling.csv"), &pooling)?;
    for target in &eps {
        let rows: Vec<_> = pooling.iter().filter(|r| r.epsilon == target.epsilon()).collect();
        let summed: u32 = rows.iter().map(|r| r.summed).max().unwrap_or(0);
        let pooled: u32 = rows.iter().map(|r| r.pooled).max().unwrap_or(0);
        println!(
            "epsilon {:e}: peak summed {summed}, peak pooled {pooled}",
            target.epsilon()
        );
    }
    println!("outputs in {}", out.display());
    Ok(())
}

fn rates(a: RatesArgs) -> Result<()> {
    if a.horizon == 0 || !a.horizon.is_multiple_of(HOUR) {
        bail!("--horizon must be a positive multiple of 3600");
    }
    let events = read_events(&a.events)?;
    let samples = read_samples(&a.samples)?;
    if let Some(e) = events.iter().find(|e| e.t_end >= a.horizon) {
        bail!("event for AV {} ends at {} s, past the horizon", e.av, e.t_end);
    }
    let hourly = hourly_rates_all(&events, &samples, a.horizon / HOUR);
    let out = a.out.unwrap_or_else(|| {
        a.events
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("rates.csv")
    });
    write_rates(&out, &hourly)?;
    if !a.epsilons.is_empty() {
        let eps = targets(&a.epsilons)?;
        let path = out.with_file_name("sizing.csv");
        write_csv(&path, sizing("scenario", &hourly, &eps))?;
    }
    let q: u64 = hourly.iter().map(|r| r.q).sum();
    println!("{q} tasks over {} hours written to {}", hourly.len(), out.display());
    Ok(())
}
