use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use homo_socialis::experiments::{self, ExperimentConfig, Manifest};
use homo_socialis::traffic::{self, Strategy};
use homo_socialis::{Error, Result};
use rayon::prelude::*;

/// Spatial prisoner's dilemma with inherited friendliness, and a traffic
/// signal testbed.
#[derive(Parser)]
#[command(name = "socialis", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file (TOML) or a run manifest; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides run.seed (traffic.seed for `traffic`).
    #[arg(long)]
    seed: Option<u64>,
    /// Output root.
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// Override any config key, e.g. --set evolution.nu=0.5 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the replicate ensemble and write stats, snapshots and manifests.
    Run {
        #[command(flatten)]
        common: Common,
        /// Comma-separated steps to snapshot; overrides run.snapshot_steps.
        #[arg(long, value_delimiter = ',')]
        snapshot_steps: Option<Vec<u64>>,
        /// Exit with status 2 if any replicate goes extinct.
        #[arg(long)]
        strict: bool,
    },
    /// Sweep one config key over a list of values with paired seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Dotted config key; overrides sweep.parameter.
        #[arg(long)]
        parameter: Option<String>,
        /// Comma-separated values; overrides sweep.values.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
        #[arg(long)]
        strict: bool,
    },
    /// Ascending then descending friendliness on the homogeneous lattice.
    Hysteresis {
        #[command(flatten)]
        common: Common,
    },
    /// Compare signal control strategies on the grid network.
    Traffic {
        #[command(flatten)]
        common: Common,
        /// fixed_cycle, longest_queue_first, local_wait_min, self_regulating or all.
        #[arg(long)]
        strategy: Option<String>,
        /// Comma-separated utilizations; overrides traffic.utilization.
        #[arg(long, value_delimiter = ',')]
        utilization: Option<Vec<f64>>,
        /// Number of consecutive seeds per grid point.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Re-run a recorded run and write snapshots at new steps.
    Export {
        /// Run directory or its manifest.toml.
        #[arg(long)]
        from: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        snapshot_steps: Vec<u64>,
        /// Snapshot directory; defaults to the run's own.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn keys_help() -> String {
    let mut s = String::from("Config keys (defaults):\n");
    for (k, v) in experiments::schema_keys() {
        s.push_str(&format!("  {k} = {v}\n"));
    }
    s
}

fn main() -> ExitCode {
    let help = keys_help();
    let mut cmd = Cli::command().after_help(help.clone());
    for name in ["run", "sweep", "hysteresis", "traffic"] {
        cmd = cmd.mut_subcommand(name, |c| c.after_help(help.clone()));
    }
    let matches = match cmd.try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 1 } else { 2 })
        }
    }
}

fn load(common: &Common, extra: Vec<String>) -> Result<ExperimentConfig> {
    if let Some(j) = common.jobs {
        if j == 0 {
            return Err(Error::Config("--jobs must be at least 1".into()));
        }
        // Fails only if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    let mut overrides = common.set.clone();
    overrides.extend(extra);
    ExperimentConfig::load_with_overrides(common.config.as_deref(), &overrides)
}

fn list<T: ToString>(values: &[T]) -> String {
    let items: Vec<String> = values.iter().map(T::to_string).collect();
    format!("[{}]", items.join(", "))
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Run { common, snapshot_steps, strict } => {
            let mut extra = Vec::new();
            if let Some(s) = common.seed {
                extra.push(format!("run.seed={s}"));
            }
            if let Some(steps) = &snapshot_steps {
                extra.push(format!("run.snapshot_steps={}", list(steps)));
            }
            let cfg = load(&common, extra)?;
            let (trajectories, manifests) = experiments::run_and_write(&cfg, &common.out, "run")?;
            for m in &manifests {
                println!("{}", m.display());
            }
            if strict {
                if let Some(step) = trajectories.iter().find_map(|t| t.extinction) {
                    return Err(Error::Extinction { step });
                }
            }
            Ok(())
        }
        Command::Sweep { common, parameter, values, strict } => {
            let mut extra = Vec::new();
            if let Some(s) = common.seed {
                extra.push(format!("run.seed={s}"));
            }
            if let Some(p) = &parameter {
                extra.push(format!("sweep.parameter=\"{p}\""));
            }
            if let Some(v) = &values {
                let v: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
                extra.push(format!("sweep.values=[{}]", v.join(", ")));
            }
            let cfg = load(&common, extra)?;
            let start = Instant::now();
            let rows = experiments::sweep(&cfg, &cfg.sweep.parameter, &cfg.sweep.values)?;
            let dir = common.out.join("sweep");
            create(&dir)?;
            experiments::write_sweep_csv(&dir.join("sweep.csv"), &rows)?;
            let manifest = write_manifest(&dir, "sweep", &cfg, cfg.run.seed, start)?;
            println!("{}", manifest.display());
            if strict && rows.iter().any(|r| r.extinct) {
                return Err(Error::Extinction { step: cfg.run.steps });
            }
            Ok(())
        }
        Command::Hysteresis { common } => {
            let cfg = load(&common, Vec::new())?;
            let start = Instant::now();
            let rows = experiments::hysteresis_sweep(&cfg)?;
            let dir = common.out.join("hysteresis");
            create(&dir)?;
            experiments::write_hysteresis_csv(&dir.join("hysteresis.csv"), &rows)?;
            let manifest = write_manifest(&dir, "hysteresis", &cfg, cfg.run.seed, start)?;
            println!("{}", manifest.display());
            Ok(())
        }
        Command::Traffic { common, strategy, utilization, seeds, steps } => {
            let mut extra = Vec::new();
            if let Some(s) = common.seed {
                extra.push(format!("traffic.seed={s}"));
            }
            if let Some(s) = steps {
                extra.push(format!("traffic.steps={s}"));
            }
            if let Some(s) = strategy.as_deref().filter(|s| *s != "all") {
                s.parse::<Strategy>()?;
                extra.push(format!("traffic.strategy=\"{s}\""));
            }
            if let Some(u) = utilization.as_ref().and_then(|u| u.first()) {
                extra.push(format!("traffic.utilization={u:?}"));
            }
            let cfg = load(&common, extra)?;
            let tc = &cfg.traffic;
            let strategies: Vec<Strategy> = match strategy.as_deref() {
                Some("all") => Strategy::ALL.to_vec(),
                _ => vec![tc.strategy],
            };
            let utilizations = utilization.unwrap_or_else(|| vec![tc.utilization]);
            for &u in &utilizations {
                let mut probe = tc.clone();
                probe.utilization = u;
                probe.validate()?;
            }
            if seeds == 0 {
                return Err(Error::Config("--seeds must be at least 1".into()));
            }
            let grid: Vec<(Strategy, f64, u64)> = strategies
                .iter()
                .flat_map(|&s| utilizations.iter().flat_map(move |&u| (0..seeds).map(move |k| (s, u, k))))
                .map(|(s, u, k)| (s, u, tc.seed + k))
                .collect();
            let start = Instant::now();
            let rows = grid
                .into_par_iter()
                .map(|(s, u, seed)| traffic::simulate_traffic(tc, s, u, seed))
                .collect::<Result<Vec<_>>>()?;
            let dir = common.out.join("traffic");
            create(&dir)?;
            let path = dir.join("traffic.csv");
            traffic::write_traffic_csv(&path, &rows)?;
            write_manifest(&dir, "traffic", &cfg, tc.seed, start)?;
            println!("{}", path.display());
            Ok(())
        }
        Command::Export { from, snapshot_steps, out } => {
            let run_dir = if from.is_dir() { from.clone() } else { from.parent().unwrap_or(Path::new(".")).to_path_buf() };
            let manifest_path = if from.is_dir() { from.join("manifest.toml") } else { from };
            let manifest = Manifest::load(&manifest_path)?;
            let mut cfg = manifest.config.clone();
            cfg.run.snapshot_steps = snapshot_steps;
            cfg.validate()?;
            let t = experiments::run_replicate(&cfg, manifest.seed, manifest.replicate)?;
            let recorded = run_dir.join("stats.csv");
            if recorded.exists() && experiments::read_stats_csv(&recorded)? != t.stats {
                return Err(Error::InvalidArgument(format!(
                    "re-run of {} does not reproduce its stats.csv; was it written by another build?",
                    run_dir.display()
                )));
            }
            let dir = out.unwrap_or_else(|| run_dir.join("snapshots"));
            create(&dir)?;
            for s in &t.snapshots {
                let path = dir.join(experiments::snapshot_file_name(s.step));
                experiments::write_snapshot_csv(&path, &s.codes)?;
                println!("{}", path.display());
            }
            Ok(())
        }
    }
}

fn create(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })
}

fn write_manifest(dir: &Path, experiment: &str, cfg: &ExperimentConfig, seed: u64, start: Instant) -> Result<PathBuf> {
    let manifest = Manifest::new(experiment, experiment, seed, 0, None, start.elapsed().as_secs_f64(), cfg.clone());
    let path = dir.join("manifest.toml");
    manifest.write(&path)?;
    Ok(path)
}
