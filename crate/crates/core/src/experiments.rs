//! Replicate ensembles, parameter sweeps, the friendliness hysteresis loop,
//! and everything that gets written to disk.
//!
//! Replicate `r` of master seed `s` draws from ChaCha8 seeded with `s` on
//! stream `r`. Streams are independent, so adding replicates never perturbs
//! existing ones, and replicate 0 is exactly `run(config, s)`.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evolution::{self, EvolutionParams};
use crate::game::{self, Action, Friendliness};
use crate::metrics::{self, CoopCluster, StepStats};
use crate::traffic::TrafficConfig;
use crate::world::{self, FamilySpec, GridWorld, Position};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub width: usize,
    pub height: usize,
    pub occupancy: f64,
    pub families: Vec<FamilySpec>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            width: 50,
            height: 50,
            occupancy: 0.6,
            families: vec![
                FamilySpec { id: 1, initial_rho: 0.0, share: 0.5 },
                FamilySpec { id: 2, initial_rho: 0.2, share: 0.5 },
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub steps: u64,
    /// World states to export; `t` is the state after `t` steps.
    pub snapshot_steps: Vec<u64>,
    pub replicates: usize,
    pub seed: u64,
    /// Persistence required before a payoff crossover counts.
    pub crossover_window: usize,
    /// Share of the final steps averaged for end-of-run statistics.
    pub final_window: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            steps: 2500,
            snapshot_steps: vec![0, 250, 500, 1000, 2000, 2500],
            replicates: 1,
            seed: 0,
            crossover_window: 50,
            final_window: 0.1,
        }
    }
}

/// A one-dimensional sweep over any numeric config key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub parameter: String,
    pub values: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            parameter: "evolution.nu".into(),
            values: vec![0.05, 0.95],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HysteresisConfig {
    pub width: usize,
    pub height: usize,
    pub rho_min: f64,
    pub rho_max: f64,
    pub rho_step: f64,
    /// Synchronous update cap per friendliness value.
    pub max_sweeps: usize,
}

impl Default for HysteresisConfig {
    fn default() -> Self {
        HysteresisConfig {
            width: 50,
            height: 50,
            rho_min: 0.0,
            rho_max: 1.0,
            rho_step: 0.01,
            max_sweeps: 500,
        }
    }
}

impl HysteresisConfig {
    /// The ascending grid; rounded to hundredths of a step to avoid drift.
    pub fn rho_values(&self) -> Vec<f64> {
        let n = ((self.rho_max - self.rho_min) / self.rho_step + 1e-9).floor() as usize;
        (0..=n)
            .map(|k| {
                let v = self.rho_min + k as f64 * self.rho_step;
                (v * 1e9).round() / 1e9
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub evolution: EvolutionParams,
    pub run: RunConfig,
    pub sweep: SweepConfig,
    pub hysteresis: HysteresisConfig,
    pub traffic: TrafficConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Loads `path` (or the defaults) and applies `key=value` overrides.
    /// A run manifest is accepted in place of a config file.
    pub fn load_with_overrides(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                toml::from_str::<toml::Table>(&text)?
            }
            None => toml::Table::new(),
        };
        if table.contains_key("run_id") {
            if let Some(toml::Value::Table(inner)) = table.remove("config") {
                table = inner;
            }
        }
        for spec in overrides {
            let (key, value) = spec.split_once('=').ok_or_else(|| {
                Error::Config(format!("override `{spec}` is not of the form key=value"))
            })?;
            set_dotted(&mut table, key.trim(), value.trim())?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(table).try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.world;
        if w.width == 0 || w.height == 0 {
            return Err(Error::Config("world.width and world.height must be positive".into()));
        }
        if !(w.occupancy > 0.0 && w.occupancy <= 1.0) {
            return Err(Error::Config(format!(
                "world.occupancy must lie in (0, 1], got {}",
                w.occupancy
            )));
        }
        world::validate_families(&w.families)?;
        self.evolution.validate()?;
        let r = &self.run;
        if r.steps == 0 {
            return Err(Error::Config("run.steps must be at least 1".into()));
        }
        if r.replicates == 0 {
            return Err(Error::Config("run.replicates must be at least 1".into()));
        }
        if let Some(&s) = r.snapshot_steps.iter().find(|&&s| s > r.steps) {
            return Err(Error::Config(format!(
                "run.snapshot_steps contains {s}, beyond run.steps = {}",
                r.steps
            )));
        }
        if r.crossover_window == 0 {
            return Err(Error::Config("run.crossover_window must be at least 1".into()));
        }
        if !(r.final_window > 0.0 && r.final_window <= 1.0) {
            return Err(Error::Config("run.final_window must lie in (0, 1]".into()));
        }
        let s = &self.sweep;
        for (i, a) in s.values.iter().enumerate() {
            if s.values[..i].contains(a) {
                return Err(Error::Config(format!("sweep.values repeats {a}")));
            }
        }
        let h = &self.hysteresis;
        if h.width == 0 || h.height == 0 || h.max_sweeps == 0 {
            return Err(Error::Config(
                "hysteresis width, height and max_sweeps must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&h.rho_min) || !(0.0..=1.0).contains(&h.rho_max) || h.rho_min > h.rho_max {
            return Err(Error::Config("hysteresis rho range must satisfy 0 <= rho_min <= rho_max <= 1".into()));
        }
        if h.rho_step.is_nan() || h.rho_step <= 0.0 {
            return Err(Error::Config("hysteresis.rho_step must be positive".into()));
        }
        self.traffic.validate()
    }

    /// A copy with one dotted numeric key replaced.
    pub fn with_value(&self, key: &str, value: f64) -> Result<Self> {
        let mut table = toml::Table::try_from(self)?;
        set_dotted(&mut table, key, &format!("{value:?}"))?;
        let cfg: ExperimentConfig = toml::Value::Table(table).try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Every settable key with its default, flattened to dotted form.
pub fn schema_keys() -> Vec<(String, String)> {
    let table = toml::Table::try_from(ExperimentConfig::default()).expect("defaults serialize");
    let mut out = Vec::new();
    flatten("", &table, &mut out);
    out
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, String)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.to_string())),
        }
    }
}

fn set_dotted(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("malformed key `{key}`")));
    }
    // Anything that is not a TOML literal is taken as a bare string.
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut cur = table;
    for part in parts {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(Error::Config(format!("`{part}` in `{key}` is not a section"))),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// The random stream of replicate `index` under `master`.
pub fn replicate_rng(master: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index);
    rng
}

/// Cell codes of one exported world state.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub step: u64,
    pub codes: Vec<Vec<i32>>,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub seed: u64,
    pub replicate: u64,
    /// Row `t` describes the round played at step `t`.
    pub stats: Vec<StepStats>,
    pub snapshots: Vec<Snapshot>,
    /// Clusters at every snapshot step and at the end of the run.
    pub clusters: Vec<(u64, Vec<CoopCluster>)>,
    /// Step at which everybody died, if it happened.
    pub extinction: Option<u64>,
    pub final_world: GridWorld,
}

impl Trajectory {
    pub fn crossover(&self, window: usize) -> Option<u64> {
        metrics::crossover_step(&self.stats, window)
    }

    pub fn final_window(&self, fraction: f64) -> Option<(f64, f64)> {
        metrics::final_window_means(&self.stats, fraction)
    }

    /// Clusters recorded at the final state.
    pub fn final_clusters(&self) -> &[CoopCluster] {
        self.clusters.last().map(|(_, c)| c.as_slice()).unwrap_or(&[])
    }
}

/// One run on stream 0 of `seed`.
pub fn run(config: &ExperimentConfig, seed: u64) -> Result<Trajectory> {
    run_replicate(config, seed, 0)
}

pub fn run_replicate(config: &ExperimentConfig, master: u64, replicate: u64) -> Result<Trajectory> {
    config.validate()?;
    let mut rng = replicate_rng(master, replicate);
    let wc = &config.world;
    let mut world = GridWorld::populate(wc.width, wc.height, wc.occupancy, &wc.families, &mut rng)?;
    let steps = config.run.steps;
    let wanted = |t: u64| config.run.snapshot_steps.contains(&t);

    let mut stats = Vec::with_capacity(steps as usize);
    let mut snapshots = Vec::new();
    let mut clusters = Vec::new();
    let mut extinction = None;
    let record = |world: &GridWorld, t: u64, snapshots: &mut Vec<Snapshot>, clusters: &mut Vec<(u64, Vec<CoopCluster>)>| {
        if wanted(t) {
            snapshots.push(Snapshot { step: t, codes: world.cell_codes() });
        }
        if wanted(t) || t == steps {
            clusters.push((t, metrics::cooperation_clusters(world)));
        }
    };

    record(&world, 0, &mut snapshots, &mut clusters);
    for t in 0..steps {
        match evolution::step(&mut world, &config.evolution, &mut rng, t) {
            Ok(s) => stats.push(s),
            Err(Error::Extinction { step }) => {
                // The round was played; only the rebirth failed.
                evolution::play_round(&mut world, &config.evolution.matrix);
                stats.push(metrics::summarize(&world, t));
                extinction = Some(step);
                break;
            }
            Err(e) => return Err(e),
        }
        record(&world, t + 1, &mut snapshots, &mut clusters);
    }
    Ok(Trajectory {
        seed: master,
        replicate,
        stats,
        snapshots,
        clusters,
        extinction,
        final_world: world,
    })
}

/// All replicates of `config.run`, in replicate order.
pub fn run_replicates(config: &ExperimentConfig) -> Result<Vec<Trajectory>> {
    config.validate()?;
    (0..config.run.replicates as u64)
        .into_par_iter()
        .map(|r| run_replicate(config, config.run.seed, r))
        .collect()
}

/// Per-step ensemble statistics over the replicates still running.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleRow {
    pub step: u64,
    pub n_runs: usize,
    pub coop_fraction: Band,
    pub mean_rho: Band,
    pub mean_payoff_coop: Option<Band>,
    pub mean_payoff_def: Option<Band>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Band {
    pub mean: f64,
    pub p10: f64,
    pub p90: f64,
}

impl Band {
    fn of(mut values: Vec<f64>) -> Option<Band> {
        if values.is_empty() {
            return None;
        }
        values.sort_by(f64::total_cmp);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        Some(Band {
            mean,
            p10: percentile(&values, 0.1),
            p90: percentile(&values, 0.9),
        })
    }
}

/// Linear interpolation between closest ranks of sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn ensemble_summary(trajectories: &[Trajectory]) -> Vec<EnsembleRow> {
    let len = trajectories.iter().map(|t| t.stats.len()).max().unwrap_or(0);
    (0..len)
        .map(|i| {
            let rows: Vec<&StepStats> = trajectories.iter().filter_map(|t| t.stats.get(i)).collect();
            EnsembleRow {
                step: rows[0].step,
                n_runs: rows.len(),
                coop_fraction: Band::of(rows.iter().map(|s| s.coop_fraction).collect()).expect("rows"),
                mean_rho: Band::of(rows.iter().map(|s| s.mean_rho).collect()).expect("rows"),
                mean_payoff_coop: Band::of(rows.iter().filter_map(|s| s.mean_payoff_coop).collect()),
                mean_payoff_def: Band::of(rows.iter().filter_map(|s| s.mean_payoff_def).collect()),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub parameter: String,
    pub value: f64,
    pub replicate: u64,
    pub seed: u64,
    pub final_coop: f64,
    pub final_rho: f64,
    pub crossover_step: Option<u64>,
    pub extinct: bool,
}

/// Runs the replicate ensemble at every value of `parameter`. Replicate `r`
/// uses the same stream at every value, so rows pair up across values.
pub fn sweep(config: &ExperimentConfig, parameter: &str, values: &[f64]) -> Result<Vec<SweepRow>> {
    let configs: Vec<ExperimentConfig> = values
        .iter()
        .map(|&v| config.with_value(parameter, v))
        .collect::<Result<_>>()?;
    let reps = config.run.replicates as u64;
    let grid: Vec<(usize, u64)> = (0..values.len()).flat_map(|i| (0..reps).map(move |r| (i, r))).collect();
    grid.into_par_iter()
        .map(|(i, r)| {
            let cfg = &configs[i];
            let t = run_replicate(cfg, cfg.run.seed, r)?;
            let (coop, rho) = t.final_window(cfg.run.final_window).unwrap_or((f64::NAN, f64::NAN));
            Ok(SweepRow {
                parameter: parameter.to_string(),
                value: values[i],
                replicate: r,
                seed: cfg.run.seed,
                final_coop: coop,
                final_rho: rho,
                crossover_step: t.crossover(cfg.run.crossover_window),
                extinct: t.extinction.is_some(),
            })
        })
        .collect()
}

pub fn sweep_nu(config: &ExperimentConfig, values: &[f64]) -> Result<Vec<SweepRow>> {
    if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidArgument(format!("nu = {v} is not a probability")));
    }
    sweep(config, "evolution.nu", values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Ascending,
    Descending,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Settlement {
    FixedPoint,
    TwoCycle,
    /// Still changing when the sweep cap was hit.
    Cycling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HysteresisRow {
    pub rho: f64,
    pub direction: Direction,
    pub coop_fraction: f64,
    pub sweeps: usize,
    pub settlement: Settlement,
}

/// Noise-free best-response dynamics on a fully occupied homogeneous lattice.
/// Friendliness is raised step by step from an all-defect start, then lowered
/// again from wherever the ascending leg ended.
pub fn hysteresis_sweep(config: &ExperimentConfig) -> Result<Vec<HysteresisRow>> {
    config.validate()?;
    let h = &config.hysteresis;
    let ascending = h.rho_values();
    let mut world = GridWorld::empty(h.width, h.height, vec![0])?;
    for y in 0..h.height {
        for x in 0..h.width {
            world.insert(Position::new(x, y), world::Agent::new(0, 0, Friendliness::ZERO, Action::Defect))?;
        }
    }
    let mut rows = Vec::with_capacity(2 * ascending.len());
    let legs = [
        (Direction::Ascending, ascending.clone()),
        (Direction::Descending, ascending.iter().rev().copied().collect::<Vec<_>>()),
    ];
    for (direction, values) in legs {
        for rho in values {
            rows.push(settle(&mut world, rho, direction, config)?);
        }
    }
    Ok(rows)
}

fn settle(world: &mut GridWorld, rho: f64, direction: Direction, config: &ExperimentConfig) -> Result<HysteresisRow> {
    let rho_f = Friendliness::new(rho)?;
    let positions: Vec<Position> = world.agents().map(|(p, _)| p).collect();
    for &p in &positions {
        world.get_mut(p).expect("occupied").rho = rho_f;
    }
    let actions = |w: &GridWorld| -> Vec<Action> { w.agents().map(|(_, a)| a.action).collect() };
    let mut previous = actions(world);
    let mut before_previous: Option<Vec<Action>> = None;
    let mut settlement = Settlement::Cycling;
    let mut sweeps = 0;
    while sweeps < config.hysteresis.max_sweeps {
        let next: Vec<Action> = evolution::best_responses(world, &config.evolution.matrix)
            .into_iter()
            .flatten()
            .collect();
        if next == previous {
            settlement = Settlement::FixedPoint;
            break;
        }
        for (&p, &a) in positions.iter().zip(&next) {
            world.get_mut(p).expect("occupied").action = a;
        }
        sweeps += 1;
        if before_previous.as_ref() == Some(&next) {
            settlement = Settlement::TwoCycle;
            break;
        }
        before_previous = Some(std::mem::replace(&mut previous, next));
    }
    let n = positions.len() as f64;
    let coop = world.agents().filter(|(_, a)| a.action.is_cooperate()).count() as f64 / n;
    Ok(HysteresisRow { rho, direction, coop_fraction: coop, sweeps, settlement })
}

// ---------------------------------------------------------------- output

pub const STATS_FIXED_COLUMNS: [&str; 7] = [
    "step",
    "mean_rho",
    "coop_fraction",
    "mean_payoff_coop",
    "mean_payoff_def",
    "n_coop",
    "n_def",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_stats_csv(path: &Path, stats: &[StepStats], family_ids: &[u32]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = STATS_FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend(family_ids.iter().map(|id| format!("n_family_{id}")));
    w.write_record(&header)?;
    for s in stats {
        let mut rec = vec![
            s.step.to_string(),
            s.mean_rho.to_string(),
            s.coop_fraction.to_string(),
            opt(s.mean_payoff_coop),
            opt(s.mean_payoff_def),
            s.n_coop.to_string(),
            s.n_def.to_string(),
        ];
        rec.extend(s.family_counts.iter().map(|(_, c)| c.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, path: &Path) -> Result<T> {
    rec.get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Config(format!("{}: bad value in column {i}", path.display())))
}

pub fn read_stats_csv(path: &Path) -> Result<Vec<StepStats>> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    if header.len() < STATS_FIXED_COLUMNS.len()
        || header.iter().zip(STATS_FIXED_COLUMNS).any(|(a, b)| a != b)
    {
        return Err(Error::Config(format!("{}: unexpected stats header", path.display())));
    }
    let family_ids: Vec<u32> = header
        .iter()
        .skip(STATS_FIXED_COLUMNS.len())
        .map(|h| {
            h.strip_prefix("n_family_")
                .and_then(|id| id.parse().ok())
                .ok_or_else(|| Error::Config(format!("{}: bad column `{h}`", path.display())))
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let maybe = |i: usize| -> Result<Option<f64>> {
            match rec.get(i) {
                Some("") => Ok(None),
                _ => field(&rec, i, path).map(Some),
            }
        };
        out.push(StepStats {
            step: field(&rec, 0, path)?,
            mean_rho: field(&rec, 1, path)?,
            coop_fraction: field(&rec, 2, path)?,
            mean_payoff_coop: maybe(3)?,
            mean_payoff_def: maybe(4)?,
            n_coop: field(&rec, 5, path)?,
            n_def: field(&rec, 6, path)?,
            family_counts: family_ids
                .iter()
                .enumerate()
                .map(|(k, &id)| Ok((id, field(&rec, STATS_FIXED_COLUMNS.len() + k, path)?)))
                .collect::<Result<_>>()?,
        });
    }
    Ok(out)
}

/// Height rows of width comma-separated cell codes, no header.
pub fn write_snapshot_csv(path: &Path, codes: &[Vec<i32>]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for row in codes {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_snapshot_csv(path: &Path) -> Result<Vec<Vec<i32>>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn snapshot_file_name(step: u64) -> String {
    format!("step_{step:06}.csv")
}

pub fn write_clusters_csv(path: &Path, clusters: &[(u64, Vec<CoopCluster>)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "cluster_rank", "size", "n_families", "mixed_family"])?;
    for (step, list) in clusters {
        for (rank, c) in list.iter().enumerate() {
            w.write_record([
                step.to_string(),
                rank.to_string(),
                c.size.to_string(),
                c.families.len().to_string(),
                c.mixed_family.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn write_ensemble_csv(path: &Path, rows: &[EnsembleRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["step".to_string(), "n_runs".to_string()];
    for name in ["coop_fraction", "mean_rho", "mean_payoff_coop", "mean_payoff_def"] {
        for stat in ["mean", "p10", "p90"] {
            header.push(format!("{name}_{stat}"));
        }
    }
    w.write_record(&header)?;
    let band = |b: Option<Band>| -> [String; 3] {
        match b {
            Some(b) => [b.mean.to_string(), b.p10.to_string(), b.p90.to_string()],
            None => Default::default(),
        }
    };
    for r in rows {
        let mut rec = vec![r.step.to_string(), r.n_runs.to_string()];
        for b in [Some(r.coop_fraction), Some(r.mean_rho), r.mean_payoff_coop, r.mean_payoff_def] {
            rec.extend(band(b));
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["parameter", "value", "replicate", "seed", "final_coop", "final_rho", "crossover_step", "extinct"])?;
    for r in rows {
        w.write_record([
            r.parameter.clone(),
            r.value.to_string(),
            r.replicate.to_string(),
            r.seed.to_string(),
            r.final_coop.to_string(),
            r.final_rho.to_string(),
            r.crossover_step.map(|s| s.to_string()).unwrap_or_default(),
            r.extinct.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn write_hysteresis_csv(path: &Path, rows: &[HysteresisRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["rho", "direction", "coop_fraction", "sweeps", "settlement"])?;
    for r in rows {
        w.serialize((r.rho, r.direction, r.coop_fraction, r.sweeps, r.settlement))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Everything needed to re-run a trajectory bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub experiment: String,
    pub run_id: String,
    pub seed: u64,
    pub replicate: u64,
    pub build: String,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extinction_step: Option<u64>,
    pub wall_time_secs: f64,
    /// Reported utilities average the neighbors' full round payoffs,
    /// including their games with third parties.
    pub utility_neighbor_term: String,
    pub config: ExperimentConfig,
}

impl Manifest {
    pub fn new(
        experiment: &str,
        run_id: &str,
        seed: u64,
        replicate: u64,
        extinction_step: Option<u64>,
        wall_time_secs: f64,
        config: ExperimentConfig,
    ) -> Self {
        Manifest {
            experiment: experiment.to_string(),
            run_id: run_id.to_string(),
            seed,
            replicate,
            build: build_id(),
            status: if extinction_step.is_some() { "extinct" } else { "completed" }.into(),
            extinction_step,
            wall_time_secs,
            utility_neighbor_term: "mean of neighbors' full round payoffs".into(),
            config,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(toml::to_string(self)?.as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = toml::from_str(&text)?;
        m.config.validate()?;
        Ok(m)
    }
}

pub fn build_id() -> String {
    format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

pub fn run_id(seed: u64, replicate: u64) -> String {
    format!("seed{seed}_rep{replicate:03}")
}

/// Writes `<dir>/{stats.csv, clusters.csv, snapshots/, manifest.toml}` and
/// returns the manifest path.
pub fn write_run_dir(
    dir: &Path,
    experiment: &str,
    config: &ExperimentConfig,
    traj: &Trajectory,
    wall_time_secs: f64,
) -> Result<PathBuf> {
    let snap_dir = dir.join("snapshots");
    fs::create_dir_all(&snap_dir).map_err(|e| Error::io(&snap_dir, e))?;
    let ids: Vec<u32> = config.world.families.iter().map(|f| f.id).collect();
    write_stats_csv(&dir.join("stats.csv"), &traj.stats, &ids)?;
    write_clusters_csv(&dir.join("clusters.csv"), &traj.clusters)?;
    for s in &traj.snapshots {
        write_snapshot_csv(&snap_dir.join(snapshot_file_name(s.step)), &s.codes)?;
    }
    let manifest = Manifest::new(
        experiment,
        &run_id(traj.seed, traj.replicate),
        traj.seed,
        traj.replicate,
        traj.extinction,
        wall_time_secs,
        config.clone(),
    );
    let path = dir.join("manifest.toml");
    manifest.write(&path)?;
    Ok(path)
}

/// Runs every replicate and writes each run directory plus `ensemble.csv`
/// under `<out>/<experiment>/`. Returns the trajectories and manifest paths.
pub fn run_and_write(
    config: &ExperimentConfig,
    out: &Path,
    experiment: &str,
) -> Result<(Vec<Trajectory>, Vec<PathBuf>)> {
    let base = out.join(experiment);
    let results: Vec<(Trajectory, f64)> = (0..config.run.replicates as u64)
        .into_par_iter()
        .map(|r| {
            let start = Instant::now();
            let t = run_replicate(config, config.run.seed, r)?;
            Ok((t, start.elapsed().as_secs_f64()))
        })
        .collect::<Result<_>>()?;
    let mut manifests = Vec::new();
    for (t, wall) in &results {
        let dir = base.join(run_id(t.seed, t.replicate));
        manifests.push(write_run_dir(&dir, experiment, config, t, *wall)?);
    }
    let trajectories: Vec<Trajectory> = results.into_iter().map(|(t, _)| t).collect();
    write_ensemble_csv(&base.join("ensemble.csv"), &ensemble_summary(&trajectories))?;
    Ok((trajectories, manifests))
}

/// Utility an agent would report for its current round, with the neighbor
/// term averaging the neighbors' full round payoffs.
pub fn realized_utility(world: &GridWorld, p: Position) -> Option<f64> {
    let agent = world.get(p)?;
    let neighbors: Vec<f64> = world
        .moore_neighbors(p)
        .ok()?
        .into_iter()
        .filter_map(|q| world.get(q).map(|a| a.round_payoff))
        .collect();
    let avg = if neighbors.is_empty() {
        0.0
    } else {
        neighbors.iter().sum::<f64>() / neighbors.len() as f64
    };
    Some(game::utility(agent.round_payoff, avg, agent.rho))
}
