//! Observables of a running world and of finished trajectories.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::{GridWorld, Position};

/// Summary of one played round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    pub mean_rho: f64,
    pub coop_fraction: f64,
    /// Mean round payoff of cooperators; `None` if nobody cooperated.
    pub mean_payoff_coop: Option<f64>,
    pub mean_payoff_def: Option<f64>,
    pub n_coop: usize,
    pub n_def: usize,
    /// `(family id, head count)` in family order.
    pub family_counts: Vec<(u32, usize)>,
}

impl StepStats {
    pub fn population(&self) -> usize {
        self.n_coop + self.n_def
    }
}

/// Means over occupied cells; payoff means are split by the action each agent
/// currently holds.
pub fn summarize(world: &GridWorld, step: u64) -> StepStats {
    let mut family_counts: Vec<(u32, usize)> = world.family_ids().iter().map(|&id| (id, 0)).collect();
    let (mut n_coop, mut n_def) = (0usize, 0usize);
    let (mut pay_coop, mut pay_def) = (0.0f64, 0.0f64);
    let mut rho_sum = CompensatedSum::default();
    for (_, a) in world.agents() {
        rho_sum.add(a.rho.value());
        family_counts[a.family].1 += 1;
        if a.action.is_cooperate() {
            n_coop += 1;
            pay_coop += a.round_payoff;
        } else {
            n_def += 1;
            pay_def += a.round_payoff;
        }
    }
    let n = n_coop + n_def;
    let mean = |sum: f64, count: usize| (count > 0).then(|| sum / count as f64);
    StepStats {
        step,
        mean_rho: if n > 0 { rho_sum.total() / n as f64 } else { 0.0 },
        coop_fraction: if n > 0 { n_coop as f64 / n as f64 } else { 0.0 },
        mean_payoff_coop: mean(pay_coop, n_coop),
        mean_payoff_def: mean(pay_def, n_def),
        n_coop,
        n_def,
        family_counts,
    }
}

/// Neumaier summation, so a homogeneous population reports its exact mean.
#[derive(Debug, Default, Clone, Copy)]
struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.carry += (self.sum - t) + v;
        } else {
            self.carry += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn total(self) -> f64 {
        self.sum + self.carry
    }
}

/// An 8-connected component of cooperating agents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoopCluster {
    /// Row-major sorted.
    pub members: Vec<Position>,
    pub families: BTreeSet<u32>,
    pub size: usize,
    pub mixed_family: bool,
}

impl CoopCluster {
    fn min_position(&self) -> (usize, usize) {
        self.members.first().map_or((0, 0), |p| (p.y, p.x))
    }
}

/// Connected components of cooperators under Moore connectivity, largest
/// first, ties by the row-major first member.
pub fn cooperation_clusters(world: &GridWorld) -> Vec<CoopCluster> {
    let cells = world.cells();
    let coop = |i: usize| cells[i].as_ref().is_some_and(|a| a.action.is_cooperate());
    let mut seen = vec![false; cells.len()];
    let mut clusters = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..cells.len() {
        if seen[start] || !coop(start) {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut members = Vec::new();
        let mut families = BTreeSet::new();
        while let Some(i) = queue.pop_front() {
            members.push(i);
            if let Some(a) = &cells[i] {
                families.insert(world.family_ids()[a.family]);
            }
            for j in world.neighbor_indices(i) {
                if !seen[j] && coop(j) {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        members.sort_unstable();
        let size = members.len();
        clusters.push(CoopCluster {
            members: members.into_iter().map(|i| world.position_of(i)).collect(),
            mixed_family: families.len() >= 2,
            families,
            size,
        });
    }
    clusters.sort_by(|a, b| b.size.cmp(&a.size).then(a.min_position().cmp(&b.min_position())));
    clusters
}

/// Elapsed generations: one generation lasts `1 / beta` steps.
pub fn generations(step: u64, beta: f64) -> Result<f64> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "generations need a death probability in (0, 1], got {beta}"
        )));
    }
    Ok(step as f64 * beta)
}

/// First step from which cooperators out-earn defectors for `window`
/// consecutive recorded steps.
pub fn crossover_step(stats: &[StepStats], window: usize) -> Option<u64> {
    let window = window.max(1);
    let ahead = |s: &StepStats| match (s.mean_payoff_coop, s.mean_payoff_def) {
        (Some(c), Some(d)) => c > d,
        _ => false,
    };
    let mut run = 0usize;
    for (i, s) in stats.iter().enumerate() {
        if ahead(s) {
            run += 1;
            if run == window {
                return Some(stats[i + 1 - window].step);
            }
        } else {
            run = 0;
        }
    }
    None
}

/// Mean of `coop_fraction` and `mean_rho` over the last `fraction` of the
/// rows (at least one row).
pub fn final_window_means(stats: &[StepStats], fraction: f64) -> Option<(f64, f64)> {
    if stats.is_empty() {
        return None;
    }
    let len = ((stats.len() as f64 * fraction).ceil() as usize).clamp(1, stats.len());
    let tail = &stats[stats.len() - len..];
    let n = tail.len() as f64;
    Some((
        tail.iter().map(|s| s.coop_fraction).sum::<f64>() / n,
        tail.iter().map(|s| s.mean_rho).sum::<f64>() / n,
    ))
}
