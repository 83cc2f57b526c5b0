//! Signalized road network with finite sections, spillback and four signal
//! control regimes.
//!
//! Every section is the queue in front of one intersection approach. Each
//! step: boundary sections admit Poisson arrivals, every intersection picks
//! the approach to serve, green approaches discharge up to `s` head vehicles,
//! then queues are measured. A head vehicle whose next section is full blocks
//! everyone behind it. Space is judged against occupancy at the start of the
//! serve phase, so the order in which intersections move does not matter.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// State-blind rotation with demand-proportional greens.
    FixedCycle,
    LongestQueueFirst,
    /// Minimizes the predicted local queue sum over the horizon.
    LocalWaitMin,
    /// Downstream-aware local minimization, overruled by clearing critical
    /// queues.
    SelfRegulating,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::FixedCycle,
        Strategy::LongestQueueFirst,
        Strategy::LocalWaitMin,
        Strategy::SelfRegulating,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::FixedCycle => "fixed_cycle",
            Strategy::LongestQueueFirst => "longest_queue_first",
            Strategy::LocalWaitMin => "local_wait_min",
            Strategy::SelfRegulating => "self_regulating",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown strategy `{s}`; expected one of fixed_cycle, longest_queue_first, local_wait_min, self_regulating"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrafficConfig {
    pub rows: usize,
    pub cols: usize,
    /// Vehicles a section can hold.
    pub capacity: usize,
    /// Vehicles discharged per green step.
    pub service_rate: usize,
    /// Steps without service after every switch.
    pub lost_time: u32,
    /// Queue share of capacity that triggers the clearing override.
    pub critical_fraction: f64,
    /// Lookahead of the local waiting-time minimization.
    pub horizon: u32,
    /// Probability of going straight; the rest splits evenly left/right.
    /// Turning lets full sections wait on each other in circles, which locks
    /// the grid at high load under every controller.
    pub straight: f64,
    /// North-south boundary demand relative to east-west.
    pub minor_ratio: f64,
    pub max_cycle: u32,
    pub steps: u64,
    pub warmup_fraction: f64,
    pub strategy: Strategy,
    pub utilization: f64,
    pub seed: u64,
}

impl Default for TrafficConfig {
    fn default() -> Self {
        TrafficConfig {
            rows: 4,
            cols: 4,
            capacity: 20,
            service_rate: 2,
            lost_time: 2,
            critical_fraction: 0.8,
            horizon: 5,
            straight: 1.0,
            minor_ratio: 0.5,
            max_cycle: 120,
            steps: 20_000,
            warmup_fraction: 0.1,
            strategy: Strategy::SelfRegulating,
            utilization: 0.5,
            seed: 0,
        }
    }
}

impl TrafficConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("traffic.{m}")));
        if self.rows == 0 || self.cols == 0 {
            return bad("rows and traffic.cols must be positive");
        }
        if self.capacity == 0 {
            return bad("capacity must be positive");
        }
        if self.service_rate == 0 {
            return bad("service_rate must be at least 1");
        }
        if !(self.critical_fraction > 0.0 && self.critical_fraction <= 1.0) {
            return bad("critical_fraction must lie in (0, 1]");
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.straight) {
            return bad("straight must lie in [0, 1]");
        }
        if !(self.minor_ratio >= 0.0 && self.minor_ratio.is_finite()) {
            return bad("minor_ratio must be non-negative");
        }
        if self.steps == 0 {
            return bad("steps must be positive");
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must lie in [0, 1)");
        }
        if !(self.utilization > 0.0 && self.utilization < 1.0) {
            return bad("utilization must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn params(&self) -> SignalParams {
        SignalParams {
            service_rate: self.service_rate,
            lost_time: self.lost_time,
            critical_fraction: self.critical_fraction,
            horizon: self.horizon,
            max_cycle: self.max_cycle,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignalParams {
    pub service_rate: usize,
    pub lost_time: u32,
    pub critical_fraction: f64,
    pub horizon: u32,
    pub max_cycle: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dest {
    Section(usize),
    Exit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vehicle {
    /// Step at which it entered the network.
    pub entered: u64,
    /// Where it goes when served.
    pub dest: Dest,
}

#[derive(Debug, Clone)]
pub struct RoadSection {
    pub capacity: usize,
    pub queue: VecDeque<Vehicle>,
    /// Intersection this section feeds.
    pub downstream: usize,
    /// Feeding intersection; `None` for boundary entries.
    pub upstream: Option<usize>,
    /// Mean Poisson arrivals per step from outside.
    pub arrival_rate: f64,
    /// Turn probabilities of vehicles joining this section.
    pub routes: Vec<(Dest, f64)>,
}

impl RoadSection {
    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Intersection {
    /// Incoming section ids; "approach k" is `approaches[k]`.
    pub approaches: Vec<usize>,
    /// Approach currently holding (or switching to) green.
    pub current: usize,
    /// Remaining steps of switching lost time.
    pub lost: u32,
    /// Critical queue being cleared by the override.
    pub latch: Option<usize>,
    /// Fixed-cycle greens as (approach, steps); each is preceded by lost time.
    pub plan: Vec<(usize, u32)>,
}

impl Intersection {
    pub fn new(approaches: Vec<usize>) -> Self {
        Intersection {
            approaches,
            current: 0,
            lost: 0,
            latch: None,
            plan: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counters {
    pub admitted: u64,
    pub exited: u64,
    pub blocked_at_boundary: u64,
    /// Head vehicles held back by a full next section.
    pub spillback_blocks: u64,
}

#[derive(Debug, Clone)]
pub struct TrafficNetwork {
    pub sections: Vec<RoadSection>,
    pub intersections: Vec<Intersection>,
    pub params: SignalParams,
    pub strategy: Strategy,
    pub counters: Counters,
    step: u64,
}

/// Sides of a grid intersection, clockwise. Approach `k` carries vehicles
/// coming from side `k`.
const NORTH: usize = 0;
const EAST: usize = 1;
const SOUTH: usize = 2;
const WEST: usize = 3;

impl TrafficNetwork {
    /// Validates routing and wires the network. Fixed-cycle plans are
    /// derived from the long-run flows.
    pub fn new(
        sections: Vec<RoadSection>,
        intersections: Vec<Intersection>,
        params: SignalParams,
        strategy: Strategy,
    ) -> Result<Self> {
        if params.service_rate == 0 {
            return Err(Error::Config("service rate must be at least 1".into()));
        }
        for (k, s) in sections.iter().enumerate() {
            let total: f64 = s.routes.iter().map(|r| r.1).sum();
            if s.routes.is_empty() || (total - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("turn fractions of section {k} sum to {total}")));
            }
            if s.downstream >= intersections.len() || s.queue.len() > s.capacity {
                return Err(Error::Config(format!("section {k} is malformed")));
            }
            if s.routes.iter().any(|(d, _)| matches!(d, Dest::Section(q) if *q >= sections.len())) {
                return Err(Error::Config(format!("section {k} routes to a missing section")));
            }
        }
        for (i, x) in intersections.iter().enumerate() {
            if x.approaches.is_empty() || x.approaches.iter().any(|&a| a >= sections.len() || sections[a].downstream != i) {
                return Err(Error::Config(format!("intersection {i} has bad approaches")));
            }
        }
        let mut net = TrafficNetwork {
            sections,
            intersections,
            params,
            strategy,
            counters: Counters::default(),
            step: 0,
        };
        net.counters.admitted = net.in_network() as u64;
        net.plan_fixed_cycles();
        Ok(net)
    }

    /// A `rows x cols` grid of four-approach intersections. Boundary demand
    /// is scaled so the busiest intersection receives `utilization * s`
    /// vehicles per step.
    pub fn grid(cfg: &TrafficConfig, strategy: Strategy, utilization: f64) -> Result<Self> {
        cfg.validate()?;
        let (rows, cols) = (cfg.rows, cfg.cols);
        let id = |r: usize, c: usize| r * cols + c;
        let neighbor = |r: usize, c: usize, side: usize| match side {
            NORTH if r > 0 => Some(id(r - 1, c)),
            SOUTH if r + 1 < rows => Some(id(r + 1, c)),
            WEST if c > 0 => Some(id(r, c - 1)),
            EAST if c + 1 < cols => Some(id(r, c + 1)),
            _ => None,
        };
        let turn = (1.0 - cfg.straight) / 2.0;
        let mut sections = Vec::with_capacity(rows * cols * 4);
        for r in 0..rows {
            for c in 0..cols {
                for side in 0..4 {
                    // Vehicles from `side` head toward the opposite side.
                    let heading = (side + 2) % 4;
                    let mut routes = Vec::new();
                    for (h, p) in [(heading, cfg.straight), ((heading + 1) % 4, turn), ((heading + 3) % 4, turn)] {
                        if p == 0.0 {
                            continue;
                        }
                        let dest = match neighbor(r, c, h) {
                            Some(j) => Dest::Section(j * 4 + (h + 2) % 4),
                            None => Dest::Exit,
                        };
                        routes.push((dest, p));
                    }
                    let upstream = neighbor(r, c, side);
                    let arrival_rate = match (upstream, side) {
                        (Some(_), _) => 0.0,
                        (None, EAST | WEST) => 1.0,
                        (None, _) => cfg.minor_ratio,
                    };
                    sections.push(RoadSection {
                        capacity: cfg.capacity,
                        queue: VecDeque::new(),
                        downstream: id(r, c),
                        upstream,
                        arrival_rate,
                        routes,
                    });
                }
            }
        }
        let intersections = (0..rows * cols).map(|i| Intersection::new((i * 4..i * 4 + 4).collect())).collect();
        let mut net = TrafficNetwork::new(sections, intersections, cfg.params(), strategy)?;
        net.scale_to_utilization(utilization)?;
        Ok(net)
    }

    /// Two intersections feeding each other with no entries or exits.
    pub fn closed_ring(capacity: usize, vehicles: [usize; 2], params: SignalParams, strategy: Strategy) -> Result<Self> {
        let sections = (0..2)
            .map(|k| RoadSection {
                capacity,
                queue: (0..vehicles[k])
                    .map(|_| Vehicle { entered: 0, dest: Dest::Section(1 - k) })
                    .collect(),
                downstream: k,
                upstream: Some(1 - k),
                arrival_rate: 0.0,
                routes: vec![(Dest::Section(1 - k), 1.0)],
            })
            .collect();
        let intersections = vec![Intersection::new(vec![0]), Intersection::new(vec![1])];
        TrafficNetwork::new(sections, intersections, params, strategy)
    }

    /// One boundary approach straight into an exit.
    pub fn single_approach(capacity: usize, rate: f64, params: SignalParams, strategy: Strategy) -> Result<Self> {
        let sections = vec![RoadSection {
            capacity,
            queue: VecDeque::new(),
            downstream: 0,
            upstream: None,
            arrival_rate: rate,
            routes: vec![(Dest::Exit, 1.0)],
        }];
        TrafficNetwork::new(sections, vec![Intersection::new(vec![0])], params, strategy)
    }

    /// Long-run arrival rate of every section, boundary input plus routed
    /// inflow, found by fixed-point iteration.
    pub fn expected_flows(&self) -> Vec<f64> {
        let n = self.sections.len();
        let mut flow: Vec<f64> = self.sections.iter().map(|s| s.arrival_rate).collect();
        for _ in 0..100_000 {
            let mut next: Vec<f64> = self.sections.iter().map(|s| s.arrival_rate).collect();
            for (k, s) in self.sections.iter().enumerate() {
                for &(d, p) in &s.routes {
                    if let Dest::Section(q) = d {
                        next[q] += flow[k] * p;
                    }
                }
            }
            let delta = (0..n).map(|k| (next[k] - flow[k]).abs()).fold(0.0, f64::max);
            flow = next;
            if delta < 1e-13 {
                break;
            }
        }
        flow
    }

    /// Demand of every intersection as a share of its raw service rate.
    pub fn intersection_loads(&self) -> Vec<f64> {
        let flow = self.expected_flows();
        let s = self.params.service_rate as f64;
        self.intersections
            .iter()
            .map(|x| x.approaches.iter().map(|&a| flow[a]).sum::<f64>() / s)
            .collect()
    }

    fn scale_to_utilization(&mut self, u: f64) -> Result<()> {
        let peak = self.intersection_loads().into_iter().fold(0.0, f64::max);
        if peak <= 0.0 {
            return Err(Error::Config("network has no boundary demand".into()));
        }
        for s in &mut self.sections {
            s.arrival_rate *= u / peak;
        }
        self.plan_fixed_cycles();
        Ok(())
    }

    /// Webster-style cycle shared by all intersections, greens split in
    /// proportion to each intersection's own approach demand.
    fn plan_fixed_cycles(&mut self) {
        let flow = self.expected_flows();
        let s = self.params.service_rate as f64;
        let tau = self.params.lost_time;
        let peak = self.intersection_loads().into_iter().fold(0.0, f64::max);
        for x in &mut self.intersections {
            let y: Vec<f64> = x.approaches.iter().map(|&a| flow[a] / s).collect();
            let total: f64 = y.iter().sum();
            let active: Vec<usize> = (0..y.len()).filter(|&k| y[k] > 0.0).collect();
            x.plan = if active.is_empty() {
                vec![(0, 1)]
            } else {
                let lost = tau * active.len() as u32;
                let min_cycle = lost + active.len() as u32;
                let max_cycle = self.params.max_cycle.max(min_cycle);
                let webster = if peak < 1.0 { (1.5 * lost as f64 + 5.0) / (1.0 - peak) } else { f64::INFINITY };
                let cycle = (webster.round().min(max_cycle as f64) as u32).max(min_cycle);
                let green = (cycle - lost) as f64;
                active
                    .iter()
                    .map(|&k| (k, ((green * y[k] / total).round() as u32).max(1)))
                    .collect()
            };
        }
    }

    pub fn cycle_length(&self, i: usize) -> u32 {
        self.intersections[i].plan.iter().map(|&(_, g)| g + self.params.lost_time).sum()
    }

    /// Fixed-cycle approach with green at step `t`; `None` during lost time.
    /// Each intersection runs its plan shifted by its own offset.
    pub fn fixed_cycle_phase(&self, i: usize, t: u64) -> Option<usize> {
        let x = &self.intersections[i];
        let tau = self.params.lost_time as u64;
        let c = self.cycle_length(i) as u64;
        // Offsets are spread evenly over the cycle. With zero travel time,
        // equal offsets would hand the fixed plan a perfect green wave.
        let offset = i as u64 * c / self.intersections.len() as u64;
        let mut pos = (t + offset) % c;
        for &(k, g) in &x.plan {
            if pos < tau {
                return None;
            }
            pos -= tau;
            if pos < g as u64 {
                return Some(k);
            }
            pos -= g as u64;
        }
        unreachable!("position lies inside the cycle")
    }

    pub fn in_network(&self) -> usize {
        self.sections.iter().map(RoadSection::len).sum()
    }

    pub fn total_queue(&self) -> usize {
        self.in_network()
    }

    pub fn critical_length(&self, section: usize) -> f64 {
        self.params.critical_fraction * self.sections[section].capacity as f64
    }

    fn draw_dest<R: Rng + ?Sized>(&self, section: usize, rng: &mut R) -> Dest {
        let routes = &self.sections[section].routes;
        if routes.len() == 1 {
            return routes[0].0;
        }
        let mut u: f64 = rng.random();
        for &(d, p) in routes {
            if u < p {
                return d;
            }
            u -= p;
        }
        routes[routes.len() - 1].0
    }

    /// Poisson arrivals at every boundary section, cut off at capacity.
    /// Returns the number turned away.
    pub fn arrivals_step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> u64 {
        let mut blocked = 0;
        for k in 0..self.sections.len() {
            let rate = self.sections[k].arrival_rate;
            if rate <= 0.0 {
                continue;
            }
            let drawn = Poisson::new(rate).expect("positive rate").sample(rng) as usize;
            let room = self.sections[k].capacity - self.sections[k].len();
            let admitted = drawn.min(room);
            blocked += (drawn - admitted) as u64;
            for _ in 0..admitted {
                let dest = self.draw_dest(k, rng);
                self.sections[k].queue.push_back(Vehicle { entered: self.step, dest });
            }
            self.counters.admitted += admitted as u64;
        }
        self.counters.blocked_at_boundary += blocked;
        blocked
    }

    /// Predicted arrivals into `section` for each step of the horizon. An
    /// internal section expects the vehicles its upstream green approach
    /// will discharge toward it, `s` per step in queue order; a boundary
    /// section expects its mean rate.
    pub fn announced_inflow(&self, section: usize) -> Vec<f64> {
        let h = self.params.horizon as usize;
        let sec = &self.sections[section];
        let Some(j) = sec.upstream else {
            return vec![sec.arrival_rate; h];
        };
        let up = &self.intersections[j];
        let s = self.params.service_rate;
        let mut out = vec![0.0; h];
        let src = &self.sections[up.approaches[up.current]];
        let start = up.lost as usize;
        for (pos, v) in src.queue.iter().enumerate().take(s * h.saturating_sub(start)) {
            if v.dest == Dest::Section(section) {
                out[start + pos / s] += 1.0;
            }
        }
        out
    }

    /// Predicted local queue sum over the horizon if approach `candidate`
    /// gets green. Switching away from the current approach costs lost time.
    /// With `downstream_aware`, service stops at the vehicles the next
    /// sections can take right now.
    pub fn local_wait_cost(&self, i: usize, candidate: usize, downstream_aware: bool) -> f64 {
        let x = &self.intersections[i];
        let s = self.params.service_rate as f64;
        let mut q: Vec<f64> = x.approaches.iter().map(|&a| self.sections[a].len() as f64).collect();
        let inflow: Vec<Vec<f64>> = x.approaches.iter().map(|&a| self.announced_inflow(a)).collect();
        let lost = if candidate == x.current { x.lost } else { self.params.lost_time };
        let mut budget = match downstream_aware.then(|| self.room_limit(x.approaches[candidate])).flatten() {
            Some(n) => n as f64,
            None => f64::INFINITY,
        };
        let mut cost = 0.0;
        for k in 0..self.params.horizon {
            for a in 0..q.len() {
                q[a] += inflow[a][k as usize];
                if a == candidate && k >= lost {
                    let served = q[a].min(s).min(budget);
                    q[a] -= served;
                    budget -= served;
                }
                cost += q[a];
            }
        }
        cost
    }

    /// How many head vehicles of `section` the next sections can take right
    /// now; `None` when room is not the binding limit within the horizon.
    pub fn room_limit(&self, section: usize) -> Option<usize> {
        let limit = self.params.service_rate * self.params.horizon as usize;
        let mut used: Vec<(usize, usize)> = Vec::new();
        for (n, v) in self.sections[section].queue.iter().take(limit).enumerate() {
            if let Dest::Section(q) = v.dest {
                let k = match used.iter().position(|&(s, _)| s == q) {
                    Some(k) => k,
                    None => {
                        used.push((q, 0));
                        used.len() - 1
                    }
                };
                if self.sections[q].len() + used[k].1 >= self.sections[q].capacity {
                    return Some(n);
                }
                used[k].1 += 1;
            }
        }
        None
    }

    fn head_can_move(&self, section: usize) -> bool {
        match self.sections[section].queue.front() {
            None => false,
            Some(v) => match v.dest {
                Dest::Exit => true,
                Dest::Section(q) => self.sections[q].len() < self.sections[q].capacity,
            },
        }
    }

    /// Whether intersection `i` is still clearing a critical queue it picked
    /// earlier. Under `SelfRegulating` a decision is taken only when it is
    /// neither clearing nor switching.
    pub fn is_clearing(&self, i: usize) -> bool {
        let x = &self.intersections[i];
        self.strategy == Strategy::SelfRegulating
            && x.latch.is_some_and(|k| self.head_can_move(x.approaches[k]))
    }

    fn local_wait_choice(&self, i: usize, downstream_aware: bool) -> usize {
        let x = &self.intersections[i];
        let mut best = x.current;
        let mut best_cost = self.local_wait_cost(i, x.current, downstream_aware);
        for k in 0..x.approaches.len() {
            let c = self.local_wait_cost(i, k, downstream_aware);
            if c < best_cost - 1e-9 {
                best = k;
                best_cost = c;
            }
        }
        best
    }

    /// Largest queue among `among`; ties go to the lowest approach index.
    fn longest_queue(&self, i: usize, among: impl Iterator<Item = usize>) -> Option<usize> {
        let x = &self.intersections[i];
        let mut best: Option<(usize, usize)> = None;
        for k in among {
            let len = self.sections[x.approaches[k]].len();
            if best.is_none_or(|(_, l)| len > l) {
                best = Some((k, len));
            }
        }
        best.map(|(k, _)| k)
    }

    /// The approach intersection `i` wants green, and its new override latch.
    /// Pure with respect to the network.
    pub fn choose_phase(&self, i: usize) -> (usize, Option<usize>) {
        let x = &self.intersections[i];
        let n = x.approaches.len();
        match self.strategy {
            Strategy::FixedCycle => (self.fixed_cycle_phase(i, self.step).unwrap_or(x.current), None),
            Strategy::LongestQueueFirst => (self.longest_queue(i, 0..n).expect("approaches"), None),
            Strategy::LocalWaitMin => (self.local_wait_choice(i, false), None),
            Strategy::SelfRegulating => {
                let critical = |k: usize| {
                    let a = x.approaches[k];
                    self.sections[a].len() as f64 >= self.critical_length(a)
                };
                let movable = |k: usize| self.head_can_move(x.approaches[k]);
                // A critical queue, once picked, keeps green until it is
                // cleared (empty) or blocked downstream; no new decision is
                // taken while it clears.
                if self.is_clearing(i) {
                    let k = x.latch.expect("clearing implies a latch");
                    return (k, Some(k));
                }
                let target = self
                    .longest_queue(i, (0..n).filter(|&k| critical(k) && movable(k)))
                    .or_else(|| self.longest_queue(i, (0..n).filter(|&k| critical(k))));
                match target {
                    Some(k) => (k, Some(k)),
                    None => (self.local_wait_choice(i, true), None),
                }
            }
        }
    }

    /// Decides every signal, then returns the approach each intersection
    /// serves this step.
    fn signal_step(&mut self) -> Vec<Option<usize>> {
        if self.strategy == Strategy::FixedCycle {
            return (0..self.intersections.len()).map(|i| self.fixed_cycle_phase(i, self.step)).collect();
        }
        let decisions: Vec<Option<(usize, Option<usize>)>> = (0..self.intersections.len())
            .map(|i| (self.intersections[i].lost == 0).then(|| self.choose_phase(i)))
            .collect();
        let tau = self.params.lost_time;
        self.intersections
            .iter_mut()
            .zip(decisions)
            .map(|(x, d)| {
                if let Some((target, latch)) = d {
                    x.latch = latch;
                    if target != x.current {
                        x.current = target;
                        x.lost = tau;
                    }
                }
                if x.lost > 0 {
                    x.lost -= 1;
                    None
                } else {
                    Some(x.current)
                }
            })
            .collect()
    }

    /// Discharges green approaches. Returns the waits of vehicles that left.
    pub fn serve_step<R: Rng + ?Sized>(&mut self, serving: &[Option<usize>], rng: &mut R) -> Vec<u64> {
        let s = self.params.service_rate;
        let mut room: Vec<usize> = self.sections.iter().map(|x| x.capacity - x.len()).collect();
        let mut moves: Vec<(usize, Dest)> = Vec::new();
        for (i, serve) in serving.iter().enumerate() {
            let Some(k) = *serve else { continue };
            let src = self.intersections[i].approaches[k];
            for v in self.sections[src].queue.iter().take(s) {
                match v.dest {
                    Dest::Section(q) if room[q] == 0 => {
                        self.counters.spillback_blocks += 1;
                        break;
                    }
                    Dest::Section(q) => room[q] -= 1,
                    Dest::Exit => {}
                }
                moves.push((src, v.dest));
            }
        }
        let mut waits = Vec::new();
        for (src, dest) in moves {
            let v = self.sections[src].queue.pop_front().expect("planned move");
            match dest {
                Dest::Exit => {
                    waits.push(self.step - v.entered);
                    self.counters.exited += 1;
                }
                Dest::Section(q) => {
                    let dest = self.draw_dest(q, rng);
                    self.sections[q].queue.push_back(Vehicle { dest, ..v });
                }
            }
        }
        waits
    }

    /// One full step; returns the waits of exiting vehicles and the boundary
    /// blocks.
    pub fn step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> (Vec<u64>, u64) {
        let blocked = self.arrivals_step(rng);
        let serving = self.signal_step();
        let waits = self.serve_step(&serving, rng);
        self.step += 1;
        (waits, blocked)
    }

    pub fn current_step(&self) -> u64 {
        self.step
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrafficResult {
    pub strategy: Strategy,
    pub utilization: f64,
    pub seed: u64,
    pub avg_total_queue: f64,
    /// Mean time in the network of vehicles that left while measuring.
    pub avg_wait: f64,
    /// Boundary arrivals turned away while measuring.
    pub blocked_count: u64,
    #[serde(skip)]
    pub avg_section_queue: Vec<f64>,
}

/// Runs `steps` steps, discarding the warm-up from all averages.
pub fn run_network(net: &mut TrafficNetwork, steps: u64, warmup: u64, rng: &mut ChaCha8Rng) -> (f64, f64, u64, Vec<f64>) {
    let mut queue_sum = 0.0;
    let mut section_sums = vec![0.0; net.sections.len()];
    let (mut wait_sum, mut exits, mut blocked) = (0u64, 0u64, 0u64);
    for t in 0..steps {
        let (waits, b) = net.step(rng);
        if t < warmup {
            continue;
        }
        queue_sum += net.total_queue() as f64;
        for (acc, s) in section_sums.iter_mut().zip(&net.sections) {
            *acc += s.len() as f64;
        }
        wait_sum += waits.iter().sum::<u64>();
        exits += waits.len() as u64;
        blocked += b;
    }
    let measured = (steps - warmup).max(1) as f64;
    let avg_wait = if exits == 0 { 0.0 } else { wait_sum as f64 / exits as f64 };
    for acc in &mut section_sums {
        *acc /= measured;
    }
    (queue_sum / measured, avg_wait, blocked, section_sums)
}

/// Grid network from `cfg` under one strategy, utilization and seed.
pub fn simulate_traffic(cfg: &TrafficConfig, strategy: Strategy, utilization: f64, seed: u64) -> Result<TrafficResult> {
    let mut net = TrafficNetwork::grid(cfg, strategy, utilization)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let warmup = (cfg.steps as f64 * cfg.warmup_fraction).floor() as u64;
    let (avg_total_queue, avg_wait, blocked_count, avg_section_queue) = run_network(&mut net, cfg.steps, warmup, &mut rng);
    Ok(TrafficResult {
        strategy,
        utilization,
        seed,
        avg_total_queue,
        avg_wait,
        blocked_count,
        avg_section_queue,
    })
}

pub fn write_traffic_csv(path: &std::path::Path, rows: &[TrafficResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> SignalParams {
        TrafficConfig::default().params()
    }

    #[test]
    fn grid_wiring() {
        let net = TrafficNetwork::grid(&TrafficConfig::default(), Strategy::FixedCycle, 0.5).unwrap();
        assert_eq!(net.sections.len(), 64);
        let boundary = net.sections.iter().filter(|s| s.upstream.is_none()).count();
        assert_eq!(boundary, 16);
        // every internal section is fed by exactly the neighbor it names
        for (k, s) in net.sections.iter().enumerate() {
            if let Some(j) = s.upstream {
                let feeds = net.intersections[j]
                    .approaches
                    .iter()
                    .any(|&a| net.sections[a].routes.iter().any(|r| r.0 == Dest::Section(k)));
                assert!(feeds, "section {k}");
            }
        }
        let peak = net.intersection_loads().into_iter().fold(0.0, f64::max);
        assert!((peak - 0.5).abs() < 1e-9);
    }

    #[test]
    fn fixed_cycle_serves_enough() {
        let net = TrafficNetwork::grid(&TrafficConfig::default(), Strategy::FixedCycle, 0.85).unwrap();
        let flow = net.expected_flows();
        let s = net.params.service_rate as f64;
        for (i, x) in net.intersections.iter().enumerate() {
            let c = net.cycle_length(i) as f64;
            for &(k, g) in &x.plan {
                assert!(s * g as f64 / c > flow[x.approaches[k]], "intersection {i} approach {k}");
            }
        }
    }

    #[test]
    fn fixed_cycle_is_periodic() {
        let net = TrafficNetwork::grid(&TrafficConfig::default(), Strategy::FixedCycle, 0.5).unwrap();
        let c = net.cycle_length(5) as u64;
        for t in 0..3 * c {
            assert_eq!(net.fixed_cycle_phase(5, t), net.fixed_cycle_phase(5, t + c));
        }
        let greens = (0..c).filter(|&t| net.fixed_cycle_phase(5, t).is_some()).count() as u64;
        assert_eq!(greens + 4 * net.params.lost_time as u64, c);
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("greedy".parse::<Strategy>().is_err());
    }

    #[test]
    fn rejects_bad_routes() {
        let sections = vec![RoadSection {
            capacity: 5,
            queue: VecDeque::new(),
            downstream: 0,
            upstream: None,
            arrival_rate: 0.1,
            routes: vec![(Dest::Exit, 0.5)],
        }];
        assert!(TrafficNetwork::new(sections, vec![Intersection::new(vec![0])], params(), Strategy::FixedCycle).is_err());
    }
}
