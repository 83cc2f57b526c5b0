//! Round play, noisy synchronous best response, and death-birth dynamics.
//!
//! One step is: play a round against all occupied neighbors, record the
//! round's statistics, let every agent best-respond to the actions it just
//! saw, then replace the dead with offspring of survivors chosen in
//! proportion to their non-negative payoff.
//!
//! Random draws happen in a fixed order so runs can be audited: one deviation
//! draw per agent in row-major order, one death draw per agent in row-major
//! order, then for each birth in turn the parent draw, the placement draw,
//! any tie-break draw of the placement, the mutation-rate draw and, when it
//! fires, the two mutation draws.

use rand::Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{self, Action, Friendliness, PayoffMatrix};
use crate::metrics::{self, StepStats};
use crate::world::{Agent, GridWorld};

/// Initial action of a newborn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OffspringAction {
    #[default]
    Defect,
    InheritParent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvolutionParams {
    /// Per-step death probability.
    pub beta: f64,
    /// Probability that an offspring is born next to its parent.
    pub nu: f64,
    /// Probability of playing the opposite of the best response.
    pub epsilon: f64,
    /// Probability that mutation draws below the parent's friendliness.
    pub p_down: f64,
    /// Probability that a birth mutates at all. 1 mutates every offspring;
    /// lower values let friendly lineages persist long enough to be selected.
    pub mutation_rate: f64,
    pub offspring_action: OffspringAction,
    pub matrix: PayoffMatrix,
}

impl Default for EvolutionParams {
    fn default() -> Self {
        EvolutionParams {
            beta: 0.05,
            nu: 0.95,
            epsilon: 0.05,
            p_down: 0.8,
            mutation_rate: 1.0,
            offspring_action: OffspringAction::Defect,
            matrix: PayoffMatrix::default(),
        }
    }
}

impl EvolutionParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("beta", self.beta),
            ("nu", self.nu),
            ("epsilon", self.epsilon),
            ("p_down", self.p_down),
            ("mutation_rate", self.mutation_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!(
                    "evolution.{name} must lie in [0, 1], got {v}"
                )));
            }
        }
        if self.beta >= 1.0 {
            return Err(Error::Config(
                "evolution.beta must be below 1: with every agent dead there is no parent to reproduce"
                    .into(),
            ));
        }
        self.matrix.validate()
    }
}

/// Sets every agent's round payoff against its occupied neighbors' current
/// actions. Isolated agents get 0.
pub fn play_round(world: &mut GridWorld, mat: &PayoffMatrix) {
    let actions: Vec<Option<Action>> = world.cells().iter().map(|c| c.as_ref().map(|a| a.action)).collect();
    let payoffs: Vec<Option<f64>> = (0..actions.len())
        .map(|i| {
            actions[i].map(|own| {
                game::round_payoff(own, world.neighbor_indices(i).filter_map(|j| actions[j]), mat)
            })
        })
        .collect();
    for (cell, payoff) in world.cells_mut().iter_mut().zip(payoffs) {
        if let (Some(agent), Some(p)) = (cell.as_mut(), payoff) {
            agent.set_payoff(p);
        }
    }
}

/// Best response of every occupied cell to the current action field, indexed
/// by cell. Agents without occupied neighbors defect.
pub fn best_responses(world: &GridWorld, mat: &PayoffMatrix) -> Vec<Option<Action>> {
    let cells = world.cells();
    (0..cells.len())
        .map(|i| {
            cells[i].as_ref().map(|agent| {
                let (mut coop, mut n) = (0usize, 0usize);
                for j in world.neighbor_indices(i) {
                    if let Some(other) = &cells[j] {
                        n += 1;
                        coop += usize::from(other.action.is_cooperate());
                    }
                }
                if n == 0 {
                    Action::Defect
                } else {
                    game::best_response_unchecked(coop, n, agent.rho, mat)
                }
            })
        })
        .collect()
}

/// Synchronous update: all decisions read the old action field, then each
/// agent deviates from its best response with probability `epsilon`.
pub fn update_actions<R: Rng + ?Sized>(world: &mut GridWorld, params: &EvolutionParams, rng: &mut R) {
    let next = best_responses(world, &params.matrix);
    for (cell, best) in world.cells_mut().iter_mut().zip(next) {
        if let (Some(agent), Some(best)) = (cell.as_mut(), best) {
            let deviate = rng.random::<f64>() < params.epsilon;
            agent.action = if deviate { best.opposite() } else { best };
        }
    }
}

/// Offspring friendliness: with probability `p_down` uniform on
/// `[0, parent]`, otherwise uniform on `[parent, 1]`.
pub fn mutate_friendliness<R: Rng + ?Sized>(
    parent: Friendliness,
    p_down: f64,
    rng: &mut R,
) -> Friendliness {
    let down = rng.random::<f64>() < p_down;
    let u: f64 = rng.random();
    let r = parent.value();
    let child = if down { r * u } else { r + (1.0 - r) * u };
    Friendliness::saturating(child)
}

/// Counts from one death-birth pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Turnover {
    pub deaths: usize,
    pub local_births: usize,
}

/// Kills each agent with probability `beta`, then refills the population
/// one birth at a time. Newborns neither die nor reproduce in the step they
/// are born.
pub fn death_birth<R: Rng + ?Sized>(
    world: &mut GridWorld,
    params: &EvolutionParams,
    rng: &mut R,
    step: u64,
) -> Result<Turnover> {
    let dead: Vec<usize> = (0..world.num_cells())
        .filter(|&i| world.cells()[i].is_some())
        .filter(|_| rng.random::<f64>() < params.beta)
        .collect();
    if dead.is_empty() {
        return Ok(Turnover::default());
    }
    if dead.len() == world.population() {
        return Err(Error::Extinction { step });
    }
    for &i in &dead {
        world.take_at_index(i);
    }

    let survivors: Vec<usize> = (0..world.num_cells())
        .filter(|&i| world.cells()[i].is_some())
        .collect();
    let weights: Vec<f64> = survivors
        .iter()
        .map(|&i| world.cells()[i].as_ref().map_or(0.0, |a| a.fitness))
        .collect();
    let by_fitness = WeightedIndex::new(&weights).ok();

    let mut turnover = Turnover {
        deaths: dead.len(),
        local_births: 0,
    };
    for _ in 0..dead.len() {
        let k = match &by_fitness {
            Some(dist) => dist.sample(rng),
            None => rng.random_range(0..survivors.len()),
        };
        let parent_cell = survivors[k];
        let parent_pos = world.position_of(parent_cell);
        let local = rng.random::<f64>() < params.nu;
        let site = if local {
            world.closest_empty_site(parent_pos, rng)
        } else {
            world.random_empty_site(rng)
        };
        let site = site.expect("a death always leaves an empty site");
        let parent = world.cells()[parent_cell].as_ref().expect("survivor present");
        let (family, parent_rho, parent_action) = (parent.family, parent.rho, parent.action);
        let rho = if rng.random::<f64>() < params.mutation_rate {
            mutate_friendliness(parent_rho, params.p_down, rng)
        } else {
            parent_rho
        };
        let action = match params.offspring_action {
            OffspringAction::Defect => Action::Defect,
            OffspringAction::InheritParent => parent_action,
        };
        let id = world.fresh_id();
        let idx = world.index_of(site);
        world.place_at_index(idx, Agent::new(id, family, rho, action));
        turnover.local_births += usize::from(local);
    }
    Ok(turnover)
}

/// Runs one full step and returns the statistics of the round it played.
pub fn step<R: Rng + ?Sized>(
    world: &mut GridWorld,
    params: &EvolutionParams,
    rng: &mut R,
    step: u64,
) -> Result<StepStats> {
    play_round(world, &params.matrix);
    let stats = metrics::summarize(world, step);
    update_actions(world, params, rng);
    death_birth(world, params, rng, step)?;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{FamilySpec, Position};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use Action::{Cooperate as C, Defect as D};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn agent(rho: f64, action: Action) -> Agent {
        Agent::new(0, 0, Friendliness::new(rho).unwrap(), action)
    }

    fn homogeneous(w: usize, h: usize, occ: f64, rho: f64, seed: u64) -> GridWorld {
        let fam = [FamilySpec {
            id: 1,
            initial_rho: rho,
            share: 1.0,
        }];
        GridWorld::populate(w, h, occ, &fam, &mut rng(seed)).unwrap()
    }

    fn quiet() -> EvolutionParams {
        EvolutionParams {
            beta: 0.0,
            epsilon: 0.0,
            ..EvolutionParams::default()
        }
    }

    #[test]
    fn play_round_examples() {
        let m = PayoffMatrix::default();
        let mut w = GridWorld::empty(5, 5, vec![1]).unwrap();
        w.insert(Position::new(0, 0), agent(0.0, C)).unwrap();
        play_round(&mut w, &m);
        assert_eq!(w.get(Position::new(0, 0)).unwrap().round_payoff, 0.0);

        let mut w = GridWorld::empty(3, 3, vec![1]).unwrap();
        for i in 0..9 {
            let a = if i == 4 { agent(0.5, C) } else { agent(0.0, D) };
            w.insert(w.position_of(i), a).unwrap();
        }
        play_round(&mut w, &m);
        let center = w.get(Position::new(1, 1)).unwrap();
        assert_eq!(center.round_payoff, -8.0);
        assert_eq!(center.fitness, 0.0);

        let mut w = GridWorld::empty(6, 6, vec![1]).unwrap();
        w.insert(Position::new(2, 2), agent(0.5, C)).unwrap();
        w.insert(Position::new(3, 2), agent(0.5, C)).unwrap();
        play_round(&mut w, &m);
        assert_eq!(w.get(Position::new(2, 2)).unwrap().round_payoff, 1.0);
        assert_eq!(w.get(Position::new(3, 2)).unwrap().round_payoff, 1.0);
    }

    #[test]
    fn self_regarding_all_defect_after_update() {
        let mut w = homogeneous(10, 10, 0.7, 0.0, 3);
        let mut r = rng(4);
        for (i, cell) in w.cells_mut().iter_mut().enumerate() {
            if let Some(a) = cell {
                a.action = if i % 3 == 0 { C } else { D };
            }
        }
        update_actions(&mut w, &quiet(), &mut r);
        assert!(w.agents().all(|(_, a)| a.action == D));
    }

    #[test]
    fn high_friendliness_cooperates_from_all_defect() {
        // Cooperating against n defectors needs rho > n / (n + 1.1), which is
        // 8 / 9.1 for a full neighborhood. rho = 0.6 only covers n = 1.
        let m = PayoffMatrix::default();
        for n in 1..=8 {
            assert_eq!(game::best_response(0, n, Friendliness::new(0.95).unwrap(), &m).unwrap(), C);
        }
        assert_eq!(game::best_response(0, 1, Friendliness::new(0.6).unwrap(), &m).unwrap(), C);
        assert_eq!(game::best_response(0, 2, Friendliness::new(0.6).unwrap(), &m).unwrap(), D);

        let mut w = homogeneous(10, 10, 1.0, 0.95, 5);
        update_actions(&mut w, &quiet(), &mut rng(1));
        assert!(w.agents().all(|(_, a)| a.action == C));
    }

    #[test]
    fn epsilon_one_flips_every_best_response() {
        let mut w = homogeneous(8, 8, 0.6, 0.3, 9);
        for (i, cell) in w.cells_mut().iter_mut().enumerate() {
            if let Some(a) = cell {
                a.action = if i % 2 == 0 { C } else { D };
            }
        }
        let best = best_responses(&w, &EvolutionParams::default().matrix);
        let params = EvolutionParams {
            epsilon: 1.0,
            ..quiet()
        };
        update_actions(&mut w, &params, &mut rng(2));
        for (i, b) in best.into_iter().enumerate() {
            if let Some(b) = b {
                assert_eq!(w.cells()[i].as_ref().unwrap().action, b.opposite());
            }
        }
    }

    #[test]
    fn update_is_synchronous() {
        // Apply the same per-agent draws in two different iteration orders,
        // writing in place; a synchronous update must not notice.
        let mut w = homogeneous(12, 12, 0.75, 0.35, 21);
        let mut r = rng(22);
        for cell in w.cells_mut().iter_mut().flatten() {
            cell.action = if r.random::<f64>() < 0.5 { C } else { D };
            cell.rho = Friendliness::new(r.random()).unwrap();
        }
        let draws: Vec<f64> = (0..w.num_cells()).map(|_| r.random()).collect();
        let eps = 0.2;
        let apply = |order: &[usize]| {
            let mut world = w.clone();
            let best = best_responses(&world, &PayoffMatrix::default());
            for &i in order {
                if let (Some(a), Some(b)) = (world.cells_mut()[i].as_mut(), best[i]) {
                    a.action = if draws[i] < eps { b.opposite() } else { b };
                }
            }
            world.cell_codes()
        };
        let forward: Vec<usize> = (0..w.num_cells()).collect();
        let mut backward = forward.clone();
        backward.reverse();
        assert_eq!(apply(&forward), apply(&backward));

        // and the library update matches the same draws in row-major order
        let mut lib = w.clone();
        let mut r2 = rng(99);
        let lib_draws: Vec<f64> = {
            let mut probe = rng(99);
            (0..lib.population()).map(|_| probe.random()).collect()
        };
        update_actions(&mut lib, &EvolutionParams { epsilon: eps, ..quiet() }, &mut r2);
        let best = best_responses(&w, &PayoffMatrix::default());
        let mut k = 0;
        for i in 0..w.num_cells() {
            if let Some(b) = best[i] {
                let expect = if lib_draws[k] < eps { b.opposite() } else { b };
                assert_eq!(lib.cells()[i].as_ref().unwrap().action, expect);
                k += 1;
            }
        }
    }

    #[test]
    fn mutation_means() {
        let mut r = rng(7);
        let n = 1_000_000;
        let zero = Friendliness::ZERO;
        let mean0: f64 = (0..n).map(|_| mutate_friendliness(zero, 0.8, &mut r).value()).sum::<f64>() / n as f64;
        assert!((mean0 - 0.1).abs() < 0.01, "{mean0}");
        let one = Friendliness::new(1.0).unwrap();
        let mean1: f64 = (0..n).map(|_| mutate_friendliness(one, 0.8, &mut r).value()).sum::<f64>() / n as f64;
        assert!((mean1 - 0.6).abs() < 0.01, "{mean1}");
    }

    #[test]
    fn mutation_map_fixed_point() {
        // E[rho'] = 0.5 E[rho] + 0.1 has fixed point 0.2
        let mut e: f64 = 0.9;
        for _ in 0..60 {
            e = 0.8 * (e / 2.0) + 0.2 * ((e + 1.0) / 2.0);
        }
        assert!((e - 0.2).abs() < 1e-12);
    }

    #[test]
    fn beta_zero_leaves_world_unchanged() {
        let mut w = homogeneous(10, 10, 0.6, 0.2, 1);
        let before = w.clone();
        let t = death_birth(&mut w, &quiet(), &mut rng(3), 0).unwrap();
        assert_eq!(t.deaths, 0);
        assert_eq!(w, before);
    }

    #[test]
    fn beta_one_rejected() {
        let p = EvolutionParams {
            beta: 1.0,
            ..EvolutionParams::default()
        };
        assert!(matches!(p.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn extinction_is_reported() {
        let mut w = homogeneous(4, 4, 0.5, 0.0, 1);
        let p = EvolutionParams {
            beta: 1.0,
            ..EvolutionParams::default()
        };
        assert!(matches!(
            death_birth(&mut w, &p, &mut rng(1), 17),
            Err(Error::Extinction { step: 17 })
        ));
    }

    #[test]
    fn parent_selection_is_fitness_proportional() {
        // Survivors A (fitness 3, family 0) and B (fitness 1, family 1); a
        // zero-fitness agent of family 2 is the one that dies. The newborn's
        // family identifies its parent.
        let params = EvolutionParams {
            beta: 0.5,
            nu: 1.0,
            epsilon: 0.0,
            ..EvolutionParams::default()
        };
        let mut base = GridWorld::empty(3, 1, vec![1, 2, 3]).unwrap();
        for (x, fam, fit) in [(0, 0, 3.0), (2, 1, 1.0), (1, 2, 0.0)] {
            let mut a = Agent::new(0, fam, Friendliness::ZERO, D);
            a.set_payoff(fit);
            base.insert(Position::new(x, 0), a).unwrap();
        }
        let mut r = rng(77);
        let (mut from_a, mut total) = (0usize, 0usize);
        while total < 100_000 {
            let mut w = base.clone();
            let Ok(t) = death_birth(&mut w, &params, &mut r, 0) else {
                continue;
            };
            let families: Vec<usize> = w.agents().map(|(_, a)| a.family).collect();
            let ids: Vec<u64> = w.agents().map(|(_, a)| a.id).collect();
            if t.deaths != 1 || !ids.contains(&0) || !ids.contains(&1) {
                continue;
            }
            let newborn = w.get(Position::new(1, 0)).unwrap();
            assert!(newborn.family < 2, "{families:?}");
            from_a += usize::from(newborn.family == 0);
            total += 1;
        }
        let frac = from_a as f64 / total as f64;
        assert!((frac - 0.75).abs() < 0.01, "{frac}");
    }

    #[test]
    fn zero_fitness_falls_back_to_uniform_parent() {
        let params = EvolutionParams {
            beta: 0.3,
            nu: 1.0,
            epsilon: 0.0,
            ..EvolutionParams::default()
        };
        let mut w = homogeneous(10, 10, 0.5, 0.0, 8);
        // everyone defects: all payoffs and fitness are zero
        play_round(&mut w, &params.matrix);
        assert!(w.agents().all(|(_, a)| a.fitness == 0.0));
        let n = w.population();
        let t = death_birth(&mut w, &params, &mut rng(1), 0).unwrap();
        assert!(t.deaths > 0);
        assert_eq!(w.population(), n);
    }

    #[test]
    fn offspring_inherit_family_and_start_defecting() {
        let params = EvolutionParams {
            beta: 0.3,
            epsilon: 0.0,
            ..EvolutionParams::default()
        };
        let mut w = GridWorld::empty(10, 10, vec![1, 2]).unwrap();
        let mut r = rng(5);
        for i in 0..50 {
            let mut a = Agent::new(0, 0, Friendliness::new(0.5).unwrap(), C);
            a.set_payoff(1.0);
            w.insert(w.position_of(2 * i), a).unwrap();
        }
        let before: Vec<u64> = w.agents().map(|(_, a)| a.id).collect();
        death_birth(&mut w, &params, &mut r, 0).unwrap();
        for (_, a) in w.agents() {
            assert_eq!(a.family, 0);
            assert!((0.0..=1.0).contains(&a.rho.value()));
            if !before.contains(&a.id) {
                assert_eq!(a.action, D);
            }
        }
    }

    #[test]
    fn inherit_parent_action_switch() {
        let params = EvolutionParams {
            beta: 0.5,
            epsilon: 0.0,
            offspring_action: OffspringAction::InheritParent,
            ..EvolutionParams::default()
        };
        let mut w = GridWorld::empty(10, 10, vec![1]).unwrap();
        for i in 0..40 {
            let mut a = Agent::new(0, 0, Friendliness::new(0.5).unwrap(), C);
            a.set_payoff(2.0);
            w.insert(w.position_of(i), a).unwrap();
        }
        death_birth(&mut w, &params, &mut rng(6), 0).unwrap();
        assert!(w.agents().all(|(_, a)| a.action == C));
    }

    #[test]
    fn fixed_point_for_self_regarding_without_noise() {
        let mut w = homogeneous(20, 20, 0.6, 0.0, 2);
        for cell in w.cells_mut().iter_mut().flatten() {
            cell.action = C;
        }
        let mut r = rng(3);
        let mut rows = Vec::new();
        for t in 0..10 {
            rows.push(step(&mut w, &quiet(), &mut r, t).unwrap());
        }
        for s in &rows[1..] {
            assert_eq!(s.coop_fraction, 0.0);
            assert_eq!(s.mean_payoff_def, Some(0.0));
            assert_eq!(s.mean_payoff_coop, None);
        }
    }

    #[test]
    fn idealists_cooperate_from_step_one() {
        let mut w = homogeneous(20, 20, 1.0, 0.95, 2);
        let mut r = rng(3);
        let rows: Vec<StepStats> = (0..10).map(|t| step(&mut w, &quiet(), &mut r, t).unwrap()).collect();
        assert_eq!(rows[0].coop_fraction, 0.0);
        assert!(rows[1..].iter().all(|s| s.coop_fraction == 1.0));
    }

    #[test]
    fn population_is_conserved() {
        let mut w = homogeneous(20, 20, 0.6, 0.2, 4);
        let n = w.population();
        let params = EvolutionParams {
            beta: 0.2,
            ..EvolutionParams::default()
        };
        let mut r = rng(5);
        for t in 0..300 {
            step(&mut w, &params, &mut r, t).unwrap();
            assert_eq!(w.population(), n);
            assert_eq!(w.agents().count(), n);
            assert_eq!(w.empty_count() + n, w.num_cells());
        }
    }

    #[test]
    fn nu_zero_places_uniformly() {
        // One parent in a 4x4 grid, offspring placed over the 15 empty cells:
        // chi-square against uniform with 14 degrees of freedom.
        let params = EvolutionParams {
            nu: 0.0,
            ..EvolutionParams::default()
        };
        let mut r = rng(31);
        let mut counts = [0usize; 16];
        let trials = 150_000;
        let mut base = GridWorld::empty(4, 4, vec![1]).unwrap();
        let mut p = Agent::new(0, 0, Friendliness::ZERO, D);
        p.set_payoff(1.0);
        base.insert(Position::new(0, 0), p).unwrap();
        for _ in 0..trials {
            let site = if r.random::<f64>() < params.nu {
                base.closest_empty_site(Position::new(0, 0), &mut r)
            } else {
                base.random_empty_site(&mut r)
            }
            .unwrap();
            counts[base.index_of(site)] += 1;
        }
        assert_eq!(counts[0], 0);
        let expected = trials as f64 / 15.0;
        let chi2: f64 = counts[1..]
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 99.9th percentile of chi-square(14) is 36.12
        assert!(chi2 < 36.12, "chi2 = {chi2}");
    }
}
