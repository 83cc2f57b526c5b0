//! Bounded lattice with partial occupancy.

use std::fmt;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{Action, Friendliness};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Position {
    pub x: usize,
    pub y: usize,
}

impl Position {
    pub fn new(x: usize, y: usize) -> Self {
        Position { x, y }
    }

    pub fn distance_sq(self, other: Position) -> usize {
        let dx = self.x.abs_diff(other.x);
        let dy = self.y.abs_diff(other.y);
        dx * dx + dy * dy
    }
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub id: u64,
    /// Index into the world's family list.
    pub family: usize,
    pub rho: Friendliness,
    pub action: Action,
    pub round_payoff: f64,
    /// Reproductive weight, `max(round_payoff, 0)`.
    pub fitness: f64,
}

impl Agent {
    pub fn new(id: u64, family: usize, rho: Friendliness, action: Action) -> Self {
        Agent {
            id,
            family,
            rho,
            action,
            round_payoff: 0.0,
            fitness: 0.0,
        }
    }

    pub fn set_payoff(&mut self, payoff: f64) {
        self.round_payoff = payoff;
        self.fitness = payoff.max(0.0);
    }
}

/// One family at initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySpec {
    pub id: u32,
    pub initial_rho: f64,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridWorld {
    width: usize,
    height: usize,
    cells: Vec<Option<Agent>>,
    family_ids: Vec<u32>,
    population: usize,
    /// Indices of empty cells, in arbitrary order.
    empty: Vec<usize>,
    /// Slot of each cell inside `empty`, `usize::MAX` when occupied.
    empty_slot: Vec<usize>,
    next_id: u64,
}

const NO_SLOT: usize = usize::MAX;

impl GridWorld {
    /// An empty world with the given families registered.
    pub fn empty(width: usize, height: usize, family_ids: Vec<u32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Config(format!(
                "grid must be at least 1x1, got {width}x{height}"
            )));
        }
        let n = width * height;
        Ok(GridWorld {
            width,
            height,
            cells: vec![None; n],
            family_ids,
            population: 0,
            empty: (0..n).collect(),
            empty_slot: (0..n).collect(),
            next_id: 0,
        })
    }

    /// Places `floor(width * height * occupancy)` defecting agents on
    /// uniformly random distinct cells. Family sizes follow the shares, with
    /// leftover agents going to the families with the largest remainders.
    pub fn populate<R: Rng + ?Sized>(
        width: usize,
        height: usize,
        occupancy: f64,
        families: &[FamilySpec],
        rng: &mut R,
    ) -> Result<Self> {
        if !(occupancy > 0.0 && occupancy <= 1.0) {
            return Err(Error::Config(format!(
                "occupancy must lie in (0, 1], got {occupancy}"
            )));
        }
        validate_families(families)?;
        let mut world = GridWorld::empty(width, height, families.iter().map(|f| f.id).collect())?;
        let n_cells = width * height;
        let count = (n_cells as f64 * occupancy).floor() as usize;
        if count == 0 {
            return Err(Error::Config("occupancy leaves the grid without agents".into()));
        }

        let sizes = apportion(count, families);
        let cells = index::sample(rng, n_cells, count);
        let mut cells = cells.into_iter();
        for (family, &size) in sizes.iter().enumerate() {
            let rho = Friendliness::new(families[family].initial_rho)?;
            for cell in cells.by_ref().take(size) {
                let id = world.fresh_id();
                world.place_at_index(cell, Agent::new(id, family, rho, Action::Defect));
            }
        }
        Ok(world)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn population(&self) -> usize {
        self.population
    }

    pub fn family_ids(&self) -> &[u32] {
        &self.family_ids
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn empty_count(&self) -> usize {
        self.empty.len()
    }

    pub fn contains(&self, p: Position) -> bool {
        p.x < self.width && p.y < self.height
    }

    pub fn index_of(&self, p: Position) -> usize {
        p.y * self.width + p.x
    }

    pub fn position_of(&self, idx: usize) -> Position {
        Position::new(idx % self.width, idx / self.width)
    }

    pub fn get(&self, p: Position) -> Option<&Agent> {
        if !self.contains(p) {
            return None;
        }
        self.cells[self.index_of(p)].as_ref()
    }

    pub fn get_mut(&mut self, p: Position) -> Option<&mut Agent> {
        if !self.contains(p) {
            return None;
        }
        let i = self.index_of(p);
        self.cells[i].as_mut()
    }

    pub(crate) fn cells(&self) -> &[Option<Agent>] {
        &self.cells
    }

    pub(crate) fn cells_mut(&mut self) -> &mut [Option<Agent>] {
        &mut self.cells
    }

    /// Occupied cells in row-major order.
    pub fn agents(&self) -> impl Iterator<Item = (Position, &Agent)> + '_ {
        self.cells
            .iter()
            .enumerate()
            .filter_map(move |(i, c)| c.as_ref().map(|a| (self.position_of(i), a)))
    }

    pub(crate) fn fresh_id(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    /// Puts a new agent on an empty cell. Assigns it a fresh id.
    pub fn insert(&mut self, p: Position, mut agent: Agent) -> Result<()> {
        if !self.contains(p) {
            return Err(Error::InvalidArgument(format!("{p} is outside the grid")));
        }
        let i = self.index_of(p);
        if self.cells[i].is_some() {
            return Err(Error::InvalidArgument(format!("{p} is already occupied")));
        }
        if agent.family >= self.family_ids.len() {
            return Err(Error::InvalidArgument(format!(
                "family index {} is not registered",
                agent.family
            )));
        }
        agent.id = self.fresh_id();
        self.place_at_index(i, agent);
        Ok(())
    }

    pub fn remove(&mut self, p: Position) -> Option<Agent> {
        if !self.contains(p) {
            return None;
        }
        let i = self.index_of(p);
        self.take_at_index(i)
    }

    pub(crate) fn place_at_index(&mut self, i: usize, agent: Agent) {
        debug_assert!(self.cells[i].is_none());
        let slot = self.empty_slot[i];
        let last = *self.empty.last().expect("occupied cell listed as empty");
        self.empty.swap_remove(slot);
        if last != i {
            self.empty_slot[last] = slot;
        }
        self.empty_slot[i] = NO_SLOT;
        self.cells[i] = Some(agent);
        self.population += 1;
    }

    pub(crate) fn take_at_index(&mut self, i: usize) -> Option<Agent> {
        let agent = self.cells[i].take()?;
        self.empty_slot[i] = self.empty.len();
        self.empty.push(i);
        self.population -= 1;
        Some(agent)
    }

    /// Cell indices of the occupied Moore neighbors of cell `i`.
    pub(crate) fn neighbor_indices(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let p = self.position_of(i);
        self.neighbors_of(p).map(move |q| self.index_of(q))
    }

    fn neighbors_of(&self, p: Position) -> impl Iterator<Item = Position> + '_ {
        let (w, h) = (self.width as isize, self.height as isize);
        let (px, py) = (p.x as isize, p.y as isize);
        (-1isize..=1)
            .flat_map(move |dy| (-1isize..=1).map(move |dx| (dx, dy)))
            .filter(|&(dx, dy)| dx != 0 || dy != 0)
            .map(move |(dx, dy)| (px + dx, py + dy))
            .filter(move |&(x, y)| x >= 0 && y >= 0 && x < w && y < h)
            .map(|(x, y)| Position::new(x as usize, y as usize))
    }

    /// The up-to-eight surrounding cells, clipped at the border, row-major.
    pub fn moore_neighbors(&self, p: Position) -> Result<Vec<Position>> {
        if !self.contains(p) {
            return Err(Error::InvalidArgument(format!("{p} is outside the grid")));
        }
        Ok(self.neighbors_of(p).collect())
    }

    /// An empty cell nearest to `p` in Euclidean distance, ties broken
    /// uniformly at random. `None` when the grid is full.
    pub fn closest_empty_site<R: Rng + ?Sized>(&self, p: Position, rng: &mut R) -> Option<Position> {
        if self.empty.is_empty() || !self.contains(p) {
            return None;
        }
        let mut best = usize::MAX;
        let mut ties: Vec<usize> = Vec::new();
        let max_r = self.width.max(self.height) as isize;
        let (px, py) = (p.x as isize, p.y as isize);
        let visit = |x: isize, y: isize, best: &mut usize, ties: &mut Vec<usize>| {
            if x < 0 || y < 0 || x >= self.width as isize || y >= self.height as isize {
                return;
            }
            let i = y as usize * self.width + x as usize;
            if self.cells[i].is_some() {
                return;
            }
            let d = ((x - px) * (x - px) + (y - py) * (y - py)) as usize;
            if d < *best {
                *best = d;
                ties.clear();
                ties.push(i);
            } else if d == *best {
                ties.push(i);
            }
        };
        for r in 0..=max_r {
            // Every cell on ring r is at least r away.
            if best != usize::MAX && (r * r) as usize > best {
                break;
            }
            if r == 0 {
                visit(px, py, &mut best, &mut ties);
                continue;
            }
            for dx in -r..=r {
                visit(px + dx, py - r, &mut best, &mut ties);
                visit(px + dx, py + r, &mut best, &mut ties);
            }
            for dy in (-r + 1)..r {
                visit(px - r, py + dy, &mut best, &mut ties);
                visit(px + r, py + dy, &mut best, &mut ties);
            }
        }
        let pick = match ties.len() {
            0 => return None,
            1 => ties[0],
            n => ties[rng.random_range(0..n)],
        };
        Some(self.position_of(pick))
    }

    /// A uniformly random empty cell.
    pub fn random_empty_site<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<Position> {
        if self.empty.is_empty() {
            return None;
        }
        // Sorted so the draw does not depend on the bookkeeping order.
        let mut cells = self.empty.clone();
        cells.sort_unstable();
        Some(self.position_of(cells[rng.random_range(0..cells.len())]))
    }

    pub fn mean_rho(&self) -> Option<f64> {
        if self.population == 0 {
            return None;
        }
        let sum: f64 = self.agents().map(|(_, a)| a.rho.value()).sum();
        Some(sum / self.population as f64)
    }

    /// Grid of cell codes: -1 for empty, otherwise
    /// `2 * family_index + (1 if cooperating)`.
    pub fn cell_codes(&self) -> Vec<Vec<i32>> {
        (0..self.height)
            .map(|y| {
                (0..self.width)
                    .map(|x| match &self.cells[y * self.width + x] {
                        None => -1,
                        Some(a) => 2 * a.family as i32 + i32::from(a.action.is_cooperate()),
                    })
                    .collect()
            })
            .collect()
    }
}

pub fn validate_families(families: &[FamilySpec]) -> Result<()> {
    if families.is_empty() {
        return Err(Error::Config("at least one family is required".into()));
    }
    let mut ids: Vec<u32> = families.iter().map(|f| f.id).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != families.len() {
        return Err(Error::Config("family ids must be distinct".into()));
    }
    for f in families {
        if !(0.0..=1.0).contains(&f.initial_rho) {
            return Err(Error::Config(format!(
                "family {} initial_rho must lie in [0, 1], got {}",
                f.id, f.initial_rho
            )));
        }
        if !(f.share >= 0.0 && f.share.is_finite()) {
            return Err(Error::Config(format!(
                "family {} share must be non-negative, got {}",
                f.id, f.share
            )));
        }
    }
    let total: f64 = families.iter().map(|f| f.share).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "family shares must sum to 1, got {total}"
        )));
    }
    Ok(())
}

/// Largest-remainder split of `count` agents by share.
fn apportion(count: usize, families: &[FamilySpec]) -> Vec<usize> {
    let exact: Vec<f64> = families.iter().map(|f| f.share * count as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = count - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..families.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    sizes
}
