//! Discrete grid environment: maps, cases, local observations and the
//! communication graph between robots.

use std::collections::{HashSet, VecDeque};
use std::fmt;

use nalgebra::DMatrix;
use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

/// Number of generate-and-check attempts before a case is declared infeasible.
pub const CASE_RETRIES: usize = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("infeasible case: {0}")]
    InfeasibleCase(String),
    #[error("robot {robot} would leave the map at ({x},{y})")]
    OutOfBounds { robot: usize, x: i32, y: i32 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
}

/// A grid cell. `x` grows rightward, `y` grows downward.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[i32; 2]", into = "[i32; 2]")]
pub struct Cell {
    pub x: i32,
    pub y: i32,
}

impl Cell {
    pub const fn new(x: i32, y: i32) -> Self {
        Cell { x, y }
    }

    pub fn offset(self, dx: i32, dy: i32) -> Cell {
        Cell::new(self.x + dx, self.y + dy)
    }

    pub fn manhattan(self, other: Cell) -> u32 {
        self.x.abs_diff(other.x) + self.y.abs_diff(other.y)
    }

    pub fn dist_sq(self, other: Cell) -> i64 {
        let dx = (self.x - other.x) as i64;
        let dy = (self.y - other.y) as i64;
        dx * dx + dy * dy
    }
}

impl From<[i32; 2]> for Cell {
    fn from(v: [i32; 2]) -> Self {
        Cell::new(v[0], v[1])
    }
}

impl From<Cell> for [i32; 2] {
    fn from(c: Cell) -> Self {
        [c.x, c.y]
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.x, self.y)
    }
}

/// The five motion primitives, in their fixed one-hot order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Idle = 0,
    Up = 1,
    Left = 2,
    Down = 3,
    Right = 4,
}

impl Action {
    pub const COUNT: usize = 5;
    pub const ALL: [Action; 5] = [Action::Idle, Action::Up, Action::Left, Action::Down, Action::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Action::ALL.get(i).copied()
    }

    pub fn delta(self) -> (i32, i32) {
        match self {
            Action::Idle => (0, 0),
            Action::Up => (0, -1),
            Action::Left => (-1, 0),
            Action::Down => (0, 1),
            Action::Right => (1, 0),
        }
    }

    pub fn apply(self, c: Cell) -> Cell {
        let (dx, dy) = self.delta();
        c.offset(dx, dy)
    }

    /// The action that moves `from` to `to`, if they are equal or 4-adjacent.
    pub fn between(from: Cell, to: Cell) -> Option<Action> {
        Action::ALL.into_iter().find(|a| a.apply(from) == to)
    }

    pub fn one_hot(self) -> [f64; 5] {
        let mut v = [0.0; 5];
        v[self.index()] = 1.0;
        v
    }
}

/// Static occupancy grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GridMap {
    width: usize,
    height: usize,
    blocked: Vec<bool>,
    density: f64,
    seed: u64,
}

/// Obstacle count for a density, robust to products like 0.29 * 100 landing
/// one ulp below an integer.
pub fn obstacle_count(width: usize, height: usize, density: f64) -> usize {
    ((density * (width * height) as f64) + 1e-9).floor() as usize
}

impl GridMap {
    /// Builds a map from an explicit obstacle list. `density` is recomputed
    /// from the obstacle count.
    pub fn from_obstacles(width: usize, height: usize, obstacles: &[Cell]) -> Result<Self, GridError> {
        Self::with_metadata(width, height, obstacles, None, 0)
    }

    pub(crate) fn with_metadata(
        width: usize,
        height: usize,
        obstacles: &[Cell],
        density: Option<f64>,
        seed: u64,
    ) -> Result<Self, GridError> {
        if width == 0 || height == 0 {
            return Err(GridError::InvalidParameter(format!("empty map {width}x{height}")));
        }
        let mut blocked = vec![false; width * height];
        for &c in obstacles {
            if c.x < 0 || c.y < 0 || c.x as usize >= width || c.y as usize >= height {
                return Err(GridError::InvalidParameter(format!("obstacle {c} outside {width}x{height}")));
            }
            blocked[c.y as usize * width + c.x as usize] = true;
        }
        let count = blocked.iter().filter(|&&b| b).count();
        let density = density.unwrap_or(count as f64 / (width * height) as f64);
        Ok(GridMap { width, height, blocked, density, seed })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self::from_obstacles(width, height, &[]).expect("nonzero dimensions")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn density(&self) -> f64 {
        self.density
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }

    pub fn in_bounds(&self, c: Cell) -> bool {
        c.x >= 0 && c.y >= 0 && (c.x as usize) < self.width && (c.y as usize) < self.height
    }

    pub fn index_of(&self, c: Cell) -> Option<usize> {
        self.in_bounds(c).then(|| c.y as usize * self.width + c.x as usize)
    }

    pub fn cell_at(&self, idx: usize) -> Cell {
        Cell::new((idx % self.width) as i32, (idx / self.width) as i32)
    }

    /// True for obstacle cells; cells outside the map count as blocked.
    pub fn is_blocked(&self, c: Cell) -> bool {
        self.index_of(c).is_none_or(|i| self.blocked[i])
    }

    pub fn is_free(&self, c: Cell) -> bool {
        !self.is_blocked(c)
    }

    /// Obstacle cells in row-major order.
    pub fn obstacles(&self) -> Vec<Cell> {
        (0..self.area()).filter(|&i| self.blocked[i]).map(|i| self.cell_at(i)).collect()
    }

    pub fn free_cells(&self) -> Vec<Cell> {
        (0..self.area()).filter(|&i| !self.blocked[i]).map(|i| self.cell_at(i)).collect()
    }

    pub fn neighbors(&self, c: Cell) -> impl Iterator<Item = Cell> + '_ {
        Action::ALL[1..].iter().map(move |a| a.apply(c)).filter(|&n| self.is_free(n))
    }

    /// Connected-component label per cell (4-connected); `usize::MAX` for obstacles.
    pub fn components(&self) -> Vec<usize> {
        let mut label = vec![usize::MAX; self.area()];
        let mut next = 0;
        let mut queue = VecDeque::new();
        for start in 0..self.area() {
            if self.blocked[start] || label[start] != usize::MAX {
                continue;
            }
            label[start] = next;
            queue.push_back(start);
            while let Some(i) = queue.pop_front() {
                for n in self.neighbors(self.cell_at(i)) {
                    let j = self.index_of(n).unwrap();
                    if label[j] == usize::MAX {
                        label[j] = next;
                        queue.push_back(j);
                    }
                }
            }
            next += 1;
        }
        label
    }

    /// BFS distances to `goal` over free cells; `u32::MAX` where unreachable.
    pub fn distances_to(&self, goal: Cell) -> Vec<u32> {
        let mut dist = vec![u32::MAX; self.area()];
        let Some(g) = self.index_of(goal).filter(|&g| !self.blocked[g]) else {
            return dist;
        };
        dist[g] = 0;
        let mut queue = VecDeque::from([g]);
        while let Some(i) = queue.pop_front() {
            let d = dist[i];
            for n in self.neighbors(self.cell_at(i)) {
                let j = self.index_of(n).unwrap();
                if dist[j] == u32::MAX {
                    dist[j] = d + 1;
                    queue.push_back(j);
                }
            }
        }
        dist
    }
}

#[derive(Serialize, Deserialize)]
struct GridMapRepr {
    width: usize,
    height: usize,
    obstacles: Vec<Cell>,
    density: f64,
    seed: u64,
}

impl Serialize for GridMap {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        GridMapRepr {
            width: self.width,
            height: self.height,
            obstacles: self.obstacles(),
            density: self.density,
            seed: self.seed,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for GridMap {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = GridMapRepr::deserialize(d)?;
        GridMap::with_metadata(r.width, r.height, &r.obstacles, Some(r.density), r.seed)
            .map_err(serde::de::Error::custom)
    }
}

/// Places exactly `obstacle_count(W, H, density)` obstacles uniformly at
/// random without replacement.
pub fn generate_map(width: usize, height: usize, density: f64, seed: u64) -> Result<GridMap, GridError> {
    if width < 2 || height < 2 {
        return Err(GridError::InvalidParameter(format!("map must be at least 2x2, got {width}x{height}")));
    }
    if !(0.0..1.0).contains(&density) {
        return Err(GridError::InvalidParameter(format!("density {density} outside [0,1)")));
    }
    let area = width * height;
    let n_obs = obstacle_count(width, height, density);
    let mut rng = seed::rng_from(seed);
    let mut picked = index::sample(&mut rng, area, n_obs).into_vec();
    picked.sort_unstable();
    let cells: Vec<Cell> = picked.into_iter().map(|i| Cell::new((i % width) as i32, (i / width) as i32)).collect();
    GridMap::with_metadata(width, height, &cells, Some(density), seed)
}

/// One problem instance on a map.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Case {
    pub map_id: usize,
    pub starts: Vec<Cell>,
    pub goals: Vec<Cell>,
}

impl Case {
    pub fn new(map_id: usize, starts: Vec<Cell>, goals: Vec<Cell>) -> Self {
        Case { map_id, starts, goals }
    }

    pub fn robots(&self) -> usize {
        self.starts.len()
    }

    /// Checks the generated-case invariants against `map`.
    pub fn validate(&self, map: &GridMap) -> Result<(), GridError> {
        self.validate_placement(map)?;
        if let Some(i) = (0..self.robots()).find(|&i| self.starts[i] == self.goals[i]) {
            return Err(GridError::InfeasibleCase(format!("robot {i} starts on its goal")));
        }
        let comp = map.components();
        for i in 0..self.robots() {
            let a = comp[map.index_of(self.starts[i]).unwrap()];
            let b = comp[map.index_of(self.goals[i]).unwrap()];
            if a != b {
                return Err(GridError::InfeasibleCase(format!("robot {i} cannot reach its goal")));
            }
        }
        Ok(())
    }

    /// Distinctness and free-cell checks only; start == goal is allowed
    /// (repair instances contain robots already parked on their goals).
    pub fn validate_placement(&self, map: &GridMap) -> Result<(), GridError> {
        if self.starts.len() != self.goals.len() {
            return Err(GridError::LengthMismatch(format!(
                "{} starts vs {} goals",
                self.starts.len(),
                self.goals.len()
            )));
        }
        for (what, cells) in [("start", &self.starts), ("goal", &self.goals)] {
            let mut seen = HashSet::new();
            for &c in cells {
                if !map.is_free(c) {
                    return Err(GridError::InfeasibleCase(format!("{what} {c} is not a free cell")));
                }
                if !seen.insert(c) {
                    return Err(GridError::InfeasibleCase(format!("duplicate {what} {c}")));
                }
            }
        }
        Ok(())
    }
}

/// Draws distinct free starts and goals with start != goal per robot and each
/// goal in the same 4-connected component as its start.
pub fn generate_case(map: &GridMap, map_id: usize, robots: usize, seed: u64) -> Result<Case, GridError> {
    let free = map.free_cells();
    if robots == 0 {
        return Err(GridError::InvalidParameter("case needs at least one robot".into()));
    }
    if robots > free.len() {
        return Err(GridError::InfeasibleCase(format!("{robots} robots but only {} free cells", free.len())));
    }
    let comp = map.components();
    let comp_of = |c: Cell| comp[map.index_of(c).unwrap()];
    let mut rng = seed::rng_from(seed);
    let mut pool = free.clone();
    'attempt: for _ in 0..CASE_RETRIES {
        pool.shuffle(&mut rng);
        let starts = pool[..robots].to_vec();
        let mut goal_order = free.clone();
        goal_order.shuffle(&mut rng);
        let mut used = vec![false; goal_order.len()];
        let mut goals = Vec::with_capacity(robots);
        for &s in &starts {
            let pick = (0..goal_order.len())
                .find(|&k| !used[k] && goal_order[k] != s && comp_of(goal_order[k]) == comp_of(s));
            match pick {
                Some(k) => {
                    used[k] = true;
                    goals.push(goal_order[k]);
                }
                None => continue 'attempt,
            }
        }
        return Ok(Case::new(map_id, starts, goals));
    }
    Err(GridError::InfeasibleCase(format!("no valid assignment for {robots} robots after {CASE_RETRIES} attempts")))
}

/// Three-channel binary field-of-view tensor centred on one robot, stored
/// channel-major as `[channel][row][col]` with row = dy + r, col = dx + r.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalObservation {
    radius: usize,
    data: Vec<f64>,
}

impl LocalObservation {
    pub const CHANNELS: usize = 3;
    pub const OBSTACLES: usize = 0;
    pub const GOAL: usize = 1;
    pub const ROBOTS: usize = 2;

    pub fn zeros(radius: usize) -> Self {
        let side = 2 * radius + 1;
        LocalObservation { radius, data: vec![0.0; Self::CHANNELS * side * side] }
    }

    pub fn from_values(radius: usize, data: Vec<f64>) -> Option<Self> {
        let side = 2 * radius + 1;
        (data.len() == Self::CHANNELS * side * side).then_some(LocalObservation { radius, data })
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    fn slot(&self, channel: usize, dx: i32, dy: i32) -> usize {
        let r = self.radius as i32;
        debug_assert!(dx.abs() <= r && dy.abs() <= r);
        let side = self.side();
        channel * side * side + (dy + r) as usize * side + (dx + r) as usize
    }

    pub fn get(&self, channel: usize, dx: i32, dy: i32) -> f64 {
        self.data[self.slot(channel, dx, dy)]
    }

    fn set(&mut self, channel: usize, dx: i32, dy: i32) {
        let s = self.slot(channel, dx, dy);
        self.data[s] = 1.0;
    }

    pub fn channel(&self, channel: usize) -> &[f64] {
        let n = self.side() * self.side();
        &self.data[channel * n..(channel + 1) * n]
    }
}

/// Builds robot `i`'s field-of-view tensor. Out-of-map cells are marked as
/// obstacles; a goal outside the window is clamped componentwise onto its
/// border.
pub fn build_local_observation(
    map: &GridMap,
    positions: &[Cell],
    goals: &[Cell],
    i: usize,
    fov_radius: usize,
) -> LocalObservation {
    let mut obs = LocalObservation::zeros(fov_radius);
    let r = fov_radius as i32;
    let me = positions[i];
    for dy in -r..=r {
        for dx in -r..=r {
            if map.is_blocked(me.offset(dx, dy)) {
                obs.set(LocalObservation::OBSTACLES, dx, dy);
            }
        }
    }
    let g = goals[i];
    obs.set(LocalObservation::GOAL, (g.x - me.x).clamp(-r, r), (g.y - me.y).clamp(-r, r));
    obs.set(LocalObservation::ROBOTS, 0, 0);
    for (j, &p) in positions.iter().enumerate() {
        let (dx, dy) = (p.x - me.x, p.y - me.y);
        if j != i && dx.abs() <= r && dy.abs() <= r {
            obs.set(LocalObservation::ROBOTS, dx, dy);
        }
    }
    obs
}

pub fn build_observations(map: &GridMap, positions: &[Cell], goals: &[Cell], fov_radius: usize) -> Vec<LocalObservation> {
    (0..positions.len()).map(|i| build_local_observation(map, positions, goals, i, fov_radius)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GsoNormalization {
    Spectral,
    None,
}

/// Graph shift operator of the communication graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Gso {
    n: usize,
    matrix: Vec<f64>,
    comm_radius: f64,
    normalization: GsoNormalization,
}

impl Gso {
    /// Wraps an explicit row-major matrix (used for tests and synthetic graphs).
    pub fn from_matrix(n: usize, matrix: Vec<f64>) -> Option<Self> {
        (matrix.len() == n * n).then_some(Gso { n, matrix, comm_radius: f64::NAN, normalization: GsoNormalization::None })
    }

    pub fn zeros(n: usize) -> Self {
        Gso { n, matrix: vec![0.0; n * n], comm_radius: 0.0, normalization: GsoNormalization::None }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.n + j]
    }

    pub fn comm_radius(&self) -> f64 {
        self.comm_radius
    }

    pub fn normalization(&self) -> GsoNormalization {
        self.normalization
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.get(i, j) != 0.0
    }

    /// Hop distances from `src` in the graph (`usize::MAX` if disconnected).
    pub fn hops_from(&self, src: usize) -> Vec<usize> {
        let mut hops = vec![usize::MAX; self.n];
        hops[src] = 0;
        let mut queue = VecDeque::from([src]);
        while let Some(i) = queue.pop_front() {
            for j in 0..self.n {
                if self.has_edge(i, j) && hops[j] == usize::MAX {
                    hops[j] = hops[i] + 1;
                    queue.push_back(j);
                }
            }
        }
        hops
    }

    /// Largest eigenvalue magnitude.
    pub fn spectral_radius(&self) -> f64 {
        spectral_radius(self.n, &self.matrix)
    }

    /// Conjugates by a robot permutation: row/col `i` of the result is
    /// row/col `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Gso {
        let n = self.n;
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                m[i * n + j] = self.matrix[perm[i] * n + perm[j]];
            }
        }
        Gso { n, matrix: m, comm_radius: self.comm_radius, normalization: self.normalization }
    }
}

fn spectral_radius(n: usize, m: &[f64]) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let mat = DMatrix::from_row_slice(n, n, m);
    mat.symmetric_eigenvalues().iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

/// Binary adjacency on `‖p_i − p_j‖ ≤ r_comm`, divided by its spectral radius
/// when any edge exists.
pub fn build_gso(positions: &[Cell], comm_radius: f64) -> Gso {
    let n = positions.len();
    let mut matrix = vec![0.0; n * n];
    let r2 = comm_radius * comm_radius;
    let mut any = false;
    for i in 0..n {
        for j in (i + 1)..n {
            if (positions[i].dist_sq(positions[j]) as f64) <= r2 {
                matrix[i * n + j] = 1.0;
                matrix[j * n + i] = 1.0;
                any = true;
            }
        }
    }
    if any {
        let lambda = spectral_radius(n, &matrix);
        for v in matrix.iter_mut() {
            *v /= lambda;
        }
    }
    Gso { n, matrix, comm_radius, normalization: GsoNormalization::Spectral }
}

/// Raw transition without legality checks beyond the map border.
pub fn step_positions(map: &GridMap, positions: &[Cell], actions: &[Action]) -> Result<Vec<Cell>, GridError> {
    if positions.len() != actions.len() {
        return Err(GridError::LengthMismatch(format!("{} positions vs {} actions", positions.len(), actions.len())));
    }
    positions
        .iter()
        .zip(actions)
        .enumerate()
        .map(|(robot, (&p, &a))| {
            let q = a.apply(p);
            if map.in_bounds(q) {
                Ok(q)
            } else {
                Err(GridError::OutOfBounds { robot, x: q.x, y: q.y })
            }
        })
        .collect()
}

/// Effective density `(N + n_obs) / (W·H)` of an environment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensitySpec {
    pub robots: usize,
    pub obstacle_density: f64,
    pub width: usize,
    pub height: usize,
}

impl DensitySpec {
    pub fn new(robots: usize, obstacle_density: f64, width: usize, height: usize) -> Self {
        DensitySpec { robots, obstacle_density, width, height }
    }

    pub fn effective(&self) -> f64 {
        let area = self.width * self.height;
        (self.robots + obstacle_count(self.width, self.height, self.obstacle_density)) as f64 / area as f64
    }

    /// Square environment for `robots` robots whose effective density is
    /// closest to this one (same obstacle density).
    pub fn scaled_to(&self, robots: usize) -> DensitySpec {
        let target = self.effective();
        let excess = (target - self.obstacle_density).max(1e-12);
        let guess = ((robots as f64 / excess).sqrt().round() as usize).max(2);
        let mut best = DensitySpec::new(robots, self.obstacle_density, guess, guess);
        for side in guess.saturating_sub(3).max(2)..=guess + 3 {
            let cand = DensitySpec::new(robots, self.obstacle_density, side, side);
            if cand.robots + obstacle_count(side, side, self.obstacle_density) > side * side {
                continue;
            }
            if (cand.effective() - target).abs() < (best.effective() - target).abs() {
                best = cand;
            }
        }
        best
    }
}
