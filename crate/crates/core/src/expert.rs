//! Optimal centralized expert: Conflict-Based Search over space-time A*,
//! plus an exhaustive joint-state search used as ground truth in tests.
//!
//! Cost model: a robot's cost is the time at which it reaches its goal for
//! the last time; waiting at the goal afterwards is free. Resting robots stay
//! on the grid and block other robots.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::rc::Rc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridworld::{Action, Case, Cell, GridMap};

pub const DEFAULT_TIMEOUT_S: f64 = 300.0;

/// Upper bound on joint states explored by [`joint_bfs_oracle`].
pub const ORACLE_STATE_LIMIT: u128 = 10_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExpertError {
    #[error("no path from {start} to {goal} within {horizon} steps")]
    Unreachable { start: Cell, goal: Cell, horizon: usize },
    #[error("expert timed out after {0:.3} s")]
    Timeout(f64),
    #[error("instance has no collision-free solution")]
    Infeasible,
    #[error("joint state space too large ({0} states)")]
    TooLarge(u128),
    #[error("invalid instance: {0}")]
    InvalidCase(String),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
}

/// Per-robot collision-free paths indexed by time.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plan {
    pub paths: Vec<Vec<Cell>>,
    pub flowtime: usize,
    pub makespan: usize,
}

impl Plan {
    /// Trims trailing waits from each path and derives the costs.
    pub fn from_paths(mut paths: Vec<Vec<Cell>>) -> Plan {
        for p in paths.iter_mut() {
            while p.len() > 1 && p[p.len() - 1] == p[p.len() - 2] {
                p.pop();
            }
        }
        let costs = paths.iter().map(|p| p.len().saturating_sub(1));
        let flowtime = costs.clone().sum();
        let makespan = costs.max().unwrap_or(0);
        Plan { paths, flowtime, makespan }
    }

    pub fn robots(&self) -> usize {
        self.paths.len()
    }

    pub fn cost(&self, robot: usize) -> usize {
        self.paths[robot].len() - 1
    }

    /// Position at time `t`; robots rest at their last cell.
    pub fn position(&self, robot: usize, t: usize) -> Cell {
        let p = &self.paths[robot];
        p[t.min(p.len() - 1)]
    }

    pub fn positions_at(&self, t: usize) -> Vec<Cell> {
        (0..self.robots()).map(|i| self.position(i, t)).collect()
    }

    /// Checks endpoints, unit moves, free cells, cost bookkeeping and
    /// absence of conflicts.
    pub fn validate(&self, map: &GridMap, case: &Case) -> Result<(), ExpertError> {
        let bad = |m: String| Err(ExpertError::InvalidPlan(m));
        if self.robots() != case.robots() {
            return bad(format!("{} paths for {} robots", self.robots(), case.robots()));
        }
        for (i, p) in self.paths.iter().enumerate() {
            if p.first() != Some(&case.starts[i]) || p.last() != Some(&case.goals[i]) {
                return bad(format!("robot {i} path does not join its start and goal"));
            }
            if let Some(c) = p.iter().find(|c| map.is_blocked(**c)) {
                return bad(format!("robot {i} path enters blocked cell {c}"));
            }
            if p.windows(2).any(|w| w[0].manhattan(w[1]) > 1) {
                return bad(format!("robot {i} path jumps"));
            }
        }
        let trimmed = Plan::from_paths(self.paths.clone());
        if trimmed.flowtime != self.flowtime || trimmed.makespan != self.makespan {
            return bad(format!(
                "costs ({}, {}) do not match paths ({}, {})",
                self.flowtime, self.makespan, trimmed.flowtime, trimmed.makespan
            ));
        }
        if let Some(c) = detect_first_conflict(&self.paths) {
            return bad(format!("conflict {c:?}"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConstraintKind {
    /// Robot may not occupy `cell` at `time`.
    Vertex { cell: Cell },
    /// Robot may not traverse `from -> to` arriving at `time`.
    Edge { from: Cell, to: Cell },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Constraint {
    pub robot: usize,
    pub kind: ConstraintKind,
    pub time: usize,
}

impl Constraint {
    pub fn vertex(robot: usize, cell: Cell, time: usize) -> Self {
        Constraint { robot, kind: ConstraintKind::Vertex { cell }, time }
    }

    pub fn edge(robot: usize, from: Cell, to: Cell, time: usize) -> Self {
        debug_assert_eq!(from.manhattan(to), 1);
        Constraint { robot, kind: ConstraintKind::Edge { from, to }, time }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Conflict {
    /// Robots `a < b` share `cell` at `time`.
    Vertex { a: usize, b: usize, cell: Cell, time: usize },
    /// Robot `a` moves `from -> to` while `b` moves `to -> from`, arriving at `time`.
    Edge { a: usize, b: usize, from: Cell, to: Cell, time: usize },
}

impl Conflict {
    pub fn time(&self) -> usize {
        match *self {
            Conflict::Vertex { time, .. } | Conflict::Edge { time, .. } => time,
        }
    }
}

fn at(path: &[Cell], t: usize) -> Cell {
    path[t.min(path.len() - 1)]
}

/// Earliest conflict between any two paths; at equal times vertex conflicts
/// come first, then pairs in index order.
pub fn detect_first_conflict(paths: &[Vec<Cell>]) -> Option<Conflict> {
    let horizon = paths.iter().map(Vec::len).max()?;
    for t in 0..horizon {
        for a in 0..paths.len() {
            for b in (a + 1)..paths.len() {
                if at(&paths[a], t) == at(&paths[b], t) {
                    return Some(Conflict::Vertex { a, b, cell: at(&paths[a], t), time: t });
                }
            }
        }
        if t == 0 {
            continue;
        }
        for a in 0..paths.len() {
            for b in (a + 1)..paths.len() {
                let (fa, ta) = (at(&paths[a], t - 1), at(&paths[a], t));
                let (fb, tb) = (at(&paths[b], t - 1), at(&paths[b], t));
                if fa != ta && fa == tb && ta == fb {
                    return Some(Conflict::Edge { a, b, from: fa, to: ta, time: t });
                }
            }
        }
    }
    None
}

/// Default low-level horizon for a map.
pub fn default_horizon(map: &GridMap) -> usize {
    4 * (map.width() + map.height())
}

struct ConstraintTable {
    vertex: HashSet<(Cell, usize)>,
    edge: HashSet<(Cell, Cell, usize)>,
    latest: Option<usize>,
    latest_at_goal: Option<usize>,
}

impl ConstraintTable {
    fn new<'a>(goal: Cell, constraints: impl IntoIterator<Item = &'a Constraint>) -> Self {
        let mut table = ConstraintTable { vertex: HashSet::new(), edge: HashSet::new(), latest: None, latest_at_goal: None };
        for c in constraints {
            table.latest = table.latest.max(Some(c.time));
            match c.kind {
                ConstraintKind::Vertex { cell } => {
                    table.vertex.insert((cell, c.time));
                    if cell == goal {
                        table.latest_at_goal = table.latest_at_goal.max(Some(c.time));
                    }
                }
                ConstraintKind::Edge { from, to } => {
                    table.edge.insert((from, to, c.time));
                }
            }
        }
        table
    }

    fn allows(&self, from: Cell, to: Cell, t: usize) -> bool {
        !self.vertex.contains(&(to, t)) && !self.edge.contains(&(from, to, t))
    }
}

/// Space-time A* for a single robot. Returns the path up to its final
/// arrival at `goal` (no trailing waits).
///
/// Ties are broken by lower f, then lower g, then expansion order with
/// actions tried as idle < up < left < down < right.
pub fn low_level_search(
    map: &GridMap,
    start: Cell,
    goal: Cell,
    constraints: &[Constraint],
    horizon: usize,
) -> Result<Vec<Cell>, ExpertError> {
    let dist = map.distances_to(goal);
    search_with_distances(map, &dist, start, goal, constraints.iter(), horizon)
}

fn search_with_distances<'a>(
    map: &GridMap,
    dist: &[u32],
    start: Cell,
    goal: Cell,
    constraints: impl IntoIterator<Item = &'a Constraint>,
    horizon: usize,
) -> Result<Vec<Cell>, ExpertError> {
    let unreachable = ExpertError::Unreachable { start, goal, horizon };
    let h = |c: Cell| map.index_of(c).map_or(u32::MAX, |i| dist[i]);
    if map.is_blocked(start) || map.is_blocked(goal) || h(start) == u32::MAX {
        return Err(unreachable);
    }
    let table = ConstraintTable::new(goal, constraints);
    // Beyond the last constrained time, (cell, t) and (cell, t + 1) are
    // interchangeable, so times are capped for the closed set.
    let cap = table.latest.map_or(0, |t| t + 1);
    let done_after = table.latest_at_goal;

    struct Node {
        cell: Cell,
        t: usize,
        parent: usize,
    }
    let mut nodes = vec![Node { cell: start, t: 0, parent: usize::MAX }];
    let mut open = BinaryHeap::new();
    open.push(Reverse((h(start) as usize, 0usize, 0usize)));
    let mut closed: HashSet<(Cell, usize)> = HashSet::new();

    while let Some(Reverse((_, _, id))) = open.pop() {
        let (cell, t) = (nodes[id].cell, nodes[id].t);
        if !closed.insert((cell, t.min(cap))) {
            continue;
        }
        if cell == goal && done_after.is_none_or(|last| t > last) {
            let mut path = Vec::with_capacity(t + 1);
            let mut k = id;
            while k != usize::MAX {
                path.push(nodes[k].cell);
                k = nodes[k].parent;
            }
            path.reverse();
            return Ok(path);
        }
        if t >= horizon {
            continue;
        }
        for a in Action::ALL {
            let next = a.apply(cell);
            let hn = h(next);
            if hn == u32::MAX || !table.allows(cell, next, t + 1) {
                continue;
            }
            if closed.contains(&(next, (t + 1).min(cap))) {
                continue;
            }
            nodes.push(Node { cell: next, t: t + 1, parent: id });
            open.push(Reverse((t + 1 + hn as usize, t + 1, nodes.len() - 1)));
        }
    }
    Err(unreachable)
}

struct ConstraintLink {
    constraint: Constraint,
    parent: Option<Rc<ConstraintLink>>,
}

fn constraints_for(mut link: &Option<Rc<ConstraintLink>>, robot: usize) -> Vec<Constraint> {
    let mut out = Vec::new();
    while let Some(l) = link {
        if l.constraint.robot == robot {
            out.push(l.constraint);
        }
        link = &l.parent;
    }
    out
}

struct CtNode {
    constraints: Option<Rc<ConstraintLink>>,
    paths: Vec<Rc<Vec<Cell>>>,
}

/// Summary of a CBS run.
#[derive(Clone, Debug, PartialEq)]
pub struct CbsOutcome {
    pub plan: Plan,
    pub expanded: usize,
    pub generated: usize,
}

/// Conflict-Based Search with a wall-clock budget.
#[derive(Clone, Debug)]
pub struct CbsSolver {
    pub timeout: Duration,
    /// Low-level horizon; `None` uses [`default_horizon`].
    pub horizon: Option<usize>,
}

impl Default for CbsSolver {
    fn default() -> Self {
        CbsSolver { timeout: Duration::from_secs_f64(DEFAULT_TIMEOUT_S), horizon: None }
    }
}

impl CbsSolver {
    pub fn with_timeout(timeout: Duration) -> Self {
        CbsSolver { timeout, horizon: None }
    }

    pub fn solve(&self, map: &GridMap, case: &Case) -> Result<CbsOutcome, ExpertError> {
        case.validate_placement(map).map_err(|e| ExpertError::InvalidCase(e.to_string()))?;
        let started = Instant::now();
        let horizon = self.horizon.unwrap_or_else(|| default_horizon(map));
        let n = case.robots();
        let dists: Vec<Vec<u32>> = case.goals.iter().map(|&g| map.distances_to(g)).collect();
        let replan = |robot: usize, link: &Option<Rc<ConstraintLink>>| {
            let cs = constraints_for(link, robot);
            search_with_distances(map, &dists[robot], case.starts[robot], case.goals[robot], &cs, horizon)
        };

        let mut root_paths = Vec::with_capacity(n);
        for i in 0..n {
            match replan(i, &None) {
                Ok(p) => root_paths.push(Rc::new(p)),
                Err(ExpertError::Unreachable { .. }) => return Err(ExpertError::Infeasible),
                Err(e) => return Err(e),
            }
        }
        let cost: usize = root_paths.iter().map(|p| p.len() - 1).sum();
        let mut nodes = vec![CtNode { constraints: None, paths: root_paths }];
        let mut open = BinaryHeap::new();
        open.push(Reverse((cost, 0usize)));
        let mut expanded = 0;

        while let Some(Reverse((_, id))) = open.pop() {
            if started.elapsed() > self.timeout {
                return Err(ExpertError::Timeout(started.elapsed().as_secs_f64()));
            }
            expanded += 1;
            if expanded == REACHABILITY_PROBE_AFTER && !reachability_probe(map, case) {
                return Err(ExpertError::Infeasible);
            }
            let paths: Vec<Vec<Cell>> = nodes[id].paths.iter().map(|p| p.as_ref().clone()).collect();
            let Some(conflict) = detect_first_conflict(&paths) else {
                return Ok(CbsOutcome { plan: Plan::from_paths(paths), expanded, generated: nodes.len() });
            };
            let branches = match conflict {
                Conflict::Vertex { a, b, cell, time } => {
                    [Constraint::vertex(a, cell, time), Constraint::vertex(b, cell, time)]
                }
                Conflict::Edge { a, b, from, to, time } => {
                    [Constraint::edge(a, from, to, time), Constraint::edge(b, to, from, time)]
                }
            };
            for c in branches {
                let link = Some(Rc::new(ConstraintLink { constraint: c, parent: nodes[id].constraints.clone() }));
                let path = match replan(c.robot, &link) {
                    Ok(p) => p,
                    Err(ExpertError::Unreachable { .. }) => continue,
                    Err(e) => return Err(e),
                };
                let mut child_paths = nodes[id].paths.clone();
                child_paths[c.robot] = Rc::new(path);
                let cost: usize = child_paths.iter().map(|p| p.len() - 1).sum();
                nodes.push(CtNode { constraints: link, paths: child_paths });
                open.push(Reverse((cost, nodes.len() - 1)));
            }
            // The expanded node is never revisited.
            nodes[id].paths = Vec::new();
        }
        Err(ExpertError::Infeasible)
    }
}

/// CT expansions after which CBS checks whether the goal configuration is
/// reachable at all. Plain CBS cannot terminate quickly on unsolvable
/// instances such as corridor swaps.
pub const REACHABILITY_PROBE_AFTER: usize = 64;

/// Joint-space size up to which the probe checks the whole team exactly.
const PROBE_JOINT_LIMIT: usize = 200_000;

/// False only when the instance is provably unsolvable: either the whole
/// team (small joint spaces) or some pair of robots, considered alone,
/// cannot reach its goal configuration.
fn reachability_probe(map: &GridMap, case: &Case) -> bool {
    let n = case.robots();
    if group_reachable(map, &case.starts, &case.goals, PROBE_JOINT_LIMIT) == Some(false) {
        return false;
    }
    for a in 0..n {
        for b in (a + 1)..n {
            let starts = [case.starts[a], case.starts[b]];
            let goals = [case.goals[a], case.goals[b]];
            if group_reachable(map, &starts, &goals, usize::MAX) == Some(false) {
                return false;
            }
        }
    }
    true
}

/// Reachability of `goals` from `starts` for a group of robots moving under
/// the vertex and swap rules, ignoring everyone else. Explores greedily by
/// summed goal distance, so reachable configurations are usually found
/// quickly; unreachable ones exhaust the joint space. `None` when that space
/// exceeds `limit`.
fn group_reachable(map: &GridMap, starts: &[Cell], goals: &[Cell], limit: usize) -> Option<bool> {
    let area = map.area() as u128;
    let size = (map.free_cells().len() as u128).checked_pow(starts.len() as u32)?;
    if size > limit as u128 || area.checked_pow(starts.len() as u32)? > u64::MAX as u128 {
        return None;
    }
    let dists: Vec<Vec<u32>> = goals.iter().map(|&g| map.distances_to(g)).collect();
    let encode = |cells: &[Cell]| cells.iter().fold(0u64, |acc, &c| acc * area as u64 + map.index_of(c).expect("on map") as u64);
    let h = |cells: &[Cell]| -> u64 { cells.iter().zip(&dists).map(|(&c, d)| d[map.index_of(c).expect("on map")] as u64).sum() };
    let target = encode(goals);
    let mut seen: HashSet<u64> = HashSet::from([encode(starts)]);
    let mut open = BinaryHeap::from([Reverse((h(starts), 0usize))]);
    let mut states = vec![starts.to_vec()];
    while let Some(Reverse((_, id))) = open.pop() {
        let cur = std::mem::take(&mut states[id]);
        if encode(&cur) == target {
            return Some(true);
        }
        let mut next = cur.clone();
        let mut push = |cand: &[Cell]| {
            if seen.insert(encode(cand)) {
                states.push(cand.to_vec());
                open.push(Reverse((h(cand), states.len() - 1)));
            }
        };
        joint_moves(map, &cur, 0, &mut next, &mut push);
    }
    Some(false)
}

fn joint_moves(map: &GridMap, cur: &[Cell], k: usize, next: &mut Vec<Cell>, out: &mut dyn FnMut(&[Cell])) {
    if k == cur.len() {
        out(next);
        return;
    }
    for a in Action::ALL {
        let to = a.apply(cur[k]);
        if map.is_blocked(to) {
            continue;
        }
        let clash = (0..k).any(|j| next[j] == to || (next[j] == cur[k] && cur[j] == to && to != cur[k]));
        if !clash {
            next[k] = to;
            joint_moves(map, cur, k + 1, next, out);
        }
    }
    next[k] = cur[k];
}

/// Sum-of-costs optimal CBS with the given wall-clock budget.
pub fn cbs_solve(map: &GridMap, case: &Case, timeout: Duration) -> Result<Plan, ExpertError> {
    CbsSolver::with_timeout(timeout).solve(map, case).map(|o| o.plan)
}

/// Objective minimised by [`joint_bfs_oracle`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OracleCost {
    Flowtime,
}

/// Exhaustive uniform-cost search over joint states `(positions, finished)`,
/// where a robot standing on its goal may commit to resting there forever.
/// Each step costs one per uncommitted robot, so total cost is flowtime.
pub fn joint_bfs_oracle(map: &GridMap, case: &Case, _cost: OracleCost) -> Result<Plan, ExpertError> {
    case.validate_placement(map).map_err(|e| ExpertError::InvalidCase(e.to_string()))?;
    let n = case.robots();
    let free = map.free_cells();
    let bound = (free.len() as u128).saturating_pow(n as u32).saturating_mul(1u128 << n.min(64));
    if bound > ORACLE_STATE_LIMIT {
        return Err(ExpertError::TooLarge(bound));
    }
    let slot_of: HashMap<Cell, u16> = free.iter().enumerate().map(|(k, &c)| (c, k as u16)).collect();

    #[derive(Clone, PartialEq, Eq, Hash)]
    struct State {
        pos: Vec<u16>,
        done: u64,
    }
    let goal_slot: Vec<u16> = case.goals.iter().map(|g| slot_of[g]).collect();
    let start = State { pos: case.starts.iter().map(|s| slot_of[s]).collect(), done: 0 };
    let all_done = if n == 64 { u64::MAX } else { (1u64 << n) - 1 };

    let mut ids: HashMap<State, usize> = HashMap::new();
    let mut states: Vec<State> = Vec::new();
    let mut parent: Vec<usize> = Vec::new();
    let mut best: Vec<usize> = Vec::new();
    let mut settled: Vec<bool> = Vec::new();
    let mut intern = |s: State, states: &mut Vec<State>, parent: &mut Vec<usize>, best: &mut Vec<usize>, settled: &mut Vec<bool>| {
        *ids.entry(s.clone()).or_insert_with(|| {
            states.push(s);
            parent.push(usize::MAX);
            best.push(usize::MAX);
            settled.push(false);
            states.len() - 1
        })
    };
    let s0 = intern(start, &mut states, &mut parent, &mut best, &mut settled);
    best[s0] = 0;
    let mut open = BinaryHeap::new();
    let mut seq = 0usize;
    open.push(Reverse((0usize, seq, s0)));

    let mut target = None;
    let mut succ: Vec<(State, usize)> = Vec::new();
    while let Some(Reverse((g, _, id))) = open.pop() {
        if settled[id] {
            continue;
        }
        settled[id] = true;
        if states[id].done == all_done {
            target = Some(id);
            break;
        }
        succ.clear();
        expand_joint(map, &free, &slot_of, &goal_slot, &states[id].pos, states[id].done, &mut |pos, done| {
            let step_cost = n - done.count_ones() as usize;
            succ.push((State { pos, done }, step_cost));
        });
        for (s, c) in succ.drain(..) {
            let sid = intern(s, &mut states, &mut parent, &mut best, &mut settled);
            if !settled[sid] && g + c < best[sid] {
                best[sid] = g + c;
                parent[sid] = id;
                seq += 1;
                open.push(Reverse((g + c, seq, sid)));
            }
        }
    }
    let Some(mut cur) = target else {
        return Err(ExpertError::Infeasible);
    };
    let mut chain = vec![cur];
    while parent[cur] != usize::MAX {
        cur = parent[cur];
        chain.push(cur);
    }
    chain.reverse();
    // A robot's path ends at the last state before it commits.
    let mut paths: Vec<Vec<Cell>> = vec![Vec::new(); n];
    for &sid in &chain {
        let st = &states[sid];
        for (i, path) in paths.iter_mut().enumerate() {
            if st.done & (1 << i) == 0 {
                path.push(free[st.pos[i] as usize]);
            }
        }
    }
    let plan = Plan::from_paths(paths);
    debug_assert_eq!(plan.flowtime, best[*chain.last().unwrap()]);
    Ok(plan)
}

/// Enumerates legal joint successors. Robots that commit this step stay put
/// and are marked done.
fn expand_joint(
    map: &GridMap,
    free: &[Cell],
    slot_of: &HashMap<Cell, u16>,
    goal_slot: &[u16],
    pos: &[u16],
    done: u64,
    emit: &mut dyn FnMut(Vec<u16>, u64),
) {
    let n = pos.len();
    // Per-robot options: (target slot, commits).
    let options: Vec<Vec<(u16, bool)>> = (0..n)
        .map(|i| {
            if done & (1 << i) != 0 {
                return vec![(pos[i], false)];
            }
            let here = free[pos[i] as usize];
            let mut opts = Vec::with_capacity(6);
            if pos[i] == goal_slot[i] {
                opts.push((pos[i], true));
            }
            for a in Action::ALL {
                let c = a.apply(here);
                if map.is_free(c) {
                    opts.push((slot_of[&c], false));
                }
            }
            opts
        })
        .collect();
    let mut choice = vec![0usize; n];
    loop {
        let targets: Vec<u16> = (0..n).map(|i| options[i][choice[i]].0).collect();
        let legal = (0..n).all(|a| {
            ((a + 1)..n).all(|b| targets[a] != targets[b] && !(targets[a] == pos[b] && targets[b] == pos[a] && pos[a] != pos[b]))
        });
        if legal {
            let mut nd = done;
            for i in 0..n {
                if options[i][choice[i]].1 {
                    nd |= 1 << i;
                }
            }
            emit(targets, nd);
        }
        let mut k = 0;
        loop {
            if k == n {
                return;
            }
            choice[k] += 1;
            if choice[k] < options[k].len() {
                break;
            }
            choice[k] = 0;
            k += 1;
        }
    }
}

/// Parameters of a seeded CBS-versus-oracle comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleCheckConfig {
    /// Solvable instances to compare.
    pub instances: usize,
    pub max_robots: usize,
    /// Largest grid side; sides are drawn from `2..=max_size`.
    pub max_size: usize,
    pub max_density: f64,
    pub seed: u64,
    pub timeout_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OracleMismatch {
    pub draw: usize,
    pub case: Option<Case>,
    pub width: usize,
    pub height: usize,
    pub obstacles: Vec<Cell>,
    pub cbs: String,
    pub oracle: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OracleCheckReport {
    /// Instances where the oracle found a solution.
    pub compared: usize,
    /// Draws both solvers agreed were unsolvable.
    pub infeasible_agreed: usize,
    pub draws: usize,
    pub mismatches: Vec<OracleMismatch>,
}

/// Draws seeded small instances until `instances` solvable ones have been
/// compared (or a draw cap is reached). A mismatch is any disagreement in
/// flowtime or feasibility, or a CBS plan that fails validation.
pub fn oracle_check(cfg: &OracleCheckConfig) -> OracleCheckReport {
    use rand::Rng;
    let mut report = OracleCheckReport::default();
    let solver = CbsSolver::with_timeout(Duration::from_secs_f64(cfg.timeout_s));
    let max_draws = cfg.instances.saturating_mul(50).max(1000);
    let max_size = cfg.max_size.max(2);
    while report.compared < cfg.instances && report.draws < max_draws {
        let draw = report.draws;
        report.draws += 1;
        let mut rng = crate::seed::stream(cfg.seed, &[8, draw as u64]);
        let (w, h) = (rng.gen_range(2..=max_size), rng.gen_range(2..=max_size));
        let density = rng.gen_range(0.0..=cfg.max_density.max(0.0));
        let robots = rng.gen_range(1..=cfg.max_robots.max(1));
        let Ok(map) = crate::gridworld::generate_map(w, h, density, rng.gen()) else { continue };
        let Ok(case) = crate::gridworld::generate_case(&map, 0, robots, rng.gen()) else { continue };
        let cbs = solver.solve(&map, &case).map(|o| o.plan);
        let oracle = joint_bfs_oracle(&map, &case, OracleCost::Flowtime);
        let agree = match (&cbs, &oracle) {
            (Ok(a), Ok(b)) => {
                report.compared += 1;
                a.flowtime == b.flowtime && a.validate(&map, &case).is_ok()
            }
            (Err(ExpertError::Infeasible), Err(ExpertError::Infeasible)) => {
                report.infeasible_agreed += 1;
                true
            }
            (_, Err(ExpertError::TooLarge(_))) => continue,
            (_, Ok(_)) => {
                report.compared += 1;
                false
            }
            _ => false,
        };
        if !agree {
            let show = |r: &Result<Plan, ExpertError>| match r {
                Ok(p) => format!("flowtime {}", p.flowtime),
                Err(e) => e.to_string(),
            };
            report.mismatches.push(OracleMismatch {
                draw,
                case: Some(case.clone()),
                width: w,
                height: h,
                obstacles: map.obstacles(),
                cbs: show(&cbs),
                oracle: show(&oracle),
            });
        }
    }
    report
}

/// One-hot action labels `[t][robot]` for `t in 0..makespan`; robots that
/// have arrived emit idle.
pub fn plan_to_labels(plan: &Plan) -> Vec<Vec<Action>> {
    (0..plan.makespan)
        .map(|t| {
            (0..plan.robots())
                .map(|i| {
                    Action::between(plan.position(i, t), plan.position(i, t + 1))
                        .expect("plan paths move by unit steps")
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{generate_case, generate_map, step_positions};
    use proptest::prelude::*;

    fn c(x: i32, y: i32) -> Cell {
        Cell::new(x, y)
    }

    const LONG: Duration = Duration::from_secs(30);

    #[test]
    fn oracle_check_small_run_agrees() {
        let cfg = OracleCheckConfig { instances: 40, max_robots: 3, max_size: 4, max_density: 0.2, seed: 3, timeout_s: 30.0 };
        let a = oracle_check(&cfg);
        assert_eq!(a.compared, 40);
        assert!(a.mismatches.is_empty(), "{:?}", a.mismatches);
        assert_eq!(a, oracle_check(&cfg));
    }

    #[test]
    fn low_level_examples() {
        let m = GridMap::empty(5, 5);
        let p = low_level_search(&m, c(0, 0), c(0, 3), &[], 40).unwrap();
        assert_eq!(p.len() - 1, 3);
        let blocked = [Constraint::vertex(0, c(0, 1), 1)];
        let p = low_level_search(&m, c(0, 0), c(0, 3), &blocked, 40).unwrap();
        // Detours around (0,1) also need 4 steps on an open grid, so check the
        // cost rather than the route.
        assert_eq!(p.len() - 1, 4);
        assert_ne!(p[1], c(0, 1));

        let walled = GridMap::from_obstacles(5, 5, &[c(3, 4), c(4, 3)]).unwrap();
        assert!(matches!(
            low_level_search(&walled, c(0, 0), c(4, 4), &[], 40),
            Err(ExpertError::Unreachable { .. })
        ));
    }

    #[test]
    fn low_level_corridor_wait() {
        // In a 1-wide corridor the only answer to the vertex constraint is a wait.
        let m = GridMap::empty(1, 4);
        let p = low_level_search(&m, c(0, 0), c(0, 3), &[Constraint::vertex(0, c(0, 1), 1)], 40).unwrap();
        assert_eq!(p, vec![c(0, 0), c(0, 0), c(0, 1), c(0, 2), c(0, 3)]);
    }

    #[test]
    fn goal_constraint_forces_late_arrival() {
        let m = GridMap::empty(1, 3);
        let p = low_level_search(&m, c(0, 0), c(0, 2), &[Constraint::vertex(0, c(0, 2), 5)], 40).unwrap();
        assert_eq!(p.len() - 1, 6);
        assert_eq!(*p.last().unwrap(), c(0, 2));
        assert_ne!(p[5], c(0, 2));
    }

    #[test]
    fn conflict_detection() {
        let v = detect_first_conflict(&[vec![c(0, 1), c(1, 1), c(1, 1)], vec![c(2, 1), c(2, 2), c(1, 1)]]);
        assert_eq!(v, Some(Conflict::Vertex { a: 0, b: 1, cell: c(1, 1), time: 2 }));
        let e = detect_first_conflict(&[vec![c(0, 0), c(0, 1)], vec![c(0, 1), c(0, 0)]]);
        assert_eq!(e, Some(Conflict::Edge { a: 0, b: 1, from: c(0, 0), to: c(0, 1), time: 1 }));
        assert_eq!(detect_first_conflict(&[vec![c(0, 0), c(1, 0)], vec![c(3, 3), c(3, 2)]]), None);
        // A robot resting at its goal still occupies it.
        let rest = detect_first_conflict(&[vec![c(1, 0)], vec![c(0, 0), c(1, 0)]]);
        assert_eq!(rest, Some(Conflict::Vertex { a: 0, b: 1, cell: c(1, 0), time: 1 }));
    }

    #[test]
    fn cbs_single_robot() {
        let m = GridMap::empty(20, 20);
        let plan = cbs_solve(&m, &Case::new(0, vec![c(0, 0)], vec![c(3, 0)]), LONG).unwrap();
        assert_eq!((plan.flowtime, plan.makespan), (3, 3));
    }

    #[test]
    fn cbs_corridor_swap_with_side_pocket() {
        // 3x1 corridor with a pocket under the middle cell.
        let m = GridMap::from_obstacles(3, 2, &[c(0, 1), c(2, 1)]).unwrap();
        let case = Case::new(0, vec![c(0, 0), c(2, 0)], vec![c(2, 0), c(0, 0)]);
        let plan = cbs_solve(&m, &case, LONG).unwrap();
        let oracle = joint_bfs_oracle(&m, &case, OracleCost::Flowtime).unwrap();
        plan.validate(&m, &case).unwrap();
        oracle.validate(&m, &case).unwrap();
        assert_eq!(plan.flowtime, oracle.flowtime);
        // One robot detours through the pocket (4 steps) while the other passes (3 steps).
        assert_eq!(oracle.flowtime, 7);
    }

    #[test]
    fn bare_swap_is_infeasible() {
        let m = GridMap::empty(2, 1);
        let case = Case::new(0, vec![c(0, 0), c(1, 0)], vec![c(1, 0), c(0, 0)]);
        assert_eq!(cbs_solve(&m, &case, LONG), Err(ExpertError::Infeasible));
        assert_eq!(joint_bfs_oracle(&m, &case, OracleCost::Flowtime), Err(ExpertError::Infeasible));
    }

    #[test]
    fn oracle_crossing_diagonals() {
        let m = GridMap::empty(3, 3);
        let case = Case::new(0, vec![c(0, 0), c(2, 0)], vec![c(2, 2), c(0, 2)]);
        let o = joint_bfs_oracle(&m, &case, OracleCost::Flowtime).unwrap();
        let p = cbs_solve(&m, &case, LONG).unwrap();
        assert_eq!(o.flowtime, 8);
        assert_eq!(p.flowtime, o.flowtime);
    }

    #[test]
    fn oracle_rejects_large_spaces() {
        let m = GridMap::empty(20, 20);
        let case = Case::new(0, vec![c(0, 0), c(1, 0), c(2, 0)], vec![c(5, 5), c(6, 6), c(7, 7)]);
        assert!(matches!(joint_bfs_oracle(&m, &case, OracleCost::Flowtime), Err(ExpertError::TooLarge(_))));
    }

    #[test]
    fn timeout_is_reported() {
        let m = GridMap::empty(2, 1);
        let case = Case::new(0, vec![c(0, 0), c(1, 0)], vec![c(1, 0), c(0, 0)]);
        let r = cbs_solve(&m, &case, Duration::ZERO);
        assert!(matches!(r, Err(ExpertError::Timeout(_))));
    }

    #[test]
    fn labels_follow_the_coordinate_convention() {
        let up = Plan::from_paths(vec![vec![c(2, 2), c(2, 1)]]);
        assert_eq!(plan_to_labels(&up), vec![vec![Action::Up]]);
        let idle = Plan { paths: vec![vec![c(1, 1), c(1, 1)]], flowtime: 1, makespan: 1 };
        assert_eq!(plan_to_labels(&idle), vec![vec![Action::Idle]]);
        let two = Plan::from_paths(vec![vec![c(0, 0), c(1, 0), c(2, 0)], vec![c(5, 5), c(5, 6)]]);
        assert_eq!(plan_to_labels(&two), vec![vec![Action::Right, Action::Down], vec![Action::Right, Action::Idle]]);
    }

    #[test]
    fn plan_trims_trailing_waits() {
        let p = Plan::from_paths(vec![vec![c(0, 0), c(1, 0), c(1, 0), c(1, 0)], vec![c(3, 3), c(3, 3), c(3, 4)]]);
        assert_eq!(p.paths[0].len(), 2);
        assert_eq!((p.flowtime, p.makespan), (3, 2));
    }

    fn random_instance(seed: u64) -> (GridMap, Case) {
        let size = 3 + (seed % 2) as usize;
        let m = generate_map(size, size, 0.2 * ((seed / 2) % 2) as f64, seed).unwrap();
        let n = 1 + (seed % 3) as usize;
        let case = generate_case(&m, 0, n, seed.wrapping_mul(31)).unwrap();
        (m, case)
    }

    #[test]
    fn cbs_matches_oracle_on_small_instances() {
        for seed in 0..80 {
            let (m, case) = random_instance(seed);
            let oracle = joint_bfs_oracle(&m, &case, OracleCost::Flowtime);
            let cbs = cbs_solve(&m, &case, Duration::from_secs(10));
            match (oracle, cbs) {
                (Ok(o), Ok(p)) => {
                    p.validate(&m, &case).unwrap();
                    assert_eq!(o.flowtime, p.flowtime, "seed {seed}");
                }
                (Err(ExpertError::Infeasible), Err(ExpertError::Infeasible)) => {}
                (o, p) => panic!("seed {seed}: oracle {o:?} vs cbs {p:?}"),
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn adding_a_constraint_never_lowers_cost(seed in 0u64..5000, t in 1usize..6, which in 0usize..25) {
            let m = generate_map(5, 5, 0.1, seed).unwrap();
            let case = generate_case(&m, 0, 1, seed).unwrap();
            let base = low_level_search(&m, case.starts[0], case.goals[0], &[], 40).unwrap();
            let cell = m.cell_at(which);
            let cons = [Constraint::vertex(0, cell, t)];
            if let Ok(p) = low_level_search(&m, case.starts[0], case.goals[0], &cons, 40) {
                prop_assert!(p.len() >= base.len());
            }
        }

        #[test]
        fn labels_replay_to_paths(seed in 0u64..5000) {
            let m = generate_map(6, 6, 0.1, seed).unwrap();
            let case = generate_case(&m, 0, 3, seed).unwrap();
            if let Ok(plan) = cbs_solve(&m, &case, LONG) {
                prop_assert_eq!(detect_first_conflict(&plan.paths), None);
                let labels = plan_to_labels(&plan);
                prop_assert_eq!(labels.len(), plan.makespan);
                let mut pos = case.starts.clone();
                for (t, acts) in labels.iter().enumerate() {
                    prop_assert_eq!(&pos, &plan.positions_at(t));
                    pos = step_positions(&m, &pos, acts).unwrap();
                }
                prop_assert_eq!(pos, case.goals.clone());
            }
        }
    }
}
