//! Closed-loop decentralized execution with collision shielding, and the
//! evaluation metrics computed from the resulting trajectories.

use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expert::Plan;
use crate::gridworld::{build_gso, build_observations, step_positions, Action, Case, Cell, GridMap, Gso, LocalObservation};
use crate::nn::NnError;
use crate::policy::{policy_forward, select_action, PolicyParams, SelectMode};
use crate::seed;

pub const DEFAULT_DEADLOCK_WINDOW: usize = 5;
pub const TIMEOUT_FACTOR: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExecError {
    #[error("policy failed: {0}")]
    Policy(#[from] NnError),
    #[error("policy returned {got} actions for {robots} robots")]
    ActionCount { got: usize, robots: usize },
    #[error("case and plan disagree: {0}")]
    Mismatch(String),
    #[error("no trajectories to evaluate")]
    EmptyInput,
}

/// Everything a team policy may look at during one step.
pub struct StepContext<'a> {
    pub map: &'a GridMap,
    pub case: &'a Case,
    pub plan: &'a Plan,
    pub t: usize,
    pub positions: &'a [Cell],
    pub observations: &'a [LocalObservation],
    pub gso: &'a Gso,
}

/// A decentralized team controller: one proposed action per robot.
pub trait TeamPolicy: Sync {
    fn act(&self, ctx: &StepContext<'_>, rng: &mut ChaCha8Rng) -> Result<Vec<Action>, ExecError>;
}

/// The learned policy.
pub struct GnnPolicy<'a> {
    pub params: &'a PolicyParams,
    pub mode: SelectMode,
}

impl TeamPolicy for GnnPolicy<'_> {
    fn act(&self, ctx: &StepContext<'_>, rng: &mut ChaCha8Rng) -> Result<Vec<Action>, ExecError> {
        let dists = policy_forward(self.params, ctx.observations, ctx.gso)?;
        Ok(dists.iter().map(|d| Action::from_index(select_action(d, self.mode, rng)).unwrap_or(Action::Idle)).collect())
    }
}

/// Follows the expert plan; off-plan positions make the robot idle.
pub struct ExpertReplay;

impl TeamPolicy for ExpertReplay {
    fn act(&self, ctx: &StepContext<'_>, _: &mut ChaCha8Rng) -> Result<Vec<Action>, ExecError> {
        Ok((0..ctx.positions.len())
            .map(|i| {
                if ctx.plan.position(i, ctx.t) != ctx.positions[i] {
                    return Action::Idle;
                }
                Action::between(ctx.positions[i], ctx.plan.position(i, ctx.t + 1)).unwrap_or(Action::Idle)
            })
            .collect())
    }
}

pub struct IdlePolicy;

impl TeamPolicy for IdlePolicy {
    fn act(&self, ctx: &StepContext<'_>, _: &mut ChaCha8Rng) -> Result<Vec<Action>, ExecError> {
        Ok(vec![Action::Idle; ctx.positions.len()])
    }
}

/// Uniform over the five motion primitives.
pub struct RandomPolicy;

impl TeamPolicy for RandomPolicy {
    fn act(&self, ctx: &StepContext<'_>, rng: &mut ChaCha8Rng) -> Result<Vec<Action>, ExecError> {
        Ok((0..ctx.positions.len()).map(|_| Action::ALL[rng.gen_range(0..Action::COUNT)]).collect())
    }
}

/// Each robot steps along its own shortest path, ignoring the others.
pub struct GreedyPathPolicy;

impl TeamPolicy for GreedyPathPolicy {
    fn act(&self, ctx: &StepContext<'_>, _: &mut ChaCha8Rng) -> Result<Vec<Action>, ExecError> {
        Ok((0..ctx.positions.len())
            .map(|i| {
                let dist = ctx.map.distances_to(ctx.case.goals[i]);
                let d = |c: Cell| ctx.map.index_of(c).map_or(u32::MAX, |k| dist[k]);
                let here = d(ctx.positions[i]);
                Action::ALL
                    .into_iter()
                    .skip(1)
                    .find(|a| ctx.map.is_free(a.apply(ctx.positions[i])) && d(a.apply(ctx.positions[i])) < here)
                    .unwrap_or(Action::Idle)
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShieldOutcome {
    pub actions: Vec<Action>,
    /// Passes that idled at least one robot.
    pub iterations: usize,
}

/// Replaces unsafe moves with idle until no rule fires:
/// (a) moves into obstacles or off the map, (b) swaps, (c) several robots
/// entering one cell, (d) entering a cell whose occupant stays put.
pub fn collision_shield(map: &GridMap, positions: &[Cell], proposed: &[Action]) -> ShieldOutcome {
    let n = positions.len();
    let mut acts = proposed.to_vec();
    let mut iterations = 0;
    loop {
        let target: Vec<Cell> = (0..n).map(|i| acts[i].apply(positions[i])).collect();
        let moving = |i: usize, acts: &[Action]| acts[i] != Action::Idle;
        let mut idle = vec![false; n];
        for i in 0..n {
            if !moving(i, &acts) {
                continue;
            }
            if map.is_blocked(target[i]) {
                idle[i] = true;
            }
            for j in 0..n {
                if j == i {
                    continue;
                }
                let swap = moving(j, &acts) && target[i] == positions[j] && target[j] == positions[i];
                let contested = moving(j, &acts) && target[i] == target[j];
                let occupied_by_idle = !moving(j, &acts) && target[i] == positions[j];
                if swap || contested || occupied_by_idle {
                    idle[i] = true;
                }
            }
        }
        if !idle.contains(&true) {
            return ShieldOutcome { actions: acts, iterations };
        }
        iterations += 1;
        for i in 0..n {
            if idle[i] {
                acts[i] = Action::Idle;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub fov_radius: usize,
    pub comm_radius: f64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig { fov_radius: 4, comm_radius: 5.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub case_id: usize,
    /// `[t][robot]`, starting with the initial configuration.
    pub positions: Vec<Vec<Cell>>,
    /// `[t][robot]`: whether the shield overrode the proposed action.
    pub shielded: Vec<Vec<bool>>,
    pub arrival: Vec<usize>,
    pub reached: Vec<bool>,
    pub success: bool,
    pub t_max: usize,
    /// Shield passes per step.
    #[serde(skip)]
    pub shield_iterations: Vec<usize>,
}

impl Trajectory {
    pub fn flowtime(&self) -> usize {
        self.arrival.iter().sum()
    }

    pub fn steps(&self) -> usize {
        self.positions.len() - 1
    }

    /// Trace document with the resolved configuration embedded.
    pub fn to_trace_json(&self, config: &serde_json::Value) -> String {
        #[derive(Serialize)]
        struct Trace<'a> {
            schema: String,
            config: &'a serde_json::Value,
            #[serde(flatten)]
            trajectory: &'a Trajectory,
        }
        crate::jsonfmt::to_string(&Trace { schema: crate::datastore::schema_tag("trace"), config, trajectory: self }).expect("trace serializes")
    }
}

/// Start of the final uninterrupted stay at `goal`, if the sequence ends there.
fn final_arrival(seq: impl DoubleEndedIterator<Item = Cell> + ExactSizeIterator, goal: Cell) -> Option<usize> {
    let len = seq.len();
    let stay = seq.rev().take_while(|&c| c == goal).count();
    (stay > 0).then_some(len - stay)
}

/// Runs `policy` on `case` for at most `3·makespan(plan)` steps, shielding
/// every joint action.
pub fn rollout(
    policy: &dyn TeamPolicy,
    map: &GridMap,
    case_id: usize,
    case: &Case,
    plan: &Plan,
    cfg: &RolloutConfig,
    seed_value: u64,
) -> Result<Trajectory, ExecError> {
    let n = case.robots();
    if plan.robots() != n {
        return Err(ExecError::Mismatch(format!("{} paths for {n} robots", plan.robots())));
    }
    let t_max = TIMEOUT_FACTOR * plan.makespan;
    let mut rng = seed::rng_from(seed_value);
    let mut pos = case.starts.clone();
    let mut positions = vec![pos.clone()];
    let mut shielded = Vec::new();
    let mut shield_iterations = Vec::new();
    let at_goals = |p: &[Cell]| p.iter().zip(&case.goals).all(|(a, b)| a == b);
    for t in 0..t_max {
        if at_goals(&pos) {
            break;
        }
        let observations = build_observations(map, &pos, &case.goals, cfg.fov_radius);
        let gso = build_gso(&pos, cfg.comm_radius);
        let ctx = StepContext { map, case, plan, t, positions: &pos, observations: &observations, gso: &gso };
        let proposed = policy.act(&ctx, &mut rng)?;
        if proposed.len() != n {
            return Err(ExecError::ActionCount { got: proposed.len(), robots: n });
        }
        let out = collision_shield(map, &pos, &proposed);
        shielded.push(proposed.iter().zip(&out.actions).map(|(a, b)| a != b).collect());
        shield_iterations.push(out.iterations);
        pos = step_positions(map, &pos, &out.actions).expect("shielded actions stay on free cells");
        positions.push(pos.clone());
    }
    let mut arrival = Vec::with_capacity(n);
    let mut reached = Vec::with_capacity(n);
    for i in 0..n {
        let a = final_arrival(positions.iter().map(|p| p[i]), case.goals[i]);
        reached.push(a.is_some());
        arrival.push(a.unwrap_or(t_max));
    }
    let success = at_goals(&pos);
    Ok(Trajectory { case_id, positions, shielded, arrival, reached, success, t_max, shield_iterations })
}

/// One evaluation job: a solved case with its map.
pub struct EvalCase<'a> {
    pub case_id: usize,
    pub map: &'a GridMap,
    pub case: &'a Case,
    pub plan: &'a Plan,
}

/// Rollouts over many cases in parallel; case `k` uses a seed derived from
/// `base_seed` and its case id, so results do not depend on scheduling.
pub fn rollout_all(policy: &dyn TeamPolicy, jobs: &[EvalCase<'_>], cfg: &RolloutConfig, base_seed: u64) -> Result<Vec<Trajectory>, ExecError> {
    jobs.par_iter()
        .map(|j| rollout(policy, j.map, j.case_id, j.case, j.plan, cfg, seed::derive_seed(base_seed, &[3, j.case_id as u64])))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cases: usize,
    pub successes: usize,
    pub alpha: f64,
    pub ft: usize,
    pub ft_star: usize,
    pub delta_ft: f64,
    /// `histogram[r]` = cases in which exactly `r` robots ended on their goal.
    pub histogram: Vec<usize>,
}

pub fn compute_metrics(trajectories: &[Trajectory], plans: &[&Plan]) -> Result<MetricsReport, ExecError> {
    if trajectories.is_empty() {
        return Err(ExecError::EmptyInput);
    }
    if trajectories.len() != plans.len() {
        return Err(ExecError::Mismatch(format!("{} trajectories vs {} plans", trajectories.len(), plans.len())));
    }
    let cases = trajectories.len();
    let successes = trajectories.iter().filter(|t| t.success).count();
    let ft: usize = trajectories.iter().map(Trajectory::flowtime).sum();
    let ft_star: usize = plans.iter().map(|p| p.flowtime).sum();
    let max_robots = trajectories.iter().map(|t| t.reached.len()).max().unwrap_or(0);
    let mut histogram = vec![0; max_robots + 1];
    for t in trajectories {
        histogram[t.reached.iter().filter(|&&r| r).count()] += 1;
    }
    Ok(MetricsReport {
        cases,
        successes,
        alpha: successes as f64 / cases as f64,
        ft,
        ft_star,
        delta_ft: (ft as f64 - ft_star as f64) / ft_star as f64,
        histogram,
    })
}

/// Some(first stuck step) when the run failed and the team has not moved
/// during at least the last `window` steps.
pub fn detect_deadlock(traj: &Trajectory, window: usize) -> Option<usize> {
    if traj.success {
        return None;
    }
    let last = traj.positions.last()?;
    let same = traj.positions.iter().rev().take_while(|p| *p == last).count();
    let stuck = traj.positions.len() - same;
    (same > window).then_some(stuck)
}

/// Vertex or edge collisions in a trajectory, as `(t, a, b)`.
pub fn find_collisions(traj: &Trajectory) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for (t, p) in traj.positions.iter().enumerate() {
        for a in 0..p.len() {
            for b in a + 1..p.len() {
                let vertex = p[a] == p[b];
                let edge = t > 0 && {
                    let q = &traj.positions[t - 1];
                    q[a] == p[b] && q[b] == p[a]
                };
                if vertex || edge {
                    out.push((t, a, b));
                }
            }
        }
    }
    out
}

/// Appends one report row; writes the header when `header` is set.
pub fn write_report_csv(w: impl Write, label: &str, report: &MetricsReport, config_json: &str, header: bool) -> csv::Result<()> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    if header {
        wtr.write_record(["config", "label", "cases", "successes", "alpha", "ft", "ft_star", "delta_ft"])?;
    }
    wtr.write_record([
        config_json,
        label,
        &report.cases.to_string(),
        &report.successes.to_string(),
        &fmt_real(report.alpha),
        &report.ft.to_string(),
        &report.ft_star.to_string(),
        &fmt_real(report.delta_ft),
    ])?;
    wtr.flush()?;
    Ok(())
}

pub fn write_hist_csv(w: impl Write, report: &MetricsReport) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["robots_at_goal", "case_count", "proportion"])?;
    for (r, &c) in report.histogram.iter().enumerate() {
        wtr.write_record([r.to_string(), c.to_string(), fmt_real(c as f64 / report.cases as f64)])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Shortest decimal that reads back to the same double.
pub fn fmt_real(v: f64) -> String {
    format!("{v:?}")
}
