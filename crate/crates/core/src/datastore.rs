//! Map and case pools, per-timestep samples and their JSON-lines files.
//!
//! Every file starts with a header line `{"schema": ..., "config": ...}`
//! followed by one record per line. Reals are written with 17 significant
//! digits so loading reproduces every value bit for bit.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Duration;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::expert::{detect_first_conflict, plan_to_labels, CbsSolver, ExpertError, Plan};
use crate::gridworld::{build_gso, build_observations, generate_case, generate_map, Case, Cell, GridError, GridMap, Gso, LocalObservation};
use crate::jsonfmt;
use crate::seed;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: line {line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("{path}: schema {found}, expected {expected}")]
    VersionMismatch { path: String, found: String, expected: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid record: {0}")]
    Invalid(String),
}

pub fn schema_tag(kind: &str) -> String {
    format!("mapf-gnn/{kind}/{SCHEMA_VERSION}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub schema: String,
    #[serde(default)]
    pub config: Value,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub extra: Value,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.display().to_string(), source }
}

/// Serializes `records` as JSON lines behind a header.
pub fn jsonl_string<T: Serialize>(kind: &str, config: &Value, extra: &Value, records: &[T]) -> String {
    let header = Header { schema: schema_tag(kind), config: config.clone(), extra: extra.clone() };
    let mut out = jsonfmt::to_string(&header).expect("header serializes");
    out.push('\n');
    for r in records {
        out.push_str(&jsonfmt::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl<T: Serialize>(path: &Path, kind: &str, config: &Value, extra: &Value, records: &[T]) -> Result<(), StoreError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    w.write_all(jsonl_string(kind, config, extra, records).as_bytes()).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

/// Reads a JSON-lines file written by [`write_jsonl`], checking the schema
/// tag. Parse errors name the 1-based line and the serde diagnostic (which
/// names the offending field).
pub fn read_jsonl<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<(Header, Vec<T>), StoreError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    parse_jsonl(BufReader::new(file), kind, &path.display().to_string())
}

pub fn parse_jsonl<T: DeserializeOwned>(reader: impl BufRead, kind: &str, name: &str) -> Result<(Header, Vec<T>), StoreError> {
    let parse_err = |line: usize, message: String| StoreError::Parse { path: name.to_string(), line, message };
    let mut lines = reader.lines();
    let first = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty file, missing header".into()))?
        .map_err(|e| parse_err(1, e.to_string()))?;
    let header: Header = serde_json::from_str(&first).map_err(|e| parse_err(1, e.to_string()))?;
    let expected = schema_tag(kind);
    if header.schema != expected {
        return Err(StoreError::VersionMismatch { path: name.into(), found: header.schema, expected });
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| parse_err(i + 2, e.to_string()))?;
        if line.is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|e| parse_err(i + 2, e.to_string()))?);
    }
    Ok((header, records))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapRecord {
    pub map_id: usize,
    pub map: GridMap,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolveStatus {
    Unsolved,
    Solved,
    Timeout,
    Infeasible,
    Failed,
}

/// Solver bookkeeping. Wall-clock time is deliberately not stored so that
/// pool files are a pure function of the configuration; the constraint-tree
/// node counts serve as the effort measure instead.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolverMeta {
    pub status: SolveStatus,
    pub timed_out: bool,
    pub ct_expanded: usize,
    pub ct_generated: usize,
}

impl SolverMeta {
    pub fn unsolved() -> Self {
        SolverMeta { status: SolveStatus::Unsolved, timed_out: false, ct_expanded: 0, ct_generated: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseRecord {
    pub case_id: usize,
    pub case: Case,
    pub plan: Option<Plan>,
    pub solver: SolverMeta,
}

impl CaseRecord {
    pub fn validate(&self, map: &GridMap) -> Result<(), StoreError> {
        if let Some(plan) = &self.plan {
            plan.validate(map, &self.case).map_err(|e| StoreError::Invalid(format!("case {}: {e}", self.case_id)))?;
        }
        Ok(())
    }

    /// Plan of a solved record.
    pub fn solved_plan(&self) -> Result<&Plan, StoreError> {
        self.plan.as_ref().ok_or_else(|| StoreError::Invalid(format!("case {} has no plan", self.case_id)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Origin {
    Expert,
    Repair { epoch: usize },
}

/// One team snapshot with expert action labels. Observations are rebuilt
/// from positions on load unless `dense` carries them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub case_id: usize,
    pub map_id: usize,
    pub t: usize,
    pub positions: Vec<Cell>,
    pub goals: Vec<Cell>,
    pub labels: Vec<usize>,
    pub origin: Origin,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dense: Option<Vec<Vec<f64>>>,
}

impl SampleRecord {
    pub fn observations(&self, map: &GridMap, fov_radius: usize) -> Vec<LocalObservation> {
        match &self.dense {
            Some(d) => d.iter().map(|v| LocalObservation::from_values(fov_radius, v.clone()).expect("dense observation shape")).collect(),
            None => build_observations(map, &self.positions, &self.goals, fov_radius),
        }
    }

    pub fn gso(&self, comm_radius: f64) -> Gso {
        build_gso(&self.positions, comm_radius)
    }

    pub fn with_dense(mut self, map: &GridMap, fov_radius: usize) -> Self {
        let obs = build_observations(map, &self.positions, &self.goals, fov_radius);
        self.dense = Some(obs.into_iter().map(|o| o.values().to_vec()).collect());
        self
    }
}

/// Per-timestep samples of a plan, `t in 0..makespan`.
pub fn samples_from_plan(case_id: usize, case: &Case, plan: &Plan, origin: Origin) -> Vec<SampleRecord> {
    plan_to_labels(plan)
        .into_iter()
        .enumerate()
        .map(|(t, acts)| SampleRecord {
            case_id,
            map_id: case.map_id,
            t,
            positions: plan.positions_at(t),
            goals: case.goals.clone(),
            labels: acts.iter().map(|a| a.index()).collect(),
            origin,
            dense: None,
        })
        .collect()
}

pub fn expand_samples(pool: &[CaseRecord]) -> Result<Vec<SampleRecord>, StoreError> {
    let mut out = Vec::new();
    for r in pool {
        out.extend(samples_from_plan(r.case_id, &r.case, r.solved_plan()?, Origin::Expert));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub maps: usize,
    pub cases_per_map: usize,
    pub robots: usize,
    pub width: usize,
    pub height: usize,
    pub density: f64,
    pub seed: u64,
    pub timeout_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropCounts {
    pub map_errors: usize,
    pub case_errors: usize,
    pub duplicates: usize,
    pub timeouts: usize,
    pub infeasible: usize,
    pub other: usize,
}

impl DropCounts {
    pub fn total(&self) -> usize {
        self.map_errors + self.case_errors + self.duplicates + self.timeouts + self.infeasible + self.other
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pool {
    pub maps: Vec<MapRecord>,
    pub cases: Vec<CaseRecord>,
    pub dropped: DropCounts,
}

pub fn map_seed(base: u64, map_id: usize) -> u64 {
    seed::derive_seed(base, &[1, map_id as u64])
}

pub fn case_seed(base: u64, map_id: usize, index: usize) -> u64 {
    seed::derive_seed(base, &[2, map_id as u64, index as u64])
}

/// Seeded maps, one per id; maps that cannot be generated are skipped and
/// counted.
pub fn generate_maps(cfg: &PoolConfig) -> (Vec<MapRecord>, usize) {
    let results: Vec<Result<GridMap, GridError>> =
        (0..cfg.maps).into_par_iter().map(|m| generate_map(cfg.width, cfg.height, cfg.density, map_seed(cfg.seed, m))).collect();
    let mut maps = Vec::new();
    let mut failed = 0;
    for (map_id, r) in results.into_iter().enumerate() {
        match r {
            Ok(map) => maps.push(MapRecord { map_id, map }),
            Err(_) => failed += 1,
        }
    }
    (maps, failed)
}

/// Seeded unsolved cases for every map, duplicates per map filtered.
pub fn generate_cases(cfg: &PoolConfig, maps: &[MapRecord], dropped: &mut DropCounts) -> Vec<CaseRecord> {
    let jobs: Vec<(usize, usize)> = maps.iter().enumerate().flat_map(|(k, _)| (0..cfg.cases_per_map).map(move |c| (k, c))).collect();
    let generated: Vec<Result<Case, GridError>> = jobs
        .par_iter()
        .map(|&(k, c)| {
            let m = &maps[k];
            generate_case(&m.map, m.map_id, cfg.robots, case_seed(cfg.seed, m.map_id, c))
        })
        .collect();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for case in generated {
        match case {
            Ok(case) => {
                if seen.insert((case.map_id, case.starts.clone(), case.goals.clone())) {
                    out.push(CaseRecord { case_id: out.len(), case, plan: None, solver: SolverMeta::unsolved() });
                } else {
                    dropped.duplicates += 1;
                }
            }
            Err(_) => dropped.case_errors += 1,
        }
    }
    out
}

/// Runs the expert on every record; records it could not solve are dropped
/// and counted. Case ids are kept.
pub fn solve_cases(cases: Vec<CaseRecord>, maps: &[MapRecord], timeout: Duration, dropped: &mut DropCounts) -> Result<Vec<CaseRecord>, StoreError> {
    let lookup = map_lookup(maps);
    let solver = CbsSolver::with_timeout(timeout);
    let solved: Vec<CaseRecord> = cases
        .into_par_iter()
        .map(|mut r| {
            let Some(map) = lookup.get(r.case.map_id).copied().flatten() else {
                r.solver.status = SolveStatus::Failed;
                return r;
            };
            match solver.solve(map, &r.case) {
                Ok(out) => {
                    r.plan = Some(out.plan);
                    r.solver = SolverMeta { status: SolveStatus::Solved, timed_out: false, ct_expanded: out.expanded, ct_generated: out.generated };
                }
                Err(ExpertError::Timeout(_)) => {
                    r.solver = SolverMeta { status: SolveStatus::Timeout, timed_out: true, ct_expanded: 0, ct_generated: 0 }
                }
                Err(ExpertError::Infeasible) => r.solver.status = SolveStatus::Infeasible,
                Err(_) => r.solver.status = SolveStatus::Failed,
            }
            r
        })
        .collect();
    let mut kept = Vec::with_capacity(solved.len());
    for r in solved {
        match r.solver.status {
            SolveStatus::Solved => kept.push(r),
            SolveStatus::Timeout => dropped.timeouts += 1,
            SolveStatus::Infeasible => dropped.infeasible += 1,
            _ => dropped.other += 1,
        }
    }
    Ok(kept)
}

/// Full pool pipeline: maps, cases, expert solutions. The result is a pure
/// function of `cfg` (timeouts aside); worker count does not matter.
pub fn build_dataset(cfg: &PoolConfig) -> Result<Pool, StoreError> {
    if cfg.robots == 0 {
        return Err(StoreError::Invalid("robots must be positive".into()));
    }
    let (maps, map_errors) = generate_maps(cfg);
    let mut dropped = DropCounts { map_errors, ..Default::default() };
    let cases = generate_cases(cfg, &maps, &mut dropped);
    let mut cases = solve_cases(cases, &maps, Duration::from_secs_f64(cfg.timeout_s), &mut dropped)?;
    for (i, r) in cases.iter_mut().enumerate() {
        r.case_id = i;
    }
    Ok(Pool { maps, cases, dropped })
}

/// Index from map id to map.
pub fn map_lookup(maps: &[MapRecord]) -> Vec<Option<&GridMap>> {
    let len = maps.iter().map(|m| m.map_id + 1).max().unwrap_or(0);
    let mut v = vec![None; len];
    for m in maps {
        v[m.map_id] = Some(&m.map);
    }
    v
}

/// Loads a case pool and checks every stored plan: full validation against
/// its map when `maps` is given, conflict-freedom otherwise.
pub fn load_cases(path: &Path, maps: Option<&[MapRecord]>) -> Result<(Header, Vec<CaseRecord>), StoreError> {
    let (h, cases) = read_jsonl::<CaseRecord>(path, "cases")?;
    let lookup = maps.map(map_lookup);
    for r in &cases {
        match (&lookup, &r.plan) {
            (Some(l), _) => {
                let map = l.get(r.case.map_id).copied().flatten().ok_or_else(|| StoreError::Invalid(format!("case {} refers to unknown map {}", r.case_id, r.case.map_id)))?;
                r.validate(map)?;
            }
            (None, Some(p)) => {
                if let Some(c) = detect_first_conflict(&p.paths) {
                    return Err(StoreError::Invalid(format!("case {}: stored plan has conflict {c:?}", r.case_id)));
                }
            }
            (None, None) => {}
        }
    }
    Ok((h, cases))
}

pub fn load_maps(path: &Path) -> Result<(Header, Vec<MapRecord>), StoreError> {
    read_jsonl(path, "maps")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    pub fn file_name(self) -> String {
        format!("dataset.{}.jsonl", self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Split::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| format!("unknown split {s}"))
    }
}

/// Header payload of a split file: the case ids it was built from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub split: Split,
    pub case_ids: Vec<usize>,
}

pub fn write_split(path: &Path, config: &Value, info: &SplitInfo, samples: &[SampleRecord]) -> Result<(), StoreError> {
    write_jsonl(path, "dataset", config, &serde_json::to_value(info).expect("split info"), samples)
}

pub fn split_string(config: &Value, info: &SplitInfo, samples: &[SampleRecord]) -> String {
    jsonl_string("dataset", config, &serde_json::to_value(info).expect("split info"), samples)
}

pub fn read_split(path: &Path) -> Result<(Header, SplitInfo, Vec<SampleRecord>), StoreError> {
    let (h, samples) = read_jsonl::<SampleRecord>(path, "dataset")?;
    let info: SplitInfo = serde_json::from_value(h.extra.clone())
        .map_err(|e| StoreError::Parse { path: path.display().to_string(), line: 1, message: format!("split info: {e}") })?;
    Ok((h, info, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{step_positions, Action};

    fn small_cfg(seed: u64) -> PoolConfig {
        PoolConfig { maps: 3, cases_per_map: 4, robots: 3, width: 6, height: 6, density: 0.1, seed, timeout_s: 30.0 }
    }

    #[test]
    fn pool_is_deterministic_and_valid() {
        let a = build_dataset(&small_cfg(5)).unwrap();
        let b = build_dataset(&small_cfg(5)).unwrap();
        assert_eq!(a, b);
        assert!(a.cases.len() <= 12);
        assert_eq!(a.cases.len() + a.dropped.total() - a.dropped.map_errors, 12);
        for r in &a.cases {
            r.validate(&a.maps[r.case.map_id].map).unwrap();
        }
        let cfg = Value::Null;
        assert_eq!(jsonl_string("cases", &cfg, &Value::Null, &a.cases), jsonl_string("cases", &cfg, &Value::Null, &b.cases));
    }

    #[test]
    fn zero_cases_per_map_gives_empty_pool() {
        let cfg = PoolConfig { cases_per_map: 0, ..small_cfg(1) };
        assert!(build_dataset(&cfg).unwrap().cases.is_empty());
    }

    #[test]
    fn straight_line_labels_repeat() {
        let map = GridMap::empty(5, 1);
        let case = Case::new(0, vec![Cell::new(0, 0)], vec![Cell::new(3, 0)]);
        let plan = CbsSolver::default().solve(&map, &case).unwrap().plan;
        let samples = samples_from_plan(0, &case, &plan, Origin::Expert);
        assert_eq!(samples.len(), 3);
        assert!(samples.iter().all(|s| s.labels == vec![Action::Right.index()]));
    }

    #[test]
    fn replaying_labels_reproduces_paths() {
        let pool = build_dataset(&small_cfg(9)).unwrap();
        let samples = expand_samples(&pool.cases).unwrap();
        let total: usize = pool.cases.iter().map(|r| r.plan.as_ref().unwrap().makespan).sum();
        assert_eq!(samples.len(), total);
        for r in &pool.cases {
            let map = &pool.maps[r.case.map_id].map;
            let plan = r.plan.as_ref().unwrap();
            let mut pos = r.case.starts.clone();
            for s in samples.iter().filter(|s| s.case_id == r.case_id) {
                assert_eq!(s.positions, pos);
                let acts: Vec<Action> = s.labels.iter().map(|&l| Action::from_index(l).unwrap()).collect();
                pos = step_positions(map, &pos, &acts).unwrap();
            }
            assert_eq!(pos, plan.positions_at(plan.makespan));
        }
    }

    #[test]
    fn files_round_trip_byte_identically() {
        let dir = tempfile::tempdir().unwrap();
        let pool = build_dataset(&small_cfg(3)).unwrap();
        let cfg = serde_json::json!({"seed": 3, "density": 0.1});
        let p = dir.path().join("cases.jsonl");
        write_jsonl(&p, "cases", &cfg, &Value::Null, &pool.cases).unwrap();
        let first = fs::read(&p).unwrap();
        let (h, cases) = load_cases(&p, Some(&pool.maps)).unwrap();
        assert_eq!(h.config, cfg);
        assert_eq!(cases, pool.cases);
        write_jsonl(&p, "cases", &h.config, &Value::Null, &cases).unwrap();
        assert_eq!(fs::read(&p).unwrap(), first);

        let samples: Vec<SampleRecord> = expand_samples(&pool.cases).unwrap().into_iter().take(3).map(|s| {
            let map = &pool.maps[s.map_id].map;
            s.with_dense(map, 4)
        }).collect();
        let info = SplitInfo { split: Split::Valid, case_ids: vec![0, 2] };
        let p = dir.path().join(Split::Valid.file_name());
        write_split(&p, &cfg, &info, &samples).unwrap();
        let (_, info2, back) = read_split(&p).unwrap();
        assert_eq!((info2, back.clone()), (info, samples));
        let map = &pool.maps[back[0].map_id].map;
        assert_eq!(back[0].observations(map, 4), build_observations(map, &back[0].positions, &back[0].goals, 4));
    }

    #[test]
    fn truncated_and_mislabelled_files_are_rejected() {
        let pool = build_dataset(&small_cfg(4)).unwrap();
        let text = jsonl_string("cases", &Value::Null, &Value::Null, &pool.cases);
        let cut = &text[..text.len() - 20];
        let err = parse_jsonl::<CaseRecord>(cut.as_bytes(), "cases", "cases.jsonl").unwrap_err();
        let lines = cut.lines().count();
        match err {
            StoreError::Parse { line, .. } => assert_eq!(line, lines),
            e => panic!("unexpected {e}"),
        }
        let missing = text.replacen("\"solver\"", "\"solvr\"", 1);
        match parse_jsonl::<CaseRecord>(missing.as_bytes(), "cases", "x").unwrap_err() {
            StoreError::Parse { line, message, .. } => assert!(line == 2 && message.contains("solver"), "{message}"),
            e => panic!("unexpected {e}"),
        }
        assert!(matches!(parse_jsonl::<CaseRecord>(text.as_bytes(), "maps", "x"), Err(StoreError::VersionMismatch { .. })));
        let old = text.replacen("mapf-gnn/cases/1", "mapf-gnn/cases/0", 1);
        assert!(matches!(parse_jsonl::<CaseRecord>(old.as_bytes(), "cases", "x"), Err(StoreError::VersionMismatch { .. })));
    }
}
