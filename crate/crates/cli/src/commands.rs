use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use mapf_gnn::datastore::{
    expand_samples, generate_cases, generate_maps, load_cases, load_maps, map_lookup, read_split, solve_cases, write_jsonl, write_split,
    CaseRecord, DropCounts, MapRecord, Split, SplitInfo,
};
use mapf_gnn::executor::{
    compute_metrics, detect_deadlock, fmt_real, rollout, rollout_all, write_hist_csv, write_report_csv, EvalCase, ExpertReplay, GnnPolicy,
    GreedyPathPolicy, IdlePolicy, RandomPolicy, TeamPolicy,
};
use mapf_gnn::expert::{cbs_solve, oracle_check, OracleCheckConfig};
use mapf_gnn::gridworld::GridMap;
use mapf_gnn::policy::{PolicyParams, SelectMode};
use mapf_gnn::training::{fit, AdamState, Dataset, Expert, OnlineExpert, LOG_COLUMNS};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::CliError;

pub const MAPS_FILE: &str = "maps.jsonl";
pub const CASES_FILE: &str = "cases.jsonl";

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}

/// CSV writer whose file starts with a `# <config>` line.
fn commented_csv(path: &Path, config_line: &str) -> Result<csv::Writer<BufWriter<File>>, CliError> {
    let mut f = create(path)?;
    f.write_all(format!("# {config_line}\n").as_bytes())?;
    Ok(csv::Writer::from_writer(f))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn drops_value(d: &DropCounts) -> Value {
    json!({ "dropped": d })
}

/// Fails when unsolvable or timed-out cases outnumber solved ones.
fn check_dominated(kept: usize, d: &DropCounts) -> Result<(), CliError> {
    let lost = d.timeouts + d.infeasible;
    if lost > 0 && lost >= kept {
        return Err(CliError::Infeasible(format!("{lost} cases timed out or were infeasible against {kept} solved; nothing written")));
    }
    Ok(())
}

pub fn gen_maps(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let (maps, failed) = generate_maps(&cfg.pool_config());
    if maps.is_empty() && cfg.maps > 0 {
        return Err(CliError::Infeasible(format!("all {failed} maps failed to generate")));
    }
    write_jsonl(out, "maps", &cfg.to_value(), &json!({ "failed": failed }), &maps)?;
    println!("maps: {} (failed {failed})", maps.len());
    Ok(())
}

pub fn gen_cases(cfg: &RunConfig, map_file: &Path, out: &Path) -> Result<(), CliError> {
    let (_, maps) = load_maps(map_file)?;
    let mut dropped = DropCounts::default();
    let cases = generate_cases(&cfg.pool_config(), &maps, &mut dropped);
    write_jsonl(out, "cases", &cfg.to_value(), &drops_value(&dropped), &cases)?;
    println!("cases: {} (dropped {})", cases.len(), dropped.total());
    Ok(())
}

pub fn expert(cfg: &RunConfig, map_file: &Path, case_file: &Path, out: &Path) -> Result<(), CliError> {
    let (_, maps) = load_maps(map_file)?;
    let (_, cases) = load_cases(case_file, Some(&maps))?;
    let mut dropped = DropCounts::default();
    let solved = solve_cases(cases, &maps, Duration::from_secs_f64(cfg.timeout_s), &mut dropped)?;
    check_dominated(solved.len(), &dropped)?;
    write_jsonl(out, "cases", &cfg.to_value(), &drops_value(&dropped), &solved)?;
    println!("solved: {} (dropped {})", solved.len(), dropped.total());
    Ok(())
}

pub fn build_dataset(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let pool = mapf_gnn::datastore::build_dataset(&cfg.pool_config())?;
    check_dominated(pool.cases.len(), &pool.dropped)?;
    let splits = mapf_gnn::training::split_dataset(&pool.cases, cfg.split, cfg.seed)?;
    // Expand everything before touching the filesystem.
    let mut expanded = Vec::new();
    for (split, cases) in Split::ALL.into_iter().zip(&splits) {
        let info = SplitInfo { split, case_ids: cases.iter().map(|c| c.case_id).collect() };
        expanded.push((info, expand_samples(cases)?));
    }
    ensure_dir(out)?;
    let config = cfg.to_value();
    write_jsonl(&out.join(MAPS_FILE), "maps", &config, &json!({ "failed": pool.dropped.map_errors }), &pool.maps)?;
    write_jsonl(&out.join(CASES_FILE), "cases", &config, &drops_value(&pool.dropped), &pool.cases)?;
    for (info, samples) in &expanded {
        write_split(&out.join(info.split.file_name()), &config, info, samples)?;
    }
    println!(
        "maps: {}  cases: {}  dropped: {:?}  samples: train {} valid {} test {}",
        pool.maps.len(),
        pool.cases.len(),
        pool.dropped,
        expanded[0].1.len(),
        expanded[1].1.len(),
        expanded[2].1.len()
    );
    Ok(())
}

/// Maps, cases and the case ids of one split from a dataset directory.
struct DataDir {
    maps: Vec<MapRecord>,
    cases: Vec<CaseRecord>,
}

impl DataDir {
    fn load(dir: &Path) -> Result<Self, CliError> {
        let (_, maps) = load_maps(&dir.join(MAPS_FILE))?;
        let (_, cases) = load_cases(&dir.join(CASES_FILE), Some(&maps))?;
        Ok(DataDir { maps, cases })
    }

    fn split_cases(&self, info: &SplitInfo) -> Result<Vec<CaseRecord>, CliError> {
        info.case_ids
            .iter()
            .map(|id| self.case(*id).cloned())
            .collect()
    }

    fn case(&self, id: usize) -> Result<&CaseRecord, CliError> {
        self.cases.iter().find(|c| c.case_id == id).ok_or_else(|| CliError::Io(format!("case {id} not in {CASES_FILE}")))
    }

    fn map(&self, map_id: usize) -> Result<&GridMap, CliError> {
        map_lookup(&self.maps).get(map_id).copied().flatten().ok_or_else(|| CliError::Io(format!("map {map_id} not in {MAPS_FILE}")))
    }
}

fn load_dataset(dir: &Path, split: Split, data: &DataDir, cfg: &RunConfig) -> Result<(SplitInfo, Dataset), CliError> {
    let (_, info, records) = read_split(&dir.join(split.file_name()))?;
    let ds = Dataset::from_records(split, records, &data.maps, &cfg.rollout_config())?;
    Ok((info, ds))
}

fn json_doc(kind: &str, config: &Value, body: Value) -> String {
    let mut doc = json!({ "schema": mapf_gnn::datastore::schema_tag(kind), "config": config });
    if let (Value::Object(d), Value::Object(b)) = (&mut doc, body) {
        d.extend(b);
    }
    let mut s = mapf_gnn::jsonfmt::to_string(&doc).expect("document serializes");
    s.push('\n');
    s
}

fn greedy_gnn(params: &PolicyParams) -> Box<dyn TeamPolicy + '_> {
    Box::new(GnnPolicy { params, mode: SelectMode::Greedy })
}

fn sampling_gnn(params: &PolicyParams) -> Box<dyn TeamPolicy + '_> {
    Box::new(GnnPolicy { params, mode: SelectMode::Sample })
}

pub fn train(cfg: &RunConfig, data_dir: &Path, out: &Path) -> Result<(), CliError> {
    let data = DataDir::load(data_dir)?;
    let (train_info, mut train) = load_dataset(data_dir, Split::Train, &data, cfg)?;
    let (_, valid) = load_dataset(data_dir, Split::Valid, &data, cfg)?;
    let train_cases = data.split_cases(&train_info)?;
    let tcfg = cfg.train_config();
    let env = cfg.rollout_config();
    let mut params = PolicyParams::init(cfg.arch(), cfg.seed).map_err(|e| CliError::Config(e.to_string()))?;
    let mut adam = AdamState::new(&params);
    let timeout = Duration::from_secs_f64(cfg.timeout_s);
    let solve = move |map: &GridMap, case: &mapf_gnn::gridworld::Case| cbs_solve(map, case, timeout);
    let expert: &Expert<'_> = &solve;
    let make_policy = match cfg.select {
        SelectMode::Greedy => greedy_gnn as fn(&PolicyParams) -> Box<dyn TeamPolicy + '_>,
        SelectMode::Sample => sampling_gnn,
    };
    let oe = OnlineExpert { train_cases: &train_cases, maps: &data.maps, env: &env, expert, make_policy: &make_policy };

    ensure_dir(out)?;
    let config = cfg.to_value();
    let config_line = serde_json::to_string(&config).expect("config serializes");
    let mut log = commented_csv(&out.join("log.csv"), &config_line)?;
    log.write_record(LOG_COLUMNS)?;
    log.flush()?;
    let mut oe_log = commented_csv(&out.join("oe.csv"), &config_line)?;
    oe_log.write_record(["epoch", "selected", "failures", "repaired", "skipped_timeout", "skipped_other", "added_samples"])?;
    oe_log.flush()?;
    let model_path = out.join("model.json");
    let opt_path = out.join("optimizer.json");

    fit::<CliError>(&mut params, &mut adam, &mut train, &valid, &tcfg, Some(&oe), |row, report, p, st| {
        log.write_record(row.csv_row())?;
        log.flush()?;
        if let Some(r) = report {
            let fields = [r.selected, r.failures, r.repaired, r.skipped_timeout, r.skipped_other, r.added_samples];
            let mut rec = vec![row.epoch.to_string()];
            rec.extend(fields.iter().map(|v| v.to_string()));
            oe_log.write_record(&rec)?;
            oe_log.flush()?;
        }
        write_text(&model_path, &p.to_json(&config))?;
        write_text(&opt_path, &json_doc("optimizer", &config, json!({ "epoch": row.epoch, "state": st })))?;
        println!(
            "epoch {} lr {} loss {} acc {} valid_acc {} train_size {}",
            row.epoch,
            fmt_real(row.lr),
            fmt_real(row.train_loss),
            fmt_real(row.train_acc),
            fmt_real(row.valid_acc),
            row.train_size
        );
        Ok(true)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum PolicyKind {
    Gnn,
    Expert,
    Idle,
    Random,
    Greedy,
}

fn load_model(path: Option<&PathBuf>, cfg: &RunConfig) -> Result<Option<PolicyParams>, CliError> {
    let Some(path) = path else { return Ok(None) };
    let params = PolicyParams::from_json(&read_text(path)?)?;
    if params.arch.fov_radius != cfg.fov_radius {
        return Err(CliError::Config(format!("model was trained with fov radius {}, config has {}", params.arch.fov_radius, cfg.fov_radius)));
    }
    Ok(Some(params))
}

fn make_policy<'a>(kind: PolicyKind, model: Option<&'a PolicyParams>, cfg: &RunConfig) -> Result<Box<dyn TeamPolicy + 'a>, CliError> {
    Ok(match kind {
        PolicyKind::Gnn => {
            let params = model.ok_or_else(|| CliError::Config("--policy gnn needs --model".into()))?;
            Box::new(GnnPolicy { params, mode: cfg.select })
        }
        PolicyKind::Expert => Box::new(ExpertReplay),
        PolicyKind::Idle => Box::new(IdlePolicy),
        PolicyKind::Random => Box::new(RandomPolicy),
        PolicyKind::Greedy => Box::new(GreedyPathPolicy),
    })
}

pub struct EvalArgs<'a> {
    pub data: &'a Path,
    pub split: Split,
    pub policy: PolicyKind,
    pub model: Option<&'a PathBuf>,
    pub label: Option<&'a str>,
    pub out: &'a Path,
}

pub fn eval(cfg: &RunConfig, a: &EvalArgs<'_>) -> Result<(), CliError> {
    let data = DataDir::load(a.data)?;
    let (_, info, _) = read_split(&a.data.join(a.split.file_name()))?;
    let cases = data.split_cases(&info)?;
    let model = load_model(a.model, cfg)?;
    let policy = make_policy(a.policy, model.as_ref(), cfg)?;
    let mut jobs = Vec::with_capacity(cases.len());
    for r in &cases {
        jobs.push(EvalCase { case_id: r.case_id, map: data.map(r.case.map_id)?, case: &r.case, plan: r.solved_plan()? });
    }
    let trajs = rollout_all(policy.as_ref(), &jobs, &cfg.rollout_config(), cfg.seed)?;
    let plans: Vec<_> = jobs.iter().map(|j| j.plan).collect();
    let report = compute_metrics(&trajs, &plans)?;
    let deadlocks = trajs.iter().filter(|t| detect_deadlock(t, cfg.deadlock_window).is_some()).count();

    let label = a.label.map(str::to_string).unwrap_or_else(|| format!("{:?}", a.policy).to_lowercase());
    let config_line = serde_json::to_string(&cfg.to_value()).expect("config serializes");
    ensure_dir(a.out)?;
    let mut w = create(&a.out.join("report.csv"))?;
    write_report_csv(&mut w, &label, &report, &config_line, true)?;
    w.flush()?;
    let mut h = create(&a.out.join("hist.csv"))?;
    write_hist_csv(&mut h, &report)?;
    h.flush()?;
    println!(
        "{label}: cases {} successes {} alpha {} delta_ft {} deadlocks {deadlocks}",
        report.cases,
        report.successes,
        fmt_real(report.alpha),
        fmt_real(report.delta_ft)
    );
    Ok(())
}

pub fn rollout_one(cfg: &RunConfig, data_dir: &Path, case_id: usize, kind: PolicyKind, model: Option<&PathBuf>, out: &Path) -> Result<(), CliError> {
    let data = DataDir::load(data_dir)?;
    let r = data.case(case_id)?;
    let model = load_model(model, cfg)?;
    let policy = make_policy(kind, model.as_ref(), cfg)?;
    let seed = mapf_gnn::seed::derive_seed(cfg.seed, &[3, case_id as u64]);
    let traj = rollout(policy.as_ref(), data.map(r.case.map_id)?, case_id, &r.case, r.solved_plan()?, &cfg.rollout_config(), seed)?;
    let mut text = traj.to_trace_json(&cfg.to_value());
    text.push('\n');
    write_text(out, &text)?;
    println!("case {case_id}: success {} steps {} flowtime {}", traj.success, traj.steps(), traj.flowtime());
    Ok(())
}

pub struct OracleArgs {
    pub instances: usize,
    pub max_robots: usize,
    pub max_size: usize,
    pub max_density: f64,
}

pub fn oracle(cfg: &RunConfig, a: &OracleArgs, out: Option<&Path>) -> Result<(), CliError> {
    let check = OracleCheckConfig {
        instances: a.instances,
        max_robots: a.max_robots,
        max_size: a.max_size,
        max_density: a.max_density,
        seed: cfg.seed,
        timeout_s: cfg.timeout_s,
    };
    let report = oracle_check(&check);
    if let Some(path) = out {
        write_text(path, &json_doc("oracle-check", &cfg.to_value(), json!({ "check": check, "report": report })))?;
    }
    println!("compared: {}  infeasible_agreed: {}  draws: {}", report.compared, report.infeasible_agreed, report.draws);
    println!("mismatches: {}", report.mismatches.len());
    if !report.mismatches.is_empty() {
        return Err(CliError::Infeasible(format!("{} CBS/oracle mismatches; first: {:?}", report.mismatches.len(), report.mismatches[0])));
    }
    if report.compared < a.instances {
        return Err(CliError::Infeasible(format!("only {} of {} instances compared", report.compared, a.instances)));
    }
    Ok(())
}

/// Converts wide CSVs (report.csv, hist.csv, log.csv) to long format
/// `source,row,key,variable,value`. Lines starting with `#` are skipped;
/// the `config` and `label` columns become the row key.
pub fn report(cfg: &RunConfig, inputs: &[PathBuf], out: &Path) -> Result<(), CliError> {
    let mut w = commented_csv(out, &serde_json::to_string(&cfg.to_value()).expect("config serializes"))?;
    w.write_record(["source", "row", "key", "variable", "value"])?;
    let mut rows = 0usize;
    for path in inputs {
        let text = read_text(path)?;
        let body: String = text.lines().filter(|l| !l.starts_with('#')).map(|l| format!("{l}\n")).collect();
        let mut rdr = csv::Reader::from_reader(body.as_bytes());
        let headers = rdr.headers().map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?.clone();
        let label_col = headers.iter().position(|h| h == "label");
        let source = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            let key = label_col.and_then(|c| rec.get(c)).unwrap_or("").to_string();
            for (h, v) in headers.iter().zip(rec.iter()) {
                if h == "config" || h == "label" {
                    continue;
                }
                w.write_record([source.as_str(), &i.to_string(), &key, h, v])?;
                rows += 1;
            }
        }
    }
    w.flush()?;
    println!("rows: {rows}");
    Ok(())
}
