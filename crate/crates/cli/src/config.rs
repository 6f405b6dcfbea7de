//! Resolved run configuration: built-in defaults, then an optional JSON
//! file, then command-line flags.

use std::path::{Path, PathBuf};

use clap::Args;
use mapf_gnn::datastore::PoolConfig;
use mapf_gnn::executor::RolloutConfig;
use mapf_gnn::policy::{PolicyArch, SelectMode};
use mapf_gnn::training::{TrainConfig, SPLIT_RATIOS};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "MAPF_GNN_CONFIG";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub maps: usize,
    pub cases_per_map: usize,
    pub robots: usize,
    pub width: usize,
    pub height: usize,
    pub density: f64,
    pub timeout_s: f64,
    pub fov_radius: usize,
    pub comm_radius: f64,
    pub k: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub batch: usize,
    pub l2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub oe_interval: usize,
    pub oe_cases: usize,
    pub split: [f64; 3],
    pub select: SelectMode,
    pub deadlock_window: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RunConfig {
            seed: 0,
            maps: 600,
            cases_per_map: 50,
            robots: 10,
            width: 20,
            height: 20,
            density: 0.1,
            timeout_s: mapf_gnn::expert::DEFAULT_TIMEOUT_S,
            fov_radius: 4,
            comm_radius: 5.0,
            k: 3,
            epochs: t.epochs,
            lr: t.lr_max,
            lr_min: t.lr_min,
            batch: t.batch_size,
            l2: t.l2,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            oe_interval: t.oe_interval,
            oe_cases: t.oe_cases,
            split: SPLIT_RATIOS,
            select: SelectMode::Greedy,
            deadlock_window: mapf_gnn::executor::DEFAULT_DEADLOCK_WINDOW,
        }
    }
}

/// Flags shared by every subcommand; each one overrides the file value.
#[derive(Args, Clone, Debug, Default)]
pub struct ConfigFlags {
    /// JSON config file (default: $MAPF_GNN_CONFIG if set).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Bound on parallel workers (default: available cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub maps: Option<usize>,
    #[arg(long, global = true)]
    pub cases_per_map: Option<usize>,
    #[arg(long, global = true)]
    pub robots: Option<usize>,
    #[arg(long, global = true)]
    pub width: Option<usize>,
    #[arg(long, global = true)]
    pub height: Option<usize>,
    #[arg(long, global = true)]
    pub density: Option<f64>,
    #[arg(long, global = true)]
    pub timeout_s: Option<f64>,
    #[arg(long = "fov", global = true)]
    pub fov_radius: Option<usize>,
    #[arg(long, global = true)]
    pub comm_radius: Option<f64>,
    #[arg(long, global = true)]
    pub k: Option<usize>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub lr_min: Option<f64>,
    #[arg(long, global = true)]
    pub batch: Option<usize>,
    #[arg(long, global = true)]
    pub l2: Option<f64>,
    #[arg(long, global = true)]
    pub oe_interval: Option<usize>,
    #[arg(long, global = true)]
    pub oe_cases: Option<usize>,
    /// Action selection at inference: greedy or sample.
    #[arg(long, global = true)]
    pub select: Option<SelectMode>,
    #[arg(long, global = true)]
    pub deadlock_window: Option<usize>,
}

fn merge(base: &mut Value, over: Value) {
    if let (Value::Object(b), Value::Object(o)) = (base, over) {
        for (k, v) in o {
            b.insert(k, v);
        }
    }
}

impl ConfigFlags {
    fn overrides(&self) -> Value {
        let mut m = serde_json::Map::new();
        let mut put = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                m.insert(k.to_string(), v);
            }
        };
        use serde_json::json;
        put("seed", self.seed.map(|v| json!(v)));
        put("maps", self.maps.map(|v| json!(v)));
        put("cases_per_map", self.cases_per_map.map(|v| json!(v)));
        put("robots", self.robots.map(|v| json!(v)));
        put("width", self.width.map(|v| json!(v)));
        put("height", self.height.map(|v| json!(v)));
        put("density", self.density.map(|v| json!(v)));
        put("timeout_s", self.timeout_s.map(|v| json!(v)));
        put("fov_radius", self.fov_radius.map(|v| json!(v)));
        put("comm_radius", self.comm_radius.map(|v| json!(v)));
        put("k", self.k.map(|v| json!(v)));
        put("epochs", self.epochs.map(|v| json!(v)));
        put("lr", self.lr.map(|v| json!(v)));
        put("lr_min", self.lr_min.map(|v| json!(v)));
        put("batch", self.batch.map(|v| json!(v)));
        put("l2", self.l2.map(|v| json!(v)));
        put("oe_interval", self.oe_interval.map(|v| json!(v)));
        put("oe_cases", self.oe_cases.map(|v| json!(v)));
        put("select", self.select.map(|v| serde_json::to_value(v).expect("mode")));
        put("deadlock_window", self.deadlock_window.map(|v| json!(v)));
        Value::Object(m)
    }

    /// Defaults, then the config file, then flags.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut merged = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
        let path = self.config.clone().or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
        if let Some(p) = path {
            merge(&mut merged, read_config_file(&p)?);
        }
        merge(&mut merged, self.overrides());
        let cfg: RunConfig = serde_json::from_value(merged).map_err(|e| CliError::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn read_config_file(path: &Path) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if !v.is_object() {
        return Err(CliError::Config(format!("{}: expected a JSON object", path.display())));
    }
    Ok(v)
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.robots == 0 || self.width == 0 || self.height == 0 {
            return bad("robots, width and height must be positive".into());
        }
        if !(0.0..1.0).contains(&self.density) {
            return bad(format!("density {} outside [0, 1)", self.density));
        }
        if !(self.timeout_s > 0.0) || !(self.comm_radius >= 0.0) {
            return bad("timeout_s must be positive and comm_radius non-negative".into());
        }
        self.train_config().validate().map_err(|e| CliError::Config(e.to_string()))?;
        PolicyArch { fov_radius: self.fov_radius, ..PolicyArch::new(self.k) }.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn pool_config(&self) -> PoolConfig {
        PoolConfig {
            maps: self.maps,
            cases_per_map: self.cases_per_map,
            robots: self.robots,
            width: self.width,
            height: self.height,
            density: self.density,
            seed: self.seed,
            timeout_s: self.timeout_s,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr_max: self.lr,
            lr_min: self.lr_min,
            epochs: self.epochs,
            batch_size: self.batch,
            l2: self.l2,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            oe_interval: self.oe_interval,
            oe_cases: self.oe_cases,
            seed: self.seed,
        }
    }

    pub fn rollout_config(&self) -> RolloutConfig {
        RolloutConfig { fov_radius: self.fov_radius, comm_radius: self.comm_radius }
    }

    pub fn arch(&self) -> PolicyArch {
        PolicyArch { fov_radius: self.fov_radius, ..PolicyArch::new(self.k) }
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
