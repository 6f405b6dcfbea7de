//! Imitation learning: minibatch cross-entropy against expert actions with
//! Adam, cosine annealing, coupled L2, and periodic online-expert dataset
//! aggregation.

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datastore::{map_lookup, samples_from_plan, CaseRecord, MapRecord, Origin, SampleRecord, Split, StoreError};
use crate::executor::{rollout, ExecError, RolloutConfig, TeamPolicy};
use crate::expert::{ExpertError, Plan};
use crate::gridworld::{Case, GridMap, Gso, LocalObservation};
use crate::nn::{self, Mode, NnError, Tensor};
use crate::policy::{self, PolicyParams, TeamBatch};
use crate::seed;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("empty {0} split")]
    EmptyDataset(&'static str),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Exec(#[from] ExecError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub l2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Online-expert interval in epochs; 0 disables aggregation.
    pub oe_interval: usize,
    pub oe_cases: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_max: 1e-3,
            lr_min: 1e-6,
            epochs: 150,
            batch_size: 64,
            l2: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            oe_interval: 4,
            oe_cases: 500,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if !(self.lr_min < self.lr_max) || self.lr_min < 0.0 {
            return bad("need 0 <= lr_min < lr_max");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 || self.l2 < 0.0 {
            return bad("Adam moments need 0 <= beta < 1, eps > 0, l2 >= 0");
        }
        Ok(())
    }

    /// Whether aggregation runs after the 0-based `epoch`, i.e. after every
    /// `oe_interval`-th completed epoch.
    pub fn aggregates_after(&self, epoch: usize) -> bool {
        self.oe_interval > 0 && (epoch + 1) % self.oe_interval == 0
    }
}

/// Learning rate for the 0-based `epoch`.
pub fn cosine_lr(epoch: usize, cfg: &TrainConfig) -> f64 {
    let phase = std::f64::consts::PI * epoch as f64 / cfg.epochs as f64;
    cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + phase.cos())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(params: &PolicyParams) -> Self {
        let n = params.store.num_params();
        AdamState { step: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }
}

/// One Adam update from the gradients accumulated in `params.store`, with
/// `l2 · w` added to each gradient. Nothing changes if any gradient is
/// non-finite.
pub fn adam_step(params: &mut PolicyParams, state: &mut AdamState, lr: f64, cfg: &TrainConfig) -> Result<(), TrainError> {
    if state.m.len() != params.store.num_params() {
        return Err(NnError::ShapeMismatch(format!("optimizer state for {} values, model has {}", state.m.len(), params.store.num_params())).into());
    }
    if let Some((name, _)) = params.store.params().find(|(_, p)| !p.grad.is_finite()) {
        return Err(TrainError::NonFiniteGradient(name.to_string()));
    }
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    let mut off = 0;
    for (_, p) in params.store.params_mut() {
        let n = p.value.len();
        let (m, v) = (&mut state.m[off..off + n], &mut state.v[off..off + n]);
        let grads = p.grad.data().to_vec();
        for (k, w) in p.value.data_mut().iter_mut().enumerate() {
            let g = grads[k] + cfg.l2 * *w;
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            *w -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
        off += n;
    }
    Ok(())
}

/// A stored sample with its observations and shift operator rebuilt.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub record: SampleRecord,
    pub observations: Vec<LocalObservation>,
    pub gso: Gso,
}

impl Sample {
    pub fn new(record: SampleRecord, map: &GridMap, env: &RolloutConfig) -> Self {
        let observations = record.observations(map, env.fov_radius);
        let gso = record.gso(env.comm_radius);
        Sample { record, observations, gso }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn from_records(split: Split, records: Vec<SampleRecord>, maps: &[MapRecord], env: &RolloutConfig) -> Result<Self, TrainError> {
        let lookup = map_lookup(maps);
        let samples = records
            .into_par_iter()
            .map(|r| {
                let map = lookup.get(r.map_id).copied().flatten().ok_or_else(|| StoreError::Invalid(format!("sample refers to unknown map {}", r.map_id)))?;
                if r.labels.len() != r.positions.len() {
                    return Err(StoreError::Invalid(format!("case {} t {}: {} labels for {} robots", r.case_id, r.t, r.labels.len(), r.positions.len())));
                }
                Ok(Sample::new(r, map, env))
            })
            .collect::<Result<Vec<_>, StoreError>>()?;
        Ok(Dataset { split, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn records(&self) -> Vec<SampleRecord> {
        self.samples.iter().map(|s| s.record.clone()).collect()
    }
}

fn make_batch(samples: &[&Sample]) -> Result<(TeamBatch, Vec<usize>), NnError> {
    let batch = TeamBatch::new(samples.iter().map(|s| (&s.observations[..], &s.gso)))?;
    let labels = samples.iter().flat_map(|s| s.record.labels.iter().copied()).collect();
    Ok((batch, labels))
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let a = logits.shape()[1];
    logits
        .data()
        .chunks(a)
        .zip(labels)
        .filter(|(row, &l)| {
            let best = (0..a).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            best == l
        })
        .count()
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct EpochStats {
    /// Mean cross entropy per robot decision.
    pub loss: f64,
    /// Fraction of robot decisions whose arg-max matches the label.
    pub accuracy: f64,
    pub samples: usize,
    pub robots: usize,
}

#[derive(Default)]
struct Tally {
    loss_sum: f64,
    correct: usize,
    robots: usize,
    samples: usize,
}

impl Tally {
    fn add(&mut self, loss: f64, correct: usize, robots: usize, samples: usize) {
        self.loss_sum += loss * robots as f64;
        self.correct += correct;
        self.robots += robots;
        self.samples += samples;
    }

    fn stats(&self) -> EpochStats {
        let r = self.robots.max(1) as f64;
        EpochStats { loss: self.loss_sum / r, accuracy: self.correct as f64 / r, samples: self.samples, robots: self.robots }
    }
}

/// Forward, backward, running-statistics update and Adam step on one batch.
/// Returns the batch loss and the number of correct arg-max decisions
/// (measured before the update).
pub fn train_step(params: &mut PolicyParams, adam: &mut AdamState, samples: &[&Sample], lr: f64, cfg: &TrainConfig) -> Result<(f64, usize), TrainError> {
    let (batch, labels) = make_batch(samples)?;
    let (logits, cache) = policy::forward(params, &batch, Mode::Train)?;
    let (loss, dlogits) = nn::cross_entropy_loss(&logits, &labels)?;
    params.store.zero_grads();
    policy::backward(params, &batch, &cache, &dlogits)?;
    adam_step(params, adam, lr, cfg)?;
    policy::update_running_stats(params, &cache)?;
    Ok((loss, count_correct(&logits, &labels)))
}

/// One pass over the train split in a seeded shuffled order.
pub fn train_epoch(params: &mut PolicyParams, adam: &mut AdamState, data: &Dataset, cfg: &TrainConfig, epoch: usize) -> Result<EpochStats, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset("train"));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut seed::stream(cfg.seed, &[4, epoch as u64]));
    let lr = cosine_lr(epoch, cfg);
    let mut tally = Tally::default();
    for chunk in order.chunks(cfg.batch_size) {
        let samples: Vec<&Sample> = chunk.iter().map(|&i| &data.samples[i]).collect();
        let robots = samples.iter().map(|s| s.record.labels.len()).sum();
        let (loss, correct) = train_step(params, adam, &samples, lr, cfg)?;
        tally.add(loss, correct, robots, samples.len());
    }
    Ok(tally.stats())
}

/// Loss and accuracy in evaluation mode. Batches run in parallel and are
/// reduced in order.
pub fn evaluate(params: &PolicyParams, data: &Dataset, batch_size: usize) -> Result<EpochStats, TrainError> {
    let chunks: Vec<&[Sample]> = data.samples.chunks(batch_size.max(1)).collect();
    let parts = chunks
        .par_iter()
        .map(|chunk| {
            let refs: Vec<&Sample> = chunk.iter().collect();
            let (batch, labels) = make_batch(&refs)?;
            let (logits, _) = policy::forward(params, &batch, Mode::Eval)?;
            let (loss, _) = nn::cross_entropy_loss(&logits, &labels)?;
            Ok((loss, count_correct(&logits, &labels), labels.len(), refs.len()))
        })
        .collect::<Result<Vec<_>, NnError>>()?;
    let mut tally = Tally::default();
    for (l, c, r, s) in parts {
        tally.add(l, c, r, s);
    }
    Ok(tally.stats())
}

pub const SPLIT_RATIOS: [f64; 3] = [0.70, 0.15, 0.15];

/// Case-level seeded split into train/valid/test. Validation and test sizes
/// are floored; the remainder goes to train.
pub fn split_dataset<T: Clone>(items: &[T], ratios: [f64; 3], seed_value: u64) -> Result<[Vec<T>; 3], TrainError> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(TrainError::InvalidConfig(format!("split ratios {ratios:?} must be in [0,1] and sum to 1")));
    }
    let n = items.len();
    let n_valid = (n as f64 * ratios[1] + 1e-9).floor() as usize;
    let n_test = (n as f64 * ratios[2] + 1e-9).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::stream(seed_value, &[6]));
    let pick = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| items[i].clone()).collect::<Vec<T>>()
    };
    let train = pick(&order[n_valid + n_test..]);
    let valid = pick(&order[..n_valid]);
    let test = pick(&order[n_valid..n_valid + n_test]);
    Ok([train, valid, test])
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OeReport {
    pub selected: usize,
    pub failures: usize,
    pub repaired: usize,
    pub skipped_timeout: usize,
    pub skipped_other: usize,
    pub added_samples: usize,
    /// Case ids whose repair was skipped, with the reason.
    pub skipped: Vec<(usize, String)>,
}

/// Expert used to repair failures.
pub type Expert<'a> = dyn Fn(&GridMap, &Case) -> Result<Plan, ExpertError> + Sync + 'a;

/// Rolls `policy` out on `oe_cases` seeded-random train cases; every failed
/// rollout is re-solved by `expert` from the robots' positions at timeout and
/// the repair's per-timestep samples are appended to `train`.
#[allow(clippy::too_many_arguments)]
pub fn aggregate_online_expert(
    policy: &dyn TeamPolicy,
    train: &mut Dataset,
    train_cases: &[CaseRecord],
    maps: &[MapRecord],
    cfg: &TrainConfig,
    env: &RolloutConfig,
    epoch: usize,
    expert: &Expert<'_>,
) -> Result<OeReport, TrainError> {
    let lookup = map_lookup(maps);
    let map_of = |r: &CaseRecord| {
        lookup.get(r.case.map_id).copied().flatten().ok_or_else(|| StoreError::Invalid(format!("case {} refers to unknown map {}", r.case_id, r.case.map_id)))
    };
    let k = cfg.oe_cases.min(train_cases.len());
    let picks = index::sample(&mut seed::stream(cfg.seed, &[5, epoch as u64]), train_cases.len(), k).into_vec();
    let outcomes = picks
        .par_iter()
        .map(|&i| {
            let r = &train_cases[i];
            let map = map_of(r)?;
            let plan = r.solved_plan()?;
            let traj = rollout(policy, map, r.case_id, &r.case, plan, env, seed::derive_seed(cfg.seed, &[7, epoch as u64, r.case_id as u64]))?;
            if traj.success {
                return Ok(None);
            }
            let stuck = traj.positions.last().expect("trajectory has a start").clone();
            let repair = Case::new(r.case.map_id, stuck, r.case.goals.clone());
            let solved = expert(map, &repair).map(|p| {
                samples_from_plan(r.case_id, &repair, &p, Origin::Repair { epoch })
                    .into_iter()
                    .map(|s| Sample::new(s, map, env))
                    .collect::<Vec<_>>()
            });
            Ok(Some((r.case_id, solved)))
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    let mut report = OeReport { selected: k, ..Default::default() };
    for (case_id, solved) in outcomes.into_iter().flatten() {
        report.failures += 1;
        match solved {
            Ok(samples) => {
                report.repaired += 1;
                report.added_samples += samples.len();
                train.samples.extend(samples);
            }
            Err(e) => {
                if matches!(e, ExpertError::Timeout(_)) {
                    report.skipped_timeout += 1;
                } else {
                    report.skipped_other += 1;
                }
                report.skipped.push((case_id, e.to_string()));
            }
        }
    }
    Ok(report)
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based epoch number.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub valid_loss: f64,
    pub valid_acc: f64,
    pub train_size: usize,
}

pub const LOG_COLUMNS: [&str; 7] = ["epoch", "lr", "train_loss", "train_acc", "valid_loss", "valid_acc", "train_size"];

impl EpochLog {
    pub fn csv_row(&self) -> [String; 7] {
        let r = crate::executor::fmt_real;
        [self.epoch.to_string(), r(self.lr), r(self.train_loss), r(self.train_acc), r(self.valid_loss), r(self.valid_acc), self.train_size.to_string()]
    }
}

/// Online-expert inputs for [`fit`].
pub struct OnlineExpert<'a> {
    pub train_cases: &'a [CaseRecord],
    pub maps: &'a [MapRecord],
    pub env: &'a RolloutConfig,
    pub expert: &'a Expert<'a>,
    pub make_policy: &'a (dyn Fn(&PolicyParams) -> Box<dyn TeamPolicy + '_> + Sync),
}

/// Runs `cfg.epochs` epochs. After each epoch, aggregation runs when due and
/// `on_epoch` receives the log row, the aggregation report if any, and the
/// current model and optimizer state.
pub fn fit<E: From<TrainError>>(
    params: &mut PolicyParams,
    adam: &mut AdamState,
    train: &mut Dataset,
    valid: &Dataset,
    cfg: &TrainConfig,
    oe: Option<&OnlineExpert<'_>>,
    mut on_epoch: impl FnMut(&EpochLog, Option<&OeReport>, &PolicyParams, &AdamState) -> Result<bool, E>,
) -> Result<(), E> {
    cfg.validate()?;
    for epoch in 0..cfg.epochs {
        let stats = train_epoch(params, adam, train, cfg, epoch)?;
        let v = if valid.is_empty() { EpochStats::default() } else { evaluate(params, valid, cfg.batch_size)? };
        let report = match oe {
            Some(o) if cfg.aggregates_after(epoch) => {
                let policy = (o.make_policy)(params);
                Some(aggregate_online_expert(policy.as_ref(), train, o.train_cases, o.maps, cfg, o.env, epoch, o.expert)?)
            }
            _ => None,
        };
        let row = EpochLog {
            epoch: epoch + 1,
            lr: cosine_lr(epoch, cfg),
            train_loss: stats.loss,
            train_acc: stats.accuracy,
            valid_loss: v.loss,
            valid_acc: v.accuracy,
            train_size: train.len(),
        };
        if !on_epoch(&row, report.as_ref(), params, adam)? {
            break;
        }
    }
    Ok(())
}
