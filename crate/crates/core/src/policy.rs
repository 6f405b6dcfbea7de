//! Team policy: a shared convolutional encoder per robot, one graph
//! convolution layer over the communication graph, and a shared action head.

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::gridworld::{Action, Gso, LocalObservation};
use crate::jsonfmt;
use crate::nn::{
    self, BatchNormCache, BatchStats, Conv2dCache, GraphFilterBank, GraphFilterCache, MaxPoolCache, Mode, NnError,
    ParamStore, Tensor,
};
use crate::seed;

pub const WEIGHTS_SCHEMA: &str = "mapf-gnn/weights/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyArch {
    /// Filter taps of the graph convolution; `k − 1` is the hop radius.
    pub k: usize,
    /// Output channels of the six convolution blocks.
    pub channels: Vec<usize>,
    pub fov_radius: usize,
    /// Graph convolution output width.
    pub g: usize,
    pub actions: usize,
}

impl PolicyArch {
    pub fn new(k: usize) -> Self {
        PolicyArch { k, channels: vec![32, 32, 64, 64, 128, 128], fov_radius: 4, g: 128, actions: Action::COUNT }
    }

    /// Encoder output width.
    pub fn f(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }

    fn pooled_after(block: usize) -> bool {
        block % 2 == 0
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: String| Err(NnError::ShapeMismatch(m));
        if self.k == 0 || self.g == 0 || self.actions == 0 {
            return bad("k, g and actions must be positive".into());
        }
        if self.channels.len() != 6 || self.channels.contains(&0) {
            return bad(format!("need six positive block widths, got {:?}", self.channels));
        }
        let mut side = 2 * self.fov_radius + 1;
        for b in 0..6 {
            if Self::pooled_after(b) {
                if side < 2 {
                    return bad(format!("field of view radius {} too small for three pools", self.fov_radius));
                }
                side = (side - 2) / 2 + 1;
            }
        }
        if side != 1 {
            return bad(format!("radius {} leaves {side}×{side} after pooling", self.fov_radius));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    pub arch: PolicyArch,
    pub store: ParamStore,
}

fn conv_name(b: usize, p: &str) -> String {
    format!("cnn.{b}.{p}")
}

const GNN_TAPS: &str = "gnn.taps";
const MLP_W: &str = "mlp.weight";
const MLP_B: &str = "mlp.bias";

#[derive(Serialize, Deserialize)]
struct WeightsDoc {
    schema: String,
    arch: PolicyArch,
    #[serde(default)]
    config: Value,
    params: serde_json::Map<String, Value>,
    buffers: serde_json::Map<String, Value>,
}

fn tensor_to_json(t: &Tensor) -> Value {
    let mut v = vec![serde_json::json!(t.shape())];
    v.extend(t.data().iter().map(|&x| serde_json::json!(x)));
    Value::Array(v)
}

fn tensor_from_json(name: &str, v: &Value) -> Result<Tensor, String> {
    let arr = v.as_array().ok_or_else(|| format!("{name}: expected array"))?;
    let shape: Vec<usize> = arr
        .first()
        .and_then(|s| serde_json::from_value(s.clone()).ok())
        .ok_or_else(|| format!("{name}: missing shape"))?;
    let data = arr[1..]
        .iter()
        .map(|x| x.as_f64().ok_or_else(|| format!("{name}: non-numeric value")))
        .collect::<Result<Vec<_>, _>>()?;
    Tensor::from_vec(&shape, data).map_err(|e| format!("{name}: {e}"))
}

impl PolicyParams {
    /// Seeded initialization: weights uniform in ±1/√fan_in, batch-norm
    /// scale 1 and shift 0, running mean 0 and variance 1.
    pub fn init(arch: PolicyArch, seed_value: u64) -> Result<Self, NnError> {
        arch.validate()?;
        let mut rng = seed::stream(seed_value, &[0x1417]);
        let mut store = ParamStore::new();
        let mut c_in = LocalObservation::CHANNELS;
        for (b, &c_out) in arch.channels.iter().enumerate() {
            let bound = 1.0 / ((c_in * nn::KERNEL * nn::KERNEL) as f64).sqrt();
            store.insert(&conv_name(b, "weight"), Tensor::uniform(&[c_out, c_in, 3, 3], bound, &mut rng));
            store.insert(&conv_name(b, "bias"), Tensor::uniform(&[c_out], bound, &mut rng));
            store.insert(&conv_name(b, "bn.gamma"), Tensor::filled(&[c_out], 1.0));
            store.insert(&conv_name(b, "bn.beta"), Tensor::zeros(&[c_out]));
            store.insert_buffer(&conv_name(b, "bn.running_mean"), Tensor::zeros(&[c_out]));
            store.insert_buffer(&conv_name(b, "bn.running_var"), Tensor::filled(&[c_out], 1.0));
            c_in = c_out;
        }
        let f = arch.f();
        let bound = 1.0 / ((f * arch.k) as f64).sqrt();
        store.insert(GNN_TAPS, Tensor::uniform(&[arch.k, f, arch.g], bound, &mut rng));
        let bound = 1.0 / (arch.g as f64).sqrt();
        store.insert(MLP_W, Tensor::uniform(&[arch.actions, arch.g], bound, &mut rng));
        store.insert(MLP_B, Tensor::uniform(&[arch.actions], bound, &mut rng));
        Ok(PolicyParams { arch, store })
    }

    /// Sets every parameter (scales included) to zero.
    pub fn zero_all(&mut self) {
        for (_, p) in self.store.params_mut() {
            p.value.fill(0.0);
        }
    }

    pub fn to_json(&self, config: &Value) -> String {
        let params = self.store.params().map(|(n, p)| (n.to_string(), tensor_to_json(&p.value))).collect();
        let buffers = self.store.buffers().map(|(n, t)| (n.to_string(), tensor_to_json(t))).collect();
        let doc = WeightsDoc { schema: WEIGHTS_SCHEMA.into(), arch: self.arch.clone(), config: config.clone(), params, buffers };
        jsonfmt::to_string(&doc).expect("weights serialize")
    }

    /// Parses a weights document; errors are human-readable diagnostics.
    pub fn from_json(text: &str) -> Result<Self, WeightsError> {
        let doc: WeightsDoc = serde_json::from_str(text).map_err(|e| WeightsError::Parse(e.to_string()))?;
        if doc.schema != WEIGHTS_SCHEMA {
            return Err(WeightsError::Version { found: doc.schema, expected: WEIGHTS_SCHEMA.into() });
        }
        let mut params = PolicyParams::init(doc.arch.clone(), 0).map_err(|e| WeightsError::Parse(e.to_string()))?;
        let names: Vec<String> = params.store.params().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let v = doc.params.get(&name).ok_or_else(|| WeightsError::Parse(format!("missing parameter {name}")))?;
            let t = tensor_from_json(&name, v).map_err(WeightsError::Parse)?;
            if t.shape() != params.store.value(&name).expect("known").shape() {
                return Err(WeightsError::Parse(format!("{name}: shape {:?}", t.shape())));
            }
            params.store.insert(&name, t);
        }
        let names: Vec<String> = params.store.buffers().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let v = doc.buffers.get(&name).ok_or_else(|| WeightsError::Parse(format!("missing buffer {name}")))?;
            params.store.insert_buffer(&name, tensor_from_json(&name, v).map_err(WeightsError::Parse)?);
        }
        Ok(params)
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum WeightsError {
    #[error("weights parse error: {0}")]
    Parse(String),
    #[error("weights schema {found}, expected {expected}")]
    Version { found: String, expected: String },
}

/// Per-robot action probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionDistribution {
    pub probs: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SelectMode {
    #[default]
    Greedy,
    Sample,
}

impl std::str::FromStr for SelectMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "greedy" => Ok(SelectMode::Greedy),
            "sample" => Ok(SelectMode::Sample),
            _ => Err(format!("unknown selection mode {s}")),
        }
    }
}

/// Greedy takes the first maximum; sample inverts the cumulative sum.
pub fn select_action(dist: &ActionDistribution, mode: SelectMode, rng: &mut impl Rng) -> usize {
    match mode {
        SelectMode::Greedy => {
            let mut best = 0;
            for (i, &p) in dist.probs.iter().enumerate() {
                if p > dist.probs[best] {
                    best = i;
                }
            }
            best
        }
        SelectMode::Sample => {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            for (i, &p) in dist.probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return i;
                }
            }
            dist.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
        }
    }
}

/// Several teams stacked for one batched pass. Robot rows of all teams are
/// concatenated; each team keeps its own shift operator.
#[derive(Clone, Debug)]
pub struct TeamBatch {
    obs: Tensor,
    teams: Vec<(usize, usize, Vec<f64>)>,
}

impl TeamBatch {
    pub fn new<'a>(teams: impl IntoIterator<Item = (&'a [LocalObservation], &'a Gso)>) -> Result<Self, NnError> {
        let mut data = Vec::new();
        let mut spans = Vec::new();
        let mut side = None;
        let mut rows = 0;
        for (obs, gso) in teams {
            if obs.len() != gso.len() {
                return Err(NnError::ShapeMismatch(format!("{} observations for a {}-node graph", obs.len(), gso.len())));
            }
            for o in obs {
                if *side.get_or_insert(o.side()) != o.side() {
                    return Err(NnError::ShapeMismatch("mixed field-of-view sizes".into()));
                }
                data.extend_from_slice(o.values());
            }
            spans.push((rows, obs.len(), gso.matrix().to_vec()));
            rows += obs.len();
        }
        let s = side.unwrap_or(0);
        Ok(TeamBatch { obs: Tensor::from_vec(&[rows, LocalObservation::CHANNELS, s, s], data)?, teams: spans })
    }

    pub fn robots(&self) -> usize {
        self.obs.shape()[0]
    }
}

struct BlockCache {
    conv: Conv2dCache,
    bn: BatchNormCache,
    pre_relu: Tensor,
    pool: Option<MaxPoolCache>,
}

pub struct ForwardCache {
    blocks: Vec<BlockCache>,
    gnn: Vec<GraphFilterCache>,
    gnn_pre: Tensor,
    hidden: Tensor,
    pub batch_stats: Vec<Option<BatchStats>>,
}

impl ForwardCache {
    /// Fingerprint of every discrete branch taken (relu signs, pool winners).
    pub fn kink_signature(&self) -> Vec<u64> {
        let mut sig = Vec::new();
        let mut push_signs = |t: &Tensor| {
            for chunk in t.data().chunks(64) {
                sig.push(chunk.iter().enumerate().fold(0u64, |a, (i, &v)| a | ((v > 0.0) as u64) << i));
            }
        };
        for b in &self.blocks {
            push_signs(&b.pre_relu);
        }
        push_signs(&self.gnn_pre);
        for b in &self.blocks {
            if let Some(p) = &b.pool {
                sig.extend(p.argmax_positions().iter().map(|&i| i as u64));
            }
        }
        sig
    }
}

fn encoder_forward(params: &PolicyParams, obs: &Tensor, mode: Mode) -> Result<(Tensor, Vec<BlockCache>, Vec<Option<BatchStats>>), NnError> {
    let st = &params.store;
    let mut x = obs.clone();
    let mut caches = Vec::with_capacity(6);
    let mut stats = Vec::with_capacity(6);
    for b in 0..params.arch.channels.len() {
        let (y, conv) = nn::conv2d_forward(&x, st.value(&conv_name(b, "weight"))?, st.value(&conv_name(b, "bias"))?)?;
        let (y, bn, bs) = nn::batchnorm2d_forward(
            &y,
            st.value(&conv_name(b, "bn.gamma"))?,
            st.value(&conv_name(b, "bn.beta"))?,
            st.buffer(&conv_name(b, "bn.running_mean"))?.data(),
            st.buffer(&conv_name(b, "bn.running_var"))?.data(),
            mode,
        )?;
        let mut out = nn::relu_forward(&y);
        let pool = if PolicyArch::pooled_after(b) {
            let (p, c) = nn::maxpool2d_forward(&out)?;
            out = p;
            Some(c)
        } else {
            None
        };
        caches.push(BlockCache { conv, bn, pre_relu: y, pool });
        stats.push(bs);
        x = out;
    }
    let m = x.shape()[0];
    let f = x.len() / m.max(1);
    Ok((x.reshape(&[m, f])?, caches, stats))
}

/// Batched forward pass returning logits `[robots, actions]` and the cache
/// needed by [`backward`].
pub fn forward(params: &PolicyParams, batch: &TeamBatch, mode: Mode) -> Result<(Tensor, ForwardCache), NnError> {
    let (feat, blocks, batch_stats) = encoder_forward(params, &batch.obs, mode)?;
    let f = params.arch.f();
    let g = params.arch.g;
    let bank = GraphFilterBank::new(params.store.value(GNN_TAPS)?.clone())?;
    let mut gnn_pre = vec![0.0; batch.robots() * g];
    let mut gnn = Vec::with_capacity(batch.teams.len());
    for (off, n, shift) in &batch.teams {
        let x = Tensor::from_vec(&[*n, f], feat.data()[off * f..(off + n) * f].to_vec())?;
        let (y, c) = nn::graph_filter_forward(&x, shift, &bank)?;
        gnn_pre[off * g..(off + n) * g].copy_from_slice(y.data());
        gnn.push(c);
    }
    let gnn_pre = Tensor::from_vec(&[batch.robots(), g], gnn_pre)?;
    let hidden = nn::relu_forward(&gnn_pre);
    let logits = nn::linear_forward(&hidden, params.store.value(MLP_W)?, params.store.value(MLP_B)?)?;
    Ok((logits, ForwardCache { blocks, gnn, gnn_pre, hidden, batch_stats }))
}

/// Accumulates parameter gradients of a scalar loss with output gradient
/// `dlogits` into `params.store`.
pub fn backward(params: &mut PolicyParams, batch: &TeamBatch, cache: &ForwardCache, dlogits: &Tensor) -> Result<(), NnError> {
    let f = params.arch.f();
    let g = params.arch.g;
    let (dh, dw, db) = nn::linear_backward(dlogits, &cache.hidden, params.store.value(MLP_W)?)?;
    params.store.accumulate(MLP_W, &dw)?;
    params.store.accumulate(MLP_B, &db)?;
    let dpre = nn::relu_backward(&dh, &cache.gnn_pre);
    let bank = GraphFilterBank::new(params.store.value(GNN_TAPS)?.clone())?;
    let mut dfeat = vec![0.0; batch.robots() * f];
    let mut dtaps = Tensor::zeros(bank.taps.shape());
    for ((off, n, shift), gc) in batch.teams.iter().zip(&cache.gnn) {
        let dy = Tensor::from_vec(&[*n, g], dpre.data()[off * g..(off + n) * g].to_vec())?;
        let (dx, dt) = nn::graph_filter_backward(&dy, shift, &bank, gc)?;
        dfeat[off * f..(off + n) * f].copy_from_slice(dx.data());
        for (a, b) in dtaps.data_mut().iter_mut().zip(dt.data()) {
            *a += b;
        }
    }
    params.store.accumulate(GNN_TAPS, &dtaps)?;
    let mut grad = Tensor::from_vec(&[batch.robots(), f, 1, 1], dfeat)?;
    for b in (0..cache.blocks.len()).rev() {
        let bc = &cache.blocks[b];
        if let Some(p) = &bc.pool {
            grad = nn::maxpool2d_backward(&grad, p);
        }
        grad = nn::relu_backward(&grad, &bc.pre_relu);
        let (dx, dgamma, dbeta) = nn::batchnorm2d_backward(&grad, params.store.value(&conv_name(b, "bn.gamma"))?, &bc.bn)?;
        params.store.accumulate(&conv_name(b, "bn.gamma"), &dgamma)?;
        params.store.accumulate(&conv_name(b, "bn.beta"), &dbeta)?;
        let (dx, dw, dbias) = nn::conv2d_backward(&dx, params.store.value(&conv_name(b, "weight"))?, &bc.conv)?;
        params.store.accumulate(&conv_name(b, "weight"), &dw)?;
        params.store.accumulate(&conv_name(b, "bias"), &dbias)?;
        grad = dx;
    }
    Ok(())
}

/// Folds the batch statistics of a training-mode pass into the running
/// statistics.
pub fn update_running_stats(params: &mut PolicyParams, cache: &ForwardCache) -> Result<(), NnError> {
    for (b, stats) in cache.batch_stats.iter().enumerate() {
        if let Some(s) = stats {
            let mut mean = params.store.buffer(&conv_name(b, "bn.running_mean"))?.clone();
            let mut var = params.store.buffer(&conv_name(b, "bn.running_var"))?.clone();
            nn::update_running_stats(mean.data_mut(), var.data_mut(), s);
            params.store.insert_buffer(&conv_name(b, "bn.running_mean"), mean);
            params.store.insert_buffer(&conv_name(b, "bn.running_var"), var);
        }
    }
    Ok(())
}

/// Mean cross entropy of a batched pass against per-robot action labels.
pub fn loss(params: &PolicyParams, batch: &TeamBatch, labels: &[usize], mode: Mode) -> Result<(f64, Tensor, ForwardCache), NnError> {
    let (logits, cache) = forward(params, batch, mode)?;
    let (l, dlogits) = nn::cross_entropy_loss(&logits, labels)?;
    Ok((l, dlogits, cache))
}

/// Loss plus the full flattened parameter gradient (in store order). The
/// store's gradient accumulators are reset first and hold the result after.
pub fn loss_and_gradient(params: &mut PolicyParams, batch: &TeamBatch, labels: &[usize], mode: Mode) -> Result<(f64, Vec<f64>, ForwardCache), NnError> {
    let (l, dlogits, cache) = loss(params, batch, labels, mode)?;
    params.store.zero_grads();
    backward(params, batch, &cache, &dlogits)?;
    Ok((l, params.store.flat_grads(), cache))
}

fn check_obs(params: &PolicyParams, obs: &LocalObservation) -> Result<(), NnError> {
    if obs.radius() != params.arch.fov_radius {
        return Err(NnError::ShapeMismatch(format!("observation radius {}, policy expects {}", obs.radius(), params.arch.fov_radius)));
    }
    Ok(())
}

/// Encoder output for one observation (evaluation mode).
pub fn encode_observation(params: &PolicyParams, obs: &LocalObservation) -> Result<Vec<f64>, NnError> {
    check_obs(params, obs)?;
    let s = obs.side();
    let x = Tensor::from_vec(&[1, LocalObservation::CHANNELS, s, s], obs.values().to_vec())?;
    Ok(encoder_forward(params, &x, Mode::Eval)?.0.into_data())
}

fn distributions(logits: &Tensor) -> Result<Vec<ActionDistribution>, NnError> {
    let p = nn::softmax(logits)?;
    let a = logits.shape()[1];
    Ok(p.data().chunks(a).map(|r| ActionDistribution { probs: r.to_vec() }).collect())
}

/// Team forward in evaluation mode: one distribution per robot.
pub fn policy_forward(params: &PolicyParams, observations: &[LocalObservation], gso: &Gso) -> Result<Vec<ActionDistribution>, NnError> {
    for o in observations {
        check_obs(params, o)?;
    }
    let batch = TeamBatch::new([(observations, gso)])?;
    let (logits, _) = forward(params, &batch, Mode::Eval)?;
    distributions(&logits)
}

/// The same computation organised as each robot would run it: encode its
/// own observation, then `K − 1` rounds in which it receives only its
/// neighbours' previous-round signals.
pub fn decentralized_forward(params: &PolicyParams, observations: &[LocalObservation], gso: &Gso) -> Result<Vec<ActionDistribution>, NnError> {
    let n = observations.len();
    if gso.len() != n {
        return Err(NnError::ShapeMismatch(format!("{n} observations for a {}-node graph", gso.len())));
    }
    let (f, g) = (params.arch.f(), params.arch.g);
    let taps = params.store.value(GNN_TAPS)?;
    let tap = |k: usize| &taps.data()[k * f * g..(k + 1) * f * g];
    let mut own: Vec<Vec<f64>> = observations.iter().map(|o| encode_observation(params, o)).collect::<Result<_, _>>()?;
    let mut acc = vec![vec![0.0; g]; n];
    for k in 0..params.arch.k {
        if k > 0 {
            // One synchronous exchange round.
            let prev = own.clone();
            for (i, z) in own.iter_mut().enumerate() {
                z.iter_mut().for_each(|v| *v = 0.0);
                for (j, pj) in prev.iter().enumerate() {
                    let s = gso.get(i, j);
                    if s != 0.0 {
                        for (a, b) in z.iter_mut().zip(pj) {
                            *a += s * b;
                        }
                    }
                }
            }
        }
        for i in 0..n {
            for (fi, &zf) in own[i].iter().enumerate() {
                for (gi, a) in acc[i].iter_mut().enumerate() {
                    *a += zf * tap(k)[fi * g + gi];
                }
            }
        }
    }
    let hidden: Vec<f64> = acc.into_iter().flatten().map(|v| v.max(0.0)).collect();
    let hidden = Tensor::from_vec(&[n, g], hidden)?;
    let logits = nn::linear_forward(&hidden, params.store.value(MLP_W)?, params.store.value(MLP_B)?)?;
    distributions(&logits)
}
