//! Asymmetric norm, quasimetric embedding and contrastive training.
//!
//! A network `e(s, a)` maps state-action inputs to `R^d`; the distance
//! `d_H(p, q) = ||e(p) - e(q)||_H` uses the asymmetric norm
//! `||v||_H = w·max(v, 0) + (1 - w)·max(-v, 0)` with learned `w ∈ (0, 1)^d`.
//! Any such distance satisfies the triangle inequality but can be asymmetric.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::diffmath::{adam_step, sigmoid, Activation, AdamState, Checkpoint, Mlp, ParamTensor, Trace};
use crate::envs::{ActionCmd, ScenarioConfig, OBS_DIM};
use crate::error::{Error, Result};

/// Width of an action encoding.
pub const ACTION_DIM: usize = 2;
/// Width of an embedding input (observation plus action).
pub const INPUT_DIM: usize = OBS_DIM + ACTION_DIM;
pub const DEFAULT_EMBED_DIM: usize = 16;
pub const DEFAULT_MARGIN: f64 = 1.0;
/// Learning rate used for embedding training.
pub const EMBED_LEARNING_RATE: f64 = 1e-3;

/// `||v||_H` for weights `w`.
pub fn asym_norm(v: &[f64], w: &[f64]) -> Result<f64> {
    check_dims(v, w)?;
    Ok(v.iter()
        .zip(w)
        .map(|(&x, &wi)| if x > 0.0 { wi * x } else { (wi - 1.0) * x })
        .sum())
}

/// Subgradient of `||v||_H` with respect to `v` (positive branch at 0) and
/// gradient with respect to `w` (which is `v` itself).
pub fn asym_norm_grad(v: &[f64], w: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_dims(v, w)?;
    let dv = v
        .iter()
        .zip(w)
        .map(|(&x, &wi)| if x >= 0.0 { wi } else { wi - 1.0 })
        .collect();
    Ok((dv, v.to_vec()))
}

fn check_dims(v: &[f64], w: &[f64]) -> Result<()> {
    if v.len() != w.len() {
        return Err(Error::Config(format!(
            "vector has {} components but the norm has {} weights",
            v.len(),
            w.len()
        )));
    }
    Ok(())
}

/// Norm weights stored as unconstrained logits; `w = sigmoid(raw)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AsymNormParams {
    pub raw: ParamTensor,
}

impl AsymNormParams {
    /// All weights 0.5 (the symmetric norm).
    pub fn symmetric(dim: usize) -> Result<Self> {
        Ok(Self { raw: ParamTensor::zeros(&[dim])? })
    }

    /// Weights set directly; every entry must lie strictly inside (0, 1).
    pub fn from_weights(w: &[f64]) -> Result<Self> {
        if let Some(bad) = w.iter().find(|&&x| !(x > 0.0 && x < 1.0)) {
            return Err(Error::Config(format!("norm weight {bad} is outside (0, 1)")));
        }
        let raw = w.iter().map(|&x| (x / (1.0 - x)).ln()).collect();
        Ok(Self { raw: ParamTensor::from_values(&[w.len()], raw)? })
    }

    pub fn dim(&self) -> usize {
        self.raw.len()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.raw.values.iter().map(|&r| sigmoid(r)).collect()
    }
}

/// Encodes a command as `[v / v_max, ω / ω_max]`.
pub fn encode_action(action: &ActionCmd, cfg: &ScenarioConfig) -> [f64; ACTION_DIM] {
    [action.v_cmd / cfg.v_max, action.omega_cmd / cfg.omega_max]
}

/// Concatenates an observation with an action encoding.
pub fn input_of(obs: &[f64], action: [f64; ACTION_DIM]) -> Vec<f64> {
    let mut x = Vec::with_capacity(obs.len() + ACTION_DIM);
    x.extend_from_slice(obs);
    x.extend_from_slice(&action);
    x
}

/// State-only input: the observation paired with the null action.
pub fn state_input(obs: &[f64]) -> Vec<f64> {
    input_of(obs, [0.0; ACTION_DIM])
}

/// Embedding network plus norm weights.
#[derive(Debug, Clone, PartialEq)]
pub struct QuasimetricModel {
    pub net: Mlp,
    pub norm: AsymNormParams,
}

impl QuasimetricModel {
    pub fn new(net: Mlp, norm: AsymNormParams) -> Result<Self> {
        if net.output_dim() != norm.dim() {
            return Err(Error::Config(format!(
                "embedding outputs {} values but the norm has {} weights",
                net.output_dim(),
                norm.dim()
            )));
        }
        Ok(Self { net, norm })
    }

    /// Random tanh MLP `input -> hidden... -> dim` with symmetric initial weights.
    pub fn init<R: Rng + ?Sized>(input_dim: usize, hidden: &[usize], dim: usize, rng: &mut R) -> Result<Self> {
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(dim);
        let net = Mlp::init(&sizes, Activation::Tanh, Activation::Identity, rng)?;
        Self::new(net, AsymNormParams::symmetric(dim)?)
    }

    pub fn dim(&self) -> usize {
        self.norm.dim()
    }

    pub fn embed(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.net.eval(input)
    }

    /// Distance between two embeddings under the current weights.
    pub fn dist_embedded(&self, ep: &[f64], eq: &[f64], w: &[f64]) -> f64 {
        ep.iter()
            .zip(eq)
            .zip(w)
            .map(|((&a, &b), &wi)| {
                let x = a - b;
                if x > 0.0 {
                    wi * x
                } else {
                    (wi - 1.0) * x
                }
            })
            .sum()
    }

    /// `d_H(p, q)` for two state-action inputs.
    pub fn dist(&self, p: &[f64], q: &[f64]) -> Result<f64> {
        let (ep, eq) = (self.embed(p)?, self.embed(q)?);
        Ok(self.dist_embedded(&ep, &eq, &self.norm.weights()))
    }

    /// State-only distance using the null action on both sides.
    pub fn state_dist(&self, obs_p: &[f64], obs_q: &[f64]) -> Result<f64> {
        self.dist(&state_input(obs_p), &state_input(obs_q))
    }

    /// Distances between consecutive inputs of one trajectory; the final
    /// entry (no successor) is 0.
    pub fn step_distances(&self, inputs: &[Vec<f64>]) -> Result<Vec<f64>> {
        let w = self.norm.weights();
        let emb = inputs.iter().map(|x| self.embed(x)).collect::<Result<Vec<_>>>()?;
        let mut out: Vec<f64> = emb.windows(2).map(|p| self.dist_embedded(&p[0], &p[1], &w)).collect();
        if !inputs.is_empty() {
            out.push(0.0);
        }
        Ok(out)
    }

    pub fn zero_grads(&mut self) {
        self.net.zero_grads();
        self.norm.raw.zero_grad();
    }

    /// Flattened parameters: network layout followed by the norm logits.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut p = self.net.params_flat();
        p.extend_from_slice(&self.norm.raw.values);
        p
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.net.num_params();
        if flat.len() != n + self.dim() {
            return Err(Error::Config(format!("expected {} parameters, got {}", n + self.dim(), flat.len())));
        }
        self.net.set_params_flat(&flat[..n])?;
        self.norm.raw.values.copy_from_slice(&flat[n..]);
        Ok(())
    }

    pub fn grads_flat(&self) -> Vec<f64> {
        let mut g = self.net.grads_flat();
        g.extend_from_slice(&self.norm.raw.grad);
        g
    }

    pub fn num_params(&self) -> usize {
        self.net.num_params() + self.dim()
    }

    pub fn is_finite(&self) -> bool {
        self.net.is_finite() && self.norm.raw.is_finite()
    }

    pub fn adam_state(&self) -> AdamState {
        AdamState::new(self.num_params())
    }

    pub fn adam_step(&mut self, state: &mut AdamState, lr: f64) -> Result<()> {
        let mut tensors = self.net.tensors_mut();
        tensors.push(&mut self.norm.raw);
        adam_step(&mut tensors, state, lr)
    }

    pub fn to_checkpoint(&self, seed: u64) -> Checkpoint {
        Checkpoint::new(seed)
            .with_net("embedding", &self.net)
            .with_vector("norm_logits", &self.norm.raw.values)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let net = ckpt
            .net("embedding")
            .ok_or_else(|| Error::parse("checkpoint", "missing embedding network"))?
            .clone();
        let raw = ckpt
            .vector("norm_logits")
            .ok_or_else(|| Error::parse("checkpoint", "missing norm logits"))?;
        let norm = AsymNormParams { raw: ParamTensor::from_values(&[raw.len()], raw.to_vec())? };
        Self::new(net, norm)
    }

    /// Backpropagates `dL/dd` for `d = ||e_p - e_q||_H` into the network
    /// (through both traces) and the norm logits.
    fn backprop_distance(&mut self, tp: &Trace, tq: &Trace, w: &[f64], upstream: f64) -> Result<()> {
        if upstream == 0.0 {
            return Ok(());
        }
        let v: Vec<f64> = tp.output().iter().zip(tq.output()).map(|(a, b)| a - b).collect();
        let (dv, dw) = asym_norm_grad(&v, w)?;
        let gp: Vec<f64> = dv.iter().map(|g| g * upstream).collect();
        let gq: Vec<f64> = gp.iter().map(|g| -g).collect();
        self.net.backward_trace(tp, &gp)?;
        self.net.backward_trace(tq, &gq)?;
        for ((g, &vi), &wi) in self.norm.raw.grad.iter_mut().zip(&dw).zip(w) {
            *g += upstream * vi * wi * (1.0 - wi);
        }
        Ok(())
    }
}

/// Anchor/positive/negative triples for contrastive training.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub anchors: Vec<Vec<f64>>,
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<f64>>,
    /// Target distance for each positive pair. `None` pulls positives to 0.
    pub positive_targets: Option<Vec<f64>>,
    pub margin: f64,
}

impl ContrastiveBatch {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.anchors.is_empty() {
            return Err(Error::Input("contrastive batch is empty".into()));
        }
        let n = self.anchors.len();
        let targets_ok = self.positive_targets.as_ref().is_none_or(|t| t.len() == n);
        if self.positives.len() != n || self.negatives.len() != n || !targets_ok {
            return Err(Error::Input("contrastive batch columns differ in length".into()));
        }
        if !(self.margin > 0.0) {
            return Err(Error::Config(format!("margin must be > 0, got {}", self.margin)));
        }
        Ok(())
    }
}

/// Mean over the batch of `(d(a, p) - t)² + max(0, m - d(a, n))²`, with
/// `t = 0` unless positive targets are given. Gradients are accumulated into
/// the network and the norm logits; the loss is returned.
pub fn contrastive_loss(batch: &ContrastiveBatch, model: &mut QuasimetricModel) -> Result<f64> {
    batch.validate()?;
    let w = model.norm.weights();
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for k in 0..batch.len() {
        let (_, ta) = model.net.forward_trace(&batch.anchors[k])?;
        let (_, tp) = model.net.forward_trace(&batch.positives[k])?;
        let (_, tn) = model.net.forward_trace(&batch.negatives[k])?;
        let d_pos = model.dist_embedded(ta.output(), tp.output(), &w);
        let d_neg = model.dist_embedded(ta.output(), tn.output(), &w);
        let target = batch.positive_targets.as_ref().map_or(0.0, |t| t[k]);
        let gap = batch.margin - d_neg;
        loss += (d_pos - target).powi(2) + gap.max(0.0).powi(2);
        model.backprop_distance(&ta, &tp, &w, 2.0 * (d_pos - target) * scale)?;
        if gap > 0.0 {
            model.backprop_distance(&ta, &tn, &w, -2.0 * gap * scale)?;
        }
    }
    let loss = loss * scale;
    if !loss.is_finite() {
        return Err(Error::Numeric("contrastive loss is not finite".into()));
    }
    Ok(loss)
}

/// One observed step for embedding training: `(s, a) -> (s', a')` and its cost.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub from: Vec<f64>,
    pub to: Vec<f64>,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub margin: f64,
    /// Pull positive distances toward the observed cost instead of 0.
    pub cost_targets: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 128,
            lr: EMBED_LEARNING_RATE,
            margin: DEFAULT_MARGIN,
            cost_targets: true,
        }
    }
}

/// Builds a contrastive batch from `indices`, drawing one uniform negative per
/// anchor that is not the anchor's own successor.
pub fn sample_batch<R: Rng + ?Sized>(
    data: &[PairSample],
    indices: &[usize],
    opts: &TrainOptions,
    rng: &mut R,
) -> Result<ContrastiveBatch> {
    if data.len() < 2 {
        return Err(Error::Input("need at least two samples to draw negatives".into()));
    }
    let mut batch = ContrastiveBatch {
        anchors: Vec::with_capacity(indices.len()),
        positives: Vec::with_capacity(indices.len()),
        negatives: Vec::with_capacity(indices.len()),
        positive_targets: opts.cost_targets.then(|| Vec::with_capacity(indices.len())),
        margin: opts.margin,
    };
    for &i in indices {
        let s = &data[i];
        let mut j = rng.random_range(0..data.len() - 1);
        if j >= i {
            j += 1;
        }
        batch.anchors.push(s.from.clone());
        batch.positives.push(s.to.clone());
        batch.negatives.push(data[j].to.clone());
        if let Some(t) = batch.positive_targets.as_mut() {
            t.push(s.cost);
        }
    }
    Ok(batch)
}

/// Runs `opts.epochs` passes of minibatch contrastive training; returns the
/// mean loss of the last epoch.
pub fn train_embedding<R: Rng + ?Sized>(
    model: &mut QuasimetricModel,
    adam: &mut AdamState,
    data: &[PairSample],
    opts: &TrainOptions,
    rng: &mut R,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Input("no samples to train the embedding on".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut last = 0.0;
    for _ in 0..opts.epochs {
        order.shuffle(rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(opts.batch_size.max(1)) {
            let batch = sample_batch(data, chunk, opts, rng)?;
            model.zero_grads();
            total += contrastive_loss(&batch, model)?;
            batches += 1;
            model.adam_step(adam, opts.lr)?;
        }
        last = total / batches as f64;
    }
    if !model.is_finite() {
        return Err(Error::Numeric("embedding parameters diverged".into()));
    }
    Ok(last)
}

/// Result of fitting `c_hat * d_H` to observed costs.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub scale: f64,
    pub spearman: f64,
    pub final_loss: f64,
    pub skipped: bool,
}

/// Trains the embedding on the dataset, then fits the least-squares scale
/// `c_hat` of `c_hat * d_H ≈ cost` and reports the Spearman rank correlation.
/// A dataset whose costs are all equal carries no ranking information; the
/// calibration is skipped with a warning.
pub fn calibrate_to_cost<R: Rng + ?Sized>(
    model: &mut QuasimetricModel,
    data: &[PairSample],
    opts: &TrainOptions,
    rng: &mut R,
) -> Result<Calibration> {
    if data.len() < 100 {
        return Err(Error::Input(format!("calibration needs at least 100 transitions, got {}", data.len())));
    }
    let first = data[0].cost;
    if data.iter().all(|s| s.cost == first) {
        log::warn!("all {} transitions share cost {first}; calibration skipped", data.len());
        return Ok(Calibration { scale: 1.0, spearman: f64::NAN, final_loss: f64::NAN, skipped: true });
    }
    let mut adam = model.adam_state();
    let final_loss = train_embedding(model, &mut adam, data, opts, rng)?;
    let dists = data.iter().map(|s| model.dist(&s.from, &s.to)).collect::<Result<Vec<_>>>()?;
    let costs: Vec<f64> = data.iter().map(|s| s.cost).collect();
    let (dd, dc): (f64, f64) = dists.iter().zip(&costs).fold((0.0, 0.0), |(a, b), (d, c)| (a + d * d, b + d * c));
    let scale = if dd > 0.0 { dc / dd } else { 0.0 };
    let scaled: Vec<f64> = dists.iter().map(|d| scale * d).collect();
    Ok(Calibration { scale, spearman: spearman(&scaled, &costs), final_loss, skipped: false })
}

/// Ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson correlation of average ranks).
/// Returns NaN when either input is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&average_ranks(a), &average_ranks(b))
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// Discounted sum of `r_t - d_t` computed backward along a trajectory.
/// Callers pass `d = 0` for the final step.
pub fn quasimetric_advantage(rewards: &[f64], distances: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if rewards.len() != distances.len() {
        return Err(Error::Config(format!(
            "{} rewards but {} distances",
            rewards.len(),
            distances.len()
        )));
    }
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] - distances[t] + gamma * acc;
        out[t] = acc;
    }
    Ok(out)
}
