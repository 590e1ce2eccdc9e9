//! Policy and value networks, advantage estimation, the trust-region
//! constrained update with adaptive constraint tightening, a Lagrangian
//! baseline, and the training loop tying them to the environments.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffmath::{adam_step, Activation, AdamState, Checkpoint, Mlp, ParamTensor, Trace};
use crate::envs::{ActionCmd, NavEnv, RobotState, ScenarioConfig, StepOutcome, OBS_DIM};
use crate::error::{Error, Result};
use crate::quasimetric::{
    encode_action, input_of, state_input, train_embedding, PairSample, QuasimetricModel,
    TrainOptions, DEFAULT_MARGIN, INPUT_DIM,
};
use crate::rng;
use crate::terrain::TerrainGrid;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 1.0;

/// Gaussian policy over a pre-squash action `u ∈ R²`. The command is
/// `v = v_max (1 + tanh u₀) / 2`, `ω = ω_max tanh u₁`, so every sample lands
/// inside the actuator box. Log-probabilities refer to `u`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    pub mean: Mlp,
    pub log_std: ParamTensor,
    pub v_max: f64,
    pub omega_max: f64,
}

impl PolicyNet {
    pub fn init<R: Rng + ?Sized>(
        obs_dim: usize,
        hidden: &[usize],
        init_log_std: f64,
        init_speed_fraction: f64,
        cfg: &ScenarioConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if !(init_speed_fraction > 0.0 && init_speed_fraction < 1.0) {
            return Err(Error::Config(format!("init_speed_fraction must be in (0, 1), got {init_speed_fraction}")));
        }
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(2);
        let mut mean = Mlp::init(&sizes, Activation::Tanh, Activation::Identity, rng)?;
        mean.scale_output_layer(0.01);
        // initial mean speed command = init_speed_fraction · v_max
        if let Some(last) = mean.layers_mut().last_mut() {
            last.bias.values[0] = (2.0 * init_speed_fraction - 1.0).atanh();
        }
        let log_std = ParamTensor::from_values(&[2], vec![init_log_std.clamp(LOG_STD_MIN, LOG_STD_MAX); 2])?;
        Ok(Self { mean, log_std, v_max: cfg.v_max, omega_max: cfg.omega_max })
    }

    pub fn std(&self) -> [f64; 2] {
        [self.log_std.values[0].exp(), self.log_std.values[1].exp()]
    }

    pub fn squash(&self, u: [f64; 2]) -> ActionCmd {
        ActionCmd { v_cmd: self.v_max * 0.5 * (1.0 + u[0].tanh()), omega_cmd: self.omega_max * u[1].tanh() }
    }

    pub fn mean_u(&self, obs: &[f64]) -> Result<[f64; 2]> {
        let m = self.mean.eval(obs)?;
        Ok([m[0], m[1]])
    }

    /// Deterministic action used for evaluation.
    pub fn mean_action(&self, obs: &[f64]) -> Result<ActionCmd> {
        Ok(self.squash(self.mean_u(obs)?))
    }

    /// Draws `u`, returning it with the squashed command and `log π(u|s)`.
    pub fn sample<R: Rng + ?Sized>(&self, obs: &[f64], rng: &mut R) -> Result<([f64; 2], ActionCmd, f64)> {
        let mu = self.mean_u(obs)?;
        let std = self.std();
        let u = [
            mu[0] + std[0] * rng.sample::<f64, _>(StandardNormal),
            mu[1] + std[1] * rng.sample::<f64, _>(StandardNormal),
        ];
        Ok((u, self.squash(u), gaussian_log_prob(&u, &mu, &self.log_std.values)))
    }

    pub fn log_prob(&self, obs: &[f64], u: &[f64; 2]) -> Result<f64> {
        Ok(gaussian_log_prob(u, &self.mean_u(obs)?, &self.log_std.values))
    }

    pub fn num_params(&self) -> usize {
        self.mean.num_params() + 2
    }

    /// Mean-network parameters followed by the two log-std entries.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut p = self.mean.params_flat();
        p.extend_from_slice(&self.log_std.values);
        p
    }

    /// Sets all parameters; log-std entries are clamped into range.
    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.mean.num_params();
        if flat.len() != n + 2 {
            return Err(Error::Config(format!("expected {} policy parameters, got {}", n + 2, flat.len())));
        }
        self.mean.set_params_flat(&flat[..n])?;
        for (dst, &src) in self.log_std.values.iter_mut().zip(&flat[n..]) {
            *dst = src.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.mean.zero_grads();
        self.log_std.zero_grad();
    }

    pub fn grads_flat(&self) -> Vec<f64> {
        let mut g = self.mean.grads_flat();
        g.extend_from_slice(&self.log_std.grad);
        g
    }

    pub fn is_finite(&self) -> bool {
        self.mean.is_finite() && self.log_std.is_finite()
    }

    /// Accumulates `Σ_t weights[t] · ∇ log π(u_t | s_t)` into the gradients.
    pub fn accumulate_score(&mut self, obs: &[Vec<f64>], us: &[[f64; 2]], weights: &[f64]) -> Result<()> {
        let var = self.std().map(|s| s * s);
        for ((o, u), &w) in obs.iter().zip(us).zip(weights) {
            if w == 0.0 {
                continue;
            }
            let (mu, trace) = self.mean.forward_trace(o)?;
            let d_mu = [w * (u[0] - mu[0]) / var[0], w * (u[1] - mu[1]) / var[1]];
            self.mean.backward_trace(&trace, &d_mu)?;
            for i in 0..2 {
                self.log_std.grad[i] += w * ((u[i] - mu[i]).powi(2) / var[i] - 1.0);
            }
        }
        Ok(())
    }

    /// Mean of `KL(self(·|s) ‖ other(·|s))` over the given observations.
    pub fn mean_kl_to(&self, other: &PolicyNet, obs: &[Vec<f64>]) -> Result<f64> {
        if obs.is_empty() {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for o in obs {
            let (a, b) = (self.mean_u(o)?, other.mean_u(o)?);
            total += gaussian_kl(&a, &self.log_std.values, &b, &other.log_std.values);
        }
        Ok(total / obs.len() as f64)
    }

    pub fn to_checkpoint(&self, ckpt: Checkpoint) -> Checkpoint {
        ckpt.with_net("policy_mean", &self.mean)
            .with_vector("policy_log_std", &self.log_std.values)
            .with_vector("policy_limits", &[self.v_max, self.omega_max])
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let missing = |what: &str| Error::parse("checkpoint", format!("missing {what}"));
        let mean = ckpt.net("policy_mean").ok_or_else(|| missing("policy_mean"))?.clone();
        let ls = ckpt.vector("policy_log_std").ok_or_else(|| missing("policy_log_std"))?;
        let limits = ckpt.vector("policy_limits").ok_or_else(|| missing("policy_limits"))?;
        if ls.len() != 2 || limits.len() != 2 || mean.output_dim() != 2 {
            return Err(Error::parse("checkpoint", "policy tensors have the wrong shape"));
        }
        Ok(Self {
            mean,
            log_std: ParamTensor::from_values(&[2], ls.to_vec())?,
            v_max: limits[0],
            omega_max: limits[1],
        })
    }
}

/// Diagonal Gaussian log-density.
pub fn gaussian_log_prob(u: &[f64; 2], mu: &[f64; 2], log_std: &[f64]) -> f64 {
    (0..2)
        .map(|i| {
            let z = (u[i] - mu[i]) / log_std[i].exp();
            -0.5 * z * z - log_std[i] - 0.5 * (2.0 * PI).ln()
        })
        .sum()
}

/// `KL(N(mu_p, σ_p) ‖ N(mu_q, σ_q))` for diagonal Gaussians.
pub fn gaussian_kl(mu_p: &[f64; 2], ls_p: &[f64], mu_q: &[f64; 2], ls_q: &[f64]) -> f64 {
    (0..2)
        .map(|i| {
            let (vp, vq) = ((2.0 * ls_p[i]).exp(), (2.0 * ls_q[i]).exp());
            ls_q[i] - ls_p[i] + (vp + (mu_p[i] - mu_q[i]).powi(2)) / (2.0 * vq) - 0.5
        })
        .sum()
}

/// Scalar state-value approximator.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueNet {
    pub net: Mlp,
}

impl ValueNet {
    pub fn init<R: Rng + ?Sized>(obs_dim: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Ok(Self { net: Mlp::init(&sizes, Activation::Tanh, Activation::Identity, rng)? })
    }

    pub fn predict(&self, obs: &[f64]) -> Result<f64> {
        Ok(self.net.eval(obs)?[0])
    }

    /// Minibatch regression of the value onto `targets` (mean squared error).
    /// Returns the mean loss of the final epoch.
    pub fn fit<R: Rng + ?Sized>(
        &mut self,
        adam: &mut AdamState,
        obs: &[Vec<f64>],
        targets: &[f64],
        opts: &FitOptions,
        rng: &mut R,
    ) -> Result<f64> {
        if obs.len() != targets.len() || obs.is_empty() {
            return Err(Error::Input("value fit needs matching, non-empty inputs and targets".into()));
        }
        let mut order: Vec<usize> = (0..obs.len()).collect();
        let mut last = 0.0;
        for _ in 0..opts.epochs {
            order.shuffle(rng);
            let mut total = 0.0;
            for chunk in order.chunks(opts.minibatch.max(1)) {
                self.net.zero_grads();
                let scale = 1.0 / chunk.len() as f64;
                for &i in chunk {
                    let (out, trace) = self.net.forward_trace(&obs[i])?;
                    let err = out[0] - targets[i];
                    total += err * err;
                    self.net.backward_trace(&trace, &[2.0 * err * scale])?;
                }
                adam_step(&mut self.net.tensors_mut(), adam, opts.lr)?;
            }
            last = total / obs.len() as f64;
        }
        Ok(last)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitOptions {
    pub epochs: usize,
    pub minibatch: usize,
    pub lr: f64,
}

/// One environment step as recorded during collection.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub obs: Vec<f64>,
    pub u: [f64; 2],
    pub action: ActionCmd,
    pub log_prob: f64,
    pub value: f64,
    pub cost_value: f64,
    pub reward: f64,
    pub traversal_cost: f64,
    pub constraint_cost: f64,
    pub violated: bool,
    pub energy_j: f64,
    pub distance: f64,
    /// Planar distance to the goal before the step (m).
    pub goal_distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<StepRecord>,
    pub outcome: StepOutcome,
    /// Observation after the final step.
    pub final_obs: Vec<f64>,
    /// Value estimates of the final observation (0 for terminal outcomes).
    pub bootstrap_value: f64,
    pub bootstrap_cost_value: f64,
    /// Planar distance to the goal after the final step (m).
    pub final_goal_distance: f64,
}

impl Trajectory {
    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

/// Whole episodes collected under one behaviour policy.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RolloutBatch {
    pub trajectories: Vec<Trajectory>,
}

impl RolloutBatch {
    pub fn n_steps(&self) -> usize {
        self.trajectories.iter().map(|t| t.steps.len()).sum()
    }

    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.trajectories.iter().flat_map(|t| t.steps.iter())
    }

    /// Mean of the per-step violation indicator.
    pub fn violation_rate(&self) -> f64 {
        let n = self.n_steps();
        if n == 0 {
            return 0.0;
        }
        self.steps().filter(|s| s.violated).count() as f64 / n as f64
    }

    pub fn mean_constraint_cost(&self) -> f64 {
        let n = self.n_steps();
        if n == 0 {
            return 0.0;
        }
        self.steps().map(|s| s.constraint_cost).sum::<f64>() / n as f64
    }

    pub fn success_rate(&self) -> f64 {
        if self.trajectories.is_empty() {
            return 0.0;
        }
        let ok = self.trajectories.iter().filter(|t| t.outcome == StepOutcome::Goal).count();
        ok as f64 / self.trajectories.len() as f64
    }

    pub fn mean_return(&self) -> f64 {
        if self.trajectories.is_empty() {
            return 0.0;
        }
        self.trajectories.iter().map(Trajectory::total_reward).sum::<f64>() / self.trajectories.len() as f64
    }

    pub fn energy_per_m(&self) -> f64 {
        let distance: f64 = self.steps().map(|s| s.distance).sum();
        if distance <= 0.0 {
            return 0.0;
        }
        self.steps().map(|s| s.energy_j).sum::<f64>() / distance
    }

    /// Embedding pairs `(s_t, a_t) -> (s_{t+1}, a_{t+1})` labelled with the
    /// traversal cost; the last step of a trajectory pairs with the final
    /// observation and the null action.
    pub fn pair_samples(&self, cfg: &ScenarioConfig) -> Vec<PairSample> {
        let mut out = Vec::with_capacity(self.n_steps());
        for traj in &self.trajectories {
            for (t, s) in traj.steps.iter().enumerate() {
                let from = input_of(&s.obs, encode_action(&s.action, cfg));
                let to = match traj.steps.get(t + 1) {
                    Some(n) => input_of(&n.obs, encode_action(&n.action, cfg)),
                    None => state_input(&traj.final_obs),
                };
                out.push(PairSample { from, to, cost: s.traversal_cost });
            }
        }
        out
    }
}

/// Runs whole episodes with the stochastic policy until at least `min_steps`
/// steps are recorded.
pub fn collect_batch<R: Rng + ?Sized>(
    env: &mut NavEnv,
    policy: &PolicyNet,
    value: &ValueNet,
    cost_value: &ValueNet,
    min_steps: usize,
    rng: &mut R,
) -> Result<RolloutBatch> {
    let mut batch = RolloutBatch::default();
    while batch.n_steps() < min_steps {
        env.reset();
        let mut steps = Vec::new();
        let mut obs = env.observe(&env.state(), env.curvature())?;
        let goal = env.config().goal;
        let goal_distance = |s: RobotState| (goal[0] - s.x).hypot(goal[1] - s.y);
        let outcome = loop {
            let (u, action, log_prob) = policy.sample(&obs, rng)?;
            let before = goal_distance(env.state());
            let tr = env.step(action)?;
            let next_obs = env.observe(&env.state(), env.curvature())?;
            steps.push(StepRecord {
                value: value.predict(&obs)?,
                cost_value: cost_value.predict(&obs)?,
                obs: std::mem::replace(&mut obs, next_obs),
                u,
                action: tr.action,
                log_prob,
                reward: tr.reward,
                traversal_cost: tr.traversal_cost,
                constraint_cost: tr.constraint_cost,
                violated: tr.violated,
                energy_j: tr.energy_j,
                distance: tr.distance,
                goal_distance: before,
            });
            if tr.outcome.is_done() {
                break tr.outcome;
            }
        };
        let (bv, bc) = if outcome.is_terminal() {
            (0.0, 0.0)
        } else {
            (value.predict(&obs)?, cost_value.predict(&obs)?)
        };
        batch.trajectories.push(Trajectory {
            steps,
            outcome,
            final_obs: obs,
            bootstrap_value: bv,
            bootstrap_cost_value: bc,
            final_goal_distance: goal_distance(env.state()),
        });
    }
    Ok(batch)
}

/// Generalised advantage estimation for one trajectory. Returns raw
/// advantages and returns (`advantage + value`).
pub fn gae(rewards: &[f64], values: &[f64], bootstrap: f64, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let next = if t + 1 < n { values[t + 1] } else { bootstrap };
        let delta = rewards[t] + gamma * next - values[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Standardises to zero mean and unit variance (left centred if constant).
pub fn normalize(x: &mut [f64]) {
    if x.is_empty() {
        return;
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for v in x.iter_mut() {
        *v = if std > 1e-8 { (*v - mean) / std } else { *v - mean };
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Advantages {
    /// Normalised reward advantages.
    pub advantages: Vec<f64>,
    /// Targets for the reward value net.
    pub returns: Vec<f64>,
    /// Centred (not rescaled) constraint advantages.
    pub cost_advantages: Vec<f64>,
    pub cost_returns: Vec<f64>,
}

/// GAE over every trajectory for rewards (optionally shaped) and constraint
/// costs. `shaped_rewards`, when given, replaces the per-step rewards and
/// must be aligned with the batch steps.
pub fn estimate_advantages(
    batch: &RolloutBatch,
    shaped_rewards: Option<&[f64]>,
    gamma: f64,
    lambda: f64,
) -> Result<Advantages> {
    if batch.n_steps() == 0 {
        return Err(Error::Input("cannot estimate advantages on an empty batch".into()));
    }
    if let Some(r) = shaped_rewards {
        if r.len() != batch.n_steps() {
            return Err(Error::Config("shaped rewards are not aligned with the batch".into()));
        }
    }
    let mut out = Advantages {
        advantages: Vec::with_capacity(batch.n_steps()),
        returns: Vec::with_capacity(batch.n_steps()),
        cost_advantages: Vec::with_capacity(batch.n_steps()),
        cost_returns: Vec::with_capacity(batch.n_steps()),
    };
    let mut offset = 0;
    for traj in &batch.trajectories {
        let n = traj.steps.len();
        let rewards: Vec<f64> = match shaped_rewards {
            Some(r) => r[offset..offset + n].to_vec(),
            None => traj.steps.iter().map(|s| s.reward).collect(),
        };
        offset += n;
        let values: Vec<f64> = traj.steps.iter().map(|s| s.value).collect();
        let (a, r) = gae(&rewards, &values, traj.bootstrap_value, gamma, lambda);
        out.advantages.extend(a);
        out.returns.extend(r);
        let costs: Vec<f64> = traj.steps.iter().map(|s| s.constraint_cost).collect();
        let cvalues: Vec<f64> = traj.steps.iter().map(|s| s.cost_value).collect();
        let (ca, cr) = gae(&costs, &cvalues, traj.bootstrap_cost_value, gamma, lambda);
        out.cost_advantages.extend(ca);
        out.cost_returns.extend(cr);
    }
    normalize(&mut out.advantages);
    let mean = out.cost_advantages.iter().sum::<f64>() / out.cost_advantages.len() as f64;
    out.cost_advantages.iter_mut().for_each(|c| *c -= mean);
    Ok(out)
}

/// Flattened view of a batch used by the policy updates.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyBatch {
    pub obs: Vec<Vec<f64>>,
    pub us: Vec<[f64; 2]>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub cost_advantages: Vec<f64>,
}

impl PolicyBatch {
    pub fn new(batch: &RolloutBatch, adv: &Advantages) -> Self {
        Self {
            obs: batch.steps().map(|s| s.obs.clone()).collect(),
            us: batch.steps().map(|s| s.u).collect(),
            old_log_probs: batch.steps().map(|s| s.log_prob).collect(),
            advantages: adv.advantages.clone(),
            cost_advantages: adv.cost_advantages.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    /// Mean importance-weighted advantage `E[π/π_old · A]` under `policy`.
    pub fn surrogate(&self, policy: &PolicyNet, advantages: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for i in 0..self.len() {
            let ratio = (policy.log_prob(&self.obs[i], &self.us[i])? - self.old_log_probs[i]).exp();
            total += ratio * advantages[i];
        }
        Ok(total / self.len() as f64)
    }
}

/// `g = mean_t ∇ log π(u_t|s_t) · A_t` at the current parameters.
pub fn policy_gradient(policy: &mut PolicyNet, batch: &PolicyBatch, advantages: &[f64]) -> Result<Vec<f64>> {
    let n = batch.len().max(1) as f64;
    let weights: Vec<f64> = advantages.iter().map(|a| a / n).collect();
    policy.zero_grads();
    policy.accumulate_score(&batch.obs, &batch.us, &weights)?;
    let g = policy.grads_flat();
    policy.zero_grads();
    Ok(g)
}

/// Solves `H x = b` for a symmetric positive semi-definite operator.
pub fn conjugate_gradient<F>(mut hvp: F, b: &[f64], iters: usize, tol: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let mut x = vec![0.0; b.len()];
    let mut r = b.to_vec();
    let mut p = b.to_vec();
    let mut rr = dot(&r, &r);
    let target = tol * rr.sqrt();
    for _ in 0..iters {
        if rr.sqrt() <= target || rr == 0.0 {
            break;
        }
        let hp = hvp(&p);
        let php = dot(&p, &hp);
        if !php.is_finite() || php <= 0.0 {
            if !php.is_finite() {
                return Err(Error::Numeric("non-finite curvature in conjugate gradient".into()));
            }
            break;
        }
        let alpha = rr / php;
        for i in 0..x.len() {
            x[i] += alpha * p[i];
            r[i] -= alpha * hp[i];
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        for i in 0..p.len() {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_new;
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("conjugate gradient produced a non-finite solution".into()));
    }
    Ok(x)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fisher-vector products of the Gaussian policy at fixed parameters: the
/// mean block is `E[Jᵀ Σ⁻¹ J]` (Jacobian-vector product followed by a
/// backward pass), the log-std block is `2 I`; `damping · v` is added.
pub struct FisherOperator {
    net: Mlp,
    traces: Vec<Trace>,
    inv_var: [f64; 2],
    damping: f64,
}

impl FisherOperator {
    pub fn new(policy: &PolicyNet, obs: &[Vec<f64>], stride: usize, damping: f64) -> Result<Self> {
        let traces = obs
            .iter()
            .step_by(stride.max(1))
            .map(|o| policy.mean.forward_trace(o).map(|(_, t)| t))
            .collect::<Result<Vec<_>>>()?;
        let var = policy.std().map(|s| s * s);
        Ok(Self { net: policy.mean.clone(), traces, inv_var: [1.0 / var[0], 1.0 / var[1]], damping })
    }

    pub fn apply(&mut self, v: &[f64]) -> Result<Vec<f64>> {
        let n_mean = self.net.num_params();
        let scale = 1.0 / self.traces.len().max(1) as f64;
        self.net.zero_grads();
        for trace in &self.traces {
            let jv = self.net.jvp(trace, &v[..n_mean])?;
            let w = [jv[0] * self.inv_var[0] * scale, jv[1] * self.inv_var[1] * scale];
            self.net.backward_trace(trace, &w)?;
        }
        let mut out = self.net.grads_flat();
        out.push(2.0 * v[n_mean]);
        out.push(2.0 * v[n_mean + 1]);
        for (o, x) in out.iter_mut().zip(v) {
            *o += self.damping * x;
        }
        Ok(out)
    }
}

/// Tolerance, trust region and tightening schedule of the constraint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintState {
    pub delta: f64,
    pub delta_initial: f64,
    pub delta_floor: f64,
    pub act_alpha: f64,
    pub epsilon_kl: f64,
    /// `(iteration, delta, measured violation rate)` per iteration.
    pub history: Vec<(usize, f64, f64)>,
}

impl ConstraintState {
    pub fn new(delta_initial: f64, delta_floor: f64, act_alpha: f64, epsilon_kl: f64) -> Result<Self> {
        if !(delta_initial > 0.0 && delta_initial < 1.0) || !(delta_floor > 0.0 && delta_floor <= delta_initial) {
            return Err(Error::Config(format!(
                "need 0 < delta_floor ({delta_floor}) <= delta ({delta_initial}) < 1"
            )));
        }
        if !(epsilon_kl > 0.0) || act_alpha < 0.0 {
            return Err(Error::Config("epsilon_kl must be > 0 and act_alpha >= 0".into()));
        }
        Ok(Self { delta: delta_initial, delta_initial, delta_floor, act_alpha, epsilon_kl, history: Vec::new() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CpoOptions {
    pub cg_iters: usize,
    pub cg_damping: f64,
    pub backtracks: usize,
    pub fisher_stride: usize,
}

impl Default for CpoOptions {
    fn default() -> Self {
        Self { cg_iters: 10, cg_damping: 0.1, backtracks: 10, fisher_stride: 4 }
    }
}

/// Which branch of the dual solution produced the step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepCase {
    /// Constraint inactive: plain natural-gradient step.
    Unconstrained,
    /// Constraint active and satisfiable inside the trust region.
    Constrained,
    /// Constraint cannot be met inside the trust region: reduce cost only.
    Recovery,
    /// Nothing to do (zero direction).
    Null,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CpoReport {
    pub case: StepCase,
    pub accepted: bool,
    pub backtracks: usize,
    /// `KL(π_new ‖ π_old)` of the accepted step (0 when nothing was accepted).
    pub kl: f64,
    pub surrogate_gain: f64,
    pub cost_change: f64,
    pub constraint_value: f64,
}

/// One trust-region step maximising the surrogate subject to
/// `KL ≤ ε` and the linearised constraint `J_C + bᵀΔ ≤ δ`, where `J_C` is the
/// measured violation rate. Falls back to a pure cost-reduction step when the
/// constraint cannot be met inside the trust region. A backtracking line
/// search enforces the measured KL bound and the constraint; when it fails
/// the policy is left unchanged.
pub fn cpo_update(
    policy: &mut PolicyNet,
    batch: &PolicyBatch,
    constraint_value: f64,
    cstate: &ConstraintState,
    opts: &CpoOptions,
) -> Result<CpoReport> {
    let eps = cstate.epsilon_kl;
    let g = policy_gradient(policy, batch, &batch.advantages)?;
    let b = policy_gradient(policy, batch, &batch.cost_advantages)?;
    let c = constraint_value - cstate.delta;
    let mut fisher = FisherOperator::new(policy, &batch.obs, opts.fisher_stride, opts.cg_damping)?;
    let mut fail: Option<Error> = None;
    let mut hvp = |v: &[f64]| match fisher.apply(v) {
        Ok(x) => x,
        Err(e) => {
            fail = Some(e);
            vec![f64::NAN; v.len()]
        }
    };
    let v = conjugate_gradient(&mut hvp, &g, opts.cg_iters, 1e-10)?;
    let q = dot(&g, &v);
    let tiny = 1e-8;
    let (case, step) = if dot(&b, &b) <= tiny && c < 0.0 {
        if q <= tiny {
            (StepCase::Null, vec![0.0; g.len()])
        } else {
            let lam = (q / (2.0 * eps)).sqrt();
            (StepCase::Unconstrained, v.iter().map(|x| x / lam).collect())
        }
    } else {
        let w = conjugate_gradient(&mut hvp, &b, opts.cg_iters, 1e-10)?;
        let r = dot(&g, &w);
        let s = dot(&b, &w).max(tiny);
        let a_term = q - r * r / s;
        let b_term = 2.0 * eps - c * c / s;
        if c < 0.0 && b_term < 0.0 {
            let lam = (q.max(tiny) / (2.0 * eps)).sqrt();
            (StepCase::Unconstrained, v.iter().map(|x| x / lam).collect())
        } else if b_term >= 0.0 {
            let (la, lb) = if c < 0.0 { ((0.0, r / c), (r / c, f64::INFINITY)) } else { ((r / c, f64::INFINITY), (0.0, r / c)) };
            let proj = |x: f64, (lo, hi): (f64, f64)| x.max(lo.min(hi)).min(hi.max(lo));
            let lam_a = proj((a_term.max(0.0) / b_term.max(tiny)).sqrt(), la);
            let lam_b = proj((q.max(0.0) / (2.0 * eps)).sqrt(), lb);
            let f_a = -0.5 * (a_term / (lam_a + tiny) + b_term * lam_a) - r * c / s;
            let f_b = -0.5 * (q / (lam_b + tiny) + 2.0 * eps * lam_b);
            let lam = if f_a >= f_b { lam_a } else { lam_b };
            let nu = ((lam * c - r) / s).max(0.0);
            let step = v.iter().zip(&w).map(|(vi, wi)| (vi - nu * wi) / (lam + tiny)).collect();
            (StepCase::Constrained, step)
        } else {
            let nu = (2.0 * eps / s).sqrt();
            (StepCase::Recovery, w.iter().map(|x| -nu * x).collect())
        }
    };
    if let Some(e) = fail {
        return Err(e);
    }
    let mut report = CpoReport {
        case,
        accepted: false,
        backtracks: 0,
        kl: 0.0,
        surrogate_gain: 0.0,
        cost_change: 0.0,
        constraint_value,
    };
    if case == StepCase::Null || step.iter().all(|x| *x == 0.0) {
        return Ok(report);
    }
    if step.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("constrained step is not finite".into()));
    }
    let old = policy.clone();
    let theta = old.params_flat();
    let base_reward = batch.surrogate(&old, &batch.advantages)?;
    let base_cost = batch.surrogate(&old, &batch.cost_advantages)?;
    let mut candidate = old.clone();
    let mut frac = 1.0;
    for k in 0..opts.backtracks {
        let trial: Vec<f64> = theta.iter().zip(&step).map(|(t, s)| t + frac * s).collect();
        candidate.set_params_flat(&trial)?;
        let kl = candidate.mean_kl_to(&old, &batch.obs)?;
        let gain = batch.surrogate(&candidate, &batch.advantages)? - base_reward;
        let cost_change = batch.surrogate(&candidate, &batch.cost_advantages)? - base_cost;
        let cost_ok = if case == StepCase::Recovery { cost_change <= 0.0 } else { cost_change <= (-c).max(0.0) };
        let gain_ok = case == StepCase::Recovery || c >= 0.0 || gain > 0.0;
        if kl.is_finite() && kl <= eps && cost_ok && gain_ok {
            *policy = candidate;
            report.accepted = true;
            report.backtracks = k;
            report.kl = kl;
            report.surrogate_gain = gain;
            report.cost_change = cost_change;
            return Ok(report);
        }
        frac *= 0.5;
    }
    report.backtracks = opts.backtracks;
    Ok(report)
}

/// Shrinks `δ` by `1 - α · ratio`, where `ratio` is the mean embedding
/// distance from each step to its nearest safe step, divided by the mean
/// distance from each step to all (sampled) safe steps. Safe steps contribute
/// distance 0. The result is clamped to `[delta_floor, delta]`.
pub fn adapt_constraint(cstate: &ConstraintState, embeddings: &[Vec<f64>], violated: &[bool], weights: &[f64]) -> f64 {
    if cstate.act_alpha == 0.0 || embeddings.is_empty() {
        return cstate.delta;
    }
    let safe: Vec<&Vec<f64>> = embeddings.iter().zip(violated).filter(|(_, &v)| !v).map(|(e, _)| e).collect();
    if safe.is_empty() {
        log::warn!("no safe steps in the batch; constraint tolerance left unchanged");
        return cstate.delta;
    }
    let stride = safe.len().div_ceil(256).max(1);
    let candidates: Vec<&Vec<f64>> = safe.into_iter().step_by(stride).collect();
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .zip(weights)
            .map(|((x, y), w)| {
                let d = x - y;
                if d > 0.0 {
                    w * d
                } else {
                    (w - 1.0) * d
                }
            })
            .sum()
    };
    let (mut nearest_sum, mut mean_sum) = (0.0, 0.0);
    for (e, &v) in embeddings.iter().zip(violated) {
        let ds: Vec<f64> = candidates.iter().map(|c| dist(e, c)).collect();
        mean_sum += ds.iter().sum::<f64>() / ds.len() as f64;
        if v {
            nearest_sum += ds.iter().copied().fold(f64::INFINITY, f64::min);
        }
    }
    let ratio = if mean_sum > 0.0 { (nearest_sum / mean_sum).clamp(0.0, 1.0) } else { 0.0 };
    tightened_delta(cstate, ratio)
}

/// `δ · (1 - α · ratio)` clamped to `[delta_floor, δ]`.
pub fn tightened_delta(cstate: &ConstraintState, ratio: f64) -> f64 {
    (cstate.delta * (1.0 - cstate.act_alpha * ratio)).clamp(cstate.delta_floor, cstate.delta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LagrangianOptions {
    pub lr_lambda: f64,
    pub policy_lr: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub clip: f64,
}

impl Default for LagrangianOptions {
    fn default() -> Self {
        Self { lr_lambda: 0.05, policy_lr: 3e-4, epochs: 4, minibatch: 128, clip: 0.2 }
    }
}

/// Dual ascent on the multiplier: `λ ← max(0, λ + lr (violation − δ))`.
pub fn update_multiplier(lambda: f64, lr: f64, violation_rate: f64, delta: f64) -> f64 {
    (lambda + lr * (violation_rate - delta)).max(0.0)
}

/// Clipped-surrogate epochs on `(A − λ A_C) / (1 + λ)` followed by the dual
/// update. Returns the new multiplier and the mean KL of the final policy.
#[allow(clippy::too_many_arguments)]
pub fn lagrangian_update<R: Rng + ?Sized>(
    policy: &mut PolicyNet,
    adam: &mut AdamState,
    batch: &PolicyBatch,
    lambda: f64,
    violation_rate: f64,
    delta: f64,
    opts: &LagrangianOptions,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if lambda < 0.0 {
        return Err(Error::Config(format!("multiplier must be >= 0, got {lambda}")));
    }
    let old = policy.clone();
    let combined: Vec<f64> = batch
        .advantages
        .iter()
        .zip(&batch.cost_advantages)
        .map(|(a, c)| (a - lambda * c) / (1.0 + lambda))
        .collect();
    let mut order: Vec<usize> = (0..batch.len()).collect();
    for _ in 0..opts.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(opts.minibatch.max(1)) {
            let mut weights = Vec::with_capacity(chunk.len());
            let n = chunk.len() as f64;
            for &i in chunk {
                let ratio = (policy.log_prob(&batch.obs[i], &batch.us[i])? - batch.old_log_probs[i]).exp();
                let a = combined[i];
                let clipped = (a > 0.0 && ratio > 1.0 + opts.clip) || (a < 0.0 && ratio < 1.0 - opts.clip);
                // gradient ascent: Adam minimises, so negate
                weights.push(if clipped { 0.0 } else { -ratio * a / n });
            }
            let obs: Vec<Vec<f64>> = chunk.iter().map(|&i| batch.obs[i].clone()).collect();
            let us: Vec<[f64; 2]> = chunk.iter().map(|&i| batch.us[i]).collect();
            policy.zero_grads();
            policy.accumulate_score(&obs, &us, &weights)?;
            let mut tensors = policy.mean.tensors_mut();
            tensors.push(&mut policy.log_std);
            adam_step(&mut tensors, adam, opts.policy_lr)?;
            for ls in policy.log_std.values.iter_mut() {
                *ls = ls.clamp(LOG_STD_MIN, LOG_STD_MAX);
            }
        }
    }
    let kl = policy.mean_kl_to(&old, &batch.obs)?;
    Ok((update_multiplier(lambda, opts.lr_lambda, violation_rate, delta), kl))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Qcpo,
    Cpo,
    Lagrangian,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Qcpo => "qcpo",
            Algorithm::Cpo => "cpo",
            Algorithm::Lagrangian => "lagrangian",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qcpo" => Ok(Algorithm::Qcpo),
            "cpo" => Ok(Algorithm::Cpo),
            "lagrangian" => Ok(Algorithm::Lagrangian),
            other => Err(Error::Config(format!("unknown algorithm {other:?}"))),
        }
    }
}

/// How policy advantages are formed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum AdvantageMode {
    /// GAE on the environment reward.
    Gae,
    /// GAE on `r_t − d_H(step)`: the quasimetric advantage with a learned baseline.
    Quasimetric,
    /// GAE on `r_t − λ_blend · d_H(step)`.
    Blend { lambda: f64 },
}

impl AdvantageMode {
    fn distance_weight(self) -> f64 {
        match self {
            AdvantageMode::Gae => 0.0,
            AdvantageMode::Quasimetric => 1.0,
            AdvantageMode::Blend { lambda } => lambda,
        }
    }
}

/// Every optimiser knob of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub total_steps: usize,
    pub steps_per_batch: usize,
    pub lambda_gae: f64,
    pub epsilon_kl: f64,
    pub delta_initial: f64,
    pub delta_floor: f64,
    pub act_alpha: f64,
    pub advantage_mode: AdvantageMode,
    /// Train the embedding each iteration (false keeps it at its random init).
    pub train_embedding: bool,
    pub embed_dim: usize,
    pub embed_hidden: Vec<usize>,
    pub embed_epochs: usize,
    pub embed_lr: f64,
    pub embed_minibatch: usize,
    pub policy_hidden: Vec<usize>,
    pub value_hidden: Vec<usize>,
    pub init_log_std: f64,
    /// Weight of the learner-side progress term κ(‖p_t − g‖ − ‖p_{t+1} − g‖)
    /// added to the rewards the policy is trained on (0 disables it).
    pub progress_shaping: f64,
    /// Initial mean speed command as a fraction of v_max.
    pub init_speed_fraction: f64,
    pub value_fit: FitOptions,
    pub cpo: CpoOptions,
    pub lagrangian: LagrangianOptions,
}

impl TrainConfig {
    /// Defaults for `algorithm`, with the ablation switches applied.
    pub fn for_algorithm(algorithm: Algorithm, seed: u64, no_qe: bool, no_act: bool) -> Self {
        let qcpo = algorithm == Algorithm::Qcpo;
        let qe = qcpo && !no_qe;
        Self {
            algorithm,
            seed,
            total_steps: 100_000,
            steps_per_batch: 2048,
            lambda_gae: 0.95,
            epsilon_kl: 0.01,
            delta_initial: 0.05,
            delta_floor: 0.01,
            act_alpha: if qcpo && !no_act { 0.1 } else { 0.0 },
            advantage_mode: if qe { AdvantageMode::Quasimetric } else { AdvantageMode::Gae },
            train_embedding: qe,
            embed_dim: crate::quasimetric::DEFAULT_EMBED_DIM,
            embed_hidden: vec![32, 32],
            embed_epochs: 2,
            embed_lr: crate::quasimetric::EMBED_LEARNING_RATE,
            embed_minibatch: 128,
            policy_hidden: vec![32, 32],
            value_hidden: vec![32, 32],
            init_log_std: -0.5,
            init_speed_fraction: 0.5,
            progress_shaping: 1.0,
            value_fit: FitOptions { epochs: 5, minibatch: 128, lr: 1e-3 },
            cpo: CpoOptions::default(),
            lagrangian: LagrangianOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        ConstraintState::new(self.delta_initial, self.delta_floor, self.act_alpha, self.epsilon_kl)?;
        if self.steps_per_batch == 0 || self.total_steps == 0 {
            return Err(Error::Config("step budgets must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda_gae) {
            return Err(Error::Config(format!("lambda_gae must be in [0, 1], got {}", self.lambda_gae)));
        }
        if self.algorithm == Algorithm::Lagrangian && self.lagrangian.lr_lambda < 0.0 {
            return Err(Error::Config("lr_lambda must be >= 0".into()));
        }
        Ok(())
    }
}

/// One row of the learning-curve log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub iteration: usize,
    pub steps: usize,
    pub mean_return: f64,
    pub success_rate: f64,
    pub violation_rate: f64,
    pub delta: f64,
    pub kl: f64,
    pub embed_loss: f64,
    pub energy_per_m: f64,
}

impl CurveRow {
    pub const CSV_HEADER: &'static str =
        "iteration,steps,mean_return,success_rate,violation_rate,delta,kl,embed_loss,energy_per_m";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.steps,
            self.mean_return,
            self.success_rate,
            self.violation_rate,
            self.delta,
            self.kl,
            self.embed_loss,
            self.energy_per_m
        )
    }

    pub fn parse_csv_line(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(Error::parse("learning curve", format!("expected 9 fields, got {}", f.len())));
        }
        let num = |i: usize| f[i].trim().parse::<f64>().map_err(|e| Error::parse("learning curve", e));
        Ok(Self {
            iteration: num(0)? as usize,
            steps: num(1)? as usize,
            mean_return: num(2)?,
            success_rate: num(3)?,
            violation_rate: num(4)?,
            delta: num(5)?,
            kl: num(6)?,
            embed_loss: num(7)?,
            energy_per_m: num(8)?,
        })
    }
}

/// Everything a training run produces.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub policy: PolicyNet,
    pub value: ValueNet,
    pub cost_value: ValueNet,
    pub embedding: QuasimetricModel,
    pub constraint: ConstraintState,
    pub lagrange_multiplier: f64,
    pub curve: Vec<CurveRow>,
    pub reports: Vec<CpoReport>,
    pub grid: Arc<TerrainGrid>,
}

impl TrainOutput {
    pub fn checkpoint(&self, seed: u64) -> Checkpoint {
        let ckpt = self.embedding.to_checkpoint(seed);
        self.policy
            .to_checkpoint(ckpt)
            .with_net("value", &self.value.net)
            .with_net("cost_value", &self.cost_value.net)
            .with_vector("delta", &[self.constraint.delta])
    }
}

/// Per-step rewards the policy is trained on: the environment reward minus
/// `distance_weight · d_H(step)` (0 on the last step of each trajectory),
/// plus the progress term with weight `progress`. `None` when both weights are 0.
pub fn learner_rewards(
    batch: &RolloutBatch,
    pairs: &[PairSample],
    embedding: &QuasimetricModel,
    distance_weight: f64,
    progress: f64,
) -> Result<Option<Vec<f64>>> {
    if distance_weight == 0.0 && progress == 0.0 {
        return Ok(None);
    }
    if pairs.len() != batch.n_steps() {
        return Err(Error::Config("embedding pairs are not aligned with the batch".into()));
    }
    let w = embedding.norm.weights();
    let mut out = Vec::with_capacity(batch.n_steps());
    let mut k = 0;
    for traj in &batch.trajectories {
        let n = traj.steps.len();
        for (t, step) in traj.steps.iter().enumerate() {
            let mut r = step.reward;
            if distance_weight != 0.0 && t + 1 < n {
                let (a, b) = (embedding.embed(&pairs[k + t].from)?, embedding.embed(&pairs[k + t].to)?);
                r -= distance_weight * embedding.dist_embedded(&a, &b, &w);
            }
            if progress != 0.0 {
                let next = match traj.steps.get(t + 1) {
                    Some(s) => s.goal_distance,
                    None if traj.outcome.is_terminal() => 0.0,
                    None => traj.final_goal_distance,
                };
                r += progress * (step.goal_distance - next);
            }
            out.push(r);
        }
        k += n;
    }
    Ok(Some(out))
}

/// Terrain seed shared by every variant trained from the same run seed.
pub fn terrain_seed(seed: u64) -> u64 {
    rng::stream(seed, rng::TERRAIN).random()
}

/// Full training loop: collect, update the embedding, form advantages,
/// update the policy (constrained trust region or Lagrangian), refit values,
/// and tighten the constraint.
pub fn train(scenario: &ScenarioConfig, cfg: &TrainConfig) -> Result<TrainOutput> {
    let grid = Arc::new(scenario.build_terrain(terrain_seed(cfg.seed))?);
    train_on(scenario, cfg, grid)
}

pub fn train_on(scenario: &ScenarioConfig, cfg: &TrainConfig, grid: Arc<TerrainGrid>) -> Result<TrainOutput> {
    cfg.validate()?;
    scenario.validate()?;
    let mut env = NavEnv::new(scenario.clone(), Arc::clone(&grid), rng::stream(cfg.seed, rng::ROLLOUT))?;
    let mut init = rng::stream(cfg.seed, rng::POLICY_INIT);
    let mut policy = PolicyNet::init(OBS_DIM, &cfg.policy_hidden, cfg.init_log_std, cfg.init_speed_fraction, scenario, &mut init)?;
    let mut value = ValueNet::init(OBS_DIM, &cfg.value_hidden, &mut init)?;
    let mut cost_value = ValueNet::init(OBS_DIM, &cfg.value_hidden, &mut init)?;
    let mut embedding =
        QuasimetricModel::init(INPUT_DIM, &cfg.embed_hidden, cfg.embed_dim, &mut rng::stream(cfg.seed, rng::EMBED_INIT))?;
    let mut sample_rng = rng::stream(cfg.seed, rng::ROLLOUT);
    let mut neg_rng = rng::stream(cfg.seed, rng::NEGATIVES);
    let mut mb_rng = rng::stream(cfg.seed, rng::MINIBATCH);
    let mut value_adam = AdamState::new(value.net.num_params());
    let mut cost_adam = AdamState::new(cost_value.net.num_params());
    let mut embed_adam = embedding.adam_state();
    let mut policy_adam = AdamState::new(policy.num_params());
    let mut cstate = ConstraintState::new(cfg.delta_initial, cfg.delta_floor, cfg.act_alpha, cfg.epsilon_kl)?;
    let mut lambda = 0.0;
    let embed_opts = TrainOptions {
        epochs: cfg.embed_epochs,
        batch_size: cfg.embed_minibatch,
        lr: cfg.embed_lr,
        margin: DEFAULT_MARGIN,
        cost_targets: true,
    };
    let mut curve = Vec::new();
    let mut reports = Vec::new();
    let mut steps = 0;
    let mut iteration = 0;
    let mut last_good = Checkpoint::new(cfg.seed);
    while steps < cfg.total_steps {
        let batch = collect_batch(&mut env, &policy, &value, &cost_value, cfg.steps_per_batch, &mut sample_rng)?;
        steps += batch.n_steps();
        let pairs = batch.pair_samples(scenario);
        let embed_loss = if cfg.train_embedding {
            train_embedding(&mut embedding, &mut embed_adam, &pairs, &embed_opts, &mut neg_rng)?
        } else {
            0.0
        };
        let shaped = learner_rewards(
            &batch,
            &pairs,
            &embedding,
            cfg.advantage_mode.distance_weight(),
            cfg.progress_shaping,
        )?;
        let adv = estimate_advantages(&batch, shaped.as_deref(), scenario.gamma, cfg.lambda_gae)?;
        let pbatch = PolicyBatch::new(&batch, &adv);
        let violation_rate = batch.violation_rate();
        let kl = match cfg.algorithm {
            Algorithm::Qcpo | Algorithm::Cpo => {
                let report = cpo_update(&mut policy, &pbatch, violation_rate, &cstate, &cfg.cpo)?;
                let kl = report.kl;
                reports.push(report);
                kl
            }
            Algorithm::Lagrangian => {
                let (new_lambda, kl) = lagrangian_update(
                    &mut policy,
                    &mut policy_adam,
                    &pbatch,
                    lambda,
                    violation_rate,
                    cstate.delta,
                    &cfg.lagrangian,
                    &mut mb_rng,
                )?;
                lambda = new_lambda;
                kl
            }
        };
        value.fit(&mut value_adam, &pbatch.obs, &adv.returns, &cfg.value_fit, &mut mb_rng)?;
        cost_value.fit(&mut cost_adam, &pbatch.obs, &adv.cost_returns, &cfg.value_fit, &mut mb_rng)?;
        if cstate.act_alpha > 0.0 {
            let emb = pairs.iter().map(|p| embedding.embed(&p.from)).collect::<Result<Vec<_>>>()?;
            let violated: Vec<bool> = batch.steps().map(|s| s.violated).collect();
            cstate.delta = adapt_constraint(&cstate, &emb, &violated, &embedding.norm.weights());
        }
        cstate.history.push((iteration, cstate.delta, violation_rate));
        let row = CurveRow {
            iteration,
            steps,
            mean_return: batch.mean_return(),
            success_rate: batch.success_rate(),
            violation_rate,
            delta: cstate.delta,
            kl,
            embed_loss,
            energy_per_m: batch.energy_per_m(),
        };
        let finite = policy.is_finite()
            && value.net.is_finite()
            && cost_value.net.is_finite()
            && embedding.is_finite()
            && row.mean_return.is_finite()
            && row.kl.is_finite()
            && row.embed_loss.is_finite();
        if !finite {
            return Err(Error::Diverged {
                iteration,
                reason: "non-finite parameters or metrics".into(),
                last_good: Box::new(last_good),
            });
        }
        log::info!(
            "iter {iteration} steps {steps} return {:.2} success {:.2} violation {:.3} delta {:.4} kl {:.5}",
            row.mean_return,
            row.success_rate,
            row.violation_rate,
            row.delta,
            row.kl
        );
        curve.push(row);
        last_good = policy.to_checkpoint(embedding.to_checkpoint(cfg.seed));
        iteration += 1;
    }
    Ok(TrainOutput {
        policy,
        value,
        cost_value,
        embedding,
        constraint: cstate,
        lagrange_multiplier: lambda,
        curve,
        reports,
        grid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::finite_diff_check;
    use crate::terrain::Scenario;
    use proptest::prelude::{prop_assert, proptest};

    fn small_policy(seed: u64) -> PolicyNet {
        let cfg = ScenarioConfig::for_scenario(Scenario::Hill);
        let mut p = PolicyNet::init(4, &[6], -0.3, 0.5, &cfg, &mut rng::stream(seed, rng::POLICY_INIT)).unwrap();
        // larger output weights than the default init so gradients are not tiny
        p.mean.scale_output_layer(50.0);
        p
    }

    fn random_batch(seed: u64, n: usize) -> PolicyBatch {
        let mut r = rng::stream(seed, "batch");
        let policy = small_policy(seed);
        let obs: Vec<Vec<f64>> = (0..n).map(|_| (0..4).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let mut us = Vec::new();
        let mut lps = Vec::new();
        for o in &obs {
            let (u, _, lp) = policy.sample(o, &mut r).unwrap();
            us.push(u);
            lps.push(lp);
        }
        PolicyBatch {
            obs,
            us,
            old_log_probs: lps,
            advantages: (0..n).map(|_| r.random_range(-1.0..1.0)).collect(),
            cost_advantages: (0..n).map(|_| r.random_range(-0.5..0.5)).collect(),
        }
    }

    #[test]
    fn sampled_actions_stay_in_box() {
        let p = small_policy(1);
        let mut r = rng::stream(1, "s");
        for _ in 0..500 {
            let (_, a, lp) = p.sample(&[0.3, -0.2, 5.0, 1.0], &mut r).unwrap();
            assert!((0.0..=1.5).contains(&a.v_cmd) && a.omega_cmd.abs() <= 1.5);
            assert!(lp.is_finite());
        }
    }

    #[test]
    fn log_std_is_clamped() {
        let mut p = small_policy(1);
        let mut flat = p.params_flat();
        let n = flat.len();
        flat[n - 2] = 9.0;
        flat[n - 1] = -9.0;
        p.set_params_flat(&flat).unwrap();
        assert_eq!(p.log_std.values, vec![LOG_STD_MAX, LOG_STD_MIN]);
    }

    #[test]
    fn gaussian_score_closed_form() {
        let mut p = small_policy(2);
        let obs = vec![vec![0.1, 0.2, -0.3, 0.4]];
        let mu = p.mean_u(&obs[0]).unwrap();
        let u = [mu[0] + 0.5, mu[1] - 0.2];
        let g = policy_gradient(
            &mut p,
            &PolicyBatch { obs, us: vec![u], old_log_probs: vec![0.0], advantages: vec![1.0], cost_advantages: vec![0.0] },
            &[1.0],
        )
        .unwrap();
        let n = g.len();
        let ls = p.log_std.values.clone();
        for (i, d) in [0.5f64, -0.2].into_iter().enumerate() {
            let expected = d * d / (2.0 * ls[i]).exp() - 1.0;
            assert!((g[n - 2 + i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn log_prob_gradient_matches_finite_differences() {
        for seed in 0..10 {
            let mut p = small_policy(seed);
            let obs = vec![vec![0.4, -0.1, 0.7, -0.9]];
            let u = [0.3, -0.6];
            let x0 = p.params_flat();
            let err = finite_diff_check(
                |x| {
                    p.set_params_flat(x).unwrap();
                    p.zero_grads();
                    p.accumulate_score(&obs, &[u], &[1.0]).unwrap();
                    (p.log_prob(&obs[0], &u).unwrap(), p.grads_flat())
                },
                &x0,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn policy_gradient_matches_surrogate_derivative() {
        let batch = random_batch(3, 16);
        let mut p = small_policy(3);
        let x0 = p.params_flat();
        let err = finite_diff_check(
            |x| {
                p.set_params_flat(x).unwrap();
                let value = batch.surrogate(&p, &batch.advantages).unwrap();
                // the score-function gradient equals the surrogate gradient at the
                // behaviour parameters only, so weight by the ratio here
                let n = batch.len() as f64;
                let weights: Vec<f64> = (0..batch.len())
                    .map(|i| {
                        let ratio = (p.log_prob(&batch.obs[i], &batch.us[i]).unwrap() - batch.old_log_probs[i]).exp();
                        ratio * batch.advantages[i] / n
                    })
                    .collect();
                p.zero_grads();
                p.accumulate_score(&batch.obs, &batch.us, &weights).unwrap();
                (value, p.grads_flat())
            },
            &x0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
        let mut q = small_policy(3);
        let zero = vec![0.0; batch.len()];
        assert!(policy_gradient(&mut q, &batch, &zero).unwrap().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn value_gradient_matches_finite_differences() {
        for seed in 0..10 {
            let mut v = ValueNet::init(4, &[5, 5], &mut rng::stream(seed, "v")).unwrap();
            let x = [0.2, -0.4, 0.9, 0.1];
            let x0 = v.net.params_flat();
            let err = finite_diff_check(
                |p| {
                    v.net.set_params_flat(p).unwrap();
                    v.net.zero_grads();
                    let (out, trace) = v.net.forward_trace(&x).unwrap();
                    v.net.backward_trace(&trace, &[1.0]).unwrap();
                    (out[0], v.net.grads_flat())
                },
                &x0,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4);
        }
    }

    #[test]
    fn gae_examples() {
        let (a, r) = gae(&[1.0, 0.0], &[0.0, 0.0], 0.0, 1.0, 1.0);
        assert_eq!(a, vec![1.0, 0.0]);
        assert_eq!(r, vec![1.0, 0.0]);
        let (a, _) = gae(&[0.0; 5], &[0.0; 5], 0.0, 0.9, 0.95);
        assert!(a.iter().all(|x| *x == 0.0));
        // λ = 1: discounted return minus baseline
        let rewards = [1.0, 2.0, 3.0];
        let values = [0.5, -0.2, 0.7];
        let (a, _) = gae(&rewards, &values, 0.4, 0.9, 1.0);
        let ret0 = 1.0 + 0.9 * 2.0 + 0.81 * 3.0 + 0.729 * 0.4;
        assert!((a[0] - (ret0 - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_is_rejected() {
        assert!(matches!(estimate_advantages(&RolloutBatch::default(), None, 0.99, 0.95), Err(Error::Input(_))));
    }

    #[test]
    fn conjugate_gradient_examples() {
        let id = |v: &[f64]| v.to_vec();
        let mut calls = 0;
        let x = conjugate_gradient(
            |v| {
                calls += 1;
                id(v)
            },
            &[1.0, -2.0, 3.0],
            10,
            1e-12,
        )
        .unwrap();
        assert_eq!(x, vec![1.0, -2.0, 3.0]);
        assert_eq!(calls, 1);
        let diag = |v: &[f64]| vec![v[0], 2.0 * v[1], 4.0 * v[2]];
        let x = conjugate_gradient(diag, &[1.0, 1.0, 1.0], 10, 1e-12).unwrap();
        for (a, b) in x.iter().zip([1.0, 0.5, 0.25]) {
            assert!((a - b).abs() < 1e-12);
        }
        let nan = |v: &[f64]| vec![f64::NAN; v.len()];
        assert!(matches!(conjugate_gradient(nan, &[1.0], 5, 1e-12), Err(Error::Numeric(_))));
    }

    #[test]
    fn conjugate_gradient_random_spd() {
        let mut r = rng::stream(4, "spd");
        for _ in 0..5 {
            let n = 10;
            let m: Vec<f64> = (0..n * n).map(|_| r.random_range(-1.0..1.0)).collect();
            let h: Vec<f64> = (0..n * n)
                .map(|k| {
                    let (i, j) = (k / n, k % n);
                    (0..n).map(|l| m[i * n + l] * m[j * n + l]).sum::<f64>() + if i == j { 1.0 } else { 0.0 }
                })
                .collect();
            let b: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
            let mv = |v: &[f64]| (0..n).map(|i| (0..n).map(|j| h[i * n + j] * v[j]).sum()).collect::<Vec<f64>>();
            let x = conjugate_gradient(mv, &b, n, 1e-14).unwrap();
            let res: f64 = mv(&x).iter().zip(&b).map(|(a, c)| (a - c).powi(2)).sum::<f64>().sqrt();
            assert!(res < 1e-8, "{res}");
        }
    }

    #[test]
    fn fisher_operator_matches_kl_hessian() {
        // second-order expansion of the mean KL along a direction equals ½ vᵀ F v
        let p = small_policy(5);
        let batch = random_batch(5, 8);
        let mut f = FisherOperator::new(&p, &batch.obs, 1, 0.0).unwrap();
        let mut r = rng::stream(5, "dir");
        let v: Vec<f64> = (0..p.num_params()).map(|_| r.random_range(-1.0..1.0)).collect();
        let fv = f.apply(&v).unwrap();
        let quad = 0.5 * dot(&v, &fv);
        let t = 1e-3;
        let mut q = p.clone();
        let theta: Vec<f64> = p.params_flat().iter().zip(&v).map(|(a, b)| a + t * b).collect();
        q.set_params_flat(&theta).unwrap();
        let kl = q.mean_kl_to(&p, &batch.obs).unwrap() / (t * t);
        assert!((kl - quad).abs() / quad < 1e-2, "{kl} vs {quad}");
    }

    fn cstate(delta: f64, alpha: f64) -> ConstraintState {
        ConstraintState::new(delta, 0.01, alpha, 0.01).unwrap()
    }

    #[test]
    fn zero_gradient_feasible_update_is_noop() {
        let mut p = small_policy(6);
        let mut batch = random_batch(6, 8);
        batch.advantages = vec![0.0; 8];
        batch.cost_advantages = vec![0.0; 8];
        let before = p.clone();
        let report = cpo_update(&mut p, &batch, 0.0, &cstate(0.05, 0.0), &CpoOptions::default()).unwrap();
        assert_eq!(p, before);
        assert!(!report.accepted);
    }

    #[test]
    fn accepted_steps_respect_kl_and_constraint() {
        for seed in 0..8 {
            let mut p = small_policy(seed);
            let batch = random_batch(seed, 64);
            for jc in [0.0, 0.04, 0.2] {
                let mut q = p.clone();
                let report = cpo_update(&mut q, &batch, jc, &cstate(0.05, 0.0), &CpoOptions::default()).unwrap();
                let kl = q.mean_kl_to(&p, &batch.obs).unwrap();
                assert!(kl <= 0.01 + 1e-6, "kl {kl}");
                if report.accepted {
                    assert!((report.kl - kl).abs() < 1e-12);
                }
                if jc > 0.05 && report.accepted {
                    assert_eq!(report.case, StepCase::Recovery);
                    assert!(report.cost_change <= 0.0);
                }
            }
            p.zero_grads();
        }
    }

    #[test]
    fn without_costs_the_step_is_natural_gradient() {
        let mut p = small_policy(7);
        let mut batch = random_batch(7, 32);
        batch.cost_advantages = vec![0.0; 32];
        let report = cpo_update(&mut p, &batch, 0.0, &cstate(0.05, 0.0), &CpoOptions::default()).unwrap();
        assert_eq!(report.case, StepCase::Unconstrained);
        assert!(report.accepted && report.surrogate_gain > 0.0);
    }

    #[test]
    fn adapt_constraint_cases() {
        let emb = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![3.0, 0.0]];
        let w = [0.7, 0.3];
        assert_eq!(adapt_constraint(&cstate(0.05, 0.0), &emb, &[true, false, true], &w), 0.05);
        assert_eq!(adapt_constraint(&cstate(0.05, 0.1), &emb, &[false; 3], &w), 0.05);
        assert_eq!(adapt_constraint(&cstate(0.05, 0.1), &emb, &[true; 3], &w), 0.05);
        assert!((tightened_delta(&cstate(0.05, 0.1), 1.0) - 0.045).abs() < 1e-15);
        let d = adapt_constraint(&cstate(0.05, 0.1), &emb, &[true, false, true], &w);
        assert!(d < 0.05 && d >= 0.045);
        assert_eq!(tightened_delta(&cstate(0.011, 0.9), 1.0), 0.01);
    }

    #[test]
    fn multiplier_updates() {
        assert_eq!(update_multiplier(0.3, 0.05, 0.05, 0.05), 0.3);
        let mut l = 0.0;
        for _ in 0..5 {
            let next = update_multiplier(l, 0.05, 0.2, 0.05);
            assert!(next > l);
            l = next;
        }
        assert_eq!(update_multiplier(0.001, 0.05, 0.0, 0.05), 0.0);
    }

    #[test]
    fn short_training_run_is_deterministic() {
        let scenario = ScenarioConfig::for_scenario(Scenario::Hill);
        let mut cfg = TrainConfig::for_algorithm(Algorithm::Qcpo, 3, false, false);
        cfg.total_steps = 1200;
        cfg.steps_per_batch = 600;
        let a = train(&scenario, &cfg).unwrap();
        let b = train(&scenario, &cfg).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.policy, b.policy);
        assert_eq!(a.curve.len(), 2);
        for row in &a.curve {
            assert!(row.kl <= cfg.epsilon_kl + 1e-6);
        }
        let mut lag = TrainConfig::for_algorithm(Algorithm::Lagrangian, 3, false, false);
        lag.total_steps = 600;
        lag.steps_per_batch = 600;
        let out = train(&scenario, &lag).unwrap();
        assert!(out.lagrange_multiplier >= 0.0);
    }

    #[test]
    fn curve_row_csv_round_trip() {
        let row = CurveRow {
            iteration: 3,
            steps: 4096,
            mean_return: -1.25,
            success_rate: 0.5,
            violation_rate: 0.125,
            delta: 0.045,
            kl: 0.0071,
            embed_loss: 0.3,
            energy_per_m: 38.5,
        };
        assert_eq!(CurveRow::parse_csv_line(&row.csv_line()).unwrap(), row);
        assert_eq!(CurveRow::CSV_HEADER.split(',').count(), 9);
    }

    #[test]
    fn train_config_rejects_unknown_keys() {
        let cfg = TrainConfig::for_algorithm(Algorithm::Qcpo, 1, false, true);
        assert_eq!(cfg.act_alpha, 0.0);
        let mut v = serde_json::to_value(&cfg).unwrap();
        assert_eq!(serde_json::from_value::<TrainConfig>(v.clone()).unwrap(), cfg);
        v["surprise"] = serde_json::json!(true);
        assert!(serde_json::from_value::<TrainConfig>(v).is_err());
        let no_qe = TrainConfig::for_algorithm(Algorithm::Qcpo, 1, true, false);
        assert!(!no_qe.train_embedding && no_qe.advantage_mode == AdvantageMode::Gae && no_qe.act_alpha > 0.0);
    }

    proptest! {
        #[test]
        fn multiplier_never_negative(l in 0.0..5.0f64, lr in 0.0..1.0f64, v in 0.0..1.0f64, d in 0.0..1.0f64) {
            prop_assert!(update_multiplier(l, lr, v, d) >= 0.0);
        }

        #[test]
        fn tightening_is_monotone(delta in 0.02..0.5f64, alpha in 0.0..1.0f64, ratio in 0.0..1.0f64) {
            let c = ConstraintState::new(delta, 0.01, alpha, 0.01).unwrap();
            let d = tightened_delta(&c, ratio);
            prop_assert!(d <= delta && d >= 0.01);
        }
    }
}
