//! PPO with a clipped surrogate and GAE over a pool of environments.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::env::{Action, EnvConfig, EnvError, GaitEnv, Observation, ACTION_DIM, OBS_DIM};
use crate::par::{self, Execution};
use crate::policy::{
    gaussian_log_prob, Activation, Decoder, Encoder, Mlp, ObsNormalizer, OutputKind, Policy, PolicyCheckpoint,
    PolicyError,
};

#[derive(Debug, Error)]
pub enum PpoError {
    #[error("invalid PPO config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("non-finite loss at iteration {iteration}; state written to {dump:?}")]
    NonFiniteLoss { iteration: usize, dump: Option<PathBuf> },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Exploration std as a fraction of the action scale, decayed linearly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaSchedule {
    pub start: f64,
    pub end: f64,
    /// Env steps over which the decay happens.
    pub horizon: u64,
}

impl SigmaSchedule {
    pub fn factor(&self, env_steps: u64) -> f64 {
        if env_steps >= self.horizon {
            return self.end;
        }
        let frac = env_steps as f64 / self.horizon as f64;
        self.start + (self.end - self.start) * frac
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpoConfig {
    pub clip_eps: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub n_envs: usize,
    pub rollout_len: usize,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub lr_policy: f64,
    pub lr_value: f64,
    pub sigma: SigmaSchedule,
    pub max_env_steps: u64,
    pub seed: u64,
    pub hidden: Vec<usize>,
    /// Value net output gain.
    pub value_scale: f64,
    pub max_grad_norm: f64,
    /// Samples per gradient work item; fixes the summation order.
    pub grad_chunk: usize,
    pub execution: Execution,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            gamma: 0.99,
            gae_lambda: 0.95,
            n_envs: 16,
            rollout_len: 64,
            epochs: 5,
            minibatch_size: 256,
            lr_policy: 3e-4,
            lr_value: 1e-3,
            sigma: SigmaSchedule { start: 0.2, end: 0.02, horizon: 2_000_000 },
            max_env_steps: 2_000_000,
            seed: 0,
            hidden: vec![64, 64],
            value_scale: 10.0,
            max_grad_norm: 0.5,
            grad_chunk: 64,
            execution: Execution::default(),
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), PpoError> {
        let bad = |m: &str| Err(PpoError::InvalidConfig(m.to_string()));
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("clip_eps must lie in (0, 1)");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0 && self.gae_lambda >= 0.0 && self.gae_lambda <= 1.0) {
            return bad("gamma must lie in (0, 1] and gae_lambda in [0, 1]");
        }
        if self.n_envs == 0 || self.rollout_len == 0 || self.epochs == 0 || self.minibatch_size == 0 {
            return bad("n_envs, rollout_len, epochs and minibatch_size must be positive");
        }
        if self.grad_chunk == 0 {
            return bad("grad_chunk must be positive");
        }
        if !(self.lr_policy > 0.0 && self.lr_value > 0.0 && self.value_scale > 0.0 && self.max_grad_norm > 0.0) {
            return bad("learning rates, value_scale and max_grad_norm must be positive");
        }
        if !(self.sigma.start > 0.0 && self.sigma.end > 0.0) {
            return bad("sigma schedule must stay positive");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden layer widths must be positive");
        }
        Ok(())
    }

    pub fn policy_dims(&self) -> Vec<usize> {
        let mut d = vec![OBS_DIM];
        d.extend(&self.hidden);
        d.push(ACTION_DIM);
        d
    }

    pub fn value_dims(&self) -> Vec<usize> {
        let mut d = vec![OBS_DIM];
        d.extend(&self.hidden);
        d.push(1);
        d
    }
}

/// Stable 64-bit mixing of seed components.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243F_6A88_85A3_08D3;
    for p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 31;
    }
    h
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    /// Normalized observation the action was sampled from.
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub log_prob: f64,
    /// Includes the discounted bootstrap value on truncation.
    pub reward: f64,
    pub value: f64,
    /// Episode ended after this transition.
    pub done: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutStats {
    pub episode_returns: Vec<f64>,
    pub episode_lengths: Vec<usize>,
    pub ly_errors: Vec<f64>,
    pub lx_errors: Vec<f64>,
    /// Returns of episodes still running when the rollout ended.
    pub partial_returns: Vec<f64>,
}

impl RolloutStats {
    fn merge(&mut self, other: RolloutStats) {
        self.episode_returns.extend(other.episode_returns);
        self.episode_lengths.extend(other.episode_lengths);
        self.ly_errors.extend(other.ly_errors);
        self.lx_errors.extend(other.lx_errors);
        self.partial_returns.extend(other.partial_returns);
    }

    pub fn mean_return(&self) -> f64 {
        if self.episode_returns.is_empty() {
            mean(&self.partial_returns)
        } else {
            mean(&self.episode_returns)
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Transitions stored env-major: env `e` occupies `e * len .. (e + 1) * len`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutBuffer {
    pub transitions: Vec<Transition>,
    pub n_envs: usize,
    pub rollout_len: usize,
    /// Value of the observation following each env's last transition.
    pub last_values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub raw_obs: Vec<Vec<f64>>,
    pub stats: RolloutStats,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

/// One environment plus its episode bookkeeping.
#[derive(Debug, Clone)]
pub struct EnvWorker {
    pub env: GaitEnv,
    obs: Observation,
    rng: ChaCha8Rng,
    episode_return: f64,
    episode_len: usize,
}

impl EnvWorker {
    pub fn new(cfg: EnvConfig, seed: u64) -> Result<Self, EnvError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut env = GaitEnv::new(cfg)?;
        let obs = env.reset(rng.random())?;
        Ok(Self { env, obs, rng, episode_return: 0.0, episode_len: 0 })
    }

    fn run(
        &mut self,
        len: usize,
        policy: &Policy,
        value: &Mlp,
        normalizer: &ObsNormalizer,
        gamma: f64,
    ) -> Result<(Vec<Transition>, Vec<Vec<f64>>, f64, RolloutStats), PpoError> {
        let mut out = Vec::with_capacity(len);
        let mut raw = Vec::with_capacity(len);
        let mut stats = RolloutStats::default();
        for _ in 0..len {
            let raw_obs = self.obs.to_vec().to_vec();
            let obs = normalizer.normalize(&raw_obs);
            let (action, log_prob) = policy.sample(&obs, None, &mut self.rng)?;
            let v = value.forward(&obs)?[0];
            let step = self.env.env_step(&Action::from_slice(&action))?;
            let mut reward = step.reward;
            self.episode_return += step.reward;
            self.episode_len += 1;
            if let Some(e) = step.info.ly_error {
                stats.ly_errors.push(e.abs());
            }
            if let Some(e) = step.info.lx_error {
                stats.lx_errors.push(e.abs());
            }
            let done = step.terminated || step.truncated;
            if step.truncated {
                let next = normalizer.normalize(&step.obs_next.to_vec());
                reward += gamma * value.forward(&next)?[0];
            }
            if done {
                stats.episode_returns.push(self.episode_return);
                stats.episode_lengths.push(self.episode_len);
                self.episode_return = 0.0;
                self.episode_len = 0;
                self.obs = self.env.reset(self.rng.random())?;
            } else {
                self.obs = step.obs_next;
            }
            raw.push(raw_obs);
            out.push(Transition { obs, action, log_prob, reward, value: v, done });
        }
        let last = value.forward(&normalizer.normalize(&self.obs.to_vec()))?[0];
        if self.episode_len > 0 {
            stats.partial_returns.push(self.episode_return);
        }
        Ok((out, raw, last, stats))
    }
}

/// Steps every worker `len` times with sampled actions.
pub fn collect_rollouts(
    workers: &mut [EnvWorker],
    policy: &Policy,
    value: &Mlp,
    normalizer: &ObsNormalizer,
    len: usize,
    gamma: f64,
    exec: Execution,
) -> Result<RolloutBuffer, PpoError> {
    let results = par::map_mut(exec, workers, |_, w| w.run(len, policy, value, normalizer, gamma));
    let mut buf = RolloutBuffer { n_envs: workers.len(), rollout_len: len, ..Default::default() };
    for r in results {
        let (t, raw, last, stats) = r?;
        buf.transitions.extend(t);
        buf.raw_obs.extend(raw);
        buf.last_values.push(last);
        buf.stats.merge(stats);
    }
    Ok(buf)
}

/// GAE over one trajectory segment; `last_value` bootstraps the final step
/// unless it is `done`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n { values[t + 1] } else { last_value };
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

pub fn compute_buffer_gae(buf: &mut RolloutBuffer, gamma: f64, lambda: f64) {
    buf.advantages.clear();
    buf.returns.clear();
    for e in 0..buf.n_envs {
        let seg = &buf.transitions[e * buf.rollout_len..(e + 1) * buf.rollout_len];
        let r: Vec<f64> = seg.iter().map(|t| t.reward).collect();
        let v: Vec<f64> = seg.iter().map(|t| t.value).collect();
        let d: Vec<bool> = seg.iter().map(|t| t.done).collect();
        let (a, ret) = compute_gae(&r, &v, &d, buf.last_values[e], gamma, lambda);
        buf.advantages.extend(a);
        buf.returns.extend(ret);
    }
}

pub fn normalize_advantages(adv: &mut [f64]) {
    let m = mean(adv);
    let var = adv.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / adv.len().max(1) as f64;
    let s = var.sqrt().max(1e-8);
    for a in adv.iter_mut() {
        *a = (*a - m) / s;
    }
}

/// A sample as seen by the policy loss.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySample {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub log_prob_old: f64,
    pub advantage: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossStats {
    pub surrogate: f64,
    pub clipped: usize,
    pub approx_kl: f64,
}

/// Sum over `samples` of the negated clipped surrogate and its gradient with
/// respect to the policy parameters. Only the mean depends on parameters.
pub fn policy_loss_grad(
    policy: &Policy,
    samples: &[PolicySample],
    clip_eps: f64,
    grad: &mut [f64],
) -> Result<LossStats, PolicyError> {
    let std = policy.std();
    let mut stats = LossStats::default();
    for s in samples {
        let (mean, trace) = policy.net.forward_trace(&s.obs)?;
        let lp = gaussian_log_prob(&s.action, &mean, &std);
        let ratio = (lp - s.log_prob_old).exp();
        let clipped_ratio = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps);
        let unclipped = ratio * s.advantage;
        let clipped = clipped_ratio * s.advantage;
        stats.surrogate += unclipped.min(clipped);
        stats.approx_kl += s.log_prob_old - lp;
        if (ratio - 1.0).abs() > clip_eps {
            stats.clipped += 1;
        }
        if unclipped <= clipped {
            // d(-ratio * A)/d mean = -A * ratio * (a - mean) / std^2
            let g: Vec<f64> = (0..mean.len())
                .map(|i| -s.advantage * ratio * (s.action[i] - mean[i]) / (std[i] * std[i]))
                .collect();
            policy.net.backward_into(&trace, &g, grad)?;
        }
    }
    stats.surrogate = -stats.surrogate;
    Ok(stats)
}

/// Sum of `0.5 (V - R)^2` and its gradient.
pub fn value_loss_grad(value: &Mlp, obs: &[&[f64]], targets: &[f64], grad: &mut [f64]) -> Result<f64, PolicyError> {
    let mut loss = 0.0;
    for (x, r) in obs.iter().zip(targets) {
        let (v, trace) = value.forward_trace(x)?;
        let e = v[0] - r;
        loss += 0.5 * e * e;
        value.backward_into(&trace, &[e], grad)?;
    }
    Ok(loss)
}

/// Adaptive per-parameter step size without momentum.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    pub sq: Vec<f64>,
}

impl RmsProp {
    pub fn new(n: usize, lr: f64) -> Self {
        Self { lr, decay: 0.99, eps: 1e-8, sq: vec![0.0; n] }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        for ((p, g), s) in params.iter_mut().zip(grad).zip(self.sq.iter_mut()) {
            *s = self.decay * *s + (1.0 - self.decay) * g * g;
            *p -= self.lr * g / (s.sqrt() + self.eps);
        }
    }
}

fn clip_norm(grad: &mut [f64], max_norm: f64) {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grad.iter_mut() {
            *g *= k;
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateMetrics {
    pub surrogate: f64,
    pub value_loss: f64,
    pub clip_frac: f64,
    pub approx_kl: f64,
}

/// Learner state: networks, optimizers and normalizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Learner {
    pub policy: Policy,
    pub value: Mlp,
    pub normalizer: ObsNormalizer,
    pub opt_policy: RmsProp,
    pub opt_value: RmsProp,
}

impl Learner {
    pub fn new(cfg: &PpoConfig, action_scale: &[f64]) -> Result<Self, PpoError> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 1]));
        let mut policy = Policy::new(&cfg.policy_dims(), action_scale.to_vec(), &mut rng)?;
        policy.set_std_factor(cfg.sigma.start);
        let value = Mlp::new_dense(&cfg.value_dims(), Activation::Tanh, OutputKind::Linear, vec![cfg.value_scale], &mut rng)?;
        let opt_policy = RmsProp::new(policy.net.num_params(), cfg.lr_policy);
        let opt_value = RmsProp::new(value.num_params(), cfg.lr_value);
        Ok(Self { policy, value, normalizer: ObsNormalizer::new(OBS_DIM), opt_policy, opt_value })
    }

    pub fn checkpoint(&self) -> PolicyCheckpoint {
        let mut n = self.normalizer.clone();
        n.frozen = true;
        PolicyCheckpoint { policy: self.policy.clone(), normalizer: Some(n) }
    }

    pub fn to_bytes(&self, iteration: u64, env_steps: u64) -> Vec<u8> {
        let mut e = Encoder::new();
        e.mlp(&self.policy.net);
        e.f64s(&self.policy.log_std);
        e.normalizer(Some(&self.normalizer));
        e.mlp(&self.value);
        e.f64s(&self.opt_policy.sq);
        e.f64s(&self.opt_value.sq);
        e.u64(iteration);
        e.u64(env_steps);
        e.buf
    }

    /// Restores a learner written by `to_bytes`, returning `(learner, iteration, env_steps)`.
    pub fn from_bytes(bytes: &[u8], cfg: &PpoConfig) -> Result<(Self, u64, u64), PpoError> {
        let mut d = Decoder::new(bytes)?;
        let net = d.mlp()?;
        let log_std = d.f64s(net.output_dim())?;
        let normalizer = d.normalizer()?.ok_or_else(|| PolicyError::CorruptCheckpoint("missing normalizer".into()))?;
        let value = d.mlp()?;
        let sq_p = d.f64s(net.num_params())?;
        let sq_v = d.f64s(value.num_params())?;
        let iteration = d.u64()?;
        let env_steps = d.u64()?;
        d.finish()?;
        if net.dims() != cfg.policy_dims().as_slice() || value.dims() != cfg.value_dims().as_slice() {
            return Err(PolicyError::CorruptCheckpoint("network shape differs from the config".into()).into());
        }
        let mut opt_policy = RmsProp::new(net.num_params(), cfg.lr_policy);
        opt_policy.sq = sq_p;
        let mut opt_value = RmsProp::new(value.num_params(), cfg.lr_value);
        opt_value.sq = sq_v;
        let normalizer = ObsNormalizer { frozen: false, ..normalizer };
        let learner = Self { policy: Policy { net, log_std }, value, normalizer, opt_policy, opt_value };
        Ok((learner, iteration, env_steps))
    }
}

/// Clipped-surrogate epochs over a buffer with computed GAE.
pub fn ppo_update(
    learner: &mut Learner,
    buf: &RolloutBuffer,
    cfg: &PpoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateMetrics, PpoError> {
    let n = buf.len();
    let mut adv = buf.advantages.clone();
    normalize_advantages(&mut adv);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut metrics = UpdateMetrics::default();
    let mut batches = 0usize;
    let mut seen = 0usize;
    for _ in 0..cfg.epochs {
        idx.shuffle(rng);
        for mb in idx.chunks(cfg.minibatch_size) {
            let chunks: Vec<&[usize]> = mb.chunks(cfg.grad_chunk).collect();
            let policy = &learner.policy;
            let value = &learner.value;
            let parts = par::map_range(cfg.execution, chunks.len(), |c| {
                let mut gp = vec![0.0; policy.net.num_params()];
                let mut gv = vec![0.0; value.num_params()];
                let samples: Vec<PolicySample> = chunks[c]
                    .iter()
                    .map(|&i| PolicySample {
                        obs: buf.transitions[i].obs.clone(),
                        action: buf.transitions[i].action.clone(),
                        log_prob_old: buf.transitions[i].log_prob,
                        advantage: adv[i],
                    })
                    .collect();
                let stats = policy_loss_grad(policy, &samples, cfg.clip_eps, &mut gp)?;
                let obs: Vec<&[f64]> = chunks[c].iter().map(|&i| buf.transitions[i].obs.as_slice()).collect();
                let targets: Vec<f64> = chunks[c].iter().map(|&i| buf.returns[i]).collect();
                let vl = value_loss_grad(value, &obs, &targets, &mut gv)?;
                Ok::<_, PolicyError>((gp, gv, stats, vl))
            });
            let mut gp = vec![0.0; learner.policy.net.num_params()];
            let mut gv = vec![0.0; learner.value.num_params()];
            let mut stats = LossStats::default();
            let mut vl = 0.0;
            for part in parts {
                let (p, v, s, l) = part?;
                for (a, b) in gp.iter_mut().zip(&p) {
                    *a += b;
                }
                for (a, b) in gv.iter_mut().zip(&v) {
                    *a += b;
                }
                stats.surrogate += s.surrogate;
                stats.clipped += s.clipped;
                stats.approx_kl += s.approx_kl;
                vl += l;
            }
            let m = mb.len() as f64;
            for g in gp.iter_mut() {
                *g /= m;
            }
            for g in gv.iter_mut() {
                *g /= m;
            }
            let finite = stats.surrogate.is_finite()
                && vl.is_finite()
                && gp.iter().all(|g| g.is_finite())
                && gv.iter().all(|g| g.is_finite());
            if !finite {
                return Err(PpoError::NonFiniteLoss { iteration: 0, dump: None });
            }
            clip_norm(&mut gp, cfg.max_grad_norm);
            clip_norm(&mut gv, cfg.max_grad_norm);
            learner.opt_policy.step(learner.policy.net.params_mut(), &gp);
            learner.opt_value.step(learner.value.params_mut(), &gv);
            metrics.surrogate += stats.surrogate / m;
            metrics.value_loss += vl / m;
            metrics.clip_frac += stats.clipped as f64;
            metrics.approx_kl += stats.approx_kl;
            seen += mb.len();
            batches += 1;
        }
    }
    let b = batches.max(1) as f64;
    metrics.surrogate /= b;
    metrics.value_loss /= b;
    metrics.clip_frac /= seen.max(1) as f64;
    metrics.approx_kl /= seen.max(1) as f64;
    Ok(metrics)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MetricsRow {
    pub iter: usize,
    pub env_steps: u64,
    pub mean_return: f64,
    pub mean_ep_len: f64,
    pub mean_ly_err: f64,
    pub mean_lx_err: f64,
    pub clip_frac: f64,
    pub approx_kl: f64,
    pub sigma: f64,
}

pub const METRICS_HEADER: &str =
    "iter,env_steps,mean_return,mean_ep_len,mean_Ly_err,mean_Lx_err,clip_frac,approx_kl,sigma";

pub fn metrics_csv(rows: &[MetricsRow], meta: &[String]) -> String {
    let mut out = String::new();
    for m in meta {
        let _ = writeln!(out, "# {m}");
    }
    let _ = writeln!(out, "{METRICS_HEADER}");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.iter, r.env_steps, r.mean_return, r.mean_ep_len, r.mean_ly_err, r.mean_lx_err, r.clip_frac, r.approx_kl, r.sigma
        );
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub learner: Learner,
    pub metrics: Vec<MetricsRow>,
    pub env_steps: u64,
}

impl TrainOutput {
    pub fn checkpoint(&self) -> PolicyCheckpoint {
        self.learner.checkpoint()
    }
}

/// Where `train` writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct TrainFiles {
    pub dir: Option<PathBuf>,
    /// Extra `#` metadata lines for the metrics CSV.
    pub meta: Vec<String>,
    /// Learner state to continue from.
    pub resume: Option<PathBuf>,
}

pub const POLICY_FILE: &str = "policy.bin";
pub const STATE_FILE: &str = "train_state.bin";
pub const METRICS_FILE: &str = "metrics.csv";

/// Collect, estimate advantages and update until `max_env_steps`.
pub fn train(cfg: &PpoConfig, env_cfg: &EnvConfig, files: &TrainFiles) -> Result<TrainOutput, PpoError> {
    cfg.validate()?;
    env_cfg.validate()?;
    let scale = [env_cfg.action_scale[0], env_cfg.action_scale[1], env_cfg.action_scale[2]];
    let (mut learner, start_iter, mut env_steps) = match &files.resume {
        Some(path) => Learner::from_bytes(&std::fs::read(path)?, cfg)?,
        None => (Learner::new(cfg, &scale)?, 0, 0),
    };
    let mut workers = (0..cfg.n_envs)
        .map(|e| EnvWorker::new(env_cfg.clone(), mix_seed(&[cfg.seed, 2, e as u64, start_iter])))
        .collect::<Result<Vec<_>, _>>()?;
    let mut metrics = Vec::new();
    let per_iter = (cfg.n_envs * cfg.rollout_len) as u64;
    let mut iter = start_iter as usize;
    while env_steps < cfg.max_env_steps {
        let factor = cfg.sigma.factor(env_steps);
        learner.policy.set_std_factor(factor);
        let mut buf = collect_rollouts(
            &mut workers,
            &learner.policy,
            &learner.value,
            &learner.normalizer,
            cfg.rollout_len,
            cfg.gamma,
            cfg.execution,
        )?;
        compute_buffer_gae(&mut buf, cfg.gamma, cfg.gae_lambda);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 3, iter as u64]));
        let upd = match ppo_update(&mut learner, &buf, cfg, &mut rng) {
            Ok(u) => u,
            Err(PpoError::NonFiniteLoss { .. }) => {
                let dump = files.dir.as_ref().map(|d| d.join("diverged_state.bin"));
                if let Some(path) = &dump {
                    std::fs::write(path, learner.to_bytes(iter as u64, env_steps))?;
                }
                return Err(PpoError::NonFiniteLoss { iteration: iter, dump });
            }
            Err(e) => return Err(e),
        };
        learner.normalizer.update(&buf.raw_obs);
        env_steps += per_iter;
        let s = &buf.stats;
        let lens: Vec<f64> = s.episode_lengths.iter().map(|l| *l as f64).collect();
        metrics.push(MetricsRow {
            iter,
            env_steps,
            mean_return: s.mean_return(),
            mean_ep_len: if lens.is_empty() { cfg.rollout_len as f64 } else { mean(&lens) },
            mean_ly_err: mean(&s.ly_errors),
            mean_lx_err: mean(&s.lx_errors),
            clip_frac: upd.clip_frac,
            approx_kl: upd.approx_kl,
            sigma: factor,
        });
        iter += 1;
    }
    learner.policy.set_std_factor(cfg.sigma.factor(env_steps));
    if let Some(dir) = &files.dir {
        std::fs::create_dir_all(dir)?;
        learner.checkpoint().save(&dir.join(POLICY_FILE))?;
        std::fs::write(dir.join(STATE_FILE), learner.to_bytes(iter as u64, env_steps))?;
        std::fs::write(dir.join(METRICS_FILE), metrics_csv(&metrics, &files.meta))?;
    }
    Ok(TrainOutput { learner, metrics, env_steps })
}

/// Loads the policy checkpoint written by `train`.
pub fn load_policy(dir: &Path) -> Result<PolicyCheckpoint, PolicyError> {
    PolicyCheckpoint::load(&dir.join(POLICY_FILE))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gae_lambda_zero_is_td_error() {
        let r = [1.0, 0.5, -0.2];
        let v = [0.3, 0.1, 0.7];
        let (a, _) = compute_gae(&r, &v, &[false, false, false], 0.4, 0.9, 0.0);
        assert!((a[0] - (1.0 + 0.9 * 0.1 - 0.3)).abs() < 1e-15);
        assert!((a[2] - (-0.2 + 0.9 * 0.4 - 0.7)).abs() < 1e-15);
    }

    #[test]
    fn gae_lambda_one_is_reward_to_go() {
        let r = [1.0, 2.0, 3.0, 4.0];
        let (a, ret) = compute_gae(&r, &[0.0; 4], &[false, false, false, true], 99.0, 0.5, 1.0);
        assert!((a[0] - (1.0 + 0.5 * 2.0 + 0.25 * 3.0 + 0.125 * 4.0)).abs() < 1e-15);
        assert_eq!(a, ret);
    }

    #[test]
    fn sigma_schedule_is_linear() {
        let s = SigmaSchedule { start: 0.2, end: 0.02, horizon: 100 };
        assert_eq!(s.factor(0), 0.2);
        assert!((s.factor(50) - 0.11).abs() < 1e-12);
        assert_eq!(s.factor(500), 0.02);
    }

    #[test]
    fn rmsprop_first_step_moves_by_lr_over_root_decay() {
        let mut opt = RmsProp::new(1, 0.01);
        let mut p = [1.0];
        opt.step(&mut p, &[3.0]);
        let expected = 1.0 - 0.01 * 3.0 / ((0.01f64 * 9.0).sqrt() + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn ratio_one_surrogate_is_mean_advantage() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let policy = Policy::new(&[4, 6, 3], vec![0.1, 0.1, 0.2], &mut rng).unwrap();
        let samples: Vec<PolicySample> = (0..8)
            .map(|i| {
                let obs = vec![0.1 * i as f64, -0.2, 0.3, 0.05];
                let (action, lp) = policy.sample(&obs, None, &mut rng).unwrap();
                PolicySample { obs, action, log_prob_old: lp, advantage: (i as f64 - 3.5) / 2.0 }
            })
            .collect();
        let mut g = vec![0.0; policy.net.num_params()];
        let stats = policy_loss_grad(&policy, &samples, 0.2, &mut g).unwrap();
        let sum_adv: f64 = samples.iter().map(|s| s.advantage).sum();
        assert!((stats.surrogate + sum_adv).abs() < 1e-12);
        assert_eq!(stats.clipped, 0);
    }

    #[test]
    fn saturated_clip_has_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut policy = Policy::new(&[2, 4, 3], vec![0.1, 0.1, 0.2], &mut rng).unwrap();
        for v in policy.net.params_mut() {
            *v = 0.3;
        }
        let obs = vec![0.5, -0.5];
        let mean = policy.mean(&obs).unwrap();
        let std = policy.std();
        let lp = gaussian_log_prob(&mean, &mean, &std);
        // Old probability far lower, so the ratio is well above 1 + eps.
        let s = PolicySample { obs, action: mean, log_prob_old: lp - 1.0, advantage: 1.0 };
        let mut g = vec![0.0; policy.net.num_params()];
        let stats = policy_loss_grad(&policy, &[s], 0.2, &mut g).unwrap();
        assert_eq!(stats.clipped, 1);
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn learner_state_round_trip() {
        let cfg = PpoConfig { hidden: vec![8], ..Default::default() };
        let learner = Learner::new(&cfg, &[0.1, 0.1, 0.2]).unwrap();
        let bytes = learner.to_bytes(7, 1234);
        let (back, it, steps) = Learner::from_bytes(&bytes, &cfg).unwrap();
        assert_eq!((it, steps), (7, 1234));
        assert_eq!(back.policy, learner.policy);
        assert_eq!(back.value, learner.value);
    }
}
