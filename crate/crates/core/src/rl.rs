//! Off-policy learners over the rover environment: soft actor-critic with
//! learned temperature, plus DDPG and TD3 baselines.

use crate::approx::{read_f64s, read_u64, write_f64s, write_u64, Adam, ApproxError, Mlp, MlpGrads};
use crate::env::{Action, EnvError, Observation, RoverEnv, ACT_DIM, OBS_DIM};
use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::collections::VecDeque;
use std::io::{Read, Write};
use thiserror::Error;

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;
/// Final policy layer scale so initial actions sit near zero.
pub const POLICY_INIT_SCALE: f64 = 1e-2;
/// Episodes averaged for `ep_rew_mean` / `ep_len_mean`.
pub const METRICS_WINDOW: usize = 20;

#[derive(Debug, Error)]
pub enum RlError {
    #[error("non-finite {0} loss")]
    NonFiniteLoss(&'static str),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Approx(#[from] ApproxError),
    #[error("invalid rl config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algo {
    Sac,
    Ddpg,
    Td3,
}

impl Algo {
    pub fn name(self) -> &'static str {
        match self {
            Algo::Sac => "sac",
            Algo::Ddpg => "ddpg",
            Algo::Td3 => "td3",
        }
    }

    pub fn parse(s: &str) -> Result<Self, RlError> {
        match s.to_ascii_lowercase().as_str() {
            "sac" => Ok(Algo::Sac),
            "ddpg" => Ok(Algo::Ddpg),
            "td3" => Ok(Algo::Td3),
            other => Err(RlError::InvalidConfig(format!("unsupported algorithm '{other}' (expected sac, ddpg or td3)"))),
        }
    }

    fn tag(self) -> u64 {
        match self {
            Algo::Sac => 1,
            Algo::Ddpg => 2,
            Algo::Td3 => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RlConfig {
    pub gamma: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    pub warmup_steps: usize,
    pub target_entropy: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub lr_alpha: f64,
    pub hidden: Vec<usize>,
    pub init_alpha: f64,
    /// When false α stays at `init_alpha`.
    pub auto_alpha: bool,
    /// Gaussian exploration noise of the deterministic baselines.
    pub exploration_noise: f64,
    pub policy_noise: f64,
    pub noise_clip: f64,
    pub policy_delay: usize,
    pub log_interval: usize,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 0.005,
            batch_size: 256,
            replay_capacity: 100_000,
            warmup_steps: 1000,
            target_entropy: -(ACT_DIM as f64),
            lr_actor: 3e-4,
            lr_critic: 3e-4,
            lr_alpha: 3e-4,
            hidden: vec![64, 64],
            init_alpha: 1.0,
            auto_alpha: true,
            exploration_noise: 0.1,
            policy_noise: 0.2,
            noise_clip: 0.5,
            policy_delay: 2,
            log_interval: 1000,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        let bad = |m: &str| Err(RlError::InvalidConfig(m.to_string()));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad("tau must lie in [0, 1]");
        }
        if self.batch_size == 0 || self.replay_capacity == 0 || self.log_interval == 0 || self.policy_delay == 0 {
            return bad("batch_size, replay_capacity, log_interval and policy_delay must be > 0");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden layer sizes must be non-empty and > 0");
        }
        if !(self.init_alpha > 0.0) {
            return bad("init_alpha must be > 0");
        }
        if !(self.lr_actor >= 0.0 && self.lr_critic >= 0.0 && self.lr_alpha >= 0.0) {
            return bad("learning rates must be >= 0");
        }
        if !(self.exploration_noise >= 0.0 && self.policy_noise >= 0.0 && self.noise_clip >= 0.0) {
            return bad("noise scales must be >= 0");
        }
        Ok(())
    }

    fn sizes(&self, input: usize, output: usize) -> Vec<usize> {
        let mut s = vec![input];
        s.extend(&self.hidden);
        s.push(output);
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub obs: [f64; OBS_DIM],
    pub action: [f64; ACT_DIM],
    pub reward: f64,
    pub next_obs: [f64; OBS_DIM],
    pub done: bool,
}

/// Column-stacked transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub obs: Array2<f64>,
    pub act: Array2<f64>,
    pub rew: Array1<f64>,
    pub next_obs: Array2<f64>,
    pub done: Array1<f64>,
}

impl Batch {
    pub fn from_transitions(ts: &[Transition]) -> Self {
        let n = ts.len();
        Self {
            obs: Array2::from_shape_fn((n, OBS_DIM), |(i, j)| ts[i].obs[j]),
            act: Array2::from_shape_fn((n, ACT_DIM), |(i, j)| ts[i].action[j]),
            rew: Array1::from_shape_fn(n, |i| ts[i].reward),
            next_obs: Array2::from_shape_fn((n, OBS_DIM), |(i, j)| ts[i].next_obs[j]),
            done: Array1::from_shape_fn(n, |i| if ts[i].done { 1.0 } else { 0.0 }),
        }
    }

    pub fn len(&self) -> usize {
        self.rew.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rew.is_empty()
    }
}

/// Fixed-capacity ring buffer, uniform sampling with replacement.
#[derive(Debug, Clone)]
pub struct ReplayPool {
    capacity: usize,
    data: Vec<Transition>,
    cursor: usize,
}

impl ReplayPool {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        Self { capacity, data: Vec::with_capacity(capacity.min(1 << 20)), cursor: 0 }
    }

    pub fn push(&mut self, t: Transition) {
        if self.data.len() < self.capacity {
            self.data.push(t);
        } else {
            self.data[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.data[i]
    }

    pub fn sample_indices<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        (0..n).map(|_| rng.random_range(0..self.data.len())).collect()
    }

    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Batch {
        let picked: Vec<Transition> = self.sample_indices(n, rng).into_iter().map(|i| self.data[i]).collect();
        Batch::from_transitions(&picked)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn gaussian<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal))
}

fn critic_input(obs: ArrayView2<f64>, act: ArrayView2<f64>) -> Array2<f64> {
    concatenate![Axis(1), obs, act]
}

fn obs_row(obs: &Observation) -> Array2<f64> {
    Array2::from_shape_vec((1, OBS_DIM), obs.0.to_vec()).expect("obs row")
}

fn action_from_row(row: ndarray::ArrayView1<f64>) -> Action {
    let mut a = [0.0; ACT_DIM];
    for (d, s) in a.iter_mut().zip(row.iter()) {
        *d = *s;
    }
    Action(a)
}

/// Output of the tanh-Gaussian head for a batch and fixed noise.
#[derive(Debug, Clone)]
pub struct PolicySample {
    pub action: Array2<f64>,
    pub log_prob: Array1<f64>,
    pub mean: Array2<f64>,
    pub log_std: Array2<f64>,
    pub eps: Array2<f64>,
    /// 1 where the raw log-std lies inside the clamp.
    log_std_live: Array2<f64>,
}

/// Squashes raw head outputs `[mean | log_std]` with the given noise.
pub fn squash(raw: ArrayView2<f64>, eps: ArrayView2<f64>) -> PolicySample {
    let n = raw.nrows();
    let mean = raw.slice(s![.., ..ACT_DIM]).to_owned();
    let raw_ls = raw.slice(s![.., ACT_DIM..]);
    let log_std = raw_ls.mapv(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX));
    let log_std_live = raw_ls.mapv(|v| if (LOG_STD_MIN..=LOG_STD_MAX).contains(&v) { 1.0 } else { 0.0 });
    let mut action = Array2::zeros((n, ACT_DIM));
    let mut log_prob = Array1::zeros(n);
    for i in 0..n {
        let mut lp = 0.0;
        for j in 0..ACT_DIM {
            let e = eps[(i, j)];
            let u = mean[(i, j)] + log_std[(i, j)].exp() * e;
            action[(i, j)] = u.tanh();
            // log(1 - tanh(u)^2) = 2 (ln 2 - u - softplus(-2u))
            let log_det = 2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u));
            lp += -0.5 * e * e - log_std[(i, j)] - HALF_LN_2PI - log_det;
        }
        log_prob[i] = lp;
    }
    PolicySample { action, log_prob, mean, log_std, eps: eps.to_owned(), log_std_live }
}

/// Per-update scalars reported in the metrics.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha_loss: f64,
    pub ent_coef: f64,
}

/// Soft actor-critic state.
#[derive(Debug, Clone, PartialEq)]
pub struct SacAgent {
    pub cfg: RlConfig,
    pub policy: Mlp,
    pub q1: Mlp,
    pub q2: Mlp,
    pub q1_target: Mlp,
    pub q2_target: Mlp,
    pub log_alpha: f64,
    pub opt_policy: Adam,
    pub opt_q1: Adam,
    pub opt_q2: Adam,
    pub opt_alpha: Adam,
}

/// Critic targets and per-critic losses and gradients for one batch.
#[derive(Debug, Clone)]
pub struct CriticEval {
    pub targets: Array1<f64>,
    pub loss1: f64,
    pub loss2: f64,
    pub grads1: MlpGrads,
    pub grads2: MlpGrads,
}

impl SacAgent {
    pub fn new<R: Rng>(cfg: RlConfig, rng: &mut R) -> Result<Self, RlError> {
        cfg.validate()?;
        let policy = Mlp::new(&cfg.sizes(OBS_DIM, 2 * ACT_DIM), POLICY_INIT_SCALE, rng)?;
        let q1 = Mlp::new(&cfg.sizes(OBS_DIM + ACT_DIM, 1), 1.0, rng)?;
        let q2 = Mlp::new(&cfg.sizes(OBS_DIM + ACT_DIM, 1), 1.0, rng)?;
        Ok(Self {
            opt_policy: Adam::for_net(cfg.lr_actor, &policy),
            opt_q1: Adam::for_net(cfg.lr_critic, &q1),
            opt_q2: Adam::for_net(cfg.lr_critic, &q2),
            opt_alpha: Adam::new(cfg.lr_alpha, 1),
            log_alpha: cfg.init_alpha.ln(),
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            policy,
            q1,
            q2,
            cfg,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    /// Samples a batch of actions with explicit noise.
    pub fn sample_with_noise(&self, obs: ArrayView2<f64>, eps: ArrayView2<f64>) -> PolicySample {
        squash(self.policy.predict(obs).view(), eps)
    }

    pub fn sample_action<R: Rng>(&self, obs: &Observation, rng: &mut R) -> (Action, f64) {
        let eps = gaussian(rng, 1, ACT_DIM);
        let s = self.sample_with_noise(obs_row(obs).view(), eps.view());
        (action_from_row(s.action.row(0)), s.log_prob[0])
    }

    /// Noise-free action `tanh(mean)`.
    pub fn deterministic_action(&self, obs: &Observation) -> Action {
        let raw = self.policy.predict(obs_row(obs).view());
        action_from_row(raw.slice(s![0, ..ACT_DIM]).mapv(f64::tanh).view())
    }

    fn min_q(q1: &Mlp, q2: &Mlp, obs: ArrayView2<f64>, act: ArrayView2<f64>) -> Array1<f64> {
        let x = critic_input(obs, act);
        let a = q1.predict(x.view());
        let b = q2.predict(x.view());
        Array1::from_shape_fn(x.nrows(), |i| a[(i, 0)].min(b[(i, 0)]))
    }

    /// Single-sample soft value `min Q(s, a) − α log π(a|s)` with `a ~ π(·|s)`.
    pub fn soft_value_with_noise(&self, obs: ArrayView2<f64>, eps: ArrayView2<f64>, alpha: f64) -> Array1<f64> {
        let s = self.sample_with_noise(obs, eps);
        Self::min_q(&self.q1, &self.q2, obs, s.action.view()) - &(s.log_prob * alpha)
    }

    pub fn soft_value<R: Rng>(&self, obs: &Observation, rng: &mut R) -> f64 {
        let eps = gaussian(rng, 1, ACT_DIM);
        self.soft_value_with_noise(obs_row(obs).view(), eps.view(), self.alpha())[0]
    }

    /// Bellman targets `r + γ(1−d)(min Q̄(s', a') − α log π(a'|s'))`.
    pub fn critic_targets(&self, batch: &Batch, next_eps: ArrayView2<f64>) -> Array1<f64> {
        let next = self.sample_with_noise(batch.next_obs.view(), next_eps);
        let q = Self::min_q(&self.q1_target, &self.q2_target, batch.next_obs.view(), next.action.view());
        let soft = q - &(next.log_prob * self.alpha());
        &batch.rew + &((1.0 - &batch.done) * self.cfg.gamma * soft)
    }

    pub fn critic_eval(&self, batch: &Batch, next_eps: ArrayView2<f64>) -> CriticEval {
        let targets = self.critic_targets(batch, next_eps);
        let x = critic_input(batch.obs.view(), batch.act.view());
        let n = batch.len() as f64;
        let eval = |net: &Mlp| -> (f64, MlpGrads) {
            let (q, tape) = net.forward_batch(x.view());
            let diff = &q.column(0) - &targets;
            let loss = diff.mapv(|d| d * d).sum() / n;
            let g = (diff * (2.0 / n)).insert_axis(Axis(1));
            (loss, net.backward(&tape, g.view()).0)
        };
        let (loss1, grads1) = eval(&self.q1);
        let (loss2, grads2) = eval(&self.q2);
        CriticEval { targets, loss1, loss2, grads1, grads2 }
    }

    /// `mean(α log π − min Q)` and its gradient w.r.t. the policy parameters
    /// for fixed noise; also returns the sample.
    pub fn policy_loss_and_grad(&self, obs: ArrayView2<f64>, eps: ArrayView2<f64>) -> (f64, MlpGrads, PolicySample) {
        let alpha = self.alpha();
        let (raw, tape) = self.policy.forward_batch(obs);
        let sample = squash(raw.view(), eps);
        let n = obs.nrows();
        let x = critic_input(obs, sample.action.view());
        let (qa, tape1) = self.q1.forward_batch(x.view());
        let (qb, tape2) = self.q2.forward_batch(x.view());
        let ones = Array2::from_elem((n, 1), 1.0);
        let (_, ga) = self.q1.backward(&tape1, ones.view());
        let (_, gb) = self.q2.backward(&tape2, ones.view());
        let mut loss = 0.0;
        let mut g_raw = Array2::zeros((n, 2 * ACT_DIM));
        let inv_n = 1.0 / n as f64;
        for i in 0..n {
            let use_a = qa[(i, 0)] <= qb[(i, 0)];
            let qmin = if use_a { qa[(i, 0)] } else { qb[(i, 0)] };
            let dq = if use_a { &ga } else { &gb };
            loss += alpha * sample.log_prob[i] - qmin;
            for j in 0..ACT_DIM {
                let a = sample.action[(i, j)];
                let std = sample.log_std[(i, j)].exp();
                let e = sample.eps[(i, j)];
                let dq_du = dq[(i, OBS_DIM + j)] * (1.0 - a * a);
                // d log π / du = 2 tanh(u)
                g_raw[(i, j)] = inv_n * (alpha * 2.0 * a - dq_du);
                let d_ls = alpha * (-1.0 + 2.0 * a * std * e) - dq_du * std * e;
                g_raw[(i, ACT_DIM + j)] = inv_n * d_ls * sample.log_std_live[(i, j)];
            }
        }
        let (grads, _) = self.policy.backward(&tape, g_raw.view());
        (loss * inv_n, grads, sample)
    }

    /// `J(α) = mean(−α (log π + H̄))` and its derivative in `log_alpha`.
    pub fn temperature_loss_and_grad(log_alpha: f64, log_prob: &Array1<f64>, target_entropy: f64) -> (f64, f64) {
        let alpha = log_alpha.exp();
        let m = (log_prob + target_entropy).mean().unwrap_or(0.0);
        (-alpha * m, -alpha * m)
    }

    pub fn critic_update(&mut self, batch: &Batch, next_eps: ArrayView2<f64>) -> Result<(f64, f64), RlError> {
        let ev = self.critic_eval(batch, next_eps);
        if !(ev.loss1.is_finite() && ev.loss2.is_finite()) {
            return Err(RlError::NonFiniteLoss("critic"));
        }
        self.opt_q1.step(&mut self.q1, &ev.grads1)?;
        self.opt_q2.step(&mut self.q2, &ev.grads2)?;
        Ok((ev.loss1, ev.loss2))
    }

    pub fn policy_update(&mut self, obs: ArrayView2<f64>, eps: ArrayView2<f64>) -> Result<f64, RlError> {
        let (loss, grads, _) = self.policy_loss_and_grad(obs, eps);
        if !loss.is_finite() {
            return Err(RlError::NonFiniteLoss("actor"));
        }
        self.opt_policy.step(&mut self.policy, &grads)?;
        Ok(loss)
    }

    pub fn temperature_update(&mut self, obs: ArrayView2<f64>, eps: ArrayView2<f64>) -> Result<f64, RlError> {
        let log_prob = self.sample_with_noise(obs, eps).log_prob;
        let (loss, grad) = Self::temperature_loss_and_grad(self.log_alpha, &log_prob, self.cfg.target_entropy);
        if !loss.is_finite() {
            return Err(RlError::NonFiniteLoss("temperature"));
        }
        if self.cfg.auto_alpha {
            let mut p = [self.log_alpha];
            self.opt_alpha.step_slice(&mut p, &[grad])?;
            self.log_alpha = p[0];
        }
        Ok(loss)
    }

    pub fn polyak_update(&mut self) {
        self.q1_target.polyak_from(&self.q1, self.cfg.tau);
        self.q2_target.polyak_from(&self.q2, self.cfg.tau);
    }

    /// Critic, policy, temperature, then target networks.
    pub fn update<R: Rng>(&mut self, batch: &Batch, rng: &mut R) -> Result<UpdateStats, RlError> {
        let n = batch.len();
        let next_eps = gaussian(rng, n, ACT_DIM);
        let (l1, l2) = self.critic_update(batch, next_eps.view())?;
        let eps = gaussian(rng, n, ACT_DIM);
        let actor_loss = self.policy_update(batch.obs.view(), eps.view())?;
        let eps = gaussian(rng, n, ACT_DIM);
        let alpha_loss = self.temperature_update(batch.obs.view(), eps.view())?;
        self.polyak_update();
        Ok(UpdateStats { critic_loss: 0.5 * (l1 + l2), actor_loss, alpha_loss, ent_coef: self.alpha() })
    }
}

/// DDPG (single critic, no smoothing, no delay) and TD3 share this state.
#[derive(Debug, Clone, PartialEq)]
pub struct DeterministicAgent {
    pub algo: Algo,
    pub cfg: RlConfig,
    pub actor: Mlp,
    pub actor_target: Mlp,
    pub q1: Mlp,
    pub q2: Mlp,
    pub q1_target: Mlp,
    pub q2_target: Mlp,
    pub opt_actor: Adam,
    pub opt_q1: Adam,
    pub opt_q2: Adam,
    pub critic_updates: u64,
    pub actor_updates: u64,
    last_actor_loss: f64,
}

impl DeterministicAgent {
    pub fn new<R: Rng>(algo: Algo, cfg: RlConfig, rng: &mut R) -> Result<Self, RlError> {
        cfg.validate()?;
        if algo == Algo::Sac {
            return Err(RlError::InvalidConfig("sac is not a deterministic-policy algorithm".into()));
        }
        let actor = Mlp::new(&cfg.sizes(OBS_DIM, ACT_DIM), POLICY_INIT_SCALE, rng)?;
        let q1 = Mlp::new(&cfg.sizes(OBS_DIM + ACT_DIM, 1), 1.0, rng)?;
        let q2 = Mlp::new(&cfg.sizes(OBS_DIM + ACT_DIM, 1), 1.0, rng)?;
        Ok(Self {
            algo,
            opt_actor: Adam::for_net(cfg.lr_actor, &actor),
            opt_q1: Adam::for_net(cfg.lr_critic, &q1),
            opt_q2: Adam::for_net(cfg.lr_critic, &q2),
            actor_target: actor.clone(),
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            actor,
            q1,
            q2,
            cfg,
            critic_updates: 0,
            actor_updates: 0,
            last_actor_loss: 0.0,
        })
    }

    fn twin(&self) -> bool {
        self.algo == Algo::Td3
    }

    fn delay(&self) -> u64 {
        if self.algo == Algo::Td3 { self.cfg.policy_delay as u64 } else { 1 }
    }

    pub fn deterministic_action(&self, obs: &Observation) -> Action {
        action_from_row(self.actor.predict(obs_row(obs).view()).row(0).mapv(f64::tanh).view())
    }

    pub fn explore_action<R: Rng>(&self, obs: &Observation, rng: &mut R) -> Action {
        let mut a = self.deterministic_action(obs);
        for v in a.0.iter_mut() {
            *v = (*v + self.cfg.exploration_noise * rng.sample::<f64, _>(StandardNormal)).clamp(-1.0, 1.0);
        }
        a
    }

    /// Bootstrap targets; `noise` is the raw smoothing noise (TD3 only),
    /// clipped to `±noise_clip` after scaling by `policy_noise`.
    pub fn critic_targets(&self, batch: &Batch, noise: ArrayView2<f64>) -> Array1<f64> {
        let mut next = self.actor_target.predict(batch.next_obs.view()).mapv(f64::tanh);
        if self.twin() {
            let (sigma, clip) = (self.cfg.policy_noise, self.cfg.noise_clip);
            next.zip_mut_with(&noise, |a, &z| *a = (*a + (sigma * z).clamp(-clip, clip)).clamp(-1.0, 1.0));
        }
        let x = critic_input(batch.next_obs.view(), next.view());
        let a = self.q1_target.predict(x.view());
        let q = if self.twin() {
            let b = self.q2_target.predict(x.view());
            Array1::from_shape_fn(batch.len(), |i| a[(i, 0)].min(b[(i, 0)]))
        } else {
            a.column(0).to_owned()
        };
        &batch.rew + &((1.0 - &batch.done) * self.cfg.gamma * q)
    }

    pub fn update<R: Rng>(&mut self, batch: &Batch, rng: &mut R) -> Result<UpdateStats, RlError> {
        let n = batch.len();
        let noise = gaussian(rng, n, ACT_DIM);
        let targets = self.critic_targets(batch, noise.view());
        let x = critic_input(batch.obs.view(), batch.act.view());
        let nf = n as f64;
        let fit = |net: &Mlp| -> (f64, MlpGrads) {
            let (q, tape) = net.forward_batch(x.view());
            let diff = &q.column(0) - &targets;
            let loss = diff.mapv(|d| d * d).sum() / nf;
            let g = (diff * (2.0 / nf)).insert_axis(Axis(1));
            (loss, net.backward(&tape, g.view()).0)
        };
        let (l1, g1) = fit(&self.q1);
        if !l1.is_finite() {
            return Err(RlError::NonFiniteLoss("critic"));
        }
        self.opt_q1.step(&mut self.q1, &g1)?;
        let mut critic_loss = l1;
        if self.twin() {
            let (l2, g2) = fit(&self.q2);
            if !l2.is_finite() {
                return Err(RlError::NonFiniteLoss("critic"));
            }
            self.opt_q2.step(&mut self.q2, &g2)?;
            critic_loss = 0.5 * (l1 + l2);
        }
        self.critic_updates += 1;

        if self.critic_updates % self.delay() == 0 {
            let loss = self.actor_step(batch.obs.view())?;
            self.last_actor_loss = loss;
            self.actor_updates += 1;
            let tau = self.cfg.tau;
            self.actor_target.polyak_from(&self.actor, tau);
            self.q1_target.polyak_from(&self.q1, tau);
            if self.twin() {
                self.q2_target.polyak_from(&self.q2, tau);
            }
        }
        Ok(UpdateStats { critic_loss, actor_loss: self.last_actor_loss, alpha_loss: 0.0, ent_coef: 0.0 })
    }

    /// `−mean Q1(s, tanh(actor(s)))` and its actor gradient.
    pub fn actor_loss_and_grad(&self, obs: ArrayView2<f64>) -> (f64, MlpGrads) {
        let (raw, tape) = self.actor.forward_batch(obs);
        let a = raw.mapv(f64::tanh);
        let x = critic_input(obs, a.view());
        let n = obs.nrows();
        let (q, qtape) = self.q1.forward_batch(x.view());
        let (_, dq) = self.q1.backward(&qtape, Array2::from_elem((n, 1), 1.0).view());
        let inv_n = 1.0 / n as f64;
        let g = Array2::from_shape_fn((n, ACT_DIM), |(i, j)| -inv_n * dq[(i, OBS_DIM + j)] * (1.0 - a[(i, j)].powi(2)));
        (-q.mean().unwrap_or(0.0), self.actor.backward(&tape, g.view()).0)
    }

    fn actor_step(&mut self, obs: ArrayView2<f64>) -> Result<f64, RlError> {
        let (loss, grads) = self.actor_loss_and_grad(obs);
        if !loss.is_finite() {
            return Err(RlError::NonFiniteLoss("actor"));
        }
        self.opt_actor.step(&mut self.actor, &grads)?;
        Ok(loss)
    }
}

/// Any trained learner.
#[derive(Debug, Clone, PartialEq)]
pub enum Agent {
    Sac(Box<SacAgent>),
    Deterministic(Box<DeterministicAgent>),
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"RVSUSPCK";
pub const CHECKPOINT_VERSION: u64 = 1;

impl Agent {
    pub fn new<R: Rng>(algo: Algo, cfg: RlConfig, rng: &mut R) -> Result<Self, RlError> {
        Ok(match algo {
            Algo::Sac => Agent::Sac(Box::new(SacAgent::new(cfg, rng)?)),
            _ => Agent::Deterministic(Box::new(DeterministicAgent::new(algo, cfg, rng)?)),
        })
    }

    pub fn algo(&self) -> Algo {
        match self {
            Agent::Sac(_) => Algo::Sac,
            Agent::Deterministic(a) => a.algo,
        }
    }

    pub fn config(&self) -> &RlConfig {
        match self {
            Agent::Sac(a) => &a.cfg,
            Agent::Deterministic(a) => &a.cfg,
        }
    }

    /// Noise-free evaluation action.
    pub fn eval_action(&self, obs: &Observation) -> Action {
        match self {
            Agent::Sac(a) => a.deterministic_action(obs),
            Agent::Deterministic(a) => a.deterministic_action(obs),
        }
    }

    pub fn explore_action<R: Rng>(&self, obs: &Observation, rng: &mut R) -> Action {
        match self {
            Agent::Sac(a) => a.sample_action(obs, rng).0,
            Agent::Deterministic(a) => a.explore_action(obs, rng),
        }
    }

    pub fn update<R: Rng>(&mut self, batch: &Batch, rng: &mut R) -> Result<UpdateStats, RlError> {
        match self {
            Agent::Sac(a) => a.update(batch, rng),
            Agent::Deterministic(a) => a.update(batch, rng),
        }
    }

    pub fn ent_coef(&self) -> f64 {
        match self {
            Agent::Sac(a) => a.alpha(),
            Agent::Deterministic(_) => 0.0,
        }
    }

    /// Serializes networks, optimizer moments and scalars. Hyperparameters
    /// travel separately in the resolved config.
    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<(), RlError> {
        out.write_all(CHECKPOINT_MAGIC).map_err(ApproxError::from)?;
        write_u64(out, CHECKPOINT_VERSION).map_err(ApproxError::from)?;
        write_u64(out, self.algo().tag()).map_err(ApproxError::from)?;
        match self {
            Agent::Sac(a) => {
                for net in [&a.policy, &a.q1, &a.q2, &a.q1_target, &a.q2_target] {
                    net.write_to(out)?;
                }
                for opt in [&a.opt_policy, &a.opt_q1, &a.opt_q2, &a.opt_alpha] {
                    opt.write_to(out)?;
                }
                write_f64s(out, &[a.log_alpha])?;
            }
            Agent::Deterministic(a) => {
                for net in [&a.actor, &a.actor_target, &a.q1, &a.q2, &a.q1_target, &a.q2_target] {
                    net.write_to(out)?;
                }
                for opt in [&a.opt_actor, &a.opt_q1, &a.opt_q2] {
                    opt.write_to(out)?;
                }
                write_u64(out, a.critic_updates).map_err(ApproxError::from)?;
                write_u64(out, a.actor_updates).map_err(ApproxError::from)?;
                write_f64s(out, &[a.last_actor_loss])?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(input: &mut R, cfg: RlConfig) -> Result<Self, RlError> {
        let bad = |m: String| RlError::Approx(ApproxError::BadCheckpoint(m));
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic).map_err(|_| bad("truncated header".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a rover checkpoint".into()));
        }
        let version = read_u64(input)?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("format version {version}, expected {CHECKPOINT_VERSION}")));
        }
        let tag = read_u64(input)?;
        let algo = [Algo::Sac, Algo::Ddpg, Algo::Td3]
            .into_iter()
            .find(|a| a.tag() == tag)
            .ok_or_else(|| bad(format!("unknown algorithm tag {tag}")))?;
        let policy_out = if algo == Algo::Sac { 2 * ACT_DIM } else { ACT_DIM };
        let check = |net: Mlp, input: usize, output: usize| -> Result<Mlp, RlError> {
            let sizes = net.sizes();
            if net.input_dim() != input || net.output_dim() != output || sizes[1..sizes.len() - 1] != cfg.hidden[..] {
                return Err(bad(format!("network shape {sizes:?} does not match the configuration")));
            }
            Ok(net)
        };
        let critic = |input: &mut R| -> Result<Mlp, RlError> { check(Mlp::read_from(input)?, OBS_DIM + ACT_DIM, 1) };
        let opt_for = |input: &mut R, net: &Mlp| -> Result<Adam, RlError> {
            let opt = Adam::read_from(input)?;
            if opt.moments().0.len() != net.param_count() {
                return Err(bad("optimizer state does not match its network".into()));
            }
            Ok(opt)
        };
        let agent = match algo {
            Algo::Sac => {
                let policy = check(Mlp::read_from(input)?, OBS_DIM, policy_out)?;
                let (q1, q2, q1_target, q2_target) = (critic(input)?, critic(input)?, critic(input)?, critic(input)?);
                let opt_policy = opt_for(input, &policy)?;
                let opt_q1 = opt_for(input, &q1)?;
                let opt_q2 = opt_for(input, &q2)?;
                let opt_alpha = Adam::read_from(input)?;
                let log_alpha = read_f64s(input, 1)?[0];
                if !log_alpha.is_finite() || opt_alpha.moments().0.len() != 1 {
                    return Err(bad("bad temperature state".into()));
                }
                Agent::Sac(Box::new(SacAgent {
                    cfg,
                    policy,
                    q1,
                    q2,
                    q1_target,
                    q2_target,
                    log_alpha,
                    opt_policy,
                    opt_q1,
                    opt_q2,
                    opt_alpha,
                }))
            }
            _ => {
                let actor = check(Mlp::read_from(input)?, OBS_DIM, policy_out)?;
                let actor_target = check(Mlp::read_from(input)?, OBS_DIM, policy_out)?;
                let (q1, q2, q1_target, q2_target) = (critic(input)?, critic(input)?, critic(input)?, critic(input)?);
                let opt_actor = opt_for(input, &actor)?;
                let opt_q1 = opt_for(input, &q1)?;
                let opt_q2 = opt_for(input, &q2)?;
                let critic_updates = read_u64(input)?;
                let actor_updates = read_u64(input)?;
                let last_actor_loss = read_f64s(input, 1)?[0];
                Agent::Deterministic(Box::new(DeterministicAgent {
                    algo,
                    cfg,
                    actor,
                    actor_target,
                    q1,
                    q2,
                    q1_target,
                    q2_target,
                    opt_actor,
                    opt_q1,
                    opt_q2,
                    critic_updates,
                    actor_updates,
                    last_actor_loss,
                }))
            }
        };
        let mut rest = [0u8; 1];
        if input.read(&mut rest).map_err(ApproxError::from)? != 0 {
            return Err(bad("trailing bytes".into()));
        }
        Ok(agent)
    }
}

/// One logged row of training metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub ep_rew_mean: f64,
    pub ep_len_mean: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub ent_coef: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeRecord {
    /// Environment step at which the episode ended.
    pub end_step: usize,
    pub reward: f64,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunMetrics {
    pub rows: Vec<MetricsRow>,
    pub episodes: Vec<EpisodeRecord>,
    pub gradient_steps: usize,
    pub replay_size: usize,
}

/// Runs the interaction/update loop. `on_row` sees every logged row as it
/// is produced.
pub fn train<F: FnMut(&MetricsRow)>(
    agent: &mut Agent,
    env: &mut RoverEnv,
    total_steps: usize,
    seed: u64,
    mut on_row: F,
) -> Result<RunMetrics, RlError> {
    if total_steps == 0 {
        return Err(RlError::InvalidConfig("total_steps must be > 0".into()));
    }
    let cfg = agent.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = ReplayPool::new(cfg.replay_capacity);
    let mut metrics = RunMetrics::default();
    let mut recent: VecDeque<(f64, usize)> = VecDeque::with_capacity(METRICS_WINDOW);
    let mut stats = UpdateStats { ent_coef: agent.ent_coef(), ..UpdateStats::default() };
    let mut obs = env.reset(rng.random())?;
    let (mut ep_ret, mut ep_len) = (0.0, 0usize);
    let learn_from = cfg.warmup_steps.max(cfg.batch_size);

    for step in 1..=total_steps {
        let action = if step <= cfg.warmup_steps {
            Action(std::array::from_fn(|_| rng.random_range(-1.0..=1.0)))
        } else {
            agent.explore_action(&obs, &mut rng)
        };
        let res = env.step(&action)?;
        pool.push(Transition {
            obs: obs.0,
            action: action.clipped().0,
            reward: res.reward,
            next_obs: res.observation.0,
            done: res.done,
        });
        ep_ret += res.reward;
        ep_len += 1;
        obs = res.observation;
        if res.done {
            metrics.episodes.push(EpisodeRecord { end_step: step, reward: ep_ret, length: ep_len });
            if recent.len() == METRICS_WINDOW {
                recent.pop_front();
            }
            recent.push_back((ep_ret, ep_len));
            ep_ret = 0.0;
            ep_len = 0;
            obs = env.reset(rng.random())?;
        }

        if pool.len() >= learn_from {
            let batch = pool.sample(cfg.batch_size, &mut rng);
            stats = agent.update(&batch, &mut rng)?;
            metrics.gradient_steps += 1;
        }

        if step % cfg.log_interval == 0 && !recent.is_empty() {
            let k = recent.len() as f64;
            let row = MetricsRow {
                step,
                ep_rew_mean: recent.iter().map(|e| e.0).sum::<f64>() / k,
                ep_len_mean: recent.iter().map(|e| e.1 as f64).sum::<f64>() / k,
                actor_loss: stats.actor_loss,
                critic_loss: stats.critic_loss,
                ent_coef: agent.ent_coef(),
            };
            on_row(&row);
            metrics.rows.push(row);
        }
    }
    metrics.replay_size = pool.len();
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn transition(r: f64, done: bool) -> Transition {
        Transition { obs: [0.1, 0.0, 0.9, 0.3], action: [0.2; 4], reward: r, next_obs: [0.2, 0.0, 0.8, 0.3], done }
    }

    #[test]
    fn pool_evicts_oldest() {
        let mut pool = ReplayPool::new(3);
        for i in 0..5 {
            pool.push(transition(i as f64, false));
        }
        assert_eq!(pool.len(), 3);
        let mut rewards: Vec<f64> = (0..3).map(|i| pool.get(i).reward).collect();
        rewards.sort_by(f64::total_cmp);
        assert_eq!(rewards, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn degenerate_std_gives_tanh_mean() {
        let raw = ndarray::array![[0.3, -0.5, 1.2, 0.0, -30.0, -30.0, -30.0, -30.0]];
        let eps = ndarray::array![[0.0, 0.0, 0.0, 0.0]];
        let s = squash(raw.view(), eps.view());
        for j in 0..4 {
            assert_eq!(s.action[(0, j)], raw[(0, j)].tanh());
        }
    }

    #[test]
    fn actions_strictly_inside_bounds() {
        let agent = SacAgent::new(RlConfig::default(), &mut rng(0)).unwrap();
        let mut r = rng(1);
        for _ in 0..200 {
            let obs = Observation::new(r.random_range(-50.0..50.0), 0.0, r.random_range(-2.0..2.0), 0.3);
            let (a, lp) = agent.sample_action(&obs, &mut r);
            assert!(a.0.iter().all(|x| x.abs() < 1.0));
            assert!(lp.is_finite());
        }
    }

    #[test]
    fn terminal_and_myopic_targets() {
        let agent = SacAgent::new(RlConfig::default(), &mut rng(2)).unwrap();
        let batch = Batch::from_transitions(&[transition(100.0, true), transition(-50.0, true)]);
        let eps = Array2::zeros((2, ACT_DIM));
        assert_eq!(agent.critic_targets(&batch, eps.view()).to_vec(), vec![100.0, -50.0]);
        let myopic = SacAgent { cfg: RlConfig { gamma: 0.0, ..RlConfig::default() }, ..agent.clone() };
        let batch = Batch::from_transitions(&[transition(0.0, false), transition(-100.0, false)]);
        assert_eq!(myopic.critic_targets(&batch, eps.view()).to_vec(), vec![0.0, -100.0]);
        let ddpg = DeterministicAgent::new(Algo::Ddpg, RlConfig::default(), &mut rng(3)).unwrap();
        let batch = Batch::from_transitions(&[transition(100.0, true)]);
        assert_eq!(ddpg.critic_targets(&batch, eps.slice(s![..1, ..])).to_vec(), vec![100.0]);
    }

    #[test]
    fn polyak_fixture() {
        let zero = Mlp::from_parts(vec![Array2::zeros((1, 1))], vec![Array1::zeros(1)]).unwrap();
        let one = Mlp::from_parts(vec![Array2::ones((1, 1))], vec![Array1::ones(1)]).unwrap();
        let mut t = zero.clone();
        t.polyak_from(&one, 0.005);
        assert_eq!(t.flat(), vec![0.005, 0.005]);
        let mut t = zero.clone();
        t.polyak_from(&one, 1.0);
        assert_eq!(t, one);
        let mut t = zero.clone();
        t.polyak_from(&one, 0.0);
        assert_eq!(t, zero);
    }

    #[test]
    fn td3_policy_delay() {
        let mut agent = DeterministicAgent::new(Algo::Td3, RlConfig::default(), &mut rng(4)).unwrap();
        let batch = Batch::from_transitions(&[transition(0.0, false), transition(100.0, true)]);
        let mut r = rng(5);
        let mut changes = 0;
        for _ in 0..10 {
            let before = agent.actor.clone();
            agent.update(&batch, &mut r).unwrap();
            if agent.actor != before {
                changes += 1;
            }
        }
        assert_eq!(changes, 5);
    }

    #[test]
    fn unsupported_algorithm() {
        assert!(matches!(Algo::parse("ppo"), Err(RlError::InvalidConfig(m)) if m.contains("unsupported algorithm")));
        assert_eq!(Algo::parse("TD3").unwrap(), Algo::Td3);
    }

    #[test]
    fn checkpoint_roundtrip() {
        for algo in [Algo::Sac, Algo::Ddpg, Algo::Td3] {
            let cfg = RlConfig { hidden: vec![8, 8], ..RlConfig::default() };
            let mut agent = Agent::new(algo, cfg.clone(), &mut rng(6)).unwrap();
            let batch = Batch::from_transitions(&[transition(0.0, false), transition(100.0, true)]);
            agent.update(&batch, &mut rng(7)).unwrap();
            let mut buf = Vec::new();
            agent.write_to(&mut buf).unwrap();
            let back = Agent::read_from(&mut buf.as_slice(), cfg.clone()).unwrap();
            assert_eq!(back, agent);
            let other = RlConfig { hidden: vec![16, 8], ..cfg.clone() };
            assert!(Agent::read_from(&mut buf.as_slice(), other).is_err());
            assert!(Agent::read_from(&mut &buf[..buf.len() - 3], cfg).is_err());
        }
    }
}
