//! Multi-goal point environment and scripted behavior sources.
//!
//! States live in `[-1, 1]²`. Each step adds the action plus Gaussian noise
//! and clips. The reward is a Gaussian bump around the nearest of
//! `n_goals` points on a circle, so every goal is an equally good target
//! and a policy that averages two goal-seeking policies ends up between
//! goals with low reward.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{ActionBox, ActionDistribution};
use crate::rng::{self, Rng};

pub const STATE_DIM: usize = 2;
pub const ACTION_DIM: usize = 2;

/// Scripted policy step length.
pub const SCRIPTED_GAIN: f64 = 0.08;
/// Scripted policy per-dimension standard deviation.
pub const SCRIPTED_STD: f64 = 0.02;
/// Floor on the distance used to normalize the goal direction.
pub const DIRECTION_FLOOR: f64 = 1e-6;
/// Start states are uniform on `[-START_HALF_WIDTH, START_HALF_WIDTH]²`.
pub const START_HALF_WIDTH: f64 = 0.5;

pub type State = [f64; STATE_DIM];

/// Environment that caps rollout threads.
pub const THREADS_ENV: &str = "BEHAVIOR_FORGE_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub n_goals: usize,
    pub goal_radius: f64,
    pub action_box: ActionBox,
    pub noise_std: f64,
    pub horizon: usize,
    pub reward_bandwidth: f64,
    pub gamma: f64,
}

impl EnvConfig {
    pub fn new(n_goals: usize) -> Self {
        EnvConfig {
            n_goals,
            goal_radius: 0.8,
            action_box: ActionBox::symmetric(ACTION_DIM, 0.1),
            noise_std: 0.01,
            horizon: 50,
            reward_bandwidth: 8.0,
            gamma: 0.99,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::invalid(format!("env config: {what}")));
        if self.n_goals == 0 {
            return bad("n_goals must be positive");
        }
        if !(self.goal_radius.is_finite() && self.goal_radius >= 0.0) {
            return bad("goal_radius must be finite and non-negative");
        }
        if self.action_box.dim() != ACTION_DIM {
            return bad("action box must be two-dimensional");
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return bad("noise_std must be finite and non-negative");
        }
        if self.horizon == 0 {
            return bad("horizon must be positive");
        }
        if !(self.reward_bandwidth.is_finite() && self.reward_bandwidth > 0.0) {
            return bad("reward_bandwidth must be positive");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        Ok(())
    }

    /// Goal `k` (0-based) sits at angle `2πk / n_goals`.
    pub fn goal(&self, k: usize) -> State {
        let theta = 2.0 * PI * k as f64 / self.n_goals as f64;
        [self.goal_radius * theta.cos(), self.goal_radius * theta.sin()]
    }

    pub fn goals(&self) -> Vec<State> {
        (0..self.n_goals).map(|k| self.goal(k)).collect()
    }

    /// `max_k exp(-bandwidth · ‖s - w_k‖²)`.
    pub fn reward(&self, s: &State) -> f64 {
        self.goals()
            .iter()
            .map(|w| (-self.reward_bandwidth * dist_sq(s, w)).exp())
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

fn dist_sq(a: &State, b: &State) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// One transition with the noise supplied by the caller (standard normal,
/// scaled by `noise_std` here).
pub fn step_with_noise(cfg: &EnvConfig, s: &State, a: &[f64], noise: &State) -> Result<(State, f64)> {
    if !cfg.action_box.contains(a) {
        return Err(Error::invalid(format!("action {a:?} outside the action box")));
    }
    let mut next = [0.0; STATE_DIM];
    for i in 0..STATE_DIM {
        next[i] = (s[i] + a[i] + cfg.noise_std * noise[i]).clamp(-1.0, 1.0);
    }
    Ok((next, cfg.reward(&next)))
}

pub fn env_step(cfg: &EnvConfig, s: &State, a: &[f64], rng: &mut Rng) -> Result<(State, f64)> {
    let noise = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
    step_with_noise(cfg, s, a, &noise)
}

/// Gaussian policy of source `k` (1-based): step of length `SCRIPTED_GAIN`
/// toward goal `k`, clipped to the box.
pub fn scripted_policy(cfg: &EnvConfig, k: usize, s: &State) -> Result<ActionDistribution> {
    if k == 0 || k > cfg.n_goals {
        return Err(Error::invalid(format!("source {k} outside 1..={}", cfg.n_goals)));
    }
    let w = cfg.goal(k - 1);
    let d = [w[0] - s[0], w[1] - s[1]];
    let norm = (d[0] * d[0] + d[1] * d[1]).sqrt().max(DIRECTION_FLOOR);
    let mut mean = vec![SCRIPTED_GAIN * d[0] / norm, SCRIPTED_GAIN * d[1] / norm];
    cfg.action_box.clip(&mut mean);
    Ok(ActionDistribution {
        mean,
        log_std: vec![SCRIPTED_STD.ln(); ACTION_DIM],
    })
}

pub fn sample_start(rng: &mut Rng) -> State {
    [
        rng.random_range(-START_HALF_WIDTH..=START_HALF_WIDTH),
        rng.random_range(-START_HALF_WIDTH..=START_HALF_WIDTH),
    ]
}

/// States, actions and rewards of one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub states: Vec<State>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
}

/// Run `horizon` steps from `start`. `policy` returns the action to take
/// and may draw from the same stream as the dynamics.
pub fn rollout<F>(cfg: &EnvConfig, start: State, rng: &mut Rng, mut policy: F) -> Result<Rollout>
where
    F: FnMut(&State, &mut Rng) -> Result<Vec<f64>>,
{
    let mut states = Vec::with_capacity(cfg.horizon + 1);
    let mut actions = Vec::with_capacity(cfg.horizon);
    let mut rewards = Vec::with_capacity(cfg.horizon);
    let mut s = start;
    states.push(s);
    for _ in 0..cfg.horizon {
        let a = policy(&s, rng)?;
        let (next, r) = env_step(cfg, &s, &a, rng)?;
        actions.push(a);
        rewards.push(r);
        states.push(next);
        s = next;
    }
    Ok(Rollout { states, actions, rewards })
}

/// Uniform draw from the action box.
pub fn random_action(cfg: &EnvConfig, rng: &mut Rng) -> Vec<f64> {
    cfg.action_box
        .low
        .iter()
        .zip(&cfg.action_box.high)
        .map(|(l, h)| rng.random_range(*l..=*h))
        .collect()
}

/// Draw from `dist` and clip to the box.
pub fn sample_clipped(cfg: &EnvConfig, dist: &ActionDistribution, rng: &mut Rng) -> Result<Vec<f64>> {
    Ok(dist.sample(&cfg.action_box, rng)?.0)
}

/// `Σ_t γ^t r_t` (first reward undiscounted).
pub fn trajectory_return(rewards: &[f64], gamma: f64) -> f64 {
    let mut total = 0.0;
    let mut weight = 1.0;
    for r in rewards {
        total += weight * r;
        weight *= gamma;
    }
    total
}

pub fn undiscounted_return(rewards: &[f64]) -> f64 {
    rewards.iter().sum()
}

/// `100 · (raw - random) / (expert - random)`.
pub fn normalized_return(raw: f64, random_ref: f64, expert_ref: f64) -> Result<f64> {
    if expert_ref == random_ref {
        return Err(Error::invalid("expert and random reference returns are equal"));
    }
    Ok(100.0 * (raw - random_ref) / (expert_ref - random_ref))
}

/// Ratio of an algorithm's normalized return to the mean over behavior
/// policies.
pub fn relative_return(algo_norm: f64, behavior_norms: &[f64]) -> Result<f64> {
    if behavior_norms.is_empty() {
        return Err(Error::invalid("no behavior returns"));
    }
    let mean = behavior_norms.iter().sum::<f64>() / behavior_norms.len() as f64;
    if mean == 0.0 {
        return Err(Error::invalid("behavior returns have zero mean"));
    }
    Ok(algo_norm / mean)
}

/// Thread cap from `BEHAVIOR_FORGE_THREADS`, if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&n| n > 0)
}

/// Map `f` over `0..n` in parallel (bounded by [`thread_cap`]) and collect
/// in index order.
pub fn par_collect<T, F>(n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    let run = || (0..n).into_par_iter().map(&f).collect::<Result<Vec<T>>>();
    match thread_cap() {
        Some(threads) => rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    }
}

/// Undiscounted returns of `n_episodes` episodes under a deterministic
/// policy. Episode `i` uses the stream `<role>.<i>` for its start state and
/// dynamics noise.
pub fn evaluate_deterministic<F>(cfg: &EnvConfig, n_episodes: usize, seed: u64, role: &str, policy: F) -> Result<Vec<f64>>
where
    F: Fn(&State) -> Result<Vec<f64>> + Sync + Send,
{
    if n_episodes == 0 {
        return Err(Error::invalid("n_episodes must be at least 1"));
    }
    par_collect(n_episodes, |i| {
        let mut r = rng::stream(seed, &format!("{role}.{i}"));
        let start = sample_start(&mut r);
        let ro = rollout(cfg, start, &mut r, |s, _| policy(s))?;
        Ok(undiscounted_return(&ro.rewards))
    })
}

/// Like [`evaluate_deterministic`] for a stochastic policy.
pub fn evaluate_stochastic<F>(cfg: &EnvConfig, n_episodes: usize, seed: u64, role: &str, policy: F) -> Result<Vec<f64>>
where
    F: Fn(&State, &mut Rng) -> Result<Vec<f64>> + Sync + Send,
{
    if n_episodes == 0 {
        return Err(Error::invalid("n_episodes must be at least 1"));
    }
    par_collect(n_episodes, |i| {
        let mut r = rng::stream(seed, &format!("{role}.{i}"));
        let start = sample_start(&mut r);
        let ro = rollout(cfg, start, &mut r, &policy)?;
        Ok(undiscounted_return(&ro.rewards))
    })
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}
