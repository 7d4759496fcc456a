//! LBRAC-v: behavior-regularized actor-critic against the per-trajectory
//! behavior policy.
//!
//! The learned policy reuses the trained shared networks through one extra
//! embedding `e_π` for `f_p` and one `h_π` per Q member. Both start as
//! copies of the rows of the behavior policy whose trajectories have the
//! best discretized returns. Each step then minimizes
//! `L_rec + α L_com + L_actor` on the policy side and `L_Q + L_critic` on
//! the Q side.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand_distr::StandardNormal;
use rand::Rng as _;

use crate::autodiff::{
    l2_normalize_rows, log_likelihood_rows, Adam, AdamConfig, Graph,
    NodeId, ParamId, ParamStore, Tensor,
};
use crate::behavior::{
    assign_trajectories, behavior_targets, bootstrap_targets, check_loss, ensemble_min, ensemble_regression,
    gather_normalized, normal_noise, policy_terms, q_loss_node, tag_step, AssignmentMatrix, BehaviorModel, CurveLog,
    TrainConfig,
};
use crate::dataset::{Batch, Dataset, DatasetMeta, Transitions};
use crate::env::{evaluate_deterministic, normalized_return, relative_return, EnvConfig, State, ACTION_DIM};
use crate::error::{Error, Result};
use crate::networks::{
    embedding_rows, normalized_row, soft_update, ActionDistribution, Checkpoint, DistNodes, Networks, ENSEMBLE_SIZE,
};
use crate::rng::{self, Rng};

/// Number of percentile bins used to discretize returns.
pub const RETURN_BINS: usize = 100;

pub const E_PI: &str = "e_pi";

pub fn h_pi_name(i: usize) -> String {
    format!("h_pi.member{}", i + 1)
}

pub fn target_h_pi_name(i: usize) -> String {
    format!("target.h_pi.member{}", i + 1)
}

/// The 0th..99th percentiles of `returns`, interpolating linearly between
/// order statistics.
pub fn percentiles(returns: &[f64]) -> Vec<f64> {
    let mut sorted = returns.to_vec();
    sorted.sort_by(f64::total_cmp);
    let last = sorted.len() - 1;
    (0..RETURN_BINS)
        .map(|j| {
            let pos = (j * last) as f64 / 100.0;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
        })
        .collect()
}

/// `g_m = max { j : q_j <= R_m }`, or 0 below `q_0`.
pub fn discretize_returns(returns: &[f64]) -> Result<Vec<usize>> {
    if returns.is_empty() {
        return Err(Error::invalid("cannot discretize an empty return list"));
    }
    if returns.iter().any(|r| !r.is_finite()) {
        return Err(Error::invalid("returns must be finite"));
    }
    let q = percentiles(returns);
    Ok(returns
        .iter()
        .map(|&r| q.iter().rposition(|&qj| qj <= r).unwrap_or(0))
        .collect())
}

/// Mean discretized return of each cluster; `None` for empty clusters.
pub fn cluster_scores(assign: &AssignmentMatrix, g: &[usize]) -> Result<Vec<Option<f64>>> {
    if assign.m() != g.len() {
        return Err(Error::invalid(format!("G has {} rows but {} returns were given", assign.m(), g.len())));
    }
    let mut sum = vec![0.0; assign.k];
    let mut count = vec![0usize; assign.k];
    for (&k, &gm) in assign.columns.iter().zip(g) {
        sum[k] += gm as f64;
        count[k] += 1;
    }
    Ok(sum
        .into_iter()
        .zip(count)
        .map(|(s, c)| (c > 0).then(|| s / c as f64))
        .collect())
}

/// `argmax_k u_k` over non-empty clusters, lowest index on ties.
pub fn select_best_behavior(assign: &AssignmentMatrix, g: &[usize]) -> Result<usize> {
    let scores = cluster_scores(assign, g)?;
    let mut best: Option<(usize, f64)> = None;
    for (k, u) in scores.into_iter().enumerate() {
        if let Some(u) = u {
            if best.is_none_or(|(_, b)| u > b) {
                best = Some((k, u));
            }
        }
    }
    best.map(|(k, _)| k)
        .ok_or_else(|| Error::invalid("every cluster is empty"))
}

/// Monte Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub std_err: f64,
    pub samples: usize,
}

/// `(1/n) Σ log π(a_i) - log b(a_i)` with `a_i ~ π`.
pub fn kl_estimate(pi: &ActionDistribution, b: &ActionDistribution, n: usize, rng: &mut Rng) -> Result<Estimate> {
    if n == 0 {
        return Err(Error::invalid("KL estimate needs at least one sample"));
    }
    let std = pi.std();
    let mut terms = Vec::with_capacity(n);
    let mut a = vec![0.0; pi.mean.len()];
    for _ in 0..n {
        for ((x, m), s) in a.iter_mut().zip(&pi.mean).zip(&std) {
            let xi: f64 = rng.sample(StandardNormal);
            *x = m + s * xi;
        }
        terms.push(pi.log_density(&a)? - b.log_density(&a)?);
    }
    Ok(summarize(&terms))
}

pub fn summarize(xs: &[f64]) -> Estimate {
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let std_err = if n > 1 {
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    Estimate { mean, std_err, samples: n }
}

/// Closed-form `KL(π ‖ b)` for diagonal Gaussians.
pub fn gaussian_kl(pi: &ActionDistribution, b: &ActionDistribution) -> f64 {
    pi.mean
        .iter()
        .zip(&pi.log_std)
        .zip(b.mean.iter().zip(&b.log_std))
        .map(|((mp, lp), (mb, lb))| {
            let ratio = (2.0 * (lp - lb)).exp();
            lb - lp + 0.5 * (ratio + ((mp - mb) / lb.exp()).powi(2) - 1.0)
        })
        .sum()
}

/// Per-row single-sample KL terms `log π(a) - log b(a)` with
/// `a = μ_π + σ_π ξ`, averaged over the noise draws in `noise`. Gradients
/// reach whatever `pi` and `b` depend on.
pub fn kl_rows(g: &mut Graph<'_>, pi: DistNodes, b: DistNodes, noise: &[Tensor]) -> Result<NodeId> {
    if noise.is_empty() {
        return Err(Error::invalid("KL estimate needs at least one noise draw"));
    }
    let std = g.exp(pi.log_std)?;
    let mut total: Option<NodeId> = None;
    for xi in noise {
        let xi = g.constant(xi.clone());
        let spread = g.mul(std, xi)?;
        let a = g.add(pi.mean, spread)?;
        let lp = log_likelihood_rows(g, a, pi.mean, pi.log_std)?;
        let lb = log_likelihood_rows(g, a, b.mean, b.log_std)?;
        let d = g.sub(lp, lb)?;
        total = Some(match total {
            None => d,
            Some(t) => g.add(t, d)?,
        });
    }
    g.scale(total.expect("non-empty"), 1.0 / noise.len() as f64)
}

/// `y = r + γ (Q̄ - β D)` for one transition.
pub fn critic_target(reward: f64, gamma: f64, target_q: f64, beta: f64, kl: f64) -> f64 {
    reward + gamma * (target_q - beta * kl)
}

/// One actor loss sample: `β D - Q`.
pub fn actor_sample(beta: f64, kl: f64, q: f64) -> f64 {
    beta * kl - q
}

/// LBRAC-v hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LbracConfig {
    pub train: TrainConfig,
    pub beta: f64,
    pub eval_episodes: usize,
    /// KL samples per state during training.
    pub kl_samples: usize,
}

impl Default for LbracConfig {
    fn default() -> Self {
        LbracConfig {
            train: TrainConfig::default(),
            beta: 1.0,
            eval_episodes: 20,
            kl_samples: 1,
        }
    }
}

impl LbracConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid(format!("beta must be non-negative, got {}", self.beta)));
        }
        if self.eval_episodes == 0 || self.kl_samples == 0 {
            return Err(Error::invalid("eval_episodes and kl_samples must be positive"));
        }
        Ok(())
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = self.train.to_map();
        m.insert("beta".into(), self.beta.to_string());
        m.insert("eval-episodes".into(), self.eval_episodes.to_string());
        m.insert("kl-samples".into(), self.kl_samples.to_string());
        m
    }
}

/// A behavior model extended with `e_π`, `h_π` and target `h_π`.
#[derive(Clone, Debug)]
pub struct LbracPolicy {
    pub nets: Networks,
    pub e_pi: ParamId,
    pub h_pi: [ParamId; ENSEMBLE_SIZE],
    pub target_h_pi: [ParamId; ENSEMBLE_SIZE],
    /// Behavior policy the embeddings were copied from (0-based).
    pub k_star: usize,
}

impl LbracPolicy {
    /// Copy `E[k*]` into `e_π`, `H_i[k*]` into `h_π,i` and the target rows
    /// into target `h_π,i`.
    pub fn from_behavior(model: BehaviorModel, k_star: usize) -> Result<Self> {
        let mut nets = model.nets;
        if k_star >= nets.k() {
            return Err(Error::invalid(format!("k* = {} but K = {}", k_star + 1, nets.k())));
        }
        let row = |store: &ParamStore, id: ParamId| Tensor::row(store.get(id).row_slice(k_star));
        let e = row(&nets.store, nets.policy.codebook);
        let e_pi = nets.store.insert(E_PI, e)?;
        let mut h_pi = Vec::with_capacity(ENSEMBLE_SIZE);
        let mut target_h_pi = Vec::with_capacity(ENSEMBLE_SIZE);
        for i in 0..ENSEMBLE_SIZE {
            let h = row(&nets.store, nets.q.online[i].codebook);
            h_pi.push(nets.store.insert(h_pi_name(i), h)?);
            let th = row(&nets.store, nets.q.target[i].codebook);
            target_h_pi.push(nets.store.insert(target_h_pi_name(i), th)?);
        }
        Ok(LbracPolicy {
            nets,
            e_pi,
            h_pi: h_pi.try_into().expect("ensemble size"),
            target_h_pi: target_h_pi.try_into().expect("ensemble size"),
            k_star,
        })
    }

    /// Rebuild from networks loaded out of a policy checkpoint.
    pub fn from_networks(nets: Networks, k_star: usize) -> Result<Self> {
        let e_pi = nets.store.require(E_PI)?;
        let h = |f: fn(usize) -> String| -> Result<[ParamId; ENSEMBLE_SIZE]> {
            Ok([nets.store.require(&f(0))?, nets.store.require(&f(1))?])
        };
        let h_pi = h(h_pi_name)?;
        let target_h_pi = h(target_h_pi_name)?;
        if k_star >= nets.k() {
            return Err(Error::invalid(format!("k* = {} but K = {}", k_star + 1, nets.k())));
        }
        Ok(LbracPolicy {
            nets,
            e_pi,
            h_pi,
            target_h_pi,
            k_star,
        })
    }

    pub fn load(ck: &Checkpoint) -> Result<Self> {
        let k_star: usize = ck
            .manifest
            .config
            .get("k-star")
            .ok_or_else(|| Error::Format {
                what: "checkpoint",
                detail: "policy checkpoint has no k-star entry".into(),
            })?
            .parse::<usize>()
            .map_err(|e| Error::Format {
                what: "checkpoint",
                detail: format!("k-star: {e}"),
            })?;
        if k_star == 0 {
            return Err(Error::Format {
                what: "checkpoint",
                detail: "k-star is 1-based".into(),
            });
        }
        Self::from_networks(ck.to_networks()?, k_star - 1)
    }

    pub fn checkpoint(&self, seed: u64, mut config: BTreeMap<String, String>) -> Checkpoint {
        config.insert("k-star".into(), (self.k_star + 1).to_string());
        Checkpoint::from_networks(&self.nets, "policy", seed, config)
    }

    /// The unit-normalized `e_π`.
    pub fn embedding(&self) -> Vec<f64> {
        normalized_row(&self.nets.store, self.e_pi, 0)
    }

    /// Unit-normalized codebook row `k` (0-based).
    pub fn codebook_embedding(&self, k: usize) -> Vec<f64> {
        normalized_row(&self.nets.store, self.nets.policy.codebook, k)
    }

    pub fn action_distribution(&self, state: &[f64]) -> Result<ActionDistribution> {
        self.nets
            .policy
            .action_distribution(&self.nets.store, &self.embedding(), state)
    }

    pub fn behavior_distribution(&self, k: usize, state: &[f64]) -> Result<ActionDistribution> {
        self.nets
            .policy
            .action_distribution(&self.nets.store, &self.codebook_embedding(k), state)
    }

    /// Mean `KL(π ‖ b_{z̃_m})` over `states`, with `n` samples per state and
    /// `behavior[i]` the codebook index for state `i`.
    pub fn mean_kl(&self, states: &[State], behavior: &[usize], n: usize, rng: &mut Rng) -> Result<f64> {
        if states.is_empty() || states.len() != behavior.len() {
            return Err(Error::invalid("need one behavior index per state"));
        }
        let mut total = 0.0;
        for (s, &k) in states.iter().zip(behavior) {
            let pi = self.action_distribution(s)?;
            let b = self.behavior_distribution(k, s)?;
            total += kl_estimate(&pi, &b, n, rng)?.mean;
        }
        Ok(total / states.len() as f64)
    }

    fn soft_update_pairs(&self) -> Vec<(ParamId, ParamId)> {
        let mut pairs = self.nets.q.target_pairs();
        pairs.extend(self.target_h_pi.iter().copied().zip(self.h_pi));
        pairs
    }
}

/// Row `e_π` repeated `n` times and normalized.
fn policy_rows(g: &mut Graph<'_>, table: ParamId, n: usize) -> Result<NodeId> {
    embedding_rows(g, table, &vec![0; n])
}

fn repeated_row(store: &ParamStore, id: ParamId, n: usize) -> Tensor {
    gather_normalized(store.get(id), &vec![0; n])
}

/// What the training loop hands to an observer after each step.
#[derive(Clone, Debug)]
pub struct StepTrace<'a> {
    pub step: usize,
    /// 0-based trajectory of each batch row.
    pub trajectories: &'a [usize],
    /// 0-based codebook index used as `b` for each row.
    pub behaviors: &'a [usize],
}

/// Training output.
#[derive(Clone, Debug)]
pub struct LbracOutcome {
    pub policy: LbracPolicy,
    /// Keys `rec`, `com`, `q`, `actor`, `critic`, `kl`, `drift_e`, `drift_w`.
    pub log: CurveLog,
}

/// Pick `k*` from the trained model and the dataset returns.
pub fn best_behavior(dataset: &Dataset, model: &BehaviorModel) -> Result<usize> {
    let g = discretize_returns(&dataset.undiscounted_returns())?;
    select_best_behavior(&model.assignment_matrix(), &g)
}

pub fn train_lbrac(dataset: &Dataset, pretrained: BehaviorModel, config: &LbracConfig) -> Result<LbracOutcome> {
    train_lbrac_observed(dataset, pretrained, config, |_| {})
}

/// [`train_lbrac`] with a callback after every step.
pub fn train_lbrac_observed<F>(
    dataset: &Dataset,
    pretrained: BehaviorModel,
    config: &LbracConfig,
    mut observer: F,
) -> Result<LbracOutcome>
where
    F: FnMut(&StepTrace<'_>),
{
    config.validate()?;
    if dataset.m() != pretrained.m() {
        return Err(Error::invalid(format!(
            "model has M={} but dataset has {}",
            pretrained.m(),
            dataset.m()
        )));
    }
    let k_star = best_behavior(dataset, &pretrained)?;
    let mut policy = LbracPolicy::from_behavior(pretrained, k_star)?;
    let transitions = Transitions::from_dataset(dataset);
    if transitions.is_empty() {
        return Err(Error::invalid("dataset has no transitions"));
    }
    let tc = &config.train;
    let mut policy_params = policy.nets.policy_params();
    policy_params.push(policy.e_pi);
    let mut q_params = policy.nets.q_params();
    q_params.extend(policy.h_pi);
    let mut opt_pi = Adam::new(AdamConfig::with_lr(tc.policy_lr), &policy_params, &policy.nets.store)?;
    let mut opt_q = Adam::new(AdamConfig::with_lr(tc.q_lr), &q_params, &policy.nets.store)?;
    let pairs = policy.soft_update_pairs();
    let mut batch_rng = rng::stream(tc.seed, "lbrac.batch");
    let mut noise_rng = rng::stream(tc.seed, "lbrac.noise");
    let e0 = l2_normalize_rows(policy.nets.store.get(policy.nets.policy.codebook));
    let w0 = l2_normalize_rows(policy.nets.store.get(policy.nets.policy.trajectories));
    let mut log = CurveLog::default();

    for step in 1..=tc.total_steps {
        let batch = transitions.sample(tc.batch_size, &mut batch_rng);
        let z = assign_trajectories(&policy.nets.store, &policy.nets, &batch.trajectory);
        observer(&StepTrace {
            step,
            trajectories: &batch.trajectory,
            behaviors: &z,
        });
        let n = batch.states.rows();

        let kl_noise: Vec<Tensor> = (0..config.kl_samples)
            .map(|_| normal_noise(n, ACTION_DIM, &mut noise_rng))
            .collect();
        let act_noise = normal_noise(n, ACTION_DIM, &mut noise_rng);
        let (grads, values) = {
            let mut g = Graph::with_trainable(&policy.nets.store, &policy_params).with_precision(tc.precision);
            let parts = tag_step(
                policy_side(&mut g, &policy, &batch, &z, config, &kl_noise, &act_noise),
                step,
                &batch,
                "policy loss",
            )?;
            check_loss(g.value(parts.total).item(), step, &batch, "L_rec + alpha L_com + L_actor")?;
            let values = [
                g.value(parts.rec).item(),
                g.value(parts.com).item(),
                g.value(parts.actor).item(),
                g.value(parts.kl).item(),
            ];
            (g.backward(parts.total)?, values)
        };
        opt_pi.step(&mut policy.nets.store, &grads)?;

        let b_noise = normal_noise(n, ACTION_DIM, &mut noise_rng);
        let y_b = tag_step(
            behavior_targets(&policy.nets.store, &policy.nets, &batch, &z, tc.gamma, &b_noise, tc.precision),
            step,
            &batch,
            "Q target",
        )?;
        let pi_noise = normal_noise(n, ACTION_DIM, &mut noise_rng);
        let next_kl_noise: Vec<Tensor> = (0..config.kl_samples)
            .map(|_| normal_noise(n, ACTION_DIM, &mut noise_rng))
            .collect();
        let y_pi = tag_step(
            policy_targets(&policy, &batch, &z, config, &pi_noise, &next_kl_noise),
            step,
            &batch,
            "critic target",
        )?;
        let (grads, q, critic) = {
            let mut g = Graph::with_trainable(&policy.nets.store, &q_params).with_precision(tc.precision);
            let lq = tag_step(q_loss_node(&mut g, &policy.nets, &batch, &z, &y_b), step, &batch, "L_Q")?;
            let lc = tag_step(critic_loss_node(&mut g, &policy, &batch, &y_pi), step, &batch, "L_critic")?;
            let total = g.add(lq, lc)?;
            check_loss(g.value(total).item(), step, &batch, "L_Q + L_critic")?;
            let (q, c) = (g.value(lq).item(), g.value(lc).item());
            (g.backward(total)?, q, c)
        };
        opt_q.step(&mut policy.nets.store, &grads)?;
        soft_update(&mut policy.nets.store, &pairs, tc.rho)?;

        let [rec, com, actor, kl] = values;
        log.add("rec", rec);
        log.add("com", com);
        log.add("actor", actor);
        log.add("kl", kl);
        log.add("q", q);
        log.add("critic", critic);
        log.add("drift_e", row_drift(&e0, policy.nets.store.get(policy.nets.policy.codebook)));
        log.add("drift_w", row_drift(&w0, policy.nets.store.get(policy.nets.policy.trajectories)));
        log.end_step(step, tc.log_every);
    }
    log.flush(tc.total_steps);
    Ok(LbracOutcome { policy, log })
}

/// Mean Euclidean distance between the normalized rows of `now` and `start`.
fn row_drift(start: &Tensor, now: &Tensor) -> f64 {
    let now = l2_normalize_rows(now);
    let total: f64 = (0..start.rows())
        .map(|r| {
            start
                .row_slice(r)
                .iter()
                .zip(now.row_slice(r))
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    total / start.rows() as f64
}

/// Nodes of the policy-side objective.
#[derive(Clone, Copy, Debug)]
pub struct PolicySide {
    pub rec: NodeId,
    pub com: NodeId,
    /// Per-row `β D(π, b_z̃, s) - min_i Q_i(h_π,i, s, a'')`.
    pub actor_rows: NodeId,
    pub actor: NodeId,
    /// Mean single-sample KL term.
    pub kl: NodeId,
    pub pi: DistNodes,
    pub total: NodeId,
}

/// `L_rec + α L_com + L_actor`. `b_z̃` enters the penalty as a constant;
/// `kl_noise` drives the KL samples and `act_noise` the action fed to Q.
pub fn policy_side(
    g: &mut Graph<'_>,
    policy: &LbracPolicy,
    batch: &Batch,
    z: &[usize],
    config: &LbracConfig,
    kl_noise: &[Tensor],
    act_noise: &Tensor,
) -> Result<PolicySide> {
    let nets = &policy.nets;
    let n = batch.states.rows();
    let terms = policy_terms(g, nets, batch, z, config.train.alpha)?;
    let e_pi = policy_rows(g, policy.e_pi, n)?;
    let pi = nets.policy.head(g, e_pi, terms.encoded)?;
    let b = DistNodes {
        mean: g.detach(terms.by_codebook.mean),
        log_std: g.detach(terms.by_codebook.log_std),
    };
    let kl_r = kl_rows(g, pi, b, kl_noise)?;
    let draw = nets.policy.sample(g, pi, act_noise.clone())?;
    let h: Vec<NodeId> = policy
        .h_pi
        .iter()
        .map(|&id| policy_rows(g, id, n))
        .collect::<Result<_>>()?;
    let q = ensemble_min(g, &nets.q.online, &h, terms.states, draw.action)?;
    let penalty = g.scale(kl_r, config.beta)?;
    let actor_rows = g.sub(penalty, q)?;
    let actor = g.mean(actor_rows)?;
    let kl = g.mean(kl_r)?;
    let total = g.add(terms.total, actor)?;
    Ok(PolicySide {
        rec: terms.rec,
        com: terms.com,
        actor_rows,
        actor,
        kl,
        pi,
        total,
    })
}

/// `y = r + γ (min_i Q̄_i(h̄_π,i, s', a') - β D(π, b_z̃, s'))`, `a' ~ π(·|s')`.
pub fn policy_targets(
    policy: &LbracPolicy,
    batch: &Batch,
    z: &[usize],
    config: &LbracConfig,
    action_noise: &Tensor,
    kl_noise: &[Tensor],
) -> Result<Tensor> {
    let nets = &policy.nets;
    let store = &nets.store;
    let tc = &config.train;
    let n = batch.states.rows();
    let mut g = Graph::new(store).with_precision(tc.precision);
    let s = g.constant(batch.next_states.clone());
    let phi = nets.policy.encode_states(&mut g, s)?;
    let e_pi = g.constant(repeated_row(store, policy.e_pi, n));
    let e_b = g.constant(gather_normalized(store.get(nets.policy.codebook), z));
    let pi = nets.policy.head(&mut g, e_pi, phi)?;
    let b = nets.policy.head(&mut g, e_b, phi)?;
    let kl = kl_rows(&mut g, pi, b, kl_noise)?;
    let penalty = g.scale(kl, config.beta)?;
    let draw = nets.policy.sample(&mut g, pi, action_noise.clone())?;
    let next_a = g.value(draw.action).clone();
    let penalty = g.value(penalty).clone();
    let h: Vec<Tensor> = policy.target_h_pi.iter().map(|&id| repeated_row(store, id, n)).collect();
    bootstrap_targets(
        store,
        &nets.q.target,
        &h,
        &batch.rewards,
        &batch.next_states,
        &next_a,
        tc.gamma,
        Some(&penalty),
        tc.precision,
    )
}

/// `L_critic = mean_n Σ_i (y - Q_i(h_π,i, s, a))²`.
pub fn critic_loss_node(g: &mut Graph<'_>, policy: &LbracPolicy, batch: &Batch, y: &Tensor) -> Result<NodeId> {
    let n = batch.states.rows();
    let h: Vec<NodeId> = policy
        .h_pi
        .iter()
        .map(|&id| policy_rows(g, id, n))
        .collect::<Result<_>>()?;
    let s = g.constant(batch.states.clone());
    let a = g.constant(batch.actions.clone());
    let y = g.constant(y.clone());
    ensemble_regression(g, &policy.nets.q.online, &h, s, a, y)
}

/// Undiscounted returns of `n_episodes` deterministic (`a = μ`) episodes.
/// Episode `i` uses the stream `eval.<i>`.
pub fn evaluate_policy(policy: &LbracPolicy, env: &EnvConfig, n_episodes: usize, seed: u64) -> Result<Vec<f64>> {
    let e = policy.embedding();
    evaluate_embedding(&policy.nets, &e, env, n_episodes, seed)
}

/// Deterministic evaluation of the policy conditioned on a unit embedding.
pub fn evaluate_embedding(nets: &Networks, e: &[f64], env: &EnvConfig, n_episodes: usize, seed: u64) -> Result<Vec<f64>> {
    evaluate_deterministic(env, n_episodes, seed, "eval", |s| {
        Ok(nets.policy.action_distribution(&nets.store, e, s)?.mean)
    })
}

/// One evaluated episode, with both normalizations.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub seed: u64,
    pub episode: usize,
    pub ret: f64,
    pub normalized: f64,
    pub relative: f64,
}

pub fn eval_rows(meta: &DatasetMeta, seed: u64, returns: &[f64]) -> Result<Vec<EvalRow>> {
    let behavior_norms: Vec<f64> = meta
        .behavior_refs
        .iter()
        .map(|&r| normalized_return(r, meta.random_ref, meta.expert_ref))
        .collect::<Result<_>>()?;
    returns
        .iter()
        .enumerate()
        .map(|(i, &ret)| {
            let normalized = normalized_return(ret, meta.random_ref, meta.expert_ref)?;
            Ok(EvalRow {
                seed,
                episode: i + 1,
                ret,
                normalized,
                relative: relative_return(normalized, &behavior_norms)?,
            })
        })
        .collect()
}

/// Plain-text evaluation table preceded by `# key = value` header lines.
pub fn format_eval_report(header: &BTreeMap<String, String>, rows: &[EvalRow]) -> String {
    let mut out = String::new();
    for (k, v) in header {
        let _ = writeln!(out, "# {k} = {v}");
    }
    out.push_str("seed episode return normalized_return relative_return\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{} {} {:.10e} {:.10e} {:.10e}",
            r.seed, r.episode, r.ret, r.normalized, r.relative
        );
    }
    let mean = |f: fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / rows.len().max(1) as f64;
    let _ = writeln!(
        out,
        "# mean {:.10e} {:.10e} {:.10e}",
        mean(|r| r.ret),
        mean(|r| r.normalized),
        mean(|r| r.relative)
    );
    out
}
