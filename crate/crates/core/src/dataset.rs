//! Multi-source trajectory datasets.
//!
//! File format: JSON lines. The first line is a [`DatasetMeta`] record;
//! every following line is one trajectory. Reals are written in scientific
//! notation with 17 significant digits so that a write/read cycle is
//! bit-exact.

use std::path::Path;

use rand::Rng as _;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::value::RawValue;

use crate::autodiff::Tensor;
use crate::env::{
    self, evaluate_deterministic, evaluate_stochastic, mean, par_collect, random_action, rollout, sample_clipped,
    sample_start, scripted_policy, EnvConfig, State, ACTION_DIM, STATE_DIM,
};
use crate::error::{Error, Result};
use crate::fileio;
use crate::rng::{self, Rng};

pub const DATASET_VERSION: u32 = 1;
/// Episodes used for each reference return.
pub const REFERENCE_EPISODES: usize = 100;

/// A real that serializes with 17 significant digits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Real(pub f64);

impl Serialize for Real {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if !self.0.is_finite() {
            return Err(serde::ser::Error::custom("non-finite real"));
        }
        let raw = RawValue::from_string(format!("{:.16e}", self.0)).map_err(serde::ser::Error::custom)?;
        raw.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Real {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        f64::deserialize(d).map(Real)
    }
}

fn reals(xs: &[f64]) -> Vec<Real> {
    xs.iter().copied().map(Real).collect()
}

fn unreal(xs: Vec<Real>) -> Vec<f64> {
    xs.into_iter().map(|r| r.0).collect()
}

/// One trajectory with its hidden source label (1-based).
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub source_label: usize,
    /// `horizon + 1` states.
    pub states: Vec<State>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn undiscounted_return(&self) -> f64 {
        env::undiscounted_return(&self.rewards)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetMeta {
    pub version: u32,
    pub env: EnvConfig,
    pub k_true: usize,
    pub m: usize,
    pub seed: u64,
    pub transitions: usize,
    /// Mean return of the uniform-random policy.
    pub random_ref: f64,
    /// Mean return of the best scripted policy evaluated with mean actions.
    pub expert_ref: f64,
    /// Mean return of each data source as sampled, indexed by label - 1.
    pub behavior_refs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub trajectories: Vec<Trajectory>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnvRecord {
    n_goals: usize,
    goal_radius: Real,
    action_low: Vec<Real>,
    action_high: Vec<Real>,
    noise_std: Real,
    horizon: usize,
    reward_bandwidth: Real,
    gamma: Real,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaRecord {
    version: u32,
    env: EnvRecord,
    k_true: usize,
    m: usize,
    seed: u64,
    transitions: usize,
    random_ref: Real,
    expert_ref: Real,
    behavior_refs: Vec<Real>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryRecord {
    m: usize,
    source_label: usize,
    states: Vec<[Real; STATE_DIM]>,
    actions: Vec<Vec<Real>>,
    rewards: Vec<Real>,
}

fn format_err(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "dataset",
        detail: detail.into(),
    }
}

fn parse_line<T: DeserializeOwned>(line: &str, lineno: usize) -> Result<T> {
    serde_json::from_str(line).map_err(|e| format_err(format!("line {lineno}: {e}")))
}

fn to_line<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| format_err(e.to_string()))
}

impl Dataset {
    pub fn m(&self) -> usize {
        self.trajectories.len()
    }

    pub fn transitions(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn source_labels(&self) -> Vec<usize> {
        self.trajectories.iter().map(|t| t.source_label).collect()
    }

    pub fn undiscounted_returns(&self) -> Vec<f64> {
        self.trajectories.iter().map(Trajectory::undiscounted_return).collect()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let e = &self.meta.env;
        let meta = MetaRecord {
            version: self.meta.version,
            env: EnvRecord {
                n_goals: e.n_goals,
                goal_radius: Real(e.goal_radius),
                action_low: reals(&e.action_box.low),
                action_high: reals(&e.action_box.high),
                noise_std: Real(e.noise_std),
                horizon: e.horizon,
                reward_bandwidth: Real(e.reward_bandwidth),
                gamma: Real(e.gamma),
            },
            k_true: self.meta.k_true,
            m: self.meta.m,
            seed: self.meta.seed,
            transitions: self.meta.transitions,
            random_ref: Real(self.meta.random_ref),
            expert_ref: Real(self.meta.expert_ref),
            behavior_refs: reals(&self.meta.behavior_refs),
        };
        let mut out = to_line(&meta)?;
        out.push('\n');
        for (i, t) in self.trajectories.iter().enumerate() {
            let rec = TrajectoryRecord {
                m: i + 1,
                source_label: t.source_label,
                states: t.states.iter().map(|s| [Real(s[0]), Real(s[1])]).collect(),
                actions: t.actions.iter().map(|a| reals(a)).collect(),
                rewards: reals(&t.rewards),
            };
            out.push_str(&to_line(&rec)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or_else(|| format_err("empty file"))?;
        let meta: MetaRecord = parse_line(first, 1)?;
        if meta.version != DATASET_VERSION {
            return Err(format_err(format!("unsupported version {}", meta.version)));
        }
        let env = EnvConfig {
            n_goals: meta.env.n_goals,
            goal_radius: meta.env.goal_radius.0,
            action_box: crate::networks::ActionBox::new(unreal(meta.env.action_low), unreal(meta.env.action_high))?,
            noise_std: meta.env.noise_std.0,
            horizon: meta.env.horizon,
            reward_bandwidth: meta.env.reward_bandwidth.0,
            gamma: meta.env.gamma.0,
        };
        env.validate()?;
        let mut trajectories = Vec::with_capacity(meta.m);
        for (i, line) in lines {
            let rec: TrajectoryRecord = parse_line(line, i + 1)?;
            if rec.m != trajectories.len() + 1 {
                return Err(format_err(format!(
                    "line {}: trajectory index {} out of sequence (expected {})",
                    i + 1,
                    rec.m,
                    trajectories.len() + 1
                )));
            }
            trajectories.push(Trajectory {
                source_label: rec.source_label,
                states: rec.states.into_iter().map(|s| [s[0].0, s[1].0]).collect(),
                actions: rec.actions.into_iter().map(unreal).collect(),
                rewards: unreal(rec.rewards),
            });
        }
        let ds = Dataset {
            meta: DatasetMeta {
                version: meta.version,
                env,
                k_true: meta.k_true,
                m: meta.m,
                seed: meta.seed,
                transitions: meta.transitions,
                random_ref: meta.random_ref.0,
                expert_ref: meta.expert_ref.0,
                behavior_refs: unreal(meta.behavior_refs),
            },
            trajectories,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Structural checks: counts, lengths, bounds and labels.
    pub fn validate(&self) -> Result<()> {
        let meta = &self.meta;
        if self.trajectories.is_empty() {
            return Err(format_err("no trajectories"));
        }
        if meta.m != self.m() {
            return Err(format_err(format!("metadata says M={}, found {}", meta.m, self.m())));
        }
        if meta.transitions != self.transitions() {
            return Err(format_err(format!(
                "metadata says {} transitions, found {}",
                meta.transitions,
                self.transitions()
            )));
        }
        if meta.behavior_refs.len() != meta.k_true {
            return Err(format_err("behavior_refs length differs from k_true"));
        }
        for (i, t) in self.trajectories.iter().enumerate() {
            let m = i + 1;
            if t.is_empty() || t.states.len() != t.len() + 1 || t.actions.len() != t.len() {
                return Err(format_err(format!("trajectory {m}: inconsistent lengths")));
            }
            if t.source_label == 0 || t.source_label > meta.k_true {
                return Err(format_err(format!("trajectory {m}: source label {} out of range", t.source_label)));
            }
            if t.states.iter().flatten().any(|x| !(-1.0..=1.0).contains(x)) {
                return Err(format_err(format!("trajectory {m}: state outside [-1, 1]^2")));
            }
            if t.actions.iter().any(|a| !meta.env.action_box.contains(a)) {
                return Err(format_err(format!("trajectory {m}: action outside the action box")));
            }
            if t.rewards.iter().any(|r| !r.is_finite()) {
                return Err(format_err(format!("trajectory {m}: non-finite reward")));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fileio::write_atomic(path, self.to_jsonl()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_jsonl(&fileio::read_to_string(path)?)
    }
}

/// Source label (1-based) of trajectory `m` (0-based) under round-robin.
pub fn round_robin_label(m: usize, k_true: usize) -> usize {
    m % k_true + 1
}

/// Roll out `M` trajectories, source `m mod K_true + 1` for trajectory `m`.
/// Trajectory `m` (1-based) draws from its own stream `rollout.<m>`.
pub fn generate_dataset(cfg: &EnvConfig, k_true: usize, m: usize, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    if k_true == 0 || k_true > cfg.n_goals {
        return Err(Error::invalid(format!("k_true must lie in 1..={}, got {k_true}", cfg.n_goals)));
    }
    if m == 0 {
        return Err(Error::invalid("M must be positive"));
    }
    let trajectories = par_collect(m, |i| {
        let label = round_robin_label(i, k_true);
        let mut r = rng::stream(seed, &format!("rollout.{}", i + 1));
        let start = sample_start(&mut r);
        let ro = rollout(cfg, start, &mut r, |s, r| sample_clipped(cfg, &scripted_policy(cfg, label, s)?, r))?;
        Ok(Trajectory {
            source_label: label,
            states: ro.states,
            actions: ro.actions,
            rewards: ro.rewards,
        })
    })?;
    let refs = reference_returns(cfg, k_true, seed)?;
    let transitions = trajectories.iter().map(Trajectory::len).sum();
    Ok(Dataset {
        meta: DatasetMeta {
            version: DATASET_VERSION,
            env: cfg.clone(),
            k_true,
            m,
            seed,
            transitions,
            random_ref: refs.random,
            expert_ref: refs.expert,
            behavior_refs: refs.behavior,
        },
        trajectories,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct References {
    pub random: f64,
    pub expert: f64,
    pub behavior: Vec<f64>,
}

/// Reference returns over [`REFERENCE_EPISODES`] episodes each.
pub fn reference_returns(cfg: &EnvConfig, k_true: usize, seed: u64) -> Result<References> {
    let n = REFERENCE_EPISODES;
    let random = mean(&evaluate_stochastic(cfg, n, seed, "ref.random", |_, r| Ok(random_action(cfg, r)))?);
    let mut expert = f64::NEG_INFINITY;
    for k in 1..=cfg.n_goals {
        let ret = evaluate_deterministic(cfg, n, seed, &format!("ref.expert.{k}"), |s| {
            Ok(scripted_policy(cfg, k, s)?.mean)
        })?;
        expert = expert.max(mean(&ret));
    }
    let mut behavior = Vec::with_capacity(k_true);
    for k in 1..=k_true {
        let ret = evaluate_stochastic(cfg, n, seed, &format!("ref.behavior.{k}"), |s, r| {
            sample_clipped(cfg, &scripted_policy(cfg, k, s)?, r)
        })?;
        behavior.push(mean(&ret));
    }
    Ok(References { random, expert, behavior })
}

/// The dataset flattened to transitions, row-major.
#[derive(Clone, Debug)]
pub struct Transitions {
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub next_states: Vec<f64>,
    /// 0-based trajectory index of each transition.
    pub trajectory: Vec<usize>,
    /// 0-based step within the trajectory.
    pub step: Vec<usize>,
}

/// Tensors for one batch of transitions.
#[derive(Clone, Debug)]
pub struct Batch {
    pub index: Vec<usize>,
    pub states: Tensor,
    pub actions: Tensor,
    pub rewards: Tensor,
    pub next_states: Tensor,
    pub trajectory: Vec<usize>,
}

impl Transitions {
    pub fn from_dataset(ds: &Dataset) -> Self {
        let n = ds.transitions();
        let mut t = Transitions {
            states: Vec::with_capacity(n * STATE_DIM),
            actions: Vec::with_capacity(n * ACTION_DIM),
            rewards: Vec::with_capacity(n),
            next_states: Vec::with_capacity(n * STATE_DIM),
            trajectory: Vec::with_capacity(n),
            step: Vec::with_capacity(n),
        };
        for (m, traj) in ds.trajectories.iter().enumerate() {
            for step in 0..traj.len() {
                t.states.extend_from_slice(&traj.states[step]);
                t.actions.extend_from_slice(&traj.actions[step]);
                t.rewards.push(traj.rewards[step]);
                t.next_states.extend_from_slice(&traj.states[step + 1]);
                t.trajectory.push(m);
                t.step.push(step);
            }
        }
        t
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn gather(&self, index: &[usize]) -> Batch {
        let pick = |src: &[f64], width: usize| -> Tensor {
            let mut data = Vec::with_capacity(index.len() * width);
            for &i in index {
                data.extend_from_slice(&src[i * width..(i + 1) * width]);
            }
            Tensor::matrix(index.len(), width, data).expect("batch shape")
        };
        Batch {
            index: index.to_vec(),
            states: pick(&self.states, STATE_DIM),
            actions: pick(&self.actions, ACTION_DIM),
            rewards: pick(&self.rewards, 1),
            next_states: pick(&self.next_states, STATE_DIM),
            trajectory: index.iter().map(|&i| self.trajectory[i]).collect(),
        }
    }

    /// Uniform draw of `size` transitions with replacement.
    pub fn sample(&self, size: usize, rng: &mut Rng) -> Batch {
        let index: Vec<usize> = (0..size).map(|_| rng.random_range(0..self.len())).collect();
        self.gather(&index)
    }

    /// Every state, as an `[n, 2]` tensor.
    pub fn state_tensor(&self) -> Tensor {
        Tensor::matrix(self.len(), STATE_DIM, self.states.clone()).expect("state shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(k_true: usize, m: usize, seed: u64) -> Dataset {
        let mut cfg = EnvConfig::new(3);
        cfg.horizon = 10;
        generate_dataset(&cfg, k_true, m, seed).unwrap()
    }

    #[test]
    fn single_source_labels() {
        let ds = small(1, 7, 1);
        assert!(ds.source_labels().iter().all(|&l| l == 1));
    }

    #[test]
    fn even_split_between_sources() {
        let mut cfg = EnvConfig::new(2);
        cfg.horizon = 2;
        let ds = generate_dataset(&cfg, 2, 300, 5).unwrap();
        let ones = ds.source_labels().iter().filter(|&&l| l == 1).count();
        assert_eq!(ones, 150);
        assert_eq!(ds.meta.transitions, 600);
    }

    #[test]
    fn remainder_differs_by_at_most_one() {
        let ds = small(3, 10, 2);
        let counts: Vec<usize> = (1..=3).map(|k| ds.source_labels().iter().filter(|&&l| l == k).count()).collect();
        assert_eq!(counts, vec![4, 3, 3]);
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = small(2, 6, 3).to_jsonl().unwrap();
        let b = small(2, 6, 3).to_jsonl().unwrap();
        assert_eq!(a, b);
        assert_ne!(a, small(2, 6, 4).to_jsonl().unwrap());
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ds = small(3, 5, 8);
        let back = Dataset::from_jsonl(&ds.to_jsonl().unwrap()).unwrap();
        assert_eq!(back, ds);
        for (a, b) in ds.trajectories.iter().zip(&back.trajectories) {
            for (x, y) in a.states.iter().flatten().zip(b.states.iter().flatten()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn trajectories_are_consistent() {
        let ds = small(3, 6, 9);
        ds.validate().unwrap();
        for t in &ds.trajectories {
            assert_eq!(t.states.len(), 11);
            assert!(t.rewards.iter().all(|&r| r > 0.0 && r <= 1.0));
        }
        let tr = Transitions::from_dataset(&ds);
        assert_eq!(tr.len(), 60);
        for i in 0..tr.len() - 1 {
            if tr.trajectory[i] == tr.trajectory[i + 1] {
                assert_eq!(tr.next_states[2 * i..2 * i + 2], tr.states[2 * (i + 1)..2 * (i + 1) + 2]);
            }
        }
    }

    #[test]
    fn references_are_ordered() {
        let ds = small(2, 4, 1);
        assert!(ds.meta.expert_ref > ds.meta.random_ref);
        assert_eq!(ds.meta.behavior_refs.len(), 2);
    }

    #[test]
    fn corrupted_index_is_rejected() {
        let text = small(1, 2, 1).to_jsonl().unwrap().replacen("{\"m\":2", "{\"m\":5", 1);
        assert!(Dataset::from_jsonl(&text).is_err());
    }

    #[test]
    fn numbers_use_seventeen_digits() {
        let text = small(1, 1, 1).to_jsonl().unwrap();
        assert!(text.contains("\"gamma\":9.8999999999999999e-1"));
    }
}
