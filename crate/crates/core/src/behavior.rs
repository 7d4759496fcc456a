//! Behavior-set learning.
//!
//! Each trajectory `m` has an embedding `w_m`; its posterior policy is the
//! codebook row `e_j` with the largest inner product. Per step the policy
//! side minimizes `L_rec + α·L_com` over `f_s`, `f_p`, `W` and `E`, then
//! the Q side minimizes `L_Q` over `f_{s,a}`, `f_Q` and `H`, and the
//! target networks move toward the online ones.

use std::collections::BTreeMap;

use rand_distr::StandardNormal;
use rand::Rng as _;

use crate::autodiff::{dot, l2_normalize_rows, log_likelihood_rows, Adam, AdamConfig, Graph, NodeId, ParamStore, Precision, Tensor};
use crate::dataset::{Batch, Dataset, Transitions};
use crate::env::{ACTION_DIM, STATE_DIM};
use crate::error::{Error, Result};
use crate::networks::{soft_update, ActionBox, DistNodes, ModelDims, Networks, QMember, ENSEMBLE_SIZE};
use crate::rng::{self, Rng};

/// Training hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub policy_lr: f64,
    pub q_lr: f64,
    pub rho: f64,
    pub gamma: f64,
    pub seed: u64,
    pub log_every: usize,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.1,
            batch_size: 256,
            total_steps: 20_000,
            policy_lr: 5e-5,
            q_lr: 1e-4,
            rho: 0.001,
            gamma: 0.99,
            seed: 0,
            log_every: 100,
            precision: Precision::Reduced,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::invalid("batch_size and log_every must be positive"));
        }
        if !(self.policy_lr > 0.0 && self.q_lr > 0.0) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::invalid(format!("rho must lie in [0, 1], got {}", self.rho)));
        }
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            return Err(Error::invalid(format!("gamma must lie in [0, 1), got {}", self.gamma)));
        }
        Ok(())
    }

    /// Key/value view used in checkpoint manifests and log headers.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        [
            ("alpha", self.alpha.to_string()),
            ("batch-size", self.batch_size.to_string()),
            ("steps", self.total_steps.to_string()),
            ("policy-lr", self.policy_lr.to_string()),
            ("q-lr", self.q_lr.to_string()),
            ("rho", self.rho.to_string()),
            ("gamma", self.gamma.to_string()),
            ("seed", self.seed.to_string()),
            ("matmul-precision", self.precision.as_str().to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// The learned behavior set: shared networks plus `E`, `W`, `H`.
#[derive(Clone, Debug)]
pub struct BehaviorModel {
    pub nets: Networks,
}

impl BehaviorModel {
    pub fn init(k: usize, m: usize, action_box: ActionBox, seed: u64) -> Result<Self> {
        if k == 0 || m == 0 {
            return Err(Error::invalid("K and M must be positive"));
        }
        let dims = ModelDims::new(STATE_DIM, ACTION_DIM);
        Ok(BehaviorModel {
            nets: Networks::init(dims, k, m, action_box, seed)?,
        })
    }

    pub fn k(&self) -> usize {
        self.nets.k()
    }

    pub fn m(&self) -> usize {
        self.nets.m()
    }

    /// `z̃_m` for every trajectory (0-based).
    pub fn assignments(&self) -> Vec<usize> {
        assignments(&self.nets.store, &self.nets)
    }

    pub fn assignment_matrix(&self) -> AssignmentMatrix {
        AssignmentMatrix::from_assignments(&self.assignments(), self.k())
    }
}

/// `argmax_j e_j · w`, lowest index on ties. `codebook` rows are expected
/// to be unit-normalized.
pub fn posterior_assign(w: &[f64], codebook: &Tensor) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for j in 0..codebook.rows() {
        let score = dot(w, codebook.row_slice(j));
        if score > best_score {
            best = j;
            best_score = score;
        }
    }
    best
}

/// Posterior index of every trajectory, after normalizing `W` and `E`.
pub fn assignments(store: &ParamStore, nets: &Networks) -> Vec<usize> {
    let e = l2_normalize_rows(store.get(nets.policy.codebook));
    let w = l2_normalize_rows(store.get(nets.policy.trajectories));
    (0..w.rows()).map(|m| posterior_assign(w.row_slice(m), &e)).collect()
}

/// Posterior index for each listed trajectory.
pub fn assign_trajectories(store: &ParamStore, nets: &Networks, trajectories: &[usize]) -> Vec<usize> {
    let e = l2_normalize_rows(store.get(nets.policy.codebook));
    let w = store.get(nets.policy.trajectories);
    let mut cache: BTreeMap<usize, usize> = BTreeMap::new();
    trajectories
        .iter()
        .map(|&m| {
            *cache.entry(m).or_insert_with(|| {
                let mut row = w.row_slice(m).to_vec();
                crate::autodiff::l2_normalize_row(&mut row);
                posterior_assign(&row, &e)
            })
        })
        .collect()
}

/// One-hot `M × K` assignment matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AssignmentMatrix {
    pub k: usize,
    /// Column of the single 1 in each row.
    pub columns: Vec<usize>,
}

impl AssignmentMatrix {
    pub fn from_assignments(columns: &[usize], k: usize) -> Self {
        AssignmentMatrix {
            k,
            columns: columns.to_vec(),
        }
    }

    pub fn m(&self) -> usize {
        self.columns.len()
    }

    pub fn get(&self, m: usize, k: usize) -> u8 {
        u8::from(self.columns[m] == k)
    }

    pub fn to_dense(&self) -> Vec<Vec<u8>> {
        (0..self.m()).map(|m| (0..self.k).map(|k| self.get(m, k)).collect()).collect()
    }

    /// Number of trajectories in each cluster.
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &c in &self.columns {
            sizes[c] += 1;
        }
        sizes
    }
}

/// `1 - w · e`.
pub fn commitment_loss(w: &[f64], e: &[f64]) -> f64 {
    1.0 - dot(w, e)
}

/// `-ℓ(e-conditioned) - ℓ(w-conditioned)` for one transition, given the
/// two conditioned distributions.
pub fn reconstruction_loss(
    action: &[f64],
    by_codebook: &crate::networks::ActionDistribution,
    by_trajectory: &crate::networks::ActionDistribution,
) -> Result<f64> {
    Ok(-by_codebook.log_density(action)? - by_trajectory.log_density(action)?)
}

/// Nodes of the policy-side objective on one batch.
#[derive(Clone, Copy, Debug)]
pub struct PolicyTerms {
    /// `f_s(s)` for the batch states.
    pub encoded: NodeId,
    pub states: NodeId,
    /// Normalized `E[z̃]` rows.
    pub codebook_rows: NodeId,
    /// `b_z̃(·|s)` for each row.
    pub by_codebook: DistNodes,
    /// Per-row `L_rec`, `[n, 1]`.
    pub rec_rows: NodeId,
    /// Per-row `L_com`, `[n, 1]`.
    pub com_rows: NodeId,
    pub rec: NodeId,
    pub com: NodeId,
    /// `mean(L_rec) + α · mean(L_com)`.
    pub total: NodeId,
}

/// Build `L_rec + α L_com` for `batch`, with `z` the posterior index of
/// each row.
pub fn policy_terms(g: &mut Graph<'_>, nets: &Networks, batch: &Batch, z: &[usize], alpha: f64) -> Result<PolicyTerms> {
    let states = g.constant(batch.states.clone());
    let actions = g.constant(batch.actions.clone());
    let encoded = nets.policy.encode_states(g, states)?;
    let e_rows = nets.policy.codebook_rows(g, z)?;
    let w_rows = nets.policy.trajectory_rows(g, &batch.trajectory)?;
    let by_e = nets.policy.head(g, e_rows, encoded)?;
    let by_w = nets.policy.head(g, w_rows, encoded)?;
    let ll_e = log_likelihood_rows(g, actions, by_e.mean, by_e.log_std)?;
    let ll_w = log_likelihood_rows(g, actions, by_w.mean, by_w.log_std)?;
    let ll = g.add(ll_e, ll_w)?;
    let rec_rows = g.neg(ll)?;
    let sim = g.row_dot(w_rows, e_rows)?;
    let neg_sim = g.neg(sim)?;
    let com_rows = g.offset(neg_sim, 1.0)?;
    let rec = g.mean(rec_rows)?;
    let com = g.mean(com_rows)?;
    let scaled = g.scale(com, alpha)?;
    let total = g.add(rec, scaled)?;
    Ok(PolicyTerms {
        encoded,
        states,
        codebook_rows: e_rows,
        by_codebook: by_e,
        rec_rows,
        com_rows,
        rec,
        com,
        total,
    })
}

/// Standard-normal noise of shape `[n, d]`.
pub fn normal_noise(n: usize, d: usize, rng: &mut Rng) -> Tensor {
    let data = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::matrix(n, d, data).expect("noise shape")
}

/// Clipped draws `a = clip(μ + σ ξ)` from the distributions conditioned on
/// `embeddings` (rows normalized here) at `states`. No gradient.
pub fn sample_actions(
    nets: &Networks,
    store: &ParamStore,
    embeddings: &Tensor,
    states: &Tensor,
    noise: &Tensor,
    precision: Precision,
) -> Result<Tensor> {
    let (mean, log_std) = nets.policy.evaluate_with(store, embeddings, states, precision)?;
    let bounds = &nets.policy.action_box;
    let d = mean.cols();
    let mut out = mean.data().to_vec();
    for (i, x) in out.iter_mut().enumerate() {
        *x += log_std.data()[i].exp() * noise.data()[i];
        *x = x.clamp(bounds.low[i % d], bounds.high[i % d]);
    }
    Tensor::matrix(mean.rows(), d, out)
}

/// `min_i Q̄_i(h_i, s, a)` over members, `[n, 1]`.
pub fn ensemble_min(g: &mut Graph<'_>, members: &[QMember], h_rows: &[NodeId], states: NodeId, actions: NodeId) -> Result<NodeId> {
    let mut out: Option<NodeId> = None;
    for (m, &h) in members.iter().zip(h_rows) {
        let q = m.forward(g, h, states, actions)?;
        out = Some(match out {
            None => q,
            Some(prev) => g.minimum(prev, q)?,
        });
    }
    out.ok_or_else(|| Error::invalid("empty ensemble"))
}

/// `r + γ · min_i Q̄_i(h̄_i, s', a')`, evaluated on the target networks.
#[allow(clippy::too_many_arguments)]
pub fn bootstrap_targets(
    store: &ParamStore,
    targets: &[QMember],
    target_h: &[Tensor],
    rewards: &Tensor,
    next_states: &Tensor,
    next_actions: &Tensor,
    gamma: f64,
    penalty: Option<&Tensor>,
    precision: Precision,
) -> Result<Tensor> {
    let mut g = Graph::new(store).with_precision(precision);
    let h: Vec<NodeId> = target_h.iter().map(|t| g.constant(t.clone())).collect();
    let s = g.constant(next_states.clone());
    let a = g.constant(next_actions.clone());
    let q = ensemble_min(&mut g, targets, &h, s, a)?;
    let q = match penalty {
        Some(p) => {
            let p = g.constant(p.clone());
            g.sub(q, p)?
        }
        None => q,
    };
    let r = g.constant(rewards.clone());
    let dq = g.scale(q, gamma)?;
    let y = g.add(r, dq)?;
    Ok(g.value(y).clone())
}

/// `mean_n Σ_i (y - Q_i(h_i, s, a))²`.
pub fn ensemble_regression(
    g: &mut Graph<'_>,
    members: &[QMember],
    h_rows: &[NodeId],
    states: NodeId,
    actions: NodeId,
    y: NodeId,
) -> Result<NodeId> {
    let mut total: Option<NodeId> = None;
    for (m, &h) in members.iter().zip(h_rows) {
        let q = m.forward(g, h, states, actions)?;
        let diff = g.sub(y, q)?;
        let sq = g.square(diff)?;
        total = Some(match total {
            None => sq,
            Some(t) => g.add(t, sq)?,
        });
    }
    let total = total.ok_or_else(|| Error::invalid("empty ensemble"))?;
    g.mean(total)
}

/// Normalized rows `H̄_i[z]` of each target member's codebook.
pub fn target_codebook_rows(store: &ParamStore, nets: &Networks, z: &[usize]) -> Vec<Tensor> {
    nets.q
        .target
        .iter()
        .map(|m| gather_normalized(store.get(m.codebook), z))
        .collect()
}

/// Rows `index` of `table`, each unit-normalized.
pub fn gather_normalized(table: &Tensor, index: &[usize]) -> Tensor {
    let c = table.cols();
    let mut data = Vec::with_capacity(index.len() * c);
    for &i in index {
        data.extend_from_slice(table.row_slice(i));
    }
    l2_normalize_rows(&Tensor::matrix(index.len(), c, data).expect("gather shape"))
}

/// `L_Q` for a batch given precomputed targets `y`.
pub fn q_loss_node(g: &mut Graph<'_>, nets: &Networks, batch: &Batch, z: &[usize], y: &Tensor) -> Result<NodeId> {
    let mut h = Vec::with_capacity(ENSEMBLE_SIZE);
    for m in &nets.q.online {
        h.push(m.codebook_rows(g, z)?);
    }
    let s = g.constant(batch.states.clone());
    let a = g.constant(batch.actions.clone());
    let y = g.constant(y.clone());
    ensemble_regression(g, &nets.q.online, &h, s, a, y)
}

/// Bootstrap targets for `L_Q` with a fresh `a' ~ b_z̃(·|s')`.
#[allow(clippy::too_many_arguments)]
pub fn behavior_targets(
    store: &ParamStore,
    nets: &Networks,
    batch: &Batch,
    z: &[usize],
    gamma: f64,
    noise: &Tensor,
    precision: Precision,
) -> Result<Tensor> {
    let e = gather_normalized(store.get(nets.policy.codebook), z);
    let next_a = sample_actions(nets, store, &e, &batch.next_states, noise, precision)?;
    let h = target_codebook_rows(store, nets, z);
    bootstrap_targets(store, &nets.q.target, &h, &batch.rewards, &batch.next_states, &next_a, gamma, None, precision)
}

/// One record of the training curve: window means ending at `step`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub step: usize,
    pub values: BTreeMap<String, f64>,
}

/// Accumulates per-step values and emits window means.
#[derive(Clone, Debug, Default)]
pub struct CurveLog {
    pub records: Vec<LogRecord>,
    sums: BTreeMap<String, f64>,
    count: usize,
}

impl CurveLog {
    pub fn add(&mut self, key: &str, value: f64) {
        *self.sums.entry(key.to_string()).or_default() += value;
    }

    /// Close one step; every `every` steps, emit a record.
    pub fn end_step(&mut self, step: usize, every: usize) {
        self.count += 1;
        if step % every == 0 {
            self.flush(step);
        }
    }

    pub fn flush(&mut self, step: usize) {
        if self.count == 0 {
            return;
        }
        let n = self.count as f64;
        let values = std::mem::take(&mut self.sums).into_iter().map(|(k, v)| (k, v / n)).collect();
        self.records.push(LogRecord { step, values });
        self.count = 0;
    }

    pub fn series(&self, key: &str) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter_map(|r| r.values.get(key).map(|v| (r.step, *v)))
            .collect()
    }

    /// Whitespace-separated table with `step` first and `keys` after.
    pub fn to_table(&self, keys: &[&str]) -> String {
        let mut out = String::from("step");
        for k in keys {
            out.push(' ');
            out.push_str(k);
        }
        out.push('\n');
        for r in &self.records {
            out.push_str(&r.step.to_string());
            for k in keys {
                out.push_str(&format!(" {:.10e}", r.values.get(*k).copied().unwrap_or(f64::NAN)));
            }
            out.push('\n');
        }
        out
    }
}

pub(crate) fn batch_trace(batch: &Batch) -> String {
    const SHOWN: usize = 8;
    let idx: Vec<String> = batch.index.iter().take(SHOWN).map(|i| i.to_string()).collect();
    let traj: Vec<String> = batch.trajectory.iter().take(SHOWN).map(|m| (m + 1).to_string()).collect();
    format!(
        "batch of {} transitions; first indices [{}], trajectories [{}]",
        batch.index.len(),
        idx.join(", "),
        traj.join(", ")
    )
}

/// Turn a non-finite forward value or loss into a step-tagged error.
pub(crate) fn tag_step<T>(r: Result<T>, step: usize, batch: &Batch, what: &str) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFiniteValue { .. } => Error::NonFiniteLoss {
            step,
            detail: format!("{what}: {e}; {}", batch_trace(batch)),
        },
        other => other,
    })
}

pub(crate) fn check_loss(value: f64, step: usize, batch: &Batch, what: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            step,
            detail: format!("{what} = {value}; {}", batch_trace(batch)),
        })
    }
}

/// Training output: the model and its curve (`rec`, `com`, `q`).
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: BehaviorModel,
    pub log: CurveLog,
}

/// Fit a behavior set with `k` policies to `dataset`.
pub fn train_behavior_model(dataset: &Dataset, k: usize, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let model = BehaviorModel::init(k, dataset.m(), dataset.meta.env.action_box.clone(), config.seed)?;
    continue_training(dataset, model, config)
}

/// Run `config.total_steps` further steps on an existing model.
pub fn continue_training(dataset: &Dataset, mut model: BehaviorModel, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.m() != model.m() {
        return Err(Error::invalid(format!("model has M={} but dataset has {}", model.m(), dataset.m())));
    }
    let transitions = Transitions::from_dataset(dataset);
    if transitions.is_empty() {
        return Err(Error::invalid("dataset has no transitions"));
    }
    let nets = &mut model.nets;
    let policy_params = nets.policy_params();
    let q_params = nets.q_params();
    let mut opt_pi = Adam::new(AdamConfig::with_lr(config.policy_lr), &policy_params, &nets.store)?;
    let mut opt_q = Adam::new(AdamConfig::with_lr(config.q_lr), &q_params, &nets.store)?;
    let pairs = nets.q.target_pairs();
    let mut batch_rng = rng::stream(config.seed, "train.batch");
    let mut noise_rng = rng::stream(config.seed, "train.noise");
    let mut log = CurveLog::default();

    for step in 1..=config.total_steps {
        let batch = transitions.sample(config.batch_size, &mut batch_rng);
        let z = assign_trajectories(&nets.store, nets, &batch.trajectory);

        let (grads, rec, com) = {
            let mut g = Graph::with_trainable(&nets.store, &policy_params).with_precision(config.precision);
            let t = tag_step(policy_terms(&mut g, nets, &batch, &z, config.alpha), step, &batch, "policy loss")?;
            let rec = g.value(t.rec).item();
            let com = g.value(t.com).item();
            check_loss(g.value(t.total).item(), step, &batch, "L_rec + alpha L_com")?;
            (g.backward(t.total)?, rec, com)
        };
        opt_pi.step(&mut nets.store, &grads)?;

        let noise = normal_noise(batch.states.rows(), ACTION_DIM, &mut noise_rng);
        let y = tag_step(behavior_targets(&nets.store, nets, &batch, &z, config.gamma, &noise, config.precision), step, &batch, "Q target")?;
        let (grads, q) = {
            let mut g = Graph::with_trainable(&nets.store, &q_params).with_precision(config.precision);
            let loss = tag_step(q_loss_node(&mut g, nets, &batch, &z, &y), step, &batch, "L_Q")?;
            let q = g.value(loss).item();
            check_loss(q, step, &batch, "L_Q")?;
            (g.backward(loss)?, q)
        };
        opt_q.step(&mut nets.store, &grads)?;
        soft_update(&mut nets.store, &pairs, config.rho)?;

        log.add("rec", rec);
        log.add("com", com);
        log.add("q", q);
        log.end_step(step, config.log_every);
    }
    log.flush(config.total_steps);
    Ok(TrainOutcome { model, log })
}

/// Mean commitment loss over all trajectories under the current posterior.
pub fn mean_commitment(model: &BehaviorModel) -> f64 {
    let store = &model.nets.store;
    let e = l2_normalize_rows(store.get(model.nets.policy.codebook));
    let w = l2_normalize_rows(store.get(model.nets.policy.trajectories));
    let total: f64 = (0..w.rows())
        .map(|m| {
            let j = posterior_assign(w.row_slice(m), &e);
            commitment_loss(w.row_slice(m), e.row_slice(j))
        })
        .sum();
    total / w.rows() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_dataset;
    use crate::env::EnvConfig;
    use crate::networks::ActionDistribution;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn posterior_examples() {
        let e = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(posterior_assign(&unit(&[0.8, 0.6]), &e), 0);
        assert_eq!(posterior_assign(&unit(&[0.6, 0.8]), &e), 1);
        let one = Tensor::from_rows(&[[0.0, 1.0]]).unwrap();
        assert_eq!(posterior_assign(&[1.0, 0.0], &one), 0);
        assert_eq!(posterior_assign(&unit(&[1.0, 1.0]), &e), 0);
    }

    #[test]
    fn commitment_examples() {
        assert_eq!(commitment_loss(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert_eq!(commitment_loss(&[1.0, 0.0], &[0.0, 1.0]), 1.0);
        assert_eq!(commitment_loss(&[0.0, -1.0], &[0.0, 1.0]), 2.0);
    }

    #[test]
    fn reconstruction_at_mean() {
        let d = ActionDistribution {
            mean: vec![0.01, -0.02],
            log_std: vec![0.0, 0.0],
        };
        let l = reconstruction_loss(&[0.01, -0.02], &d, &d).unwrap();
        assert!((l - 4.0 * 0.918_938_533_204_672_7).abs() < 1e-12);
        // 3.675756 is four times the rounded 0.918939.
        assert!((l - 3.675756).abs() < 4e-6);
    }

    #[test]
    fn assignment_matrix_rows_are_one_hot() {
        let g = AssignmentMatrix::from_assignments(&[0, 2, 1, 2], 3);
        for row in g.to_dense() {
            assert_eq!(row.iter().map(|&x| x as usize).sum::<usize>(), 1);
        }
        assert_eq!(g.cluster_sizes(), vec![1, 1, 2]);
    }

    #[test]
    fn zero_steps_returns_initial_model() {
        let mut cfg = EnvConfig::new(2);
        cfg.horizon = 5;
        let ds = generate_dataset(&cfg, 2, 4, 1).unwrap();
        let tc = TrainConfig {
            total_steps: 0,
            seed: 3,
            ..TrainConfig::default()
        };
        let out = train_behavior_model(&ds, 2, &tc).unwrap();
        let fresh = BehaviorModel::init(2, 4, cfg.action_box.clone(), 3).unwrap();
        for id in fresh.nets.store.ids() {
            assert_eq!(fresh.nets.store.get(id), out.model.nets.store.get(id));
        }
        assert!(out.log.records.is_empty());
    }

    #[test]
    fn single_codebook_gives_column_of_ones() {
        let model = BehaviorModel::init(1, 6, ActionBox::symmetric(2, 0.1), 2).unwrap();
        let g = model.assignment_matrix();
        assert!(g.columns.iter().all(|&c| c == 0));
    }

    #[test]
    fn curve_log_windows() {
        let mut log = CurveLog::default();
        for step in 1..=250 {
            log.add("x", step as f64);
            log.end_step(step, 100);
        }
        log.flush(250);
        let s = log.series("x");
        assert_eq!(s, vec![(100, 50.5), (200, 150.5), (250, 225.5)]);
    }
}
