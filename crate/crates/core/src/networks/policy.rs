use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::layers::Mlp;
use crate::autodiff::{
    gaussian_log_likelihood, l2_normalize_row, log_likelihood_rows, Graph, NodeId, ParamId,
    ParamStore, Precision, Tensor,
};
use crate::error::{Error, Result};

pub const LOG_STD_MIN: f64 = -10.0;
pub const LOG_STD_MAX: f64 = 10.0;

/// Axis-aligned action bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionBox {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl ActionBox {
    pub fn new(low: Vec<f64>, high: Vec<f64>) -> Result<Self> {
        if low.len() != high.len() || low.is_empty() || low.iter().zip(&high).any(|(l, h)| !(l < h)) {
            return Err(Error::invalid(format!("bad action box {low:?} / {high:?}")));
        }
        Ok(ActionBox { low, high })
    }

    pub fn symmetric(dim: usize, half_width: f64) -> Self {
        ActionBox {
            low: vec![-half_width; dim],
            high: vec![half_width; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.low.len()
    }

    pub fn center(&self) -> Vec<f64> {
        self.low.iter().zip(&self.high).map(|(l, h)| 0.5 * (l + h)).collect()
    }

    pub fn half_width(&self) -> Vec<f64> {
        self.low.iter().zip(&self.high).map(|(l, h)| 0.5 * (h - l)).collect()
    }

    pub fn contains(&self, a: &[f64]) -> bool {
        a.len() == self.dim() && a.iter().zip(&self.low).zip(&self.high).all(|((x, l), h)| l <= x && x <= h)
    }

    pub fn clip(&self, a: &mut [f64]) {
        for ((x, l), h) in a.iter_mut().zip(&self.low).zip(&self.high) {
            *x = x.clamp(*l, *h);
        }
    }
}

/// Diagonal Gaussian over actions.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionDistribution {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl ActionDistribution {
    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|l| l.exp()).collect()
    }

    pub fn log_density(&self, action: &[f64]) -> Result<f64> {
        gaussian_log_likelihood(action, &self.mean, &self.log_std)
    }

    /// Draw `a = μ + σ ξ`. Returns the action clipped to `bounds` and the
    /// log-density of the unclipped draw.
    pub fn sample(&self, bounds: &ActionBox, rng: &mut impl rand::Rng) -> Result<(Vec<f64>, f64)> {
        let noise: Vec<f64> = (0..self.mean.len()).map(|_| rng.sample(StandardNormal)).collect();
        self.sample_with_noise(bounds, &noise)
    }

    pub fn sample_with_noise(&self, bounds: &ActionBox, noise: &[f64]) -> Result<(Vec<f64>, f64)> {
        let raw: Vec<f64> = self
            .mean
            .iter()
            .zip(&self.log_std)
            .zip(noise)
            .map(|((m, l), x)| m + l.exp() * x)
            .collect();
        let logp = self.log_density(&raw)?;
        let mut a = raw;
        bounds.clip(&mut a);
        Ok((a, logp))
    }
}

/// Graph nodes for a batch of action distributions, `[n, d_A]` each.
#[derive(Clone, Copy, Debug)]
pub struct DistNodes {
    pub mean: NodeId,
    pub log_std: NodeId,
}

/// Reparameterized draw from [`DistNodes`].
#[derive(Clone, Copy, Debug)]
pub struct SampleNodes {
    /// Draw clipped to the action box.
    pub action: NodeId,
    /// Unclipped draw.
    pub raw: NodeId,
    /// `[n, 1]` log-density of `raw`.
    pub log_density: NodeId,
}

/// `relu(layernorm(mlp(s)) * gain + bias)`.
#[derive(Clone, Debug)]
pub struct StateEncoder {
    pub mlp: Mlp,
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
}

impl StateEncoder {
    pub fn forward(&self, g: &mut Graph<'_>, states: NodeId) -> Result<NodeId> {
        let h = self.mlp.forward(g, states)?;
        let h = g.layer_norm(h)?;
        let gain = g.param(self.norm_gain);
        let bias = g.param(self.norm_bias);
        let h = g.mul_row(h, gain)?;
        let h = g.add_row(h, bias)?;
        g.relu(h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.mlp.params();
        v.extend([self.norm_gain, self.norm_bias]);
        v
    }
}

/// Shared state encoder `f_s`, head `f_p`, codebook `E` and trajectory
/// embeddings `W`.
#[derive(Clone, Debug)]
pub struct PolicyNetwork {
    pub f_s: StateEncoder,
    pub f_p: Mlp,
    pub codebook: ParamId,
    pub trajectories: ParamId,
    pub action_box: ActionBox,
    center: Tensor,
    half_width: Tensor,
}

impl PolicyNetwork {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn init(
        store: &mut ParamStore,
        state_dim: usize,
        embed_dim: usize,
        hidden: usize,
        codebook: Tensor,
        trajectories: Tensor,
        action_box: ActionBox,
        seed: u64,
    ) -> Result<Self> {
        let a = action_box.dim();
        let mlp = Mlp::init(store, "f_s", state_dim, hidden, hidden, seed)?;
        let norm_gain = store.insert("f_s.norm.gain", Tensor::filled(&[hidden], 1.0))?;
        let norm_bias = store.insert("f_s.norm.bias", Tensor::zeros(&[hidden]))?;
        let f_p = Mlp::init(store, "f_p", embed_dim + hidden, hidden, 2 * a, seed)?;
        let codebook = store.insert("E", codebook)?;
        let trajectories = store.insert("W", trajectories)?;
        Ok(Self::assemble(
            StateEncoder { mlp, norm_gain, norm_bias },
            f_p,
            codebook,
            trajectories,
            action_box,
        ))
    }

    pub(crate) fn load(store: &ParamStore, action_box: ActionBox) -> Result<Self> {
        let f_s = StateEncoder {
            mlp: Mlp::load(store, "f_s")?,
            norm_gain: store.require("f_s.norm.gain")?,
            norm_bias: store.require("f_s.norm.bias")?,
        };
        Ok(Self::assemble(
            f_s,
            Mlp::load(store, "f_p")?,
            store.require("E")?,
            store.require("W")?,
            action_box,
        ))
    }

    fn assemble(
        f_s: StateEncoder,
        f_p: Mlp,
        codebook: ParamId,
        trajectories: ParamId,
        action_box: ActionBox,
    ) -> Self {
        let center = Tensor::row(&action_box.center());
        let half_width = Tensor::row(&action_box.half_width());
        PolicyNetwork {
            f_s,
            f_p,
            codebook,
            trajectories,
            action_box,
            center,
            half_width,
        }
    }

    pub fn action_dim(&self) -> usize {
        self.action_box.dim()
    }

    /// Parameters of `f_s` and `f_p`.
    pub fn shared_params(&self) -> Vec<ParamId> {
        let mut v = self.f_s.params();
        v.extend(self.f_p.params());
        v
    }

    pub fn encode_states(&self, g: &mut Graph<'_>, states: NodeId) -> Result<NodeId> {
        self.f_s.forward(g, states)
    }

    /// `f_p(e, φ)` split into a box-squashed mean and a clipped log-std.
    /// `embeddings` are expected to be unit rows already.
    pub fn head(&self, g: &mut Graph<'_>, embeddings: NodeId, encoded: NodeId) -> Result<DistNodes> {
        let a = self.action_dim();
        let x = g.concat_cols(embeddings, encoded)?;
        let out = self.f_p.forward(g, x)?;
        let mean_raw = g.slice_cols(out, 0, a)?;
        let log_std_raw = g.slice_cols(out, a, 2 * a)?;
        let squashed = g.tanh(mean_raw)?;
        let half = g.constant(self.half_width.clone());
        let center = g.constant(self.center.clone());
        let scaled = g.mul_row(squashed, half)?;
        let mean = g.add_row(scaled, center)?;
        let log_std = g.clip(log_std_raw, LOG_STD_MIN, LOG_STD_MAX)?;
        Ok(DistNodes { mean, log_std })
    }

    pub fn distribution(&self, g: &mut Graph<'_>, embeddings: NodeId, states: NodeId) -> Result<DistNodes> {
        let phi = self.encode_states(g, states)?;
        self.head(g, embeddings, phi)
    }

    /// Normalized codebook rows `E[index]`.
    pub fn codebook_rows(&self, g: &mut Graph<'_>, index: &[usize]) -> Result<NodeId> {
        embedding_rows(g, self.codebook, index)
    }

    /// Normalized trajectory embeddings `W[index]`.
    pub fn trajectory_rows(&self, g: &mut Graph<'_>, index: &[usize]) -> Result<NodeId> {
        embedding_rows(g, self.trajectories, index)
    }

    /// Reparameterized draw with externally supplied standard-normal noise.
    pub fn sample(&self, g: &mut Graph<'_>, dist: DistNodes, noise: Tensor) -> Result<SampleNodes> {
        let xi = g.constant(noise);
        let std = g.exp(dist.log_std)?;
        let spread = g.mul(std, xi)?;
        let raw = g.add(dist.mean, spread)?;
        let log_density = log_likelihood_rows(g, raw, dist.mean, dist.log_std)?;
        let action = g.clamp_cols(raw, &self.action_box.low, &self.action_box.high)?;
        Ok(SampleNodes {
            action,
            raw,
            log_density,
        })
    }

    /// Gradient-free batch evaluation. `embeddings` rows are normalized
    /// here; returns `(mean, log_std)`.
    pub fn evaluate(&self, store: &ParamStore, embeddings: &Tensor, states: &Tensor) -> Result<(Tensor, Tensor)> {
        self.evaluate_with(store, embeddings, states, Precision::Full)
    }

    pub fn evaluate_with(
        &self,
        store: &ParamStore,
        embeddings: &Tensor,
        states: &Tensor,
        precision: Precision,
    ) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new(store).with_precision(precision);
        let e = g.constant(embeddings.clone());
        let e = g.l2_normalize_rows(e)?;
        let s = g.constant(states.clone());
        let d = self.distribution(&mut g, e, s)?;
        Ok((g.value(d.mean).clone(), g.value(d.log_std).clone()))
    }

    /// Action distribution at a single state for embedding `e`.
    pub fn action_distribution(&self, store: &ParamStore, e: &[f64], state: &[f64]) -> Result<ActionDistribution> {
        let (m, l) = self.evaluate(store, &Tensor::row(e), &Tensor::row(state))?;
        Ok(ActionDistribution {
            mean: m.into_data(),
            log_std: l.into_data(),
        })
    }

    /// State encoding `f_s(s)` for a single state.
    pub fn encode_state(&self, store: &ParamStore, state: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new(store);
        let s = g.constant(Tensor::row(state));
        let phi = self.encode_states(&mut g, s)?;
        Ok(g.value(phi).data().to_vec())
    }
}

pub(crate) fn embedding_rows(g: &mut Graph<'_>, table: ParamId, index: &[usize]) -> Result<NodeId> {
    let t = g.param(table);
    let rows = g.gather_rows(t, index)?;
    g.l2_normalize_rows(rows)
}

/// Unit-normalized copy of row `r` of a stored embedding table.
pub fn normalized_row(store: &ParamStore, table: ParamId, r: usize) -> Vec<f64> {
    let mut v = store.get(table).row_slice(r).to_vec();
    l2_normalize_row(&mut v);
    v
}
