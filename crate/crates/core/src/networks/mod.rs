//! Embedding-conditioned policy network and Q ensemble.
//!
//! All `K` behavior policies share `f_s` and `f_p`; a policy is selected by
//! feeding one unit row of the codebook `E` (or a trajectory row of `W`, or
//! the learned policy vector) into `f_p`. The Q side mirrors this with
//! `f_{s,a}`, `f_Q` and a per-member codebook `H`.

mod checkpoint;
mod layers;
mod policy;
mod qnet;

pub use checkpoint::{Checkpoint, Manifest, TensorRecord, CHECKPOINT_FORMAT};
pub use layers::{random_unit_rows, Linear, Mlp};
pub use policy::{
    normalized_row, ActionBox, ActionDistribution, DistNodes, PolicyNetwork, SampleNodes, StateEncoder,
    LOG_STD_MAX, LOG_STD_MIN,
};
pub(crate) use policy::embedding_rows;
pub use qnet::{soft_update, Member, QEnsemble, QMember, ENSEMBLE_SIZE};

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore};
use crate::error::Result;

/// Layer widths. Defaults: `d_e = 8`, `d_φ = 200`, `d'_φ = 300`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub state_dim: usize,
    pub action_dim: usize,
    pub embed_dim: usize,
    pub policy_hidden: usize,
    pub q_hidden: usize,
}

impl ModelDims {
    pub fn new(state_dim: usize, action_dim: usize) -> Self {
        ModelDims {
            state_dim,
            action_dim,
            embed_dim: 8,
            policy_hidden: 200,
            q_hidden: 300,
        }
    }
}

/// Every parameter of one model, and typed handles into it.
#[derive(Clone, Debug)]
pub struct Networks {
    pub store: ParamStore,
    pub policy: PolicyNetwork,
    pub q: QEnsemble,
    pub dims: ModelDims,
}

impl Networks {
    /// Fresh networks for `k` behavior policies and `m` trajectories.
    pub fn init(dims: ModelDims, k: usize, m: usize, action_box: ActionBox, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let e = random_unit_rows(k, dims.embed_dim, seed, "E")?;
        let w = random_unit_rows(m, dims.embed_dim, seed, "W")?;
        let policy = PolicyNetwork::init(
            &mut store,
            dims.state_dim,
            dims.embed_dim,
            dims.policy_hidden,
            e,
            w,
            action_box,
            seed,
        )?;
        let h = [
            random_unit_rows(k, dims.embed_dim, seed, "H.member1")?,
            random_unit_rows(k, dims.embed_dim, seed, "H.member2")?,
        ];
        let q = QEnsemble::init(
            &mut store,
            dims.state_dim,
            dims.action_dim,
            dims.embed_dim,
            dims.q_hidden,
            h,
            seed,
        )?;
        Ok(Networks { store, policy, q, dims })
    }

    /// Rebuild handles over a store loaded from a checkpoint.
    pub fn from_store(store: ParamStore, dims: ModelDims, action_box: ActionBox) -> Result<Self> {
        let policy = PolicyNetwork::load(&store, action_box)?;
        let q = QEnsemble::load(&store)?;
        Ok(Networks { store, policy, q, dims })
    }

    pub fn k(&self) -> usize {
        self.store.get(self.policy.codebook).rows()
    }

    pub fn m(&self) -> usize {
        self.store.get(self.policy.trajectories).rows()
    }

    /// `f_s`, `f_p`, `E`, `W`.
    pub fn policy_params(&self) -> Vec<ParamId> {
        let mut v = self.policy.shared_params();
        v.extend([self.policy.codebook, self.policy.trajectories]);
        v
    }

    /// Online `f_{s,a}`, `f_Q` and `H` of both members.
    pub fn q_params(&self) -> Vec<ParamId> {
        self.q.online_params()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Graph, Tensor};

    fn small() -> Networks {
        let dims = ModelDims {
            state_dim: 2,
            action_dim: 2,
            embed_dim: 4,
            policy_hidden: 16,
            q_hidden: 12,
        };
        Networks::init(dims, 3, 5, ActionBox::symmetric(2, 0.1), 11).unwrap()
    }

    #[test]
    fn encoder_output_is_nonnegative_and_deterministic() {
        let nets = Networks::init(ModelDims::new(2, 2), 2, 3, ActionBox::symmetric(2, 0.1), 3).unwrap();
        let a = nets.policy.encode_state(&nets.store, &[0.2, -0.4]).unwrap();
        let b = nets.policy.encode_state(&nets.store, &[0.2, -0.4]).unwrap();
        assert_eq!(a.len(), 200);
        assert!(a.iter().all(|&v| v >= 0.0));
        assert_eq!(a, b);
    }

    #[test]
    fn zero_raw_mean_maps_to_box_center() {
        let mut nets = small();
        // Zero the last layer of f_p so that μ_raw = 0 and logσ_raw = 0.
        let l2 = nets.policy.f_p.layer2.clone();
        for id in l2.params() {
            let shape = nets.store.get(id).shape().to_vec();
            nets.store.set(id, Tensor::zeros(&shape)).unwrap();
        }
        let d = nets.policy.action_distribution(&nets.store, &[1.0, 0.0, 0.0, 0.0], &[0.3, 0.1]).unwrap();
        assert_eq!(d.mean, vec![0.0, 0.0]);
        assert_eq!(d.std(), vec![1.0, 1.0]);
    }

    #[test]
    fn log_std_is_clipped() {
        let mut nets = small();
        let b = nets.policy.f_p.layer2.bias;
        let w = nets.policy.f_p.layer2.weight;
        let ws = nets.store.get(w).shape().to_vec();
        nets.store.set(w, Tensor::zeros(&ws)).unwrap();
        nets.store.set(b, Tensor::new(vec![4], vec![0.0, 0.0, 100.0, -100.0]).unwrap()).unwrap();
        let d = nets.policy.action_distribution(&nets.store, &[0.0, 1.0, 0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(d.log_std, vec![10.0, -10.0]);
        assert_eq!(d.std()[0], 10f64.exp());
    }

    #[test]
    fn unit_box_mean_is_plain_tanh() {
        let dims = ModelDims {
            state_dim: 2,
            action_dim: 2,
            embed_dim: 4,
            policy_hidden: 8,
            q_hidden: 8,
        };
        let nets = Networks::init(dims, 1, 1, ActionBox::symmetric(2, 1.0), 5).unwrap();
        let mut g = Graph::new(&nets.store);
        let e = nets.policy.codebook_rows(&mut g, &[0]).unwrap();
        let s = g.constant(Tensor::row(&[0.1, 0.2]));
        let phi = nets.policy.encode_states(&mut g, s).unwrap();
        let x = g.concat_cols(e, phi).unwrap();
        let raw = nets.policy.f_p.forward(&mut g, x).unwrap();
        let d = nets.policy.head(&mut g, e, phi).unwrap();
        for j in 0..2 {
            assert_eq!(g.value(d.mean).get(0, j), g.value(raw).get(0, j).tanh());
        }
    }

    #[test]
    fn mean_always_inside_box() {
        let nets = small();
        for i in 0..50 {
            let s = [(i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()];
            let e = [1.0, (i as f64).sin(), 0.3, -0.2];
            let d = nets.policy.action_distribution(&nets.store, &e, &s).unwrap();
            assert!(nets.policy.action_box.contains(&d.mean));
            assert!(d.log_std.iter().all(|l| (-10.0..=10.0).contains(l)));
        }
    }

    #[test]
    fn min_member_equals_member_when_identical() {
        let mut nets = small();
        let online = nets.q.online.clone();
        for (a, b) in online[0].params().into_iter().zip(online[1].params()) {
            let v = nets.store.get(a).clone();
            nets.store.set(b, v).unwrap();
        }
        let h = [0.5, 0.5, 0.5, 0.5];
        let q1 = nets.q.q_value(&nets.store, &h, &[0.1, 0.2], &[0.05, -0.05], Member::Index(0)).unwrap();
        let qm = nets.q.q_value(&nets.store, &h, &[0.1, 0.2], &[0.05, -0.05], Member::Min).unwrap();
        assert_eq!(q1, qm);
    }

    #[test]
    fn fresh_q_values_are_small() {
        let nets = Networks::init(ModelDims::new(2, 2), 3, 4, ActionBox::symmetric(2, 0.1), 9).unwrap();
        for i in 0..20 {
            let s = [(i as f64 * 0.3).sin(), (i as f64 * 0.7).cos()];
            let a = [0.1 * (i as f64).sin(), -0.1 * (i as f64).cos()];
            for member in [Member::Index(0), Member::Index(1), Member::Min] {
                let q = nets.q.q_value(&nets.store, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], &s, &a, member).unwrap();
                assert!(q.abs() < 10.0, "{q}");
            }
        }
    }

    #[test]
    fn ensemble_members_do_not_share_parameters() {
        let nets = small();
        let a = nets.q.online[0].params();
        let b = nets.q.online[1].params();
        assert!(a.iter().all(|x| !b.contains(x)));
        let w0 = nets.store.get(nets.q.online[0].f_sa.layer1.weight);
        let w1 = nets.store.get(nets.q.online[1].f_sa.layer1.weight);
        assert_ne!(w0, w1);
    }

    #[test]
    fn soft_update_endpoints_and_rate() {
        let mut nets = small();
        let pairs = nets.q.target_pairs();
        let (t, o) = pairs[0];
        let shape = nets.store.get(t).shape().to_vec();
        nets.store.set(t, Tensor::zeros(&shape)).unwrap();
        nets.store.set(o, Tensor::filled(&shape, 1.0)).unwrap();
        soft_update(&mut nets.store, &pairs[..1], 0.0).unwrap();
        assert!(nets.store.get(t).data().iter().all(|&v| v == 0.0));
        soft_update(&mut nets.store, &pairs[..1], 0.001).unwrap();
        assert!(nets.store.get(t).data().iter().all(|&v| v == 0.001));
        soft_update(&mut nets.store, &pairs, 1.0).unwrap();
        for (t, o) in pairs {
            assert_eq!(nets.store.get(t), nets.store.get(o));
        }
        assert!(soft_update(&mut nets.store, &[], 1.5).is_err());
    }

    #[test]
    fn perturbing_one_codebook_row_leaves_others() {
        let mut nets = small();
        let s = [0.2, -0.3];
        let e0 = normalized_row(&nets.store, nets.policy.codebook, 0);
        let e1 = normalized_row(&nets.store, nets.policy.codebook, 1);
        let before = nets.policy.action_distribution(&nets.store, &e1, &s).unwrap();
        nets.store.get_mut(nets.policy.codebook).row_slice_mut(0)[0] += 0.5;
        let e0b = normalized_row(&nets.store, nets.policy.codebook, 0);
        let e1b = normalized_row(&nets.store, nets.policy.codebook, 1);
        assert_ne!(e0, e0b);
        let after = nets.policy.action_distribution(&nets.store, &e1b, &s).unwrap();
        assert_eq!(before, after);
    }
}
