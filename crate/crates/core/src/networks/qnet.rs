use super::layers::Mlp;
use super::policy::embedding_rows;
use crate::autodiff::{Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

pub const ENSEMBLE_SIZE: usize = 2;

/// One ensemble member: `f_Q(h, relu(f_{s,a}(s ⊕ a)))` with its own `H`.
#[derive(Clone, Debug)]
pub struct QMember {
    pub f_sa: Mlp,
    pub f_q: Mlp,
    pub codebook: ParamId,
}

impl QMember {
    /// `h_rows` are unit embedding rows, one per state. Returns `[n, 1]`.
    pub fn forward(&self, g: &mut Graph<'_>, h_rows: NodeId, states: NodeId, actions: NodeId) -> Result<NodeId> {
        let sa = g.concat_cols(states, actions)?;
        let phi = self.f_sa.forward(g, sa)?;
        let phi = g.relu(phi)?;
        let x = g.concat_cols(h_rows, phi)?;
        self.f_q.forward(g, x)
    }

    pub fn codebook_rows(&self, g: &mut Graph<'_>, index: &[usize]) -> Result<NodeId> {
        embedding_rows(g, self.codebook, index)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.f_sa.params();
        v.extend(self.f_q.params());
        v.push(self.codebook);
        v
    }
}

/// Which ensemble output to read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Member {
    Index(usize),
    Min,
}

/// Two independently initialized members plus their target copies.
#[derive(Clone, Debug)]
pub struct QEnsemble {
    pub online: [QMember; ENSEMBLE_SIZE],
    pub target: [QMember; ENSEMBLE_SIZE],
}

pub(crate) fn member_prefix(i: usize) -> String {
    format!("member{}", i + 1)
}

pub(crate) fn codebook_name(i: usize) -> String {
    format!("H.member{}", i + 1)
}

impl QEnsemble {
    pub(crate) fn init(
        store: &mut ParamStore,
        state_dim: usize,
        action_dim: usize,
        embed_dim: usize,
        hidden: usize,
        codebooks: [Tensor; ENSEMBLE_SIZE],
        seed: u64,
    ) -> Result<Self> {
        let mut online = Vec::with_capacity(ENSEMBLE_SIZE);
        for (i, h) in codebooks.into_iter().enumerate() {
            let p = member_prefix(i);
            online.push(QMember {
                f_sa: Mlp::init(store, &format!("{p}.f_sa"), state_dim + action_dim, hidden, hidden, seed)?,
                f_q: Mlp::init(store, &format!("{p}.f_q"), embed_dim + hidden, hidden, 1, seed)?,
                codebook: store.insert(codebook_name(i), h)?,
            });
        }
        let mut target = Vec::with_capacity(ENSEMBLE_SIZE);
        for m in &online {
            target.push(copy_member(store, m)?);
        }
        Ok(QEnsemble {
            online: online.try_into().expect("ensemble size"),
            target: target.try_into().expect("ensemble size"),
        })
    }

    pub(crate) fn load(store: &ParamStore) -> Result<Self> {
        let load = |prefix: &str, i: usize| -> Result<QMember> {
            let p = format!("{prefix}{}", member_prefix(i));
            Ok(QMember {
                f_sa: Mlp::load(store, &format!("{p}.f_sa"))?,
                f_q: Mlp::load(store, &format!("{p}.f_q"))?,
                codebook: store.require(&format!("{prefix}{}", codebook_name(i)))?,
            })
        };
        Ok(QEnsemble {
            online: [load("", 0)?, load("", 1)?],
            target: [load("target.", 0)?, load("target.", 1)?],
        })
    }

    pub fn online_params(&self) -> Vec<ParamId> {
        self.online.iter().flat_map(QMember::params).collect()
    }

    /// `(target, online)` pairs covering every online parameter.
    pub fn target_pairs(&self) -> Vec<(ParamId, ParamId)> {
        self.target
            .iter()
            .zip(&self.online)
            .flat_map(|(t, o)| t.params().into_iter().zip(o.params()))
            .collect()
    }

    /// Gradient-free Q value at one `(s, a)` for embedding `h` (normalized
    /// here), read from the online networks.
    pub fn q_value(&self, store: &ParamStore, h: &[f64], state: &[f64], action: &[f64], member: Member) -> Result<f64> {
        let mut g = Graph::new(store);
        let hn = g.constant(Tensor::row(h));
        let hn = g.l2_normalize_rows(hn)?;
        let s = g.constant(Tensor::row(state));
        let a = g.constant(Tensor::row(action));
        let out = match member {
            Member::Index(i) => {
                let m = self
                    .online
                    .get(i)
                    .ok_or_else(|| Error::invalid(format!("ensemble member {i} out of range")))?;
                m.forward(&mut g, hn, s, a)?
            }
            Member::Min => {
                let q0 = self.online[0].forward(&mut g, hn, s, a)?;
                let q1 = self.online[1].forward(&mut g, hn, s, a)?;
                g.minimum(q0, q1)?
            }
        };
        Ok(g.value(out).item())
    }
}

/// Insert `target.<name>` copies of every parameter of `m`.
pub(crate) fn copy_member(store: &mut ParamStore, m: &QMember) -> Result<QMember> {
    let mut copy = |id: ParamId| -> Result<ParamId> {
        let name = format!("target.{}", store.name(id));
        let value = store.get(id).clone();
        store.insert(name, value)
    };
    let mut lin = |l: &super::layers::Linear| -> Result<super::layers::Linear> {
        Ok(super::layers::Linear {
            weight: copy(l.weight)?,
            bias: copy(l.bias)?,
        })
    };
    let f_sa = Mlp {
        layer1: lin(&m.f_sa.layer1)?,
        layer2: lin(&m.f_sa.layer2)?,
    };
    let f_q = Mlp {
        layer1: lin(&m.f_q.layer1)?,
        layer2: lin(&m.f_q.layer2)?,
    };
    Ok(QMember {
        f_sa,
        f_q,
        codebook: copy(m.codebook)?,
    })
}

/// `target <- (1 - rho) * target + rho * online` for every pair.
pub fn soft_update(store: &mut ParamStore, pairs: &[(ParamId, ParamId)], rho: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::invalid(format!("soft-update rate must lie in [0, 1], got {rho}")));
    }
    for &(t, o) in pairs {
        if rho == 1.0 {
            let v = store.get(o).clone();
            store.set(t, v)?;
            continue;
        }
        let online = store.get(o).data().to_vec();
        for (x, y) in store.get_mut(t).data_mut().iter_mut().zip(online) {
            *x = (1.0 - rho) * *x + rho * y;
        }
    }
    Ok(())
}
