//! Reverse-mode gradients against central finite differences (h = 1e-5).
//! Each check panics on the first coordinate outside tolerance.

use behavior_forge::autodiff::{log_likelihood_rows, Gradients, Graph, NodeId, ParamId, ParamStore, Tensor};
use behavior_forge::behavior::{ensemble_min, gather_normalized, normal_noise, policy_terms, q_loss_node, BehaviorModel};
use behavior_forge::dataset::{generate_dataset, Batch, Transitions};
use behavior_forge::env::EnvConfig;
use behavior_forge::lbrac::{critic_loss_node, kl_rows, policy_side, LbracConfig, LbracPolicy};
use behavior_forge::networks::{ActionBox, DistNodes, ModelDims, Networks};
use behavior_forge::rng;
use rand::Rng as _;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const FLOOR: f64 = 1e-6;
const COORDS: usize = 10;

/// Compare every gradient coordinate of small tensors, and a seeded sample
/// of `COORDS` coordinates of larger ones.
fn check<F>(label: &str, store: &ParamStore, params: &[ParamId], eval: F)
where
    F: Fn(&ParamStore) -> (f64, Gradients),
{
    let (_, grads) = eval(store);
    let mut pick = rng::stream(7, label);
    let mut compared = 0;
    for &p in params {
        let n = store.get(p).len();
        let coords: Vec<usize> = if n <= COORDS {
            (0..n).collect()
        } else {
            (0..COORDS).map(|_| pick.random_range(0..n)).collect()
        };
        for i in coords {
            let mut s = store.clone();
            s.get_mut(p).data_mut()[i] += H;
            let up = eval(&s).0;
            s.get_mut(p).data_mut()[i] -= 2.0 * H;
            let down = eval(&s).0;
            let numeric = (up - down) / (2.0 * H);
            let analytic = grads.param(p).map_or(0.0, |g| g.data()[i]);
            let scale = analytic.abs().max(numeric.abs());
            if scale <= FLOOR {
                continue;
            }
            let rel = (analytic - numeric).abs() / scale;
            assert!(
                rel < TOL,
                "{label}: {}[{i}] analytic {analytic:e} numeric {numeric:e} rel {rel:e}",
                store.name(p)
            );
            compared += 1;
        }
    }
    assert!(compared > 0, "{label}: no coordinate above the magnitude floor");
}

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut r = rng::stream(seed, "grad.data");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// Contract `out` with fixed random weights so every output coordinate
/// contributes a distinct amount.
fn contract(g: &mut Graph<'_>, out: NodeId, seed: u64) -> NodeId {
    let shape = g.value(out).shape().to_vec();
    let c = g.constant(random(&shape, seed + 1000, -1.0, 1.0));
    let prod = g.mul(out, c).unwrap();
    g.sum(prod).unwrap()
}

type Unary = fn(&mut Graph<'_>, NodeId) -> NodeId;
type Binary = fn(&mut Graph<'_>, NodeId, NodeId) -> NodeId;

fn unary(label: &str, x: Tensor, op: Unary) {
    let mut store = ParamStore::new();
    let p = store.insert("x", x).unwrap();
    check(label, &store, &[p], |s| {
        let mut g = trainable(s);
        let x = g.param(p);
        let y = op(&mut g, x);
        let l = contract(&mut g, y, 1);
        (g.value(l).item(), g.backward(l).unwrap())
    });
}

fn binary(label: &str, a: Tensor, b: Tensor, op: Binary) {
    let mut store = ParamStore::new();
    let pa = store.insert("a", a).unwrap();
    let pb = store.insert("b", b).unwrap();
    check(label, &store, &[pa, pb], |s| {
        let mut g = trainable(s);
        let (a, b) = (g.param(pa), g.param(pb));
        let y = op(&mut g, a, b);
        let l = contract(&mut g, y, 2);
        (g.value(l).item(), g.backward(l).unwrap())
    });
}

pub fn elementwise_primitives() {
    let x = || random(&[4, 3], 1, -2.0, 2.0);
    unary("relu", x(), |g, x| g.relu(x).unwrap());
    unary("tanh", x(), |g, x| g.tanh(x).unwrap());
    unary("exp", x(), |g, x| g.exp(x).unwrap());
    unary("square", x(), |g, x| g.square(x).unwrap());
    unary("scale", x(), |g, x| g.scale(x, -1.7).unwrap());
    unary("offset", x(), |g, x| g.offset(x, 0.3).unwrap());
    unary("neg", x(), |g, x| g.neg(x).unwrap());
    unary("clip", x(), |g, x| g.clip(x, -1.0, 1.0).unwrap());
    unary("clamp_cols", x(), |g, x| g.clamp_cols(x, &[-1.0, -0.5, 0.0], &[1.0, 0.5, 2.0]).unwrap());
    binary("add", x(), random(&[4, 3], 2, -2.0, 2.0), |g, a, b| g.add(a, b).unwrap());
    binary("sub", x(), random(&[4, 3], 2, -2.0, 2.0), |g, a, b| g.sub(a, b).unwrap());
    binary("mul", x(), random(&[4, 3], 2, -2.0, 2.0), |g, a, b| g.mul(a, b).unwrap());
    binary("minimum", x(), random(&[4, 3], 2, -2.0, 2.0), |g, a, b| g.minimum(a, b).unwrap());
}

pub fn structural_primitives() {
    let x = || random(&[5, 4], 3, -1.5, 1.5);
    binary("matmul", x(), random(&[4, 3], 4, -1.0, 1.0), |g, a, b| g.matmul(a, b).unwrap());
    binary("add_row", x(), random(&[4], 4, -1.0, 1.0), |g, a, b| g.add_row(a, b).unwrap());
    binary("mul_row", x(), random(&[4], 4, -1.0, 1.0), |g, a, b| g.mul_row(a, b).unwrap());
    binary("concat_cols", x(), random(&[5, 2], 4, -1.0, 1.0), |g, a, b| g.concat_cols(a, b).unwrap());
    binary("row_dot", x(), random(&[5, 4], 4, -1.0, 1.0), |g, a, b| g.row_dot(a, b).unwrap());
    unary("slice_cols", x(), |g, x| g.slice_cols(x, 1, 3).unwrap());
    unary("gather_rows", x(), |g, x| g.gather_rows(x, &[4, 0, 0, 2]).unwrap());
    unary("layer_norm", x(), |g, x| g.layer_norm(x).unwrap());
    unary("l2_normalize_rows", x(), |g, x| g.l2_normalize_rows(x).unwrap());
    unary("sum_cols", x(), |g, x| g.sum_cols(x).unwrap());
    unary("sum", x(), |g, x| g.sum(x).unwrap());
    unary("mean", x(), |g, x| g.mean(x).unwrap());

    let mut store = ParamStore::new();
    let w = store.insert("w", random(&[4, 3], 5, -1.0, 1.0)).unwrap();
    let b = store.insert("b", random(&[3], 6, -1.0, 1.0)).unwrap();
    let xs = x();
    check("linear", &store, &[w, b], |s| {
        let mut g = trainable(s);
        let x = g.constant(xs.clone());
        let (wn, bn) = (g.param(w), g.param(b));
        let y = g.linear(x, wn, bn).unwrap();
        let l = contract(&mut g, y, 3);
        (g.value(l).item(), g.backward(l).unwrap())
    });
}

pub fn gaussian_log_likelihood() {
    let mut store = ParamStore::new();
    let mean = store.insert("mean", random(&[6, 2], 8, -0.5, 0.5)).unwrap();
    let log_std = store.insert("log_std", random(&[6, 2], 9, -1.0, 0.5)).unwrap();
    let actions = random(&[6, 2], 10, -0.5, 0.5);
    check("log_likelihood_rows", &store, &[mean, log_std], |s| {
        let mut g = trainable(s);
        let a = g.constant(actions.clone());
        let (m, ls) = (g.param(mean), g.param(log_std));
        let ll = log_likelihood_rows(&mut g, a, m, ls).unwrap();
        let l = contract(&mut g, ll, 4);
        (g.value(l).item(), g.backward(l).unwrap())
    });
}

struct Fixture {
    nets: Networks,
    batch: Batch,
    z: Vec<usize>,
}

/// Narrow networks (hidden 16) on a small two-source dataset.
fn fixture() -> Fixture {
    fixture_with(ModelDims {
        policy_hidden: 16,
        q_hidden: 16,
        ..ModelDims::new(2, 2)
    })
}

fn fixture_with(dims: ModelDims) -> Fixture {
    let env = EnvConfig::new(2);
    let ds = generate_dataset(&env, 2, 6, 11).unwrap();
    let mut nets = Networks::init(dims, 2, ds.m(), ActionBox::symmetric(2, 0.1), 5).unwrap();
    let trans = Transitions::from_dataset(&ds);
    let batch = trans.sample(12, &mut rng::stream(3, "grad.batch"));
    let z: Vec<usize> = batch.trajectory.iter().map(|m| m % 2).collect();
    nets.store.get_mut(nets.policy.codebook).data_mut()[0] += 0.5;
    Fixture { nets, batch, z }
}

pub fn policy_network_distribution() {
    let f = fixture();
    let params = f.nets.policy_params();
    let emb = random(&[12, 8], 12, -1.0, 1.0);
    check("policy distribution", &f.nets.store, &params, |s| {
        let mut g = trainable(s);
        let e = g.constant(emb.clone());
        let st = g.constant(f.batch.states.clone());
        let d = f.nets.policy.distribution(&mut g, e, st).unwrap();
        let a = contract(&mut g, d.mean, 5);
        let b = contract(&mut g, d.log_std, 6);
        let l = g.add(a, b).unwrap();
        (g.value(l).item(), g.backward(l).unwrap())
    });
}

pub fn q_network_member() {
    let f = fixture();
    let member = &f.nets.q.online[0];
    let params = member.params();
    check("q member", &f.nets.store, &params, |s| {
        let mut g = trainable(s);
        let h = member.codebook_rows(&mut g, &f.z).unwrap();
        let st = g.constant(f.batch.states.clone());
        let a = g.constant(f.batch.actions.clone());
        let q = member.forward(&mut g, h, st, a).unwrap();
        let l = contract(&mut g, q, 7);
        (g.value(l).item(), g.backward(l).unwrap())
    });
}

pub fn reconstruction_and_commitment_losses() {
    let f = fixture();
    let params = f.nets.policy_params();
    for (label, pick) in [("L_rec", 0), ("L_com", 1), ("L_rec + alpha L_com", 2)] {
        check(label, &f.nets.store, &params, |s| {
            let mut g = trainable(s);
            let t = policy_terms(&mut g, &f.nets, &f.batch, &f.z, 0.1).unwrap();
            let l = [t.rec, t.com, t.total][pick];
            (g.value(l).item(), g.backward(l).unwrap())
        });
    }
}

pub fn q_loss() {
    let f = fixture();
    let params = f.nets.q_params();
    let y = random(&[12, 1], 13, -1.0, 1.0);
    check("L_Q", &f.nets.store, &params, |s| {
        let mut g = trainable(s);
        let l = q_loss_node(&mut g, &f.nets, &f.batch, &f.z, &y).unwrap();
        (g.value(l).item(), g.backward(l).unwrap())
    });
}

fn lbrac_fixture() -> (LbracPolicy, Batch, Vec<usize>) {
    let f = fixture();
    let mut policy = LbracPolicy::from_behavior(BehaviorModel { nets: f.nets }, 1).unwrap();
    // Move e_π off b_{k*} so the KL term has a non-trivial gradient.
    let e = policy.e_pi;
    policy.nets.store.get_mut(e).data_mut()[1] += 0.4;
    (policy, f.batch, f.z)
}

/// The actor loss with `b_z̃` frozen at the base parameters, rebuilt from
/// public pieces. `policy_side` treats `b_z̃` as a constant, so this is the
/// function its gradient differentiates.
fn frozen_actor(
    g: &mut Graph<'_>,
    p: &LbracPolicy,
    batch: &Batch,
    b: &(Tensor, Tensor),
    beta: f64,
    kl_noise: &[Tensor],
    act_noise: &Tensor,
) -> NodeId {
    let nets = &p.nets;
    let n = batch.states.rows();
    let rows = |g: &mut Graph<'_>, id: ParamId| {
        let t = g.param(id);
        let t = g.l2_normalize_rows(t).unwrap();
        g.gather_rows(t, &vec![0; n]).unwrap()
    };
    let states = g.constant(batch.states.clone());
    let encoded = nets.policy.encode_states(g, states).unwrap();
    let e = rows(g, p.e_pi);
    let pi = nets.policy.head(g, e, encoded).unwrap();
    let frozen = DistNodes {
        mean: g.constant(b.0.clone()),
        log_std: g.constant(b.1.clone()),
    };
    let kl = kl_rows(g, pi, frozen, kl_noise).unwrap();
    let draw = nets.policy.sample(g, pi, act_noise.clone()).unwrap();
    let h: Vec<NodeId> = p.h_pi.iter().map(|&id| rows(g, id)).collect();
    let q = ensemble_min(g, &nets.q.online, &h, states, draw.action).unwrap();
    let penalty = g.scale(kl, beta).unwrap();
    let rows = g.sub(penalty, q).unwrap();
    g.mean(rows).unwrap()
}

pub fn actor_loss() {
    let (policy, batch, z) = lbrac_fixture();
    let config = LbracConfig { kl_samples: 2, ..LbracConfig::default() };
    let mut r = rng::stream(4, "grad.noise");
    let kl_noise = vec![normal_noise(12, 2, &mut r), normal_noise(12, 2, &mut r)];
    let act_noise = normal_noise(12, 2, &mut r).map(|v| v * 1e-3);
    let base = &policy.nets.store;
    let codebook = gather_normalized(base.get(policy.nets.policy.codebook), &z);
    let b = policy.nets.policy.evaluate(base, &codebook, &batch.states).unwrap();
    let mut params = policy.nets.policy_params();
    params.push(policy.e_pi);

    // The library's actor node matches the frozen-b rebuild in value and gradient.
    let mut g = trainable(base);
    let side = policy_side(&mut g, &policy, &batch, &z, &config, &kl_noise, &act_noise).unwrap();
    let lib_grads = g.backward(side.actor).unwrap();
    let mut g2 = trainable(base);
    let manual = frozen_actor(&mut g2, &policy, &batch, &b, config.beta, &kl_noise, &act_noise);
    let manual_grads = g2.backward(manual).unwrap();
    assert!((g.value(side.actor).item() - g2.value(manual).item()).abs() < 1e-10);
    for &p in &params {
        let zeros = Tensor::zeros(base.get(p).shape());
        let a = lib_grads.param(p).unwrap_or(&zeros);
        let m = manual_grads.param(p).unwrap_or(&zeros);
        for (x, y) in a.data().iter().zip(m.data()) {
            assert!((x - y).abs() <= 1e-9 * x.abs().max(y.abs()).max(1e-6), "{}: {x} vs {y}", base.name(p));
        }
    }

    check("L_actor", base, &params, |s| {
        let mut p = policy.clone();
        p.nets.store = s.clone();
        let mut g = trainable(s);
        let l = frozen_actor(&mut g, &p, &batch, &b, config.beta, &kl_noise, &act_noise);
        (g.value(l).item(), g.backward(l).unwrap())
    });
}

pub fn critic_loss() {
    let (policy, batch, _) = lbrac_fixture();
    let y = random(&[12, 1], 14, -1.0, 1.0);
    let mut params = policy.nets.q_params();
    params.extend(policy.h_pi);
    check("L_critic", &policy.nets.store, &params, |s| {
        let mut p = policy.clone();
        p.nets.store = s.clone();
        let mut g = trainable(s);
        let l = critic_loss_node(&mut g, &p, &batch, &y).unwrap();
        (g.value(l).item(), g.backward(l).unwrap())
    });
}

fn trainable(s: &ParamStore) -> Graph<'_> {
    let all: Vec<ParamId> = s.ids().collect();
    Graph::with_trainable(s, &all)
}

pub fn full_width_losses() {
    let f = fixture_with(ModelDims::new(2, 2));
    check("L_rec + alpha L_com (full width)", &f.nets.store, &f.nets.policy_params(), |s| {
        let mut g = trainable(s);
        let t = policy_terms(&mut g, &f.nets, &f.batch, &f.z, 0.1).unwrap();
        (g.value(t.total).item(), g.backward(t.total).unwrap())
    });
    let y = random(&[12, 1], 15, -1.0, 1.0);
    check("L_Q (full width)", &f.nets.store, &f.nets.q_params(), |s| {
        let mut g = trainable(s);
        let l = q_loss_node(&mut g, &f.nets, &f.batch, &f.z, &y).unwrap();
        (g.value(l).item(), g.backward(l).unwrap())
    });
}

/// Every check, by name.
pub const ALL: &[(&str, fn())] = &[
    ("elementwise_primitives", elementwise_primitives),
    ("structural_primitives", structural_primitives),
    ("gaussian_log_likelihood", gaussian_log_likelihood),
    ("policy_network_distribution", policy_network_distribution),
    ("q_network_member", q_network_member),
    ("reconstruction_and_commitment_losses", reconstruction_and_commitment_losses),
    ("q_loss", q_loss),
    ("actor_loss", actor_loss),
    ("critic_loss", critic_loss),
    ("full_width_losses", full_width_losses),
];
