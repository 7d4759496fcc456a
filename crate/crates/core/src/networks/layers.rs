use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::error::Result;
use crate::rng;

/// Affine layer `x W + b`, weight stored `[fan_in, fan_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Uniform `±1/sqrt(fan_in)` for both weight and bias, drawn from the
    /// stream `init.<name>`.
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut r = rng::stream(seed, &format!("init.{name}"));
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| r.random_range(-bound..bound)).collect() };
        let w = Tensor::new(vec![fan_in, fan_out], draw(fan_in * fan_out))?;
        let b = Tensor::new(vec![fan_out], draw(fan_out))?;
        Ok(Linear {
            weight: store.insert(format!("{name}.weight"), w)?,
            bias: store.insert(format!("{name}.bias"), b)?,
        })
    }

    pub fn load(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(Linear {
            weight: store.require(&format!("{name}.weight"))?,
            bias: store.require(&format!("{name}.bias"))?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.linear(x, w, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Two affine layers with a relu between them and no output activation.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layer1: Linear,
    pub layer2: Linear,
}

impl Mlp {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        seed: u64,
    ) -> Result<Self> {
        Ok(Mlp {
            layer1: Linear::init(store, &format!("{name}.layer1"), input, hidden, seed)?,
            layer2: Linear::init(store, &format!("{name}.layer2"), hidden, output, seed)?,
        })
    }

    pub fn load(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(Mlp {
            layer1: Linear::load(store, &format!("{name}.layer1"))?,
            layer2: Linear::load(store, &format!("{name}.layer2"))?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        let h = self.layer1.forward(g, x)?;
        let h = g.relu(h)?;
        self.layer2.forward(g, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.layer1.params().to_vec();
        v.extend(self.layer2.params());
        v
    }
}

/// `rows` random unit vectors in `R^dim`, stream `init.<name>`.
pub fn random_unit_rows(rows: usize, dim: usize, seed: u64, name: &str) -> Result<Tensor> {
    let mut r = rng::stream(seed, &format!("init.{name}"));
    let mut data: Vec<f64> = (0..rows * dim).map(|_| r.sample(StandardNormal)).collect();
    for row in data.chunks_mut(dim) {
        crate::autodiff::l2_normalize_row(row);
    }
    Tensor::new(vec![rows, dim], data)
}
