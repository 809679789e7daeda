//! Small dense networks for the four roles in the protocol: per-node task
//! teachers, the central student, the central generator, and per-node
//! discriminators. All four are multilayer perceptrons built from tape ops;
//! the scheme is agnostic to the architecture behind each role.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{adam_step, AdamState, Graph, NodeId, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Teacher,
    Student,
    Generator,
    Discriminator,
}

/// Hidden-layer activation. The terminal activation is fixed by role:
/// none for teacher/student logits, tanh for the generator (outputs in
/// `[-1, 1]`), sigmoid for the discriminator (scores in `(0, 1)`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// A dense feed-forward network bound to one role.
#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<Layer>,
    activation: Activation,
    role: Role,
    frozen: bool,
    input_dim: usize,
    output_dim: usize,
}

/// Standard-normal noise source for the generator input space.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub dim: usize,
}

/// Tape handles for one network's parameters within a live graph. Frozen
/// networks bind as constants and carry no harvestable ids.
pub struct BoundNet {
    param_ids: Vec<NodeId>,
}

impl BoundNet {
    pub fn param_ids(&self) -> &[NodeId] {
        &self.param_ids
    }
}

/// He-initialized network: weights `N(0, sqrt(2 / fan_in))`, zero biases,
/// deterministic per seed.
pub fn build(role: Role, arch: &[usize], activation: Activation, seed: u64) -> Result<Network> {
    if arch.len() < 2 {
        return Err(Error::Value(format!("architecture needs at least two sizes, got {arch:?}")));
    }
    if arch.contains(&0) {
        return Err(Error::Value(format!("layer sizes must be positive, got {arch:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(arch.len() - 1);
    for w in arch.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let weight_vals: Vec<f64> = (0..fan_in * fan_out).map(|_| normal.sample(&mut rng)).collect();
        layers.push(Layer {
            weight: Tensor::from_vec(vec![fan_in, fan_out], weight_vals)?,
            bias: Tensor::zeros(vec![fan_out])?,
        });
    }
    Ok(Network {
        layers,
        activation,
        role,
        frozen: false,
        input_dim: arch[0],
        output_dim: *arch.last().expect("nonempty arch"),
    })
}

impl Network {
    pub fn role(&self) -> Role {
        self.role
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    /// Marks the network read-only; bound parameters become tape constants
    /// and optimizer steps are rejected.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.numel() + l.bias.numel()).sum()
    }

    /// Combined FNV-1a checksum over every parameter buffer's bit patterns.
    pub fn param_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in self.params() {
            h ^= p.checksum();
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }

    /// Registers this network's parameters on the tape. Trainable networks
    /// bind as `param` leaves whose gradients can be harvested afterwards;
    /// frozen networks bind as constants.
    pub fn bind(&self, g: &mut Graph) -> BoundNet {
        let param_ids = self
            .params()
            .iter()
            .map(|p| if self.frozen { g.constant(p) } else { g.param(p) })
            .collect();
        BoundNet { param_ids }
    }

    /// Binds parameters as tape constants even when the network is
    /// trainable; used where a network participates in someone else's loss
    /// without receiving gradients itself.
    pub fn bind_frozen_view(&self, g: &mut Graph) -> BoundNet {
        BoundNet {
            param_ids: self.params().iter().map(|p| g.constant(p)).collect(),
        }
    }

    /// Forward pass of a bound network on a `[batch, input_dim]` node.
    pub fn forward(&self, g: &mut Graph, bound: &BoundNet, x: NodeId) -> Result<NodeId> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(Error::Shape(format!(
                "{:?} network expects [batch, {}], got {shape:?}",
                self.role, self.input_dim
            )));
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, ids) in bound.param_ids.chunks(2).enumerate() {
            let (w, b) = (ids[0], ids[1]);
            h = g.matmul(h, w)?;
            h = g.add_row_vec(h, b)?;
            if i < last {
                h = match self.activation {
                    Activation::Relu => g.relu(h)?,
                    Activation::Tanh => g.tanh(h)?,
                };
            } else {
                h = match self.role {
                    Role::Teacher | Role::Student => h,
                    Role::Generator => g.tanh(h)?,
                    Role::Discriminator => g.sigmoid(h)?,
                };
            }
        }
        Ok(h)
    }

    /// Forward pass on plain values, via a scratch tape.
    pub fn forward_values(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xid = g.constant(x);
        let bound = BoundNet {
            param_ids: self.params().iter().map(|p| g.constant(p)).collect(),
        };
        let out = self.forward(&mut g, &bound, xid)?;
        Ok(g.tensor(out))
    }

    /// Adds the tape gradients of a bound trainable network into the
    /// parameters' own grad buffers.
    pub fn accumulate_grads(&mut self, g: &Graph, bound: &BoundNet) -> Result<()> {
        if self.frozen {
            return Err(Error::Value("cannot harvest gradients into a frozen network".into()));
        }
        for (p, &id) in self.params_mut().into_iter().zip(&bound.param_ids) {
            let grad = g
                .grad(id)
                .ok_or_else(|| Error::Value("bound parameter carries no gradient".into()))?
                .to_vec();
            p.accumulate_grad(&grad)?;
        }
        Ok(())
    }

    /// One Adam update over all parameters from their grad buffers.
    pub fn apply_adam(
        &mut self,
        state: &mut AdamState,
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) -> Result<()> {
        if self.frozen {
            return Err(Error::Value(format!("{:?} network is frozen", self.role)));
        }
        adam_step(&mut self.params_mut(), state, lr, beta1, beta2, eps)
    }

    /// One plain SGD update (used by the parameter-averaging baseline).
    pub fn apply_sgd(&mut self, lr: f64) -> Result<()> {
        if self.frozen {
            return Err(Error::Value(format!("{:?} network is frozen", self.role)));
        }
        for p in self.params_mut() {
            let grad = p
                .grad()
                .ok_or_else(|| Error::Value("sgd step: parameter has no gradient".into()))?
                .to_vec();
            for (v, g) in p.values_mut().iter_mut().zip(grad) {
                *v -= lr * g;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Flat list of layer sizes, `[input, hidden..., output]`.
    pub fn arch(&self) -> Vec<usize> {
        let mut a = vec![self.input_dim];
        a.extend(self.layers.iter().map(|l| l.bias.numel()));
        a
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            role: self.role,
            activation: self.activation,
            arch: self.arch(),
            frozen: self.frozen,
            params: self.params().iter().map(|p| p.values().to_vec()).collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Network> {
        let mut net = build(ck.role, &ck.arch, ck.activation, 0)?;
        {
            let mut params = net.params_mut();
            if params.len() != ck.params.len() {
                return Err(Error::Format(format!(
                    "checkpoint has {} parameter arrays, architecture implies {}",
                    ck.params.len(),
                    params.len()
                )));
            }
            for (p, stored) in params.iter_mut().zip(&ck.params) {
                if p.numel() != stored.len() {
                    return Err(Error::Format("checkpoint parameter length mismatch".into()));
                }
                p.values_mut().copy_from_slice(stored);
            }
        }
        net.frozen = ck.frozen;
        Ok(net)
    }
}

/// Serializable network snapshot: shapes, parameter arrays, role tag.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub role: Role,
    pub activation: Activation,
    pub arch: Vec<usize>,
    pub frozen: bool,
    pub params: Vec<Vec<f64>>,
}

/// Draws a `[batch, dim]` matrix of i.i.d. standard-normal noise.
pub fn sample_noise(spec: &NoiseSpec, batch: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if batch == 0 {
        return Err(Error::Value("noise batch must be at least 1".into()));
    }
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let vals: Vec<f64> = (0..batch * spec.dim).map(|_| normal.sample(rng)).collect();
    Tensor::from_vec(vec![batch, spec.dim], vals)
}

/// Collapses patch-grid discriminator output `[batch, p^2]` to one score per
/// sample by mean over the patch axis.
pub fn discriminator_scalar(d_out: &Tensor) -> Result<Tensor> {
    if d_out.rank() != 2 {
        return Err(Error::Shape(format!(
            "expected [batch, patches], got {:?}",
            d_out.shape()
        )));
    }
    let (batch, patches) = (d_out.shape()[0], d_out.shape()[1]);
    let means: Vec<f64> = d_out
        .values()
        .chunks(patches)
        .map(|row| row.iter().sum::<f64>() / patches as f64)
        .collect();
    Tensor::from_vec(vec![batch], means)
}
