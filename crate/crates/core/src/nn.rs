//! Minimal dense multilayer networks with hand-written reverse-mode
//! gradients, plus the Gaussian-latent utilities used by the variational
//! models (reparameterization and the closed-form KL to a standard normal).

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

pub use crate::tensor::mse;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Silu,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Silu => x * sigmoid(x),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative with respect to the pre-activation.
    #[inline]
    pub fn deriv(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> LayerSpec {
        LayerSpec {
            in_dim,
            out_dim,
            activation,
        }
    }
}

/// Dense multilayer network. Weights are `out_dim x in_dim`, biases length
/// `out_dim`. Value object: forwarding never mutates it, and any parameter
/// mutation bumps `version` so stale tapes are rejected in `backward`.
#[derive(Debug, Clone)]
pub struct MlpNet {
    specs: Vec<LayerSpec>,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
    version: u64,
}

/// Activations retained by `forward` for the backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    input: Tensor,
    pre: Vec<Tensor>,
    post: Vec<Tensor>,
    version: u64,
}

impl Tape {
    pub fn output(&self) -> &Tensor {
        self.post.last().unwrap_or(&self.input)
    }
}

/// Parameter and input gradients produced by `backward`.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub d_weights: Vec<Tensor>,
    pub d_biases: Vec<Tensor>,
    pub d_input: Tensor,
}

impl MlpNet {
    /// Zero-initialized network; layer dimensions must chain.
    pub fn new(specs: Vec<LayerSpec>) -> Result<MlpNet> {
        if specs.is_empty() {
            return Err(Error::InvalidArgument("MlpNet needs at least one layer".into()));
        }
        for s in &specs {
            if s.in_dim == 0 || s.out_dim == 0 {
                return Err(Error::InvalidArgument("layer dimensions must be positive".into()));
            }
        }
        for w in specs.windows(2) {
            if w[0].out_dim != w[1].in_dim {
                return Err(Error::shape(
                    format!("layer input {}", w[0].out_dim),
                    format!("{}", w[1].in_dim),
                ));
            }
        }
        let weights = specs
            .iter()
            .map(|s| Tensor::zeros(&[s.out_dim, s.in_dim]))
            .collect();
        let biases = specs.iter().map(|s| Tensor::zeros(&[s.out_dim])).collect();
        Ok(MlpNet {
            specs,
            weights,
            biases,
            version: 0,
        })
    }

    /// Glorot-style init: weights uniform in +-sqrt(6/(in+out)), zero biases.
    pub fn init(specs: Vec<LayerSpec>, rng: &mut RngState) -> Result<MlpNet> {
        let mut net = MlpNet::new(specs)?;
        for (l, spec) in net.specs.clone().iter().enumerate() {
            let bound = (6.0 / (spec.in_dim + spec.out_dim) as f64).sqrt();
            for w in net.weights[l].data_mut() {
                *w = rng.uniform_in(-bound, bound);
            }
        }
        net.version += 1;
        Ok(net)
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn in_dim(&self) -> usize {
        self.specs[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.specs.last().unwrap().out_dim
    }

    pub fn weight(&self, layer: usize) -> &Tensor {
        &self.weights[layer]
    }

    pub fn bias(&self, layer: usize) -> &Tensor {
        &self.biases[layer]
    }

    pub fn set_layer(&mut self, layer: usize, weight: Tensor, bias: Tensor) -> Result<()> {
        let s = self.specs[layer];
        if weight.shape() != [s.out_dim, s.in_dim] || bias.shape() != [s.out_dim] {
            return Err(Error::shape(
                format!("weight [{}, {}], bias [{}]", s.out_dim, s.in_dim, s.out_dim),
                format!("weight {:?}, bias {:?}", weight.shape(), bias.shape()),
            ));
        }
        self.weights[layer] = weight;
        self.biases[layer] = bias;
        self.version += 1;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.specs
            .iter()
            .map(|s| s.out_dim * s.in_dim + s.out_dim)
            .sum()
    }

    /// Appends all parameters (per layer: weight row-major, then bias).
    pub fn append_params(&self, out: &mut Vec<f64>) {
        for l in 0..self.specs.len() {
            out.extend_from_slice(self.weights[l].data());
            out.extend_from_slice(self.biases[l].data());
        }
    }

    /// Loads parameters from a flat slice in `append_params` order.
    pub fn load_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape(
                format!("{} parameters", self.param_count()),
                format!("{}", flat.len()),
            ));
        }
        let mut off = 0;
        for l in 0..self.specs.len() {
            let wn = self.weights[l].len();
            self.weights[l]
                .data_mut()
                .copy_from_slice(&flat[off..off + wn]);
            off += wn;
            let bn = self.biases[l].len();
            self.biases[l]
                .data_mut()
                .copy_from_slice(&flat[off..off + bn]);
            off += bn;
        }
        self.version += 1;
        Ok(())
    }

    /// Forward pass over a batch (rows are samples). The tape retains every
    /// pre- and post-activation for `backward`.
    pub fn forward(&self, batch: &Tensor) -> Result<(Tensor, Tape)> {
        if batch.shape().len() != 2 || batch.cols() != self.in_dim() {
            return Err(Error::shape(
                format!("[B, {}]", self.in_dim()),
                format!("{:?}", batch.shape()),
            ));
        }
        let b = batch.rows();
        let mut pre = Vec::with_capacity(self.specs.len());
        let mut post = Vec::with_capacity(self.specs.len());
        let mut cur = batch.clone();
        for (l, spec) in self.specs.iter().enumerate() {
            let mut z = cur.matmul(&self.weights[l].transpose());
            for r in 0..b {
                let row = z.row_mut(r);
                for (v, &bias) in row.iter_mut().zip(self.biases[l].data()) {
                    *v += bias;
                }
            }
            let a = z.map(|x| spec.activation.eval(x));
            pre.push(z);
            post.push(a.clone());
            cur = a;
        }
        Ok((
            cur,
            Tape {
                input: batch.clone(),
                pre,
                post,
                version: self.version,
            },
        ))
    }

    /// Backward pass: gradients of the scalar loss whose output-gradient is
    /// `out_grad`, for all parameters and the input.
    pub fn backward(&self, tape: &Tape, out_grad: &Tensor) -> Result<MlpGrads> {
        if tape.version != self.version {
            return Err(Error::InvalidArgument(
                "stale tape: network parameters changed since forward".into(),
            ));
        }
        let last = self.specs.len() - 1;
        if out_grad.shape() != tape.post[last].shape() {
            return Err(Error::shape(
                format!("{:?}", tape.post[last].shape()),
                format!("{:?}", out_grad.shape()),
            ));
        }
        let mut d_weights = Vec::with_capacity(self.specs.len());
        let mut d_biases = Vec::with_capacity(self.specs.len());
        let mut g = out_grad.clone();
        for l in (0..self.specs.len()).rev() {
            let act = self.specs[l].activation;
            let gpre = g.zip_with(&tape.pre[l], |gy, z| gy * act.deriv(z));
            let layer_in = if l == 0 { &tape.input } else { &tape.post[l - 1] };
            let dw = gpre.transpose().matmul(layer_in);
            let mut db = Tensor::zeros(&[self.specs[l].out_dim]);
            for r in 0..gpre.rows() {
                for (acc, &v) in db.data_mut().iter_mut().zip(gpre.row(r)) {
                    *acc += v;
                }
            }
            g = gpre.matmul(&self.weights[l]);
            d_weights.push(dw);
            d_biases.push(db);
        }
        d_weights.reverse();
        d_biases.reverse();
        Ok(MlpGrads {
            d_weights,
            d_biases,
            d_input: g,
        })
    }
}

impl Tensor {
    fn zip_with(&self, rhs: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape(), rhs.shape());
        let data = self
            .data()
            .iter()
            .zip(rhs.data().iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::from_vec(self.shape(), data).unwrap()
    }
}

/// Diagonal Gaussian over a latent vector, parameterized by mean and
/// log-standard-deviation (we standardize on log-std: the sampled value is
/// `mu + exp(log_std) * eps`).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLatent {
    pub mu: Tensor,
    pub log_std: Tensor,
}

impl GaussianLatent {
    pub fn new(mu: Tensor, log_std: Tensor) -> Result<GaussianLatent> {
        if mu.shape() != log_std.shape() {
            return Err(Error::shape(
                format!("{:?}", mu.shape()),
                format!("{:?}", log_std.shape()),
            ));
        }
        if !mu.is_finite() || !log_std.is_finite() {
            return Err(Error::InvalidArgument(
                "GaussianLatent requires finite mean and log-std".into(),
            ));
        }
        Ok(GaussianLatent { mu, log_std })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Reparameterized draw `z = mu + exp(log_std) .* eps`, `eps ~ N(0, I)`.
pub fn reparameterize(g: &GaussianLatent, rng: &mut RngState) -> Tensor {
    let mut z = g.mu.clone();
    for i in 0..z.len() {
        z.data_mut()[i] += g.log_std.data()[i].exp() * rng.normal();
    }
    z
}

/// Closed-form `KL(N(mu, exp(log_std)^2) || N(0, I))`:
/// `0.5 * sum(mu^2 + exp(2 log_std) - 1 - 2 log_std)`. Always nonnegative.
pub fn kl_std_normal(g: &GaussianLatent) -> f64 {
    let mut acc = 0.0;
    for i in 0..g.dim() {
        let mu = g.mu.data()[i];
        let ls = g.log_std.data()[i];
        acc += mu * mu + (2.0 * ls).exp() - 1.0 - 2.0 * ls;
    }
    0.5 * acc
}
