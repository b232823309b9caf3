//! Named parameter storage and seeded initialisation.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Embedding,
    Weight,
    Bias,
    NormGain,
    /// Trainable scalar or per-head gain.
    ScalarGain,
    /// Fixed tensor stored alongside parameters but never trained or counted.
    Buffer,
}

impl ParamRole {
    pub fn is_trainable(self) -> bool {
        self != ParamRole::Buffer
    }

    /// Only matrices are decayed; gains and biases are not.
    pub fn decays(self) -> bool {
        matches!(self, ParamRole::Embedding | ParamRole::Weight)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitRule {
    Zeros,
    Const(f64),
    Gaussian {
        std: f64,
    },
    /// Haar-random orthogonal matrix.
    Orthogonal,
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
    pub init: InitRule,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], role: ParamRole, init: InitRule) -> Self {
        ParamSpec { name: name.into(), shape: shape.to_vec(), role, init }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Stable 64-bit FNV-1a, used to give every named tensor its own stream.
fn name_stream(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// RNG for the tensor `name` under `seed`; independent of inventory order.
pub fn tensor_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(name_stream(name));
    rng
}

pub fn gaussian<S: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| S::of(std * rng.sample::<f64, _>(StandardNormal))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and length agree")
}

/// QR of a standard Gaussian matrix with the signs of `R`'s diagonal folded
/// into `Q`, which makes `Q` Haar-distributed.
pub fn random_orthogonal<S: Scalar>(n: usize, rng: &mut impl Rng) -> Tensor<S> {
    let g = DMatrix::<f64>::from_fn(n, n, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let (q, r) = (qr.q(), qr.r());
    let mut out = Tensor::zeros(&[n, n]);
    for j in 0..n {
        let sign = if r[(j, j)] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            out.set(i, j, S::of(q[(i, j)] * sign));
        }
    }
    out
}

pub fn initialise<S: Scalar>(spec: &ParamSpec, seed: u64) -> Result<Tensor<S>> {
    let mut rng = tensor_rng(seed, &spec.name);
    let square = || -> Result<usize> {
        match spec.shape.as_slice() {
            [a, b] if a == b => Ok(*a),
            _ => Err(Error::Config(format!("{} needs a square shape, got {:?}", spec.name, spec.shape))),
        }
    };
    Ok(match spec.init {
        InitRule::Zeros => Tensor::zeros(&spec.shape),
        InitRule::Const(c) => Tensor::full(&spec.shape, S::of(c)),
        InitRule::Gaussian { std } => gaussian(&spec.shape, std, &mut rng),
        InitRule::Orthogonal => random_orthogonal(square()?, &mut rng),
        InitRule::Identity => Tensor::eye(square()?),
    })
}

/// Ordered collection of named tensors (parameters and fixed buffers).
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    specs: Vec<ParamSpec>,
    values: Vec<Tensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { specs: Vec::new(), values: Vec::new() }
    }

    /// Initialises every spec in order; slot `i` holds `specs[i]`.
    pub fn from_specs(specs: Vec<ParamSpec>, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        for spec in specs {
            store.push(spec, seed)?;
        }
        Ok(store)
    }

    /// Adds and initialises a tensor, returning its slot index.
    pub fn push(&mut self, spec: ParamSpec, seed: u64) -> Result<usize> {
        if self.index_of(&spec.name).is_some() {
            return Err(Error::Config(format!("duplicate tensor name {}", spec.name)));
        }
        let value = initialise(&spec, seed)?;
        self.specs.push(spec);
        self.values.push(value);
        Ok(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn spec(&self, i: usize) -> &ParamSpec {
        &self.specs[i]
    }

    pub fn value(&self, i: usize) -> &Tensor<S> {
        &self.values[i]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Tensor<S> {
        &mut self.values[i]
    }

    pub fn values(&self) -> &[Tensor<S>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.values
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.index_of(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.index_of(name).map(move |i| &mut self.values[i])
    }

    /// Trainable parameter count (buffers excluded).
    pub fn num_parameters(&self) -> usize {
        self.specs.iter().filter(|s| s.role.is_trainable()).map(ParamSpec::numel).sum()
    }

    /// One leaf per slot: parameters require gradients, buffers do not.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a, S>) -> Vec<Var> {
        self.specs.iter().zip(&self.values).map(|(spec, v)| if spec.role.is_trainable() { g.param(v) } else { g.constant(v) }).collect()
    }

    /// Zero gradient buffers shaped like every slot.
    pub fn zero_grads(&self) -> Vec<Tensor<S>> {
        self.values.iter().map(|v| Tensor::zeros(v.shape())).collect()
    }
}
