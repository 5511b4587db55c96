//! The learnable networks: generator with encoder taps, per-tap projection
//! heads and the patch discriminator.

mod discriminator;
mod generator;
mod heads;
mod layers;

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autodiff::{Graph, Var};
use crate::config::{ExperimentConfig, TapLayer};
use crate::tensor::{Float, Tensor};

pub use discriminator::{Discriminator, Patches};
pub use generator::{FeatureStack, Generator};
pub use heads::{BoundHeads, IdentityProjector, ProjectionHeads, Projector};
pub use layers::{Conv2d, Linear};

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("expected input of shape {expected:?}, got {got:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },
    #[error("tap layer {0} is not an encoder stage of this generator")]
    UnknownTap(TapLayer),
    #[error("no projection head for tap index {index} ({available} heads)")]
    NoHead { index: usize, available: usize },
    #[error("head {index} expects {expected}-dim features, got {got}")]
    HeadWidth { index: usize, expected: usize, got: usize },
    #[error("discriminator expects {expected}x{expected} patches, got {got}x{got}")]
    PatchSize { expected: usize, got: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named parameter tensors of one network.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Rc<Tensor<T>>>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(Rc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter().map(|v| v.as_ref()))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Rc::make_mut(&mut self.values[id.0])
    }

    /// Replace a parameter by name; the shape must match.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<(), String> {
        let i = self.names.iter().position(|n| n == name).ok_or_else(|| format!("unknown parameter {name}"))?;
        if self.values[i].shape() != value.shape() {
            return Err(format!(
                "parameter {name}: shape {:?} does not match {:?}",
                value.shape(),
                self.values[i].shape()
            ));
        }
        self.values[i] = Rc::new(value);
        Ok(())
    }

    /// Place every parameter on `graph`. Frozen parameters act as constants.
    pub fn bind<'g>(&self, graph: &'g Graph<T>, trainable: bool) -> Bound<'g, T> {
        let vars = self
            .values
            .iter()
            .map(|v| if trainable { graph.input_rc(Rc::clone(v)) } else { graph.constant_rc(Rc::clone(v)) })
            .collect();
        Bound { vars }
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| Rc::new(v.cast())).collect(),
        }
    }
}

/// Parameters of one network placed on a graph.
pub struct Bound<'g, T: Float> {
    vars: Vec<Var<'g, T>>,
}

impl<'g, T: Float> Bound<'g, T> {
    pub fn var(&self, id: ParamId) -> Var<'g, T> {
        self.vars[id.0]
    }

    /// Gradient for every parameter, in store order.
    pub fn grads(&self, grads: &crate::autodiff::Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.vars.iter().map(|&v| grads.get(v).cloned()).collect()
    }
}

/// Seeded weight initializer: zero-mean Gaussian kernels (sigma 0.02), zero biases.
pub struct Initializer {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Initializer {
    pub const SIGMA: f64 = 0.02;

    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Initializer { rng, normal: Normal::new(0.0, Self::SIGMA).expect("valid sigma") }
    }

    pub fn gaussian<T: Float>(&mut self, shape: &[usize]) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(self.normal.sample(&mut self.rng))).collect();
        Tensor::from_vec(shape, data)
    }
}

/// All three networks and their parameters.
#[derive(Clone)]
pub struct Networks<T: Float> {
    pub generator: Generator,
    pub heads: ProjectionHeads,
    pub discriminator: Discriminator,
    pub g_params: ParamStore<T>,
    pub h_params: ParamStore<T>,
    pub d_params: ParamStore<T>,
}

impl<T: Float> Networks<T> {
    /// Build freshly initialized networks; weights depend only on `cfg.seed`
    /// and the architecture fields.
    pub fn new(cfg: &ExperimentConfig) -> Self {
        let mut g_params = ParamStore::new();
        let mut h_params = ParamStore::new();
        let mut d_params = ParamStore::new();
        let generator = Generator::new(cfg, &mut g_params, &mut Initializer::new(cfg.seed, 1));
        let heads = ProjectionHeads::new(cfg, &generator, &mut h_params, &mut Initializer::new(cfg.seed, 2));
        let discriminator = Discriminator::new(cfg, &mut d_params, &mut Initializer::new(cfg.seed, 3));
        Networks { generator, heads, discriminator, g_params, h_params, d_params }
    }
}
