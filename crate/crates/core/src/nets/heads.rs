use super::layers::Linear;
use super::{Bound, Generator, Initializer, NetError, ParamStore};
use crate::autodiff::Var;
use crate::config::ExperimentConfig;
use crate::tensor::Float;

/// Maps `[N, C_l]` feature rows taken at tap `l` to embedding rows.
pub trait Projector<'g, T: Float> {
    fn num_layers(&self) -> usize;

    fn project(&self, layer: usize, features: Var<'g, T>) -> Result<Var<'g, T>, NetError>;
}

#[derive(Clone, Debug)]
struct Head {
    fc1: Linear,
    fc2: Linear,
}

/// One independent two-layer MLP per tap layer.
#[derive(Clone, Debug)]
pub struct ProjectionHeads {
    heads: Vec<Head>,
    out_dim: usize,
}

impl ProjectionHeads {
    pub fn new<T: Float>(
        cfg: &ExperimentConfig,
        generator: &Generator,
        store: &mut ParamStore<T>,
        init: &mut Initializer,
    ) -> Self {
        let heads = generator
            .taps()
            .iter()
            .enumerate()
            .map(|(l, &tap)| {
                let in_dim = generator.tap_channels(tap).expect("validated tap");
                Head {
                    fc1: Linear::new(store, init, &format!("head{l}.fc1"), in_dim, cfg.head_hidden),
                    fc2: Linear::new(store, init, &format!("head{l}.fc2"), cfg.head_hidden, cfg.head_dim),
                }
            })
            .collect();
        ProjectionHeads { heads, out_dim: cfg.head_dim }
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn bind<'a, 'g, T: Float>(&'a self, params: Bound<'g, T>) -> BoundHeads<'a, 'g, T> {
        BoundHeads { heads: self, params }
    }
}

/// Heads with their parameters placed on a graph.
pub struct BoundHeads<'a, 'g, T: Float> {
    heads: &'a ProjectionHeads,
    params: Bound<'g, T>,
}

impl<'g, T: Float> BoundHeads<'_, 'g, T> {
    pub fn params(&self) -> &Bound<'g, T> {
        &self.params
    }
}

impl<'g, T: Float> Projector<'g, T> for BoundHeads<'_, 'g, T> {
    fn num_layers(&self) -> usize {
        self.heads.heads.len()
    }

    fn project(&self, layer: usize, features: Var<'g, T>) -> Result<Var<'g, T>, NetError> {
        let head = self
            .heads
            .heads
            .get(layer)
            .ok_or(NetError::NoHead { index: layer, available: self.heads.heads.len() })?;
        let shape = features.shape();
        let width = shape.get(1).copied().unwrap_or(0);
        if shape.len() != 2 || width != head.fc1.in_dim() {
            return Err(NetError::HeadWidth { index: layer, expected: head.fc1.in_dim(), got: width });
        }
        let h = head.fc1.forward(&self.params, features).relu();
        Ok(head.fc2.forward(&self.params, h))
    }
}

/// `H_l = id` for every layer; used to test losses in isolation.
#[derive(Clone, Copy, Debug)]
pub struct IdentityProjector {
    pub layers: usize,
}

impl<'g, T: Float> Projector<'g, T> for IdentityProjector {
    fn num_layers(&self) -> usize {
        self.layers
    }

    fn project(&self, layer: usize, features: Var<'g, T>) -> Result<Var<'g, T>, NetError> {
        if layer >= self.layers {
            return Err(NetError::NoHead { index: layer, available: self.layers });
        }
        Ok(features)
    }
}
