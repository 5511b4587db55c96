use super::layers::Conv2d;
use super::{Bound, Initializer, NetError, ParamStore};
use crate::autodiff::{Graph, Var};
use crate::config::ExperimentConfig;
use crate::data::PatchLayout;
use crate::image::Image;
use crate::tensor::Float;

const IN_EPS: f64 = 1e-5;
const SLOPE: f64 = 0.2;

/// A batch of square crops `[K, 3, P, P]`. The only input the discriminator
/// accepts.
#[derive(Clone, Copy)]
pub struct Patches<'g, T: Float>(Var<'g, T>);

impl<'g, T: Float> Patches<'g, T> {
    /// Crop and rotate `images: [N, 3, H, W]` according to `layout`,
    /// differentiably with respect to the images.
    pub fn extract(images: Var<'g, T>, layout: &PatchLayout) -> Result<Self, NetError> {
        let shape = images.shape();
        let n = layout.specs.iter().map(|s| s.image + 1).max().unwrap_or(0);
        let ok = shape.len() == 4
            && shape[1] == 3
            && shape[0] >= n
            && shape[2] == layout.image_height
            && shape[3] == layout.image_width;
        if !ok {
            return Err(NetError::Shape {
                expected: vec![n, 3, layout.image_height, layout.image_width],
                got: shape,
            });
        }
        Ok(Patches(images.gather(layout.shared_plan())))
    }

    /// Already materialized crops, as constants.
    pub fn from_crops(graph: &'g Graph<T>, crops: &[&Image]) -> Self {
        Patches(graph.constant(Image::batch(crops)))
    }

    pub fn len(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn side(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn var(&self) -> Var<'g, T> {
        self.0
    }

    pub fn detach(&self) -> Self {
        Patches(self.0.detach())
    }
}

/// Three-layer convolutional critic. Each crop is scored independently.
#[derive(Clone, Debug)]
pub struct Discriminator {
    patch_size: usize,
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
}

impl Discriminator {
    pub fn new<T: Float>(cfg: &ExperimentConfig, store: &mut ParamStore<T>, init: &mut Initializer) -> Self {
        let c = cfg.disc_channels;
        Discriminator {
            patch_size: cfg.patch_size,
            conv1: Conv2d::new(store, init, "conv1", 3, c, 4, 2, true).zero_pad(1),
            conv2: Conv2d::new(store, init, "conv2", c, 2 * c, 4, 2, false).zero_pad(1),
            conv3: Conv2d::new(store, init, "conv3", 2 * c, 1, 4, 1, true).zero_pad(1),
        }
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    /// One probability per patch, shape `[K]`.
    pub fn discriminate<'g, T: Float>(
        &self,
        p: &Bound<'g, T>,
        patches: Patches<'g, T>,
    ) -> Result<Var<'g, T>, NetError> {
        let x = patches.0;
        let shape = x.shape();
        if shape[2] != self.patch_size || shape[3] != self.patch_size {
            return Err(NetError::PatchSize { expected: self.patch_size, got: shape[2] });
        }
        let k = shape[0];
        let slope = T::of(SLOPE);
        let h = self.conv1.forward(p, x).leaky_relu(slope);
        let h = self.conv2.forward(p, h).instance_norm(IN_EPS).leaky_relu(slope);
        let logits = self.conv3.forward(p, h).spatial_mean().reshape(&[k]);
        // Keep probabilities strictly inside (0, 1) even when f32 saturates.
        Ok(logits.sigmoid().clamp(T::epsilon(), T::one() - T::epsilon()))
    }
}
