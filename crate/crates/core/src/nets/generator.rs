use super::layers::Conv2d;
use super::{Bound, Initializer, NetError, ParamStore};
use crate::autodiff::{Graph, Var};
use crate::config::{ExperimentConfig, TapLayer};
use crate::image::Image;
use crate::tensor::Float;

const IN_EPS: f64 = 1e-5;

/// Encoder activations captured at the configured tap layers, in tap order.
pub struct FeatureStack<'g, T: Float> {
    pub layers: Vec<(TapLayer, Var<'g, T>)>,
}

impl<'g, T: Float> FeatureStack<'g, T> {
    pub fn get(&self, tap: TapLayer) -> Option<Var<'g, T>> {
        self.layers.iter().find(|(t, _)| *t == tap).map(|(_, v)| *v)
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

/// ResNet translator: 7x7 stem, two stride-2 blocks, residual trunk, two
/// nearest-upsample blocks, 7x7 output with tanh. Instance norm throughout.
#[derive(Clone, Debug)]
pub struct Generator {
    image_size: usize,
    taps: Vec<TapLayer>,
    channels: usize,
    stem: Conv2d,
    down1: Conv2d,
    down2: Conv2d,
    blocks: Vec<ResBlock>,
    up1: Conv2d,
    up2: Conv2d,
    out: Conv2d,
}

impl Generator {
    pub fn new<T: Float>(cfg: &ExperimentConfig, store: &mut ParamStore<T>, init: &mut Initializer) -> Self {
        let c = cfg.gen_channels;
        let stem = Conv2d::new(store, init, "stem", 3, c, 7, 1, false).reflect_pad(3);
        let down1 = Conv2d::new(store, init, "down1", c, 2 * c, 3, 2, false).zero_pad(1);
        let down2 = Conv2d::new(store, init, "down2", 2 * c, 4 * c, 3, 2, false).zero_pad(1);
        let blocks = (1..=cfg.gen_res_blocks)
            .map(|i| ResBlock {
                conv1: Conv2d::new(store, init, &format!("res{i}.conv1"), 4 * c, 4 * c, 3, 1, false).reflect_pad(1),
                conv2: Conv2d::new(store, init, &format!("res{i}.conv2"), 4 * c, 4 * c, 3, 1, false).reflect_pad(1),
            })
            .collect();
        let up1 = Conv2d::new(store, init, "up1", 4 * c, 2 * c, 3, 1, false).reflect_pad(1);
        let up2 = Conv2d::new(store, init, "up2", 2 * c, c, 3, 1, false).reflect_pad(1);
        let out = Conv2d::new(store, init, "out", c, 3, 7, 1, true).reflect_pad(3);
        Generator {
            image_size: cfg.image_size,
            taps: cfg.tap_layers.clone(),
            channels: c,
            stem,
            down1,
            down2,
            blocks,
            up1,
            up2,
            out,
        }
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn taps(&self) -> &[TapLayer] {
        &self.taps
    }

    /// Channel count of the activation at `tap`.
    pub fn tap_channels(&self, tap: TapLayer) -> Result<usize, NetError> {
        self.check_tap(tap)?;
        Ok(match tap {
            TapLayer::Input => 3,
            TapLayer::Stem => self.channels,
            TapLayer::Down1 => 2 * self.channels,
            TapLayer::Down2 | TapLayer::Res(_) => 4 * self.channels,
        })
    }

    /// Spatial side of the activation at `tap`.
    pub fn tap_side(&self, tap: TapLayer) -> usize {
        self.image_size / tap.stride()
    }

    fn check_tap(&self, tap: TapLayer) -> Result<(), NetError> {
        match tap {
            TapLayer::Res(n) if n == 0 || n > self.blocks.len() => Err(NetError::UnknownTap(tap)),
            _ => Ok(()),
        }
    }

    fn check_input<T: Float>(&self, x: Var<'_, T>) -> Result<(), NetError> {
        let shape = x.shape();
        let ok = shape.len() == 4 && shape[1] == 3 && shape[2] == self.image_size && shape[3] == self.image_size;
        if ok {
            Ok(())
        } else {
            Err(NetError::Shape {
                expected: vec![shape.first().copied().unwrap_or(1), 3, self.image_size, self.image_size],
                got: shape,
            })
        }
    }

    fn run<'g, T: Float>(
        &self,
        p: &Bound<'g, T>,
        x: Var<'g, T>,
        taps: &[TapLayer],
        decode: bool,
    ) -> Result<(Option<Var<'g, T>>, FeatureStack<'g, T>), NetError> {
        self.check_input(x)?;
        for &t in taps {
            self.check_tap(t)?;
        }
        let deepest = taps.iter().map(|t| t.ordinal()).max().unwrap_or(0);
        let mut captured: Vec<(TapLayer, Var<'g, T>)> = Vec::with_capacity(taps.len());
        let mut capture = |tap: TapLayer, v: Var<'g, T>| {
            if taps.contains(&tap) {
                captured.push((tap, v));
            }
            decode || tap.ordinal() < deepest
        };

        let block = |conv: &Conv2d, v: Var<'g, T>| conv.forward(p, v).instance_norm(IN_EPS).relu();
        let mut h = x;
        let mut go_on = capture(TapLayer::Input, h);
        if go_on {
            h = block(&self.stem, h);
            go_on = capture(TapLayer::Stem, h);
        }
        if go_on {
            h = block(&self.down1, h);
            go_on = capture(TapLayer::Down1, h);
        }
        if go_on {
            h = block(&self.down2, h);
            go_on = capture(TapLayer::Down2, h);
        }
        for (i, rb) in self.blocks.iter().enumerate() {
            if !go_on {
                break;
            }
            let r = block(&rb.conv1, h);
            let r = rb.conv2.forward(p, r).instance_norm(IN_EPS);
            h = h.add(r);
            go_on = capture(TapLayer::Res(i + 1), h);
        }
        let output = if decode {
            let u = block(&self.up1, h.upsample2());
            let u = block(&self.up2, u.upsample2());
            Some(self.out.forward(p, u).tanh())
        } else {
            None
        };
        // Report taps in the order they were requested.
        let layers = taps
            .iter()
            .map(|t| *captured.iter().find(|(c, _)| c == t).expect("every requested tap is reached"))
            .collect();
        Ok((output, FeatureStack { layers }))
    }

    /// Translate `x: [N, 3, S, S]` and return the output together with the
    /// activations at the configured taps from the same pass.
    pub fn forward<'g, T: Float>(
        &self,
        p: &Bound<'g, T>,
        x: Var<'g, T>,
    ) -> Result<(Var<'g, T>, FeatureStack<'g, T>), NetError> {
        let (out, feats) = self.run(p, x, &self.taps, true)?;
        Ok((out.expect("decoded"), feats))
    }

    /// Encoder-only pass stopping at the deepest requested tap.
    pub fn encode<'g, T: Float>(
        &self,
        p: &Bound<'g, T>,
        x: Var<'g, T>,
        taps: &[TapLayer],
    ) -> Result<FeatureStack<'g, T>, NetError> {
        Ok(self.run(p, x, taps, false)?.1)
    }

    /// Translated output only, without collecting taps.
    pub fn generate<'g, T: Float>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>, NetError> {
        Ok(self.run(p, x, &[], true)?.0.expect("decoded"))
    }

    /// Eval-mode translation of whole images.
    pub fn translate<T: Float>(&self, params: &ParamStore<T>, images: &[&Image]) -> Result<Vec<Image>, NetError> {
        let g = Graph::inference();
        let p = params.bind(&g, false);
        let x = g.constant(Image::batch::<T>(images));
        Ok(Image::unbatch(&self.generate(&p, x)?.value()))
    }
}
