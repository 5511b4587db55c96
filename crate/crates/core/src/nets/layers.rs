use super::{Bound, Initializer, ParamId, ParamStore};
use crate::autodiff::Var;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: ParamId,
    bias: Option<ParamId>,
    stride: usize,
    /// Zero padding applied by the convolution itself.
    pad: usize,
    /// Reflection padding applied before the convolution.
    reflect: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init.gaussian(&[out_ch, in_ch, kernel, kernel]));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch])));
        Conv2d { weight, bias, stride, pad: 0, reflect: 0 }
    }

    pub fn zero_pad(mut self, pad: usize) -> Self {
        self.pad = pad;
        self
    }

    pub fn reflect_pad(mut self, pad: usize) -> Self {
        self.reflect = pad;
        self
    }

    pub fn forward<'g, T: Float>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let x = if self.reflect > 0 { x.reflect_pad(self.reflect) } else { x };
        x.conv2d(p.var(self.weight), self.bias.map(|b| p.var(b)), self.stride, self.pad)
    }
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: ParamId,
    bias: ParamId,
    in_dim: usize,
}

impl Linear {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init.gaussian(&[in_dim, out_dim]));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Linear { weight, bias, in_dim }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn forward<'g, T: Float>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        x.matmul(p.var(self.weight)).add_row_bias(p.var(self.bias))
    }
}
