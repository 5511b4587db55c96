use crate::nets::ParamStore;
use crate::tensor::{Float, Tensor};

const ADAM_EPS: f64 = 1e-8;

/// Adam with bias correction. One instance per parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    beta1: f64,
    beta2: f64,
    steps: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(store: &ParamStore<T>, beta1: f64, beta2: f64) -> Self {
        let zeros = || store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        Adam { beta1, beta2, steps: 0, m: zeros(), v: zeros() }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    /// Rebuild from saved moments; shapes must match the store.
    pub fn restore(
        store: &ParamStore<T>,
        beta1: f64,
        beta2: f64,
        steps: u64,
        m: Vec<Tensor<T>>,
        v: Vec<Tensor<T>>,
    ) -> Result<Self, String> {
        if m.len() != store.len() || v.len() != store.len() {
            return Err(format!("expected {} optimizer moments, got {}/{}", store.len(), m.len(), v.len()));
        }
        for (k, (name, p)) in store.iter().enumerate() {
            if p.shape() != m[k].shape() || p.shape() != v[k].shape() {
                return Err(format!("optimizer moment shape mismatch for {name}"));
            }
        }
        Ok(Adam { beta1, beta2, steps, m, v })
    }

    /// Apply one update. Parameters without a gradient keep their value and
    /// moments.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) {
        assert_eq!(grads.len(), self.m.len(), "one gradient slot per parameter");
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let step_size = T::of(lr / (1.0 - b1.powi(t)));
        let v_corr = T::of(1.0 / (1.0 - b2.powi(t)));
        let (b1, b2, eps) = (T::of(b1), T::of(b2), T::of(ADAM_EPS));
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let Some(g) = &grads[k] else { continue };
            let p = store.get_mut(id);
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                *pv -= step_size * *mv / ((*vv * v_corr).sqrt() + eps);
            }
        }
    }
}

/// Learning rate at 0-based `step`: constant, or with `decay` linearly to 0
/// over the second half of training.
pub fn learning_rate(base: f64, step: u64, total: u64, decay: bool) -> f64 {
    if !decay {
        return base;
    }
    let half = total as f64 / 2.0;
    let t = step as f64;
    if t < half {
        base
    } else {
        base * (1.0 - (t - half) / (total as f64 - half)).max(0.0)
    }
}
