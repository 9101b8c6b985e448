use crate::graph::Gradients;
use crate::param::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moments are kept per parameter of one store.
#[derive(Clone, Debug)]
pub struct Adam<T: Scalar = f32> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros: Vec<_> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self { config, step: 0, m: zeros.clone(), v: zeros }
    }

    /// Applies one update. Parameters absent from `grads` are treated as
    /// having a zero gradient.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) {
        assert_eq!(self.m.len(), store.len(), "optimizer/store size mismatch");
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::cst(c.beta1), T::cst(c.beta2));
        let bc1 = T::cst(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::cst(1.0 - c.beta2.powi(self.step as i32));
        let lr = T::cst(c.lr);
        let eps = T::cst(c.eps);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.0;
            let grad = grads.of(store, id);
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            match grad {
                Some(g) => {
                    for ((mm, vv), &gg) in m.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                        *mm = b1 * *mm + (T::one() - b1) * gg;
                        *vv = b2 * *vv + (T::one() - b2) * gg * gg;
                    }
                }
                None => {
                    for (mm, vv) in m.iter_mut().zip(v.iter_mut()) {
                        *mm = b1 * *mm;
                        *vv = b2 * *vv;
                    }
                }
            }
            if m.iter().all(|x| x.is_zero()) {
                continue;
            }
            let p = store.get_mut(id).data_mut();
            for ((pp, &mm), &vv) in p.iter_mut().zip(m.iter()).zip(v.iter()) {
                let mh = mm / bc1;
                let vh = vv / bc2;
                *pp = *pp - lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}
