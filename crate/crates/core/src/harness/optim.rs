use crate::numerics::{ParamGrads, ParamStore, Scalar};

use super::AdamWConfig;

/// Adam with decoupled weight decay. Moments are kept in f64.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub lr: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, lr: f64) -> Self {
        Self {
            cfg,
            lr,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter that has a gradient:
    /// `θ ← θ − lr·(m̂ / (√v̂ + ε) + λ·θ)`.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, grads: &ParamGrads<T>) {
        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
        if self.m.len() < store.len() {
            self.m.resize(store.len(), Vec::new());
            self.v.resize(store.len(), Vec::new());
        }
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let Some(g) = grads.0.get(i).and_then(|g| g.as_ref()) else {
                continue;
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if m.is_empty() {
                *m = vec![0.0; g.numel()];
                *v = vec![0.0; g.numel()];
            }
            let updated: Vec<T> = p
                .value
                .data()
                .iter()
                .zip(g.data())
                .enumerate()
                .map(|(k, (&w, &gk))| {
                    let (w, gk) = (w.f64(), gk.f64());
                    m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
                    v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
                    let adam = (m[k] / bc1) / ((v[k] / bc2).sqrt() + c.eps);
                    T::of(w - self.lr * (adam + c.weight_decay * w))
                })
                .collect();
            p.value = crate::numerics::Tensor::new(p.value.shape().to_vec(), updated).expect("same shape");
        }
    }
}
