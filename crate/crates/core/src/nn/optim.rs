use super::params::{Grads, Mat, ParamId, ParamStore};

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip applied before each step; `None` disables.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

/// Adam over a fixed subset of a store's parameters.
pub struct Adam {
    cfg: AdamConfig,
    trainable: Vec<ParamId>,
    m: Vec<Mat>,
    v: Vec<Mat>,
    step: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        Self::for_params(store, store.ids().collect(), cfg)
    }

    pub fn for_params(store: &ParamStore, trainable: Vec<ParamId>, cfg: AdamConfig) -> Self {
        let m = trainable
            .iter()
            .map(|id| Mat::zeros(store.get(*id).dim()))
            .collect::<Vec<_>>();
        let v = m.clone();
        Self {
            cfg,
            trainable,
            m,
            v,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update; gradients of parameters outside the trainable set
    /// are ignored. Returns the pre-clip gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &mut Grads) -> f64 {
        for id in store.ids().collect::<Vec<_>>() {
            if !self.trainable.contains(&id) {
                grads.clear(id);
            }
        }
        let norm = match self.cfg.clip_norm {
            Some(c) => grads.clip_global_norm(c),
            None => grads.global_norm(),
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.lr, self.cfg.eps);
        for (k, id) in self.trainable.iter().enumerate() {
            let Some(g) = grads.get(*id) else { continue };
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            let p = store.get_mut(*id);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut store = ParamStore::new();
        let x = store.add("x", array![[3.0, -2.0]]);
        let frozen = store.add("frozen", array![[1.0]]);
        let mut opt = Adam::for_params(
            &store,
            vec![x],
            AdamConfig {
                lr: 0.1,
                clip_norm: None,
                ..Default::default()
            },
        );
        for _ in 0..500 {
            let mut grads = Grads::for_store(&store);
            grads.accumulate(x, &(store.get(x) * 2.0));
            grads.accumulate(frozen, &array![[5.0]]);
            opt.step(&mut store, &mut grads);
        }
        assert!(store.get(x).iter().all(|v| v.abs() < 1e-2));
        assert_eq!(store.get(frozen)[[0, 0]], 1.0);
    }

    #[test]
    fn clipping_bounds_the_update_direction_norm() {
        let mut grads = Grads::new(1);
        grads.accumulate(ParamId(0), &array![[3.0, 4.0]]);
        let before = grads.clip_global_norm(1.0);
        assert_eq!(before, 5.0);
        assert!((grads.global_norm() - 1.0).abs() < 1e-12);
    }
}
