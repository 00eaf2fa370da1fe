//! Adam with decoupled weight decay and per-group learning rates.

use fat_core::{Group, ParamStore, Result, Scalar};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr_backbone: f64,
    pub lr_transformer: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWConfig {
    pub fn new(lr_transformer: f64) -> Self {
        Self {
            lr_backbone: lr_transformer / 10.0,
            lr_transformer,
            weight_decay: 0.02,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr(&self, group: Group) -> f64 {
        match group {
            Group::Backbone => self.lr_backbone,
            Group::Transformer => self.lr_transformer,
        }
    }
}

pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<T: Scalar>(cfg: AdamWConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        Self {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every trainable parameter from its gradient slot. Weight decay
    /// applies to matrices and kernels only, not to biases and norm scales.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let Some(grad) = p.value.grad().map(<[T]>::to_vec) else {
                continue;
            };
            let lr = c.lr(p.group);
            let decay = if p.value.rank() >= 2 { c.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[j].as_f64();
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                if lr == 0.0 {
                    continue;
                }
                let mut x = w.as_f64();
                x -= lr * decay * x;
                x -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                *w = T::lit(x);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use fat_core::Tensor;

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap(), Group::Transformer);
        store.get_mut(id).value.accumulate_grad(&[0.5, -2.0]).unwrap();
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..AdamWConfig::new(0.1) }, &store);
        opt.step(&mut store).unwrap();
        let w = store.get(id).value.data().to_vec();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6, "{w:?}");
    }

    #[test]
    fn zero_lr_group_is_frozen() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::ones(&[2, 2]), Group::Backbone);
        let b = store.add("b", Tensor::ones(&[2, 2]), Group::Transformer);
        for id in [a, b] {
            store.get_mut(id).value.accumulate_grad(&[1.0; 4]).unwrap();
        }
        let before = store.checksum(Some(Group::Backbone));
        let mut opt = AdamW::new(AdamWConfig { lr_backbone: 0.0, ..AdamWConfig::new(0.1) }, &store);
        opt.step(&mut store).unwrap();
        assert_eq!(store.checksum(Some(Group::Backbone)), before);
        assert_ne!(store.get(b).value.data()[0], 1.0);
    }
}
