use super::params::{Grads, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2.5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, n: usize) -> Self {
        Self {
            config,
            step: 0,
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        }
    }

    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &Grads<T>) {
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::one() - T::lit(c.beta1.powi(self.step as i32));
        let bc2 = T::one() - T::lit(c.beta2.powi(self.step as i32));
        let lr = T::lit(c.lr);
        let decay = T::one() - lr * T::lit(c.weight_decay);
        let eps = T::lit(c.eps);
        let p = params.values_mut();
        for (i, &g) in grads.values().iter().enumerate() {
            self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
            self.v[i] = b2 * self.v[i] + (T::one() - b2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            p[i] = p[i] * decay - lr * mh / (vh.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_leaves_weights() {
        let mut ps = ParamStore::<f64>::new();
        ps.constant("w", &[3], 0.7);
        let before = ps.clone();
        let mut g = ps.grads();
        g.values_mut().fill(1.0);
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 0.0,
                ..Default::default()
            },
            ps.len(),
        );
        opt.update(&mut ps, &g);
        assert_eq!(ps, before);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut ps = ParamStore::<f64>::new();
        let id = ps.constant("w", &[2], 3.0);
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 0.05,
                weight_decay: 0.0,
                ..Default::default()
            },
            ps.len(),
        );
        for _ in 0..500 {
            let mut g = ps.grads();
            for (gi, &w) in g.get_mut(id).iter_mut().zip(ps.get(id)) {
                *gi = 2.0 * (w - 1.0);
            }
            opt.update(&mut ps, &g);
        }
        assert!(ps.get(id).iter().all(|w| (w - 1.0).abs() < 1e-2));
    }
}
