//! Adam with decoupled weight decay.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use super::{c, Elem, Grads, Params};

#[derive(Debug, Clone)]
pub struct AdamW<F: Elem> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: usize,
    m: BTreeMap<String, ArrayD<F>>,
    v: BTreeMap<String, ArrayD<F>>,
}

impl<F: Elem> AdamW<F> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn step<M: Params<F>>(&mut self, model: &mut M, grads: &Grads<F>) {
        self.step += 1;
        let b1 = c::<F>(self.beta1);
        let b2 = c::<F>(self.beta2);
        let one = F::one();
        let corr1 = c::<F>(1.0 - self.beta1.powi(self.step as i32));
        let corr2 = c::<F>(1.0 - self.beta2.powi(self.step as i32));
        let lr = c::<F>(self.lr);
        let eps = c::<F>(self.eps);
        let wd = c::<F>(self.weight_decay);

        let (m, v) = (&mut self.m, &mut self.v);
        model.visit_mut("", &mut |name, mut theta| {
            let Some(g) = grads.get(name) else {
                return; // parameter not touched this step
            };
            let m_t = m
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::default(theta.shape().to_vec()));
            let v_t = v
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::default(theta.shape().to_vec()));
            ndarray::Zip::from(&mut *m_t).and(g).for_each(|mm, &gg| {
                *mm = b1 * *mm + (one - b1) * gg;
            });
            ndarray::Zip::from(&mut *v_t).and(g).for_each(|vv, &gg| {
                *vv = b2 * *vv + (one - b2) * gg * gg;
            });
            ndarray::Zip::from(&mut theta).and(&*m_t).and(&*v_t).for_each(|t, &mm, &vv| {
                let m_hat = mm / corr1;
                let v_hat = vv / corr2;
                // Decoupled decay: shrink weights directly, not through the moments.
                *t = *t - lr * (m_hat / (v_hat.sqrt() + eps) + wd * *t);
            });
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::Linear;
    use ndarray::{arr1, arr2, Array2};
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adamw_minimizes_a_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut lin: Linear<f64> = Linear::new(&mut rng, 2, 1, None);
        let x: Array2<f64> = arr2(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
        let target = arr1(&[2.0, -1.0, 1.0]);
        let mut opt = AdamW::new(0.05, 0.0);
        let loss_at = |lin: &Linear<f64>| {
            let y = lin.forward(&x);
            y.column(0)
                .iter()
                .zip(target.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        };
        let l0 = loss_at(&lin);
        for _ in 0..500 {
            let y = lin.forward(&x);
            let mut dy = Array2::zeros(y.dim());
            for i in 0..3 {
                dy[[i, 0]] = 2.0 * (y[[i, 0]] - target[i]);
            }
            let mut grads = Grads::new();
            lin.backward("", &x, &dy, &mut grads);
            opt.step(&mut lin, &grads);
        }
        let l1 = loss_at(&lin);
        assert!(l1 < 1e-4 && l1 < l0 * 1e-4, "loss {l0} -> {l1}");
    }

    #[test]
    fn weight_decay_shrinks_unused_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut lin: Linear<f64> = Linear::new(&mut rng, 2, 2, None);
        let before = lin.w.mapv(f64::abs).sum();
        let mut opt = AdamW::new(0.01, 0.1);
        // Zero gradients: pure decay path.
        let mut grads = Grads::new();
        grads.add("w", ndarray::ArrayD::zeros(vec![2, 2]));
        grads.add("b", ndarray::ArrayD::zeros(vec![2]));
        for _ in 0..50 {
            opt.step(&mut lin, &grads);
        }
        let after = lin.w.mapv(f64::abs).sum();
        assert!(after < before * 0.97, "{before} -> {after}");
    }
}
