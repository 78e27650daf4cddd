use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Bias-corrected Adam with one pair of moment buffers per parameter.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![T::zero(); p.value.len()]).collect();
        Self { config, step: 0, first: zeros(), second: zeros() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients held in `store`. Every parameter
    /// must carry a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if let Some((_, p)) = store.iter().find(|(_, p)| p.grad.is_none()) {
            return Err(Error::MissingGrad(p.name.clone()));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - beta1), T::from_f64(1.0 - beta2));
        let (step_size, eps) = (T::from_f64(lr / c1), T::from_f64(eps));
        let inv_sqrt_c2 = T::from_f64(1.0 / c2.sqrt());
        for ((p, m), v) in store.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let grad = p.grad.as_ref().expect("checked above");
            for (((w, &g), mi), vi) in p.value.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + one_b1 * g;
                *vi = b2 * *vi + one_b2 * g * g;
                *w = *w - step_size * *mi / (vi.sqrt() * inv_sqrt_c2 + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(value: f64, grad: Option<f64>) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add("x", Tensor::from_f64(vec![1], &[value]).unwrap()).unwrap();
        if let Some(g) = grad {
            s.accumulate_grad(id, &Tensor::from_f64(vec![1], &[g]).unwrap(), 1.0).unwrap();
        }
        s
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut s = store_with(1.25, Some(0.0));
        let mut adam = Adam::new(&s, AdamConfig::with_lr(0.1));
        adam.step(&mut s).unwrap();
        assert_eq!(s.iter().next().unwrap().1.value.data(), &[1.25]);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient() {
        for g in [3.0, -0.02] {
            let mut s = store_with(0.0, Some(g));
            let mut adam = Adam::new(&s, AdamConfig::with_lr(0.01));
            adam.step(&mut s).unwrap();
            // m̂ = g, v̂ = g², update = lr·g/(|g|+ε)
            let expect = -0.01 * g / (g.abs() + 1e-8);
            let got = s.iter().next().unwrap().1.value.data()[0];
            assert!((got - expect).abs() < 1e-15, "{got} vs {expect}");
            assert!((got.abs() - 0.01).abs() < 1e-6);
        }
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut s = store_with(0.0, None);
        let mut adam = Adam::new(&s, AdamConfig::default());
        assert_eq!(adam.step(&mut s), Err(Error::MissingGrad("x".into())));
    }

    #[test]
    fn quadratic_bowl_converges() {
        // f(x) = (x - 3)²
        let mut s = store_with(-2.0, None);
        let id = s.id("x").unwrap();
        let mut adam = Adam::new(&s, AdamConfig::with_lr(0.05));
        for _ in 0..500 {
            let x = s.value(id).data()[0];
            s.zero_grads();
            s.accumulate_grad(id, &Tensor::from_f64(vec![1], &[2.0 * (x - 3.0)]).unwrap(), 1.0).unwrap();
            adam.step(&mut s).unwrap();
        }
        let x = s.value(id).data()[0];
        assert!((x - 3.0).abs() < 1e-2, "ended at {x}");
    }
}
