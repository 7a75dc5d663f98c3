use serde::{Deserialize, Serialize};

use super::{Params, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to matrices only (not to biases or norm gains).
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamWConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Adam with decoupled weight decay. Moment buffers are laid out in the
/// walk order of the parameter collection passed to [`AdamW::step`].
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW { config, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<P: Params<T>>(&mut self, params: &mut P, grads: &P) {
        let grads: Vec<&Tensor<T>> = grads.named_tensors().into_iter().map(|(_, t)| t).collect();
        self.step_tensors(params.all_tensors_mut(), grads);
    }

    /// Steps an explicit list of tensors; the list layout must not change between calls.
    pub fn step_tensors(&mut self, mut params: Vec<&mut Tensor<T>>, grads: Vec<&Tensor<T>>) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient layout mismatch");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let lr = T::lit(c.lr);
        let eps = T::lit(c.eps);
        let one = T::one();
        for (i, p) in params.iter_mut().enumerate() {
            let g = &grads[i].data;
            let decay = if p.shape.len() >= 2 { T::lit(1.0 - c.lr * c.weight_decay) } else { one };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.data.len() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p.data[j] = p.data[j] * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimises_a_quadratic() {
        let mut x = Tensor::from_vec(&[2], vec![3.0f64, -2.0]);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..AdamWConfig::with_lr(0.1) });
        for _ in 0..500 {
            let g = Tensor::from_vec(&[2], x.data.iter().map(|v| 2.0 * v).collect());
            opt.step(&mut x, &g);
        }
        assert!(x.data.iter().all(|v| v.abs() < 1e-2), "{:?}", x.data);
    }

    #[test]
    fn zero_gradient_first_step_leaves_vectors_unchanged() {
        let mut x = Tensor::from_vec(&[3], vec![1.0f32, 2.0, 3.0]);
        let mut opt = AdamW::new(AdamWConfig::with_lr(1e-3));
        opt.step(&mut x, &Tensor::zeros(&[3]));
        assert_eq!(x.data, vec![1.0, 2.0, 3.0]);
    }
}
