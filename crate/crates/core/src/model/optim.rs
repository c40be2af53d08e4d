use crate::nn::ParamStore;

/// Adam with decoupled weight decay. Consumes the gradients accumulated in a
/// [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let zeros = || store.ids().map(|id| vec![0.0; store.value(id).len()]).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Rescales all gradients so their global norm is at most `max_norm`;
    /// returns the norm before clipping.
    pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
        let norm = store.grad_norm();
        if norm > max_norm {
            let s = max_norm / norm;
            let ids: Vec<_> = store.ids().collect();
            for id in ids {
                store.grad_mut(id).data_mut().iter_mut().for_each(|g| *g *= s);
            }
        }
        norm
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let g = store.grad(id).data().to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.value_mut(id).data_mut();
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                p[j] -= self.lr * (update + self.weight_decay * p[j]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::Tensor;

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.insert("p", Tensor::vector(vec![1.0, -2.0]));
        store.grad_mut(id).data_mut().copy_from_slice(&[0.5, -3.0]);
        let mut opt = AdamW::new(&store, 0.1, 0.0);
        opt.step(&mut store);
        let p = store.value(id).data();
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut store = ParamStore::new();
        let id = store.insert("p", Tensor::vector(vec![2.0]));
        let mut opt = AdamW::new(&store, 0.1, 0.5);
        opt.step(&mut store);
        // zero gradient: only the decay term acts
        assert!((store.value(id).item() - 1.9).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_is_bitwise_frozen() {
        let mut store = ParamStore::new();
        let id = store.insert("p", Tensor::vector(vec![0.1, 1e300, -7.25]));
        let before = store.value(id).clone();
        let mut opt = AdamW::new(&store, 0.0, 0.01);
        for _ in 0..10 {
            store.grad_mut(id).data_mut().copy_from_slice(&[3.0, -1.0, 0.25]);
            opt.step(&mut store);
        }
        assert_eq!(store.value(id).data(), before.data());
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut store = ParamStore::new();
        let a = store.insert("a", Tensor::vector(vec![0.0]));
        let b = store.insert("b", Tensor::vector(vec![0.0]));
        store.grad_mut(a).data_mut()[0] = 30.0;
        store.grad_mut(b).data_mut()[0] = 40.0;
        assert_eq!(AdamW::clip_grad_norm(&mut store, 5.0), 50.0);
        assert!((store.grad_norm() - 5.0).abs() < 1e-12);
    }
}
