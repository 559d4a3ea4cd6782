use crate::autograd::ParamId;
use crate::model::ParamStore;

/// Adam with bias correction. Moments are kept per parameter tensor; a
/// tensor that received no gradient in a step is left untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub steps: Vec<u64>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let sizes: Vec<usize> = store
            .entries()
            .map(|(_, e)| if e.kind.trainable() { e.value.numel() } else { 0 })
            .collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            steps: vec![0; sizes.len()],
        }
    }

    /// Applies one update to `id` with gradient `grad` (already scaled).
    pub fn update(&mut self, store: &mut ParamStore, id: ParamId, grad: &[f64], scale: f64) {
        let i = id.0;
        self.steps[i] += 1;
        let t = self.steps[i] as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (m, v) = (&mut self.m[i], &mut self.v[i]);
        let p = store.get_mut(id).data_mut();
        for k in 0..p.len() {
            let g = grad[k] * scale;
            m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
            v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            p[k] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::ParamKind;

    #[test]
    fn first_step_moves_by_learning_rate_against_gradient_sign() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let id = store.weight("w".into(), vec![3], 1, &mut rng);
        store.filled("rm".into(), 2, 0.0, ParamKind::RunningMean);
        let before = store.get(id).data().to_vec();
        let mut adam = Adam::new(&store, 0.01, 0.9, 0.999, 1e-8);
        assert!(adam.m[1].is_empty());
        adam.update(&mut store, id, &[2.0, -0.5, 0.0], 1.0);
        let after = store.get(id).data();
        assert!((after[0] - (before[0] - 0.01)).abs() < 1e-9);
        assert!((after[1] - (before[1] + 0.01)).abs() < 1e-9);
        assert_eq!(after[2], before[2]);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.filled("x".into(), 2, 5.0, ParamKind::Weight);
        let mut adam = Adam::new(&store, 0.1, 0.9, 0.999, 1e-8);
        for _ in 0..500 {
            let g: Vec<f64> = store.get(id).data().iter().map(|x| 2.0 * (x - 1.0)).collect();
            adam.update(&mut store, id, &g, 1.0);
        }
        assert!(store.get(id).data().iter().all(|x| (x - 1.0).abs() < 1e-2));
    }
}
