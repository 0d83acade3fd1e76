//! Adaptive-moment optimizer with bias correction, keyed by parameter name.

use std::collections::BTreeMap;

use ndarray::ArrayD;

/// Accumulated gradients for one optimization step, keyed like the model's
/// named parameters. Iteration order is the deterministic BTree order.
#[derive(Default, Debug)]
pub struct GradStore {
    grads: BTreeMap<String, ArrayD<f32>>,
}

impl GradStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add `g` into the slot for `name` (accumulating if already present).
    pub fn add(&mut self, name: &str, g: ArrayD<f32>) {
        match self.grads.get_mut(name) {
            Some(acc) => *acc += &g,
            None => {
                self.grads.insert(name.to_string(), g);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f32>> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f32>)> {
        self.grads.iter()
    }

    pub fn scale(&mut self, factor: f32) {
        for g in self.grads.values_mut() {
            g.mapv_inplace(|v| v * factor);
        }
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step_count: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        Self {
            beta1: beta1 as f32,
            beta2: beta2 as f32,
            eps: 1e-8,
            step_count: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update over `params`; parameters without a gradient entry are left
    /// untouched (their moments do not advance either).
    pub fn step(&mut self, params: &mut [(String, &mut [f32])], grads: &GradStore, lr: f64) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let lr = lr as f32;

        for (name, w) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let gs = g.as_slice().expect("gradient must be standard layout");
            assert_eq!(gs.len(), w.len(), "gradient size mismatch for {name}");
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; w.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; w.len()]);
            for i in 0..w.len() {
                let gi = gs[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                w[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }

    /// Moment tensors and step counter, for checkpointing.
    #[allow(clippy::type_complexity)]
    pub fn export_state(&self) -> (u64, BTreeMap<String, Vec<f32>>, BTreeMap<String, Vec<f32>>) {
        (self.step_count, self.m.clone(), self.v.clone())
    }

    pub fn import_state(
        &mut self,
        step_count: u64,
        m: BTreeMap<String, Vec<f32>>,
        v: BTreeMap<String, Vec<f32>>,
    ) {
        self.step_count = step_count;
        self.m = m;
        self.v = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut adam = Adam::new(0.9, 0.999);
        let mut w = vec![1.0f32, -2.0];
        let mut grads = GradStore::new();
        grads.add("w", ArrayD::from_shape_vec(ndarray::IxDyn(&[2]), vec![0.5, -3.0]).unwrap());
        let mut params = vec![("w".to_string(), w.as_mut_slice())];
        adam.step(&mut params, &grads, 0.1);
        // After bias correction the first update is lr * g / (|g| + eps) = lr * sign(g).
        assert!((w[0] - 0.9).abs() < 1e-5, "{}", w[0]);
        assert!((w[1] + 1.9).abs() < 1e-5, "{}", w[1]);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut adam = Adam::new(0.9, 0.999);
        let mut w = vec![5.0f32, -4.0];
        for _ in 0..2000 {
            let g: Vec<f32> = w.iter().map(|x| 2.0 * x).collect();
            let mut grads = GradStore::new();
            grads.add("w", ArrayD::from_shape_vec(ndarray::IxDyn(&[2]), g).unwrap());
            let mut params = vec![("w".to_string(), w.as_mut_slice())];
            adam.step(&mut params, &grads, 0.05);
        }
        assert!(w.iter().all(|x| x.abs() < 1e-2), "{w:?}");
    }

    #[test]
    fn gradstore_accumulates() {
        let mut g = GradStore::new();
        g.add("a", ArrayD::from_elem(ndarray::IxDyn(&[3]), 1.0));
        g.add("a", ArrayD::from_elem(ndarray::IxDyn(&[3]), 2.5));
        assert_eq!(g.get("a").unwrap()[[0]], 3.5);
    }
}
