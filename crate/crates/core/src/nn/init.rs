use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numerics::{ParamId, ParamStore, Tensor};

/// Parameter factory: registers named tensors in a store, filling them
/// either from a seeded generator or with zeros (shape-only probes used by
/// cost accounting).
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    rng: Option<ChaCha8Rng>,
}

impl<'a> Init<'a> {
    pub fn seeded(store: &'a mut ParamStore, seed: u64) -> Self {
        Init {
            store,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn zeros(store: &'a mut ParamStore) -> Self {
        Init { store, rng: None }
    }

    /// Uniform Glorot initialization for a `[fan_in × fan_out]` matrix.
    pub fn xavier(&mut self, name: &str, fan_in: usize, fan_out: usize) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(name, &[fan_in, fan_out], bound)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let t = match &mut self.rng {
            Some(rng) => {
                let n = shape.iter().product();
                let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
                Tensor::new(shape.to_vec(), data).expect("shape product")
            }
            None => Tensor::zeros(shape),
        };
        self.store.add(name, t)
    }

    /// Approximately normal entries with the given standard deviation
    /// (sum of uniforms, deterministic and cheap).
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let t = match &mut self.rng {
            Some(rng) => {
                let n = shape.iter().product();
                let data = (0..n)
                    .map(|_| {
                        let s: f64 = (0..12).map(|_| rng.gen::<f64>()).sum();
                        (s - 6.0) * std
                    })
                    .collect();
                Tensor::new(shape.to_vec(), data).expect("shape product")
            }
            None => Tensor::zeros(shape),
        };
        self.store.add(name, t)
    }

    pub fn zeros_param(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::zeros(shape))
    }

    pub fn ones_param(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::full(shape, 1.0))
    }
}
