use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ParamStore, Tensor};
use crate::scalar::Scalar;

/// Seeded parameter initializer writing straight into a [`ParamStore`].
///
/// Weights are drawn from `U(−1/√fan_in, 1/√fan_in)`, positional terms from
/// `N(0, 0.02²)`; biases start at zero and norm gains at one.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform<T: Scalar>(&mut self, store: &mut ParamStore<T>, name: String, shape: &[usize], fan_in: usize) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..bound)));
        store.insert(name, t);
    }

    pub fn normal<T: Scalar>(&mut self, store: &mut ParamStore<T>, name: String, shape: &[usize], std: f64) {
        let dist = Normal::new(0.0, std).expect("positive std");
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)));
        store.insert(name, t);
    }

    pub fn zeros<T: Scalar>(&mut self, store: &mut ParamStore<T>, name: String, shape: &[usize]) {
        store.insert(name, Tensor::zeros(shape));
    }

    pub fn ones<T: Scalar>(&mut self, store: &mut ParamStore<T>, name: String, shape: &[usize]) {
        store.insert(name, Tensor::full(shape, T::one()));
    }

    /// Weight `[cin, cout]` plus zero bias `[cout]` under `{prefix}.w` / `{prefix}.b`.
    pub fn linear<T: Scalar>(&mut self, store: &mut ParamStore<T>, prefix: &str, cin: usize, cout: usize) {
        self.uniform(store, format!("{prefix}.w"), &[cin, cout], cin);
        self.zeros(store, format!("{prefix}.b"), &[cout]);
    }

    /// Kernel `[k, k, cin, cout]` plus zero bias.
    pub fn conv<T: Scalar>(&mut self, store: &mut ParamStore<T>, prefix: &str, k: usize, cin: usize, cout: usize) {
        self.uniform(store, format!("{prefix}.w"), &[k, k, cin, cout], k * k * cin);
        self.zeros(store, format!("{prefix}.b"), &[cout]);
    }

    pub fn norm<T: Scalar>(&mut self, store: &mut ParamStore<T>, prefix: &str, c: usize) {
        self.ones(store, format!("{prefix}.g"), &[c]);
        self.zeros(store, format!("{prefix}.b"), &[c]);
    }
}
