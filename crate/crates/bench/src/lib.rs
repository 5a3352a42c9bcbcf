//! Fixtures shared by the benchmarks.

use std::sync::Arc;

use covsegnet_core::backend::{EagerBackend, ShapeBackend};
use covsegnet_core::params::ParamStore;
use covsegnet_core::{Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Standard-normal tensor of the given shape.
pub fn feature_map(shape: &[usize], seed: u64) -> Tensor<f32> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Initialized parameters for whatever `f` declares when traced on `input`.
pub fn params_for<F>(input: &[usize], seed: u64, f: F) -> Result<ParamStore<f32>>
where
    F: Fn(&mut ShapeBackend, &Vec<usize>) -> Result<Vec<usize>>,
{
    let mut sb = ShapeBackend::new();
    f(&mut sb, &input.to_vec())?;
    ParamStore::init(&sb.specs, seed)
}

/// Runs `f` eagerly (inference mode) on `x`.
pub fn run_eager<F>(store: &ParamStore<f32>, x: &Arc<Tensor<f32>>, f: F) -> Result<Arc<Tensor<f32>>>
where
    F: Fn(&mut EagerBackend<'_, f32>, &Arc<Tensor<f32>>) -> Result<Arc<Tensor<f32>>>,
{
    let mut eb = EagerBackend::new(store);
    f(&mut eb, x)
}
