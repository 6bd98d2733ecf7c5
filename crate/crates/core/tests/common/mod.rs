//! Helpers shared by the integration targets.
#![allow(dead_code)]

use grokwatch::harness::run::prepare;
use grokwatch::harness::ExperimentConfig;
use grokwatch::models::{build_model, forward_loss, loss_and_grad, ModelConfig};
use grokwatch::params::NamedParams;
use grokwatch::tasks::TaskBatch;
use grokwatch_tensor::gradcheck::{central_diff, relative_error};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Model, parameters and a small training batch drawn from a task preset.
pub fn model_and_batch(config: &ExperimentConfig, rows: usize) -> (ModelConfig, NamedParams<f32>, TaskBatch) {
    let data = prepare(config).unwrap();
    let params = build_model(&data.model, 42).unwrap();
    let batch = data.train.batch(&(0..rows).collect::<Vec<_>>());
    (data.model, params, batch)
}

/// Small encoder-decoder over the built-in SCAN grammar.
pub fn small_scan() -> ExperimentConfig {
    let mut c = ExperimentConfig::scan();
    for (k, v) in [("d_model", "16"), ("n_layers", "1"), ("n_heads", "2"), ("d_ff", "24"), ("test_limit", "10")] {
        c.set(k, v).unwrap();
    }
    c
}

/// `per_tensor` random coordinates from every parameter tensor.
pub fn sample_coords(params: &NamedParams<f32>, per_tensor: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for e in params.view().entries() {
        let r = e.range();
        for _ in 0..per_tensor.min(r.len()) {
            out.push(rng.random_range(r.clone()));
        }
    }
    out
}

/// Worst relative error of the analytic gradient in `T` against central
/// differences of the f64 loss on `coords`.
pub fn worst_gradient_error<T: grokwatch_tensor::Scalar>(
    model: &ModelConfig,
    params: &NamedParams<f32>,
    batch: &TaskBatch,
    coords: &[usize],
    floor: f64,
) -> f64 {
    let shadow: NamedParams<f64> = params.cast();
    let (_, g) = loss_and_grad(model, &params.cast::<T>(), batch).unwrap();
    let view = shadow.view().clone();
    let f = |x: &[f64]| forward_loss(model, &NamedParams::from_flat(view.clone(), x.to_vec()), batch).unwrap().0;
    let numeric = central_diff(f, shadow.flat(), coords, 1e-6);
    coords
        .iter()
        .zip(&numeric)
        .map(|(&i, &n)| relative_error(g.flat()[i].as_f64(), n, floor))
        .fold(0.0, f64::max)
}
