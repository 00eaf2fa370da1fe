//! End-to-end finite-difference check of a whole model.

use fat_core::gradcheck::grad_check_coords;
use fat_core::model::{ModelConfig, Task};
use fat_core::nn::{cross_entropy, mse_loss};
use fat_core::{Model, ParamId, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::synth::{generate_sample, GenerationSpec};

/// Worst relative error over `per_param` random coordinates of every
/// trainable parameter, for the training loss on one synthetic sample.
///
/// Zero-initialized paths are given small random values first so that
/// every parameter influences the loss.
pub fn model_grad_check(cfg: ModelConfig, seed: u64, per_param: usize, eps: f64) -> Result<f64> {
    let mut model = Model::<f64>::new(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164);
    for p in model.store.iter_mut() {
        if p.trainable && p.value.data().iter().all(|&v| v == 0.0) {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.1 * (rng.random::<f64>() - 0.5));
        }
    }
    let spec = GenerationSpec::for_model(&model.cfg);
    let sample = generate_sample(seed, &spec, None)?;
    let input = sample.to_input(model.cfg.seg_per_frame);
    let mut coords: Vec<(ParamId, usize)> = Vec::new();
    for (id, p) in model.store.iter() {
        if p.trainable {
            let n = p.value.numel();
            coords.extend((0..per_param.min(n)).map(|_| (id, rng.random_range(0..n))));
        }
    }
    let task = model.cfg.task;
    let label = sample.label;
    let class = sample.class.unwrap_or(0);
    grad_check_coords(
        &model.store,
        &coords,
        |g| {
            let pred = model.forward_one(g, &input)?;
            match task {
                Task::Regression => {
                    let t = g.constant(Tensor::new(vec![1, 5], label.to_vec())?);
                    mse_loss(g, pred, t)
                }
                Task::Classification(_) => cross_entropy(g, pred, &[class]),
            }
        },
        eps,
    )
}
