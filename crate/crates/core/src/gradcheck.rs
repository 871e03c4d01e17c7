//! Finite-difference verification of the full model's parameter gradients.

use unifiq_tensor::{finite_diff_check, GradCheckOptions, GradCheckReport, Tape, Var};

use crate::datagen::{apply_distortion, derive_seed, gen_base_image, DistortionKind, DistortionSpec};
use crate::error::Result;
use crate::model::{ModePair, Model};
use crate::train::batch_loss;
use crate::weights::WeightStore;

/// Central-difference step used by the model suite (in `f64`).
pub const EPSILON: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-3;

/// Checks the gradient of the batch L2 loss with respect to every weight
/// tensor, evaluated in `f64`.
pub fn model_grad_check(
    model: &Model,
    weights: &WeightStore,
    batch: &[(ModePair, f64)],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let params = model.params.to_f64(weights)?;
    finite_diff_check(
        |tape: &mut Tape<f64>, p: &[Var]| batch_loss(tape, p, model, batch),
        &params,
        opts,
    )
}

/// A two-sample batch covering both modes: one NR pair and one FR pair built
/// from synthetic images.
pub fn probe_batch(seed: u64) -> Result<Vec<(ModePair, f64)>> {
    let a = gen_base_image(derive_seed(seed, "probe-a"), 64)?;
    let b = gen_base_image(derive_seed(seed, "probe-b"), 64)?;
    let spec_a = DistortionSpec::new(DistortionKind::GaussianNoise, 3, derive_seed(seed, "probe-noise"))?;
    let spec_b = DistortionSpec::new(DistortionKind::BlockOcclusion, 2, derive_seed(seed, "probe-block"))?;
    Ok(vec![
        (ModePair::nr(apply_distortion(&a, &spec_a)), 0.3),
        (ModePair::fr(apply_distortion(&b, &spec_b), b)?, 0.7),
    ])
}

/// Full-model check on fresh weights: `per_param` sampled elements per
/// weight tensor (always including its largest gradient), or every element
/// when `None`.
pub fn default_grad_check(model: &Model, seed: u64, per_param: Option<usize>) -> Result<GradCheckReport> {
    let weights = model.init_weights(derive_seed(seed, "init"));
    let batch = probe_batch(seed)?;
    let mut opts = GradCheckOptions::new(EPSILON, TOLERANCE);
    if let Some(k) = per_param {
        opts = opts.sampled(k, derive_seed(seed, "elements"));
    }
    model_grad_check(model, &weights, &batch, &opts)
}
