use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_diff_check, FdConfig, GradReport, Params};
use crate::error::Result;
use crate::network::{Model, ModelSpec};
use crate::tensor::Tensor;

/// Smallest side of at least 16 pixels the spec accepts.
pub fn probe_size(spec: &ModelSpec) -> usize {
    let d = spec.input_divisor();
    16usize.div_ceil(d) * d
}

/// Random probe image and label for a gradient check.
pub fn probe_sample(spec: &ModelSpec, seed: u64) -> Result<(Tensor<f64>, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let s = probe_size(spec);
    let img = Tensor::from_fn(&[s, s, spec.in_channels], |_| rng.gen_range(-1.0..1.0))?;
    Ok((img, (seed % spec.num_classes as u64) as usize))
}

/// `ce(z) - ce(z0)` for softmax cross-entropy, evaluated without forming
/// either loss so that the difference keeps its own relative precision.
pub fn cross_entropy_shift(z: &[f64], z0: &[f64], label: usize) -> f64 {
    let m = z0.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = z0.iter().map(|v| (v - m).exp()).collect();
    let total: f64 = w.iter().sum();
    let ratio: f64 = w
        .iter()
        .zip(z.iter().zip(z0))
        .map(|(wk, (a, b))| wk * (a - b).exp_m1())
        .sum::<f64>()
        / total;
    ratio.ln_1p() - (z[label] - z0[label])
}

/// Reverse-mode gradients of the cross-entropy loss on one probe sample
/// against central differences, in f64.
///
/// The objective handed to the difference quotient is the loss minus its
/// value at the probe point; the quotient is unchanged but
/// cancellation no longer costs an ulp of the full loss per evaluation.
pub fn model_gradcheck(spec: &ModelSpec, cfg: FdConfig) -> Result<GradReport> {
    let model = Model::<f64>::build(spec)?;
    let (img, label) = probe_sample(spec, cfg.seed)?;
    let (_, grads) = model.loss_and_grad(&img, label)?;
    let z0 = model.logits(&img)?;
    let names = model.params().names().to_vec();
    let f = |ts: &[Tensor<f64>]| -> Result<f64> {
        let mut p = Params::new();
        for (n, t) in names.iter().zip(ts) {
            p.insert(n.clone(), t.clone())?;
        }
        let m = Model::from_params(spec, p)?;
        let z = m.logits(&img)?;
        Ok(cross_entropy_shift(z.data(), z0.data(), label))
    };
    finite_diff_check(f, &names, model.params().tensors(), &grads, cfg)
}
