use rand::Rng;

use super::{backward_batch, forward_batch, Model};
use crate::contrastive::{loss_value, make_contrastive_batch, LossKind, LossSpec, PairBatch};
use crate::corpus::{build_vocabulary, tokenize};
use crate::encoders::{EncoderKind, EncoderSpec};
use crate::error::{Result, VeteError};
use crate::seed::{derive_seed, rng_from_seed};

/// Largest `|analytic − numeric| / max(1, |numeric|)` over all coordinates,
/// with `numeric = (f(θ + h·e_i) − f(θ − h·e_i)) / 2h`.
///
/// A non-finite objective value counts as an infinite error.
pub fn finite_difference_check<F>(
    mut objective: F,
    params: &[f64],
    analytic: &[f64],
    h: f64,
) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(VeteError::Config(format!(
            "step h={h} outside [1e-7, 1e-3]"
        )));
    }
    if params.len() != analytic.len() {
        return Err(VeteError::Shape {
            expected: params.len(),
            actual: analytic.len(),
        });
    }
    let mut theta = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..theta.len() {
        let orig = theta[i];
        theta[i] = orig + h;
        let plus = objective(&theta);
        theta[i] = orig - h;
        let minus = objective(&theta);
        theta[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        if !err.is_finite() {
            return Ok(f64::INFINITY);
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Checks [`backward_batch`] against central differences of the batch loss
/// over every model parameter.
pub fn model_gradient_check(
    model: &Model,
    batch: &PairBatch,
    loss: &LossSpec,
    h: f64,
) -> Result<f64> {
    let (_, grads) = backward_batch(model, batch, loss)?;
    let analytic = grads.flat();
    let mut probe = model.clone();
    let objective = |theta: &[f64]| {
        probe.set_flat_params(theta);
        forward_batch(&probe, batch)
            .and_then(|sims| loss_value(loss, &sims, &batch.labels))
            .unwrap_or(f64::NAN)
    };
    finite_difference_check(objective, &model.flat_params(), &analytic, h)
}

/// The losses covered by [`gradient_check_grid`].
pub fn grid_losses() -> Vec<LossSpec> {
    [
        LossKind::Pearson,
        LossKind::Covariance,
        LossKind::Skt { alpha: 1.0 },
        LossKind::Rank { margin: 0.2 },
    ]
    .into_iter()
    .map(LossSpec::new)
    .collect()
}

pub const TOY_BATCH: usize = 3;
pub const TOY_DIM: usize = 4;
pub const TOY_FEATURES: usize = 8;

/// A small random model and contrastive batch. Odd instances normalize the
/// sentence output and use a two-layer RNN whose width equals the embedding
/// size; even ones use one narrower layer.
pub fn toy_instance(kind: EncoderKind, instance: usize, seed: u64) -> Result<(Model, PairBatch)> {
    let mut rng = rng_from_seed(seed);
    let words = ["red", "car", "dog", "runs", "on", "grass"];
    let vocab = build_vocabulary(&[tokenize(&words.join(" "))?], 1);
    let odd = instance % 2 == 1;
    let (layers, hidden) = if odd { (2, TOY_DIM) } else { (1, 3) };
    let mut spec = EncoderSpec::from_kind(kind, layers, hidden);
    spec.normalize_output = odd;
    let model = Model::init(&spec, vocab.clone(), TOY_DIM, TOY_FEATURES, 0.5, &mut rng)?;
    let sentences = (0..TOY_BATCH)
        .map(|_| {
            let len = rng.random_range(1..=4);
            let mut ids = vec![crate::corpus::BOS_ID];
            ids.extend((0..len).map(|_| rng.random_range(3..vocab.len())));
            ids.push(crate::corpus::EOS_ID);
            ids
        })
        .collect();
    let images = (0..TOY_BATCH)
        .map(|_| {
            (0..TOY_FEATURES)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect()
        })
        .collect();
    let batch = make_contrastive_batch(images, sentences, &mut rng)?;
    Ok((model, batch))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridCheck {
    pub encoder: EncoderKind,
    pub loss: LossSpec,
    pub instances: usize,
    /// Worst relative error over all instances.
    pub max_error: f64,
}

/// Gradient checks for every encoder kind against every loss in
/// [`grid_losses`], on `instances` toy problems each.
pub fn gradient_check_grid(instances: usize, h: f64, seed: u64) -> Result<Vec<GridCheck>> {
    let mut out = Vec::new();
    for (e, kind) in EncoderKind::ALL.into_iter().enumerate() {
        for (l, loss) in grid_losses().into_iter().enumerate() {
            let mut worst = 0.0f64;
            for i in 0..instances {
                let s = derive_seed(seed, (e * 1000 + l * 100 + i) as u64);
                let (model, batch) = toy_instance(kind, i, s)?;
                worst = worst.max(model_gradient_check(&model, &batch, &loss, h)?);
            }
            out.push(GridCheck {
                encoder: kind,
                loss,
                instances,
                max_error: worst,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_exact() {
        let theta = [0.3, -1.2, 2.5, 0.0];
        let analytic: Vec<f64> = theta.iter().map(|x| 2.0 * x).collect();
        let err =
            finite_difference_check(|t| t.iter().map(|x| x * x).sum(), &theta, &analytic, 1e-5)
                .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn doubled_gradient_is_flagged() {
        let theta = [0.25, -0.1];
        let wrong: Vec<f64> = theta.iter().map(|x| 4.0 * x).collect();
        let err = finite_difference_check(|t| t.iter().map(|x| x * x).sum(), &theta, &wrong, 1e-5)
            .unwrap();
        assert!((err - 0.5).abs() < 1e-6, "{err}");
    }

    #[test]
    fn step_size_outside_range_is_rejected() {
        assert!(finite_difference_check(|_| 0.0, &[1.0], &[0.0], 1e-2).is_err());
    }
}
