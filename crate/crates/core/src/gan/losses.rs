//! Critic, gradient-penalty and generator objectives.

use fsgan_autodiff::{Tensor, Var};
use rand::Rng;

use super::mining::{mine, triplet_loss, Triplet};
use crate::data::{stack, ClassId, SpectrumSample};
use crate::error::{Error, Result};
use crate::nn::{Bound, Model, Pass, Trace};

/// `eps * real + (1 - eps) * fake`, one `eps` per row.
pub fn interpolate(real: &Tensor, fake: &Tensor, eps: &[f64]) -> Result<Tensor> {
    if real.shape() != fake.shape() || real.shape()[0] != eps.len() {
        return Err(Error::Input(format!(
            "interpolation of {:?} and {:?} with {} weights",
            real.shape(),
            fake.shape(),
            eps.len()
        )));
    }
    let width = real.len() / eps.len();
    let mut out = real.clone();
    for (i, row) in out.data_mut().chunks_mut(width).enumerate() {
        let f = fake.row(i);
        for (v, fv) in row.iter_mut().zip(f) {
            *v = eps[i] * *v + (1.0 - eps[i]) * fv;
        }
    }
    Ok(out)
}

/// `mean((|grad_x D(x)|_2 - 1)^2)` over the rows of `x`, differentiable with
/// respect to the critic parameters in `bound`.
pub fn gradient_penalty<'t, R: Rng + ?Sized>(
    critic: &Model,
    bound: &Bound<'t>,
    x: &Tensor,
    pass: &Pass,
    rng: &mut R,
) -> Result<(Var<'t>, Trace)> {
    let tape = bound
        .vars
        .first()
        .map(|v| v.tape())
        .ok_or_else(|| Error::Spec("critic has no parameters".into()))?;
    let (_, grad, trace) = critic.forward_with_input_grad(bound, tape.constant(x.clone()), pass, rng)?;
    let penalty = grad.euclidean_norm().add_scalar(-1.0).square().reduce_mean();
    Ok((penalty, trace))
}

/// Per-bin map `(x - mean) * scale` in front of the triplet encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Tensor,
    pub scale: Tensor,
}

impl Standardizer {
    pub fn identity(bins: usize) -> Self {
        Standardizer {
            mean: Tensor::zeros(vec![bins]),
            scale: Tensor::ones(vec![bins]),
        }
    }

    /// Mean and inverse standard deviation per bin; constant bins keep scale 1.
    pub fn fit(samples: &[&SpectrumSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::MissingData("no samples to standardize".into()));
        }
        let x = stack(samples.iter().copied());
        let (n, bins) = (samples.len() as f64, x.shape()[1]);
        let mut mean = vec![0.0; bins];
        for row in x.rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; bins];
        for row in x.rows() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let scale = var.iter().map(|v| if v.sqrt() > 1e-9 { 1.0 / v.sqrt() } else { 1.0 }).collect();
        Ok(Standardizer {
            mean: Tensor::vector(mean),
            scale: Tensor::vector(scale),
        })
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let width = self.mean.len();
        if x.shape().last() != Some(&width) {
            return Err(Error::Input(format!("standardizer for {width} bins got {:?}", x.shape())));
        }
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(width) {
            for ((v, m), s) in row.iter_mut().zip(self.mean.data()).zip(self.scale.data()) {
                *v = (*v - m) * s;
            }
        }
        Ok(out)
    }

    pub fn apply_var<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let tape = x.tape();
        Ok(x.sub(tape.constant(self.mean.clone()))?.mul(tape.constant(self.scale.clone()))?)
    }
}

pub struct CriticLoss<'t> {
    pub total: Var<'t>,
    /// `mean D(fake) - mean D(real)`
    pub wasserstein: f64,
    pub penalty: f64,
}

/// `mean D(fake) - mean D(real) + lambda_gp * GP(interpolate(real, fake, eps))`.
#[allow(clippy::too_many_arguments)]
pub fn critic_loss<'t, R: Rng + ?Sized>(
    critic: &Model,
    bound: &Bound<'t>,
    fake: &Tensor,
    real: &Tensor,
    eps: &[f64],
    lambda_gp: f64,
    pass: &Pass,
    rng: &mut R,
) -> Result<CriticLoss<'t>> {
    let tape = bound
        .vars
        .first()
        .map(|v| v.tape())
        .ok_or_else(|| Error::Spec("critic has no parameters".into()))?;
    let (d_fake, _) = critic.forward(bound, tape.constant(fake.clone()), pass, rng)?;
    let (d_real, _) = critic.forward(bound, tape.constant(real.clone()), pass, rng)?;
    let w = d_fake.reduce_mean().sub(d_real.reduce_mean())?;
    let (gp, _) = gradient_penalty(critic, bound, &interpolate(real, fake, eps)?, pass, rng)?;
    let total = w.add(gp.scale(lambda_gp))?;
    Ok(CriticLoss {
        wasserstein: w.value().item(),
        penalty: gp.value().item(),
        total,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorWeights {
    pub lambda_d: f64,
    pub lambda_c: f64,
    pub alpha: f64,
}

pub struct GeneratorLoss<'t> {
    pub total: Var<'t>,
    /// `mean(-D(fake))`
    pub adversarial: f64,
    pub triplet: f64,
    pub triplets: Vec<Triplet>,
}

/// Adversarial term plus the triplet term with synthetic anchors and real
/// positives and negatives. `real_embeddings` are the encoder outputs for the
/// standardized real samples labeled `real_labels`.
#[allow(clippy::too_many_arguments)]
pub fn generator_loss<'t, R: Rng + ?Sized>(
    critic: &Model,
    critic_bound: &Bound<'t>,
    critic_pass: &Pass,
    encoder: &Model,
    encoder_bound: &Bound<'t>,
    encoder_input: &Standardizer,
    fake: Var<'t>,
    fake_labels: &[ClassId],
    real_embeddings: &Tensor,
    real_labels: &[ClassId],
    weights: GeneratorWeights,
    rng: &mut R,
) -> Result<GeneratorLoss<'t>> {
    let tape = fake.tape();
    let (d_fake, _) = critic.forward(critic_bound, fake, critic_pass, rng)?;
    let adversarial = d_fake.reduce_mean().neg();
    let (anchors, _) = encoder.forward(encoder_bound, encoder_input.apply_var(fake)?, &Pass::infer(), rng)?;
    let triplets = mine(
        &anchors.value(),
        fake_labels,
        real_embeddings,
        real_labels,
        weights.alpha,
        false,
    );
    let pool = tape.constant(real_embeddings.clone());
    let trip = triplet_loss(anchors, pool, &triplets, weights.alpha)?;
    let total = adversarial.scale(weights.lambda_d).add(trip.scale(weights.lambda_c))?;
    Ok(GeneratorLoss {
        adversarial: adversarial.value().item(),
        triplet: trip.value().item(),
        total,
        triplets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::build_discriminator;
    use fsgan_autodiff::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear_critic(w: &[f64]) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = Model::new(build_discriminator(w.len(), &[]).unwrap(), &mut rng).unwrap();
        m.params_mut()[0] = Tensor::new(vec![w.len(), 1], w.to_vec()).unwrap();
        m
    }

    #[test]
    fn unit_and_triple_norm_linear_critics() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(vec![4, 3], 2.0, &mut rng);
        for (w, expect) in [(vec![0.6, 0.8, 0.0], 0.0), (vec![1.0, 2.0, 2.0], 4.0)] {
            let d = linear_critic(&w);
            let tape = Tape::new();
            let bound = d.bind(&tape, true);
            let (gp, _) = gradient_penalty(&d, &bound, &x, &Pass::train(), &mut rng).unwrap();
            assert!((gp.value().item() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_batches_without_penalty_cost_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = Model::new(build_discriminator(6, &[5, 3]).unwrap(), &mut rng).unwrap();
        let x = Tensor::randn(vec![4, 6], 1.0, &mut rng);
        let tape = Tape::new();
        let bound = d.bind(&tape, true);
        let l = critic_loss(&d, &bound, &x, &x, &[0.5; 4], 0.0, &Pass::infer(), &mut rng).unwrap();
        assert_eq!(l.total.value().item(), 0.0);
    }

    #[test]
    fn interpolation_endpoints() {
        let a = Tensor::ones(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        let x = interpolate(&a, &b, &[1.0, 0.0]).unwrap();
        assert_eq!(x.row(0), &[1.0; 3]);
        assert_eq!(x.row(1), &[0.0; 3]);
        assert!(interpolate(&a, &b, &[1.0]).is_err());
    }
}
