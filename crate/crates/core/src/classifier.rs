//! Softmax cross-entropy training for the conv classifiers.

use fsgan_autodiff::{AdamConfig, AdamState, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{stack, ClassId, SpectrumSample};
use crate::error::{Error, Result};
use crate::nn::{argmax_rows, Model, ModelSpec, Pass};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierTraining {
    pub epochs: usize,
    pub batch_size: usize,
    /// Share of the training set held out for the accuracy curve.
    pub holdout_fraction: f64,
    pub adam: AdamConfig,
}

impl Default for ClassifierTraining {
    fn default() -> Self {
        ClassifierTraining {
            epochs: 20,
            batch_size: 64,
            holdout_fraction: 0.1,
            adam: AdamConfig::default(),
        }
    }
}

pub struct TrainedClassifier {
    pub model: Model,
    /// Class id of each output unit.
    pub classes: Vec<ClassId>,
    /// Held-out accuracy after each epoch (empty when nothing is held out).
    pub curve: Vec<f64>,
}

impl TrainedClassifier {
    pub fn predict(&self, samples: &[&SpectrumSample]) -> Result<Vec<ClassId>> {
        predict(&self.model, &self.classes, samples)
    }

    pub fn accuracy(&self, samples: &[&SpectrumSample]) -> Result<f64> {
        let pred = self.predict(samples)?;
        Ok(plain_accuracy(samples, &pred))
    }
}

pub fn plain_accuracy(samples: &[&SpectrumSample], pred: &[ClassId]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let hits = samples.iter().zip(pred).filter(|(s, p)| s.class == **p).count();
    hits as f64 / samples.len() as f64
}

const PREDICT_CHUNK: usize = 256;

pub fn predict(model: &Model, classes: &[ClassId], samples: &[&SpectrumSample]) -> Result<Vec<ClassId>> {
    let mut out = Vec::with_capacity(samples.len());
    // infer mode never draws from the generator
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    for chunk in samples.chunks(PREDICT_CHUNK) {
        let (logits, _) = model.predict(&stack(chunk.iter().copied()), &Pass::infer(), &mut rng)?;
        out.extend(argmax_rows(&logits).into_iter().map(|i| classes[i]));
    }
    Ok(out)
}

/// Trains a fresh model of `spec` whose outputs map to `classes`.
pub fn train_classifier(
    spec: ModelSpec,
    classes: &[ClassId],
    samples: &[&SpectrumSample],
    cfg: &ClassifierTraining,
    seed: u64,
) -> Result<TrainedClassifier> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("classifier batch size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::new(spec, &mut rng)?;
    if model.output_shape() != [classes.len()] {
        return Err(Error::Spec(format!(
            "classifier has {:?} outputs for {} classes",
            model.output_shape(),
            classes.len()
        )));
    }
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        let i = classes
            .iter()
            .position(|c| *c == s.class)
            .ok_or_else(|| Error::Input(format!("training sample of unknown class {}", s.class)))?;
        labels.push(i);
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let n_hold = (cfg.holdout_fraction * samples.len() as f64).floor() as usize;
    let (hold, fit) = order.split_at(n_hold);
    let hold_samples: Vec<&SpectrumSample> = hold.iter().map(|&i| samples[i]).collect();
    let mut fit: Vec<usize> = fit.to_vec();
    let mut adam = AdamState::new(cfg.adam, model.params())?;
    let mut curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        fit.shuffle(&mut rng);
        for batch in fit.chunks(cfg.batch_size) {
            let x = stack(batch.iter().map(|&i| samples[i]));
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let tape = Tape::new();
            let bound = model.bind(&tape, true);
            let (logits, trace) = model.forward(&bound, tape.constant(x), &Pass::train(), &mut rng)?;
            let loss = logits.softmax_cross_entropy(&y)?;
            let grads = bound.gradients(&tape.backward(loss)?);
            let mut params: Vec<&mut Tensor> = model.params_mut().iter_mut().collect();
            adam.step(&mut params, &grads)?;
            model.update_running_stats(&trace);
        }
        if !hold_samples.is_empty() {
            let pred = predict(&model, classes, &hold_samples)?;
            curve.push(plain_accuracy(&hold_samples, &pred));
        }
    }
    Ok(TrainedClassifier {
        model,
        classes: classes.to_vec(),
        curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DomainId, SPECTRUM_BINS};
    use crate::nn::build_eval_classifier;
    use rand::Rng;

    fn toy(n: usize, seed: u64) -> Vec<SpectrumSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let class = (i % 2) as u16;
                let mut bins: Vec<f64> = (0..SPECTRUM_BINS).map(|_| rng.gen_range(0.0..0.1)).collect();
                let at = if class == 0 { 100 } else { 400 };
                for b in at..at + 5 {
                    bins[b] += 1.0;
                }
                SpectrumSample::new(bins, DomainId(0), ClassId(class)).unwrap()
            })
            .collect()
    }

    #[test]
    fn separable_toy_spectra_are_learned() {
        let data = toy(40, 1);
        let refs: Vec<&SpectrumSample> = data.iter().collect();
        let classes = [ClassId(0), ClassId(1)];
        let cfg = ClassifierTraining {
            epochs: 5,
            batch_size: 8,
            holdout_fraction: 0.0,
            ..Default::default()
        };
        let spec = build_eval_classifier(2, 3, SPECTRUM_BINS).unwrap();
        let c = train_classifier(spec.clone(), &classes, &refs, &cfg, 3).unwrap();
        assert_eq!(c.accuracy(&refs).unwrap(), 1.0);

        let again = train_classifier(spec, &classes, &refs, &ClassifierTraining { holdout_fraction: 0.25, ..cfg }, 3).unwrap();
        let twice = train_classifier(
            build_eval_classifier(2, 3, SPECTRUM_BINS).unwrap(),
            &classes,
            &refs,
            &ClassifierTraining { holdout_fraction: 0.25, ..cfg },
            3,
        )
        .unwrap();
        assert_eq!(again.curve.len(), 5);
        assert_eq!(again.curve, twice.curve);
    }

    #[test]
    fn unknown_class_is_rejected() {
        let data = toy(4, 2);
        let refs: Vec<&SpectrumSample> = data.iter().collect();
        let spec = build_eval_classifier(2, 3, SPECTRUM_BINS).unwrap();
        assert!(train_classifier(spec, &[ClassId(0), ClassId(5)], &refs, &ClassifierTraining::default(), 0).is_err());
    }
}
