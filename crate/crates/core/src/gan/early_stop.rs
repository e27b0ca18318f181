//! Auxiliary-classifier stopping criterion.

use std::collections::BTreeMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::classifier::{train_classifier, ClassifierTraining};
use crate::data::{ClassId, DomainDataset, SpectrumSample, SPECTRUM_BINS};
use crate::error::{Error, Result};
use crate::nn::build_aux_classifier;

/// Anything that can emit fault signatures for its classes.
pub trait SignatureSource {
    fn covered_classes(&self) -> &[ClassId];

    /// `count` signatures of `class`, each `SPECTRUM_BINS` long.
    fn signatures(&self, class: ClassId, count: usize, rng: &mut dyn RngCore) -> Result<Vec<Vec<f64>>>;
}

/// Signature plus a uniformly drawn healthy carrier, clamped at zero, for
/// `counts[class]` samples of each class.
pub fn synthetic_set(
    source: &dyn SignatureSource,
    healthy: &[&SpectrumSample],
    counts: &BTreeMap<ClassId, usize>,
    rng: &mut dyn RngCore,
) -> Result<Vec<SpectrumSample>> {
    if healthy.is_empty() {
        return Err(Error::MissingData("no healthy carriers".into()));
    }
    let mut out = Vec::new();
    for (&class, &n) in counts {
        for sig in source.signatures(class, n, rng)? {
            let carrier = healthy[rng.gen_range(0..healthy.len())];
            let bins: Vec<f64> = carrier.bins.iter().zip(&sig).map(|(c, s)| (c + s).max(0.0)).collect();
            debug_assert_eq!(bins.len(), SPECTRUM_BINS);
            let mut s = SpectrumSample::new(bins, carrier.domain, class)?;
            s.synthetic = true;
            out.push(s);
        }
    }
    Ok(out)
}

/// Trains a fresh auxiliary classifier on synthetic faults plus real healthy
/// samples and returns its accuracy on the real faults.
pub fn aux_accuracy(
    synthetic_faults: &[SpectrumSample],
    real_healthy: &[&SpectrumSample],
    real_faults: &[&SpectrumSample],
    fault_classes: &[ClassId],
    cfg: &ClassifierTraining,
    seed: u64,
) -> Result<f64> {
    if real_faults.is_empty() {
        return Err(Error::MissingData("no real fault samples to evaluate on".into()));
    }
    let mut classes = vec![ClassId::HEALTHY];
    classes.extend_from_slice(fault_classes);
    let train: Vec<&SpectrumSample> = synthetic_faults.iter().chain(real_healthy.iter().copied()).collect();
    let spec = build_aux_classifier(classes.len(), SPECTRUM_BINS)?;
    let c = train_classifier(spec, &classes, &train, cfg, seed)?;
    c.accuracy(real_faults)
}

/// `(stop, accuracy)`; a threshold of zero stops without training anything.
pub fn early_stop_check(
    source: &dyn SignatureSource,
    dataset: &DomainDataset,
    threshold: f64,
    cfg: &ClassifierTraining,
    seed: u64,
) -> Result<(bool, f64)> {
    if threshold <= 0.0 {
        return Ok((true, f64::NAN));
    }
    let classes = source.covered_classes().to_vec();
    let healthy = dataset.healthy();
    let faults: Vec<&SpectrumSample> = dataset.samples().iter().filter(|s| classes.contains(&s.class)).collect();
    let counts: BTreeMap<ClassId, usize> = classes
        .iter()
        .map(|c| (*c, faults.iter().filter(|s| s.class == *c).count()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let synthetic = synthetic_set(source, &healthy, &counts, &mut rng)?;
    let acc = aux_accuracy(&synthetic, &healthy, &faults, &classes, cfg, rng.gen())?;
    Ok((acc >= threshold, acc))
}
