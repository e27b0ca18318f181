//! Execution phase: scaled signatures on target-domain healthy carriers.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{mean_spectrum, ClassId, DomainDataset, DomainId, SpectrumSample, SPECTRUM_BINS};
use crate::error::{Error, Result};
use crate::gan::SignatureSource;

/// Target means below this are treated as empty bins.
pub const DEGENERATE_BIN: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingMode {
    #[default]
    Scalar,
    PerBin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "snake_case")]
pub enum ScalingFactor {
    Scalar(f64),
    PerBin(Vec<f64>),
}

impl ScalingFactor {
    pub fn at(&self, bin: usize) -> f64 {
        match self {
            ScalingFactor::Scalar(f) => *f,
            ScalingFactor::PerBin(v) => v[bin],
        }
    }

    pub fn unit() -> Self {
        ScalingFactor::Scalar(1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaultSignature {
    pub bins: Vec<f64>,
    pub fault_type: String,
    pub class: ClassId,
    pub bundle: String,
    pub seed: u64,
}

/// Ratio of the mean source healthy spectrum to the mean target healthy
/// spectrum, per bin or averaged over bins.
pub fn scaling_factor(
    healthy_source: &[&SpectrumSample],
    healthy_target: &[&SpectrumSample],
    mode: ScalingMode,
) -> Result<ScalingFactor> {
    for (name, pool) in [("source", healthy_source), ("target", healthy_target)] {
        if pool.is_empty() {
            return Err(Error::MissingData(format!("no {name} healthy samples")));
        }
        if let Some(s) = pool.iter().find(|s| !s.class.is_healthy()) {
            return Err(Error::Input(format!("{name} healthy pool holds class {}", s.class)));
        }
    }
    let src = mean_spectrum(healthy_source.iter().copied()).expect("non-empty");
    let tgt = mean_spectrum(healthy_target.iter().copied()).expect("non-empty");
    let ratio: Vec<Option<f64>> = src
        .iter()
        .zip(&tgt)
        .map(|(s, t)| (*t >= DEGENERATE_BIN).then(|| s / t))
        .collect();
    let valid: Vec<f64> = ratio.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(Error::Input("every target healthy bin is degenerate".into()));
    }
    Ok(match mode {
        ScalingMode::Scalar => ScalingFactor::Scalar(valid.iter().sum::<f64>() / valid.len() as f64),
        ScalingMode::PerBin => ScalingFactor::PerBin(ratio.into_iter().map(|r| r.unwrap_or(1.0)).collect()),
    })
}

/// `carrier + f * signature`, clamped at zero, labeled with `class`.
pub fn synthesize_target_fault(
    signature: &[f64],
    carrier: &SpectrumSample,
    f: &ScalingFactor,
    class: ClassId,
) -> Result<SpectrumSample> {
    if signature.len() != carrier.bins.len() {
        return Err(Error::Input(format!(
            "signature has {} bins, carrier {}",
            signature.len(),
            carrier.bins.len()
        )));
    }
    if class.is_healthy() {
        return Err(Error::Input("synthetic samples cannot be healthy".into()));
    }
    if let ScalingFactor::PerBin(v) = f {
        if v.len() != signature.len() {
            return Err(Error::Input(format!("per-bin factor has {} bins", v.len())));
        }
    }
    let bins = carrier
        .bins
        .iter()
        .zip(signature)
        .enumerate()
        .map(|(i, (c, s))| (c + f.at(i) * s).max(0.0))
        .collect();
    let mut out = SpectrumSample::new(bins, carrier.domain, class)?;
    out.synthetic = true;
    Ok(out)
}

/// `count` signatures of `class` from any signature source.
pub fn generate_signatures(
    source: &dyn SignatureSource,
    fault_type: &str,
    bundle_id: &str,
    class: ClassId,
    count: usize,
    seed: u64,
) -> Result<Vec<FaultSignature>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigs = source.signatures(class, count, &mut rng)?;
    sigs.into_iter()
        .map(|bins| {
            if bins.len() != SPECTRUM_BINS || bins.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: format!("signature of class {class}"),
                    step: 0,
                    dump: None,
                });
            }
            Ok(FaultSignature {
                bins,
                fault_type: fault_type.to_string(),
                class,
                bundle: bundle_id.to_string(),
                seed,
            })
        })
        .collect()
}

/// Synthetic target faults together with the carrier each one was built on.
pub struct Completion {
    pub dataset: DomainDataset,
    /// Index into the target healthy pool per synthetic sample.
    pub carriers: Vec<usize>,
    pub signatures: Vec<Vec<f64>>,
}

/// Synthesizes `round(mean(source_class_counts))` samples for every missing
/// class, each on a healthy carrier drawn with replacement.
pub fn complete_label_space(
    sources: &[&dyn SignatureSource],
    target_healthy: &[&SpectrumSample],
    missing_classes: &[ClassId],
    source_class_counts: &BTreeMap<ClassId, usize>,
    f: &ScalingFactor,
    seed: u64,
) -> Result<Completion> {
    let domain = target_domain(target_healthy)?;
    if source_class_counts.is_empty() {
        return Err(Error::MissingData("no source class counts".into()));
    }
    let mean = source_class_counts.values().sum::<usize>() as f64 / source_class_counts.len() as f64;
    let n = mean.round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    let mut carriers = Vec::new();
    let mut signatures = Vec::new();
    for &class in missing_classes {
        let source = sources
            .iter()
            .find(|s| s.covered_classes().contains(&class))
            .ok_or_else(|| Error::ClassNotCovered {
                class: class.0,
                covered: sources.iter().flat_map(|s| s.covered_classes()).map(|c| c.0).collect(),
            })?;
        for sig in source.signatures(class, n, &mut rng)? {
            let k = rng.gen_range(0..target_healthy.len());
            samples.push(synthesize_target_fault(&sig, target_healthy[k], f, class)?);
            carriers.push(k);
            signatures.push(sig);
        }
    }
    Ok(Completion {
        dataset: DomainDataset::new(domain, samples)?,
        carriers,
        signatures,
    })
}

fn target_domain(pool: &[&SpectrumSample]) -> Result<DomainId> {
    let first = pool
        .first()
        .ok_or_else(|| Error::MissingData("no target healthy samples".into()))?;
    if let Some(s) = pool.iter().find(|s| s.domain != first.domain || !s.class.is_healthy()) {
        return Err(Error::Input(format!(
            "target healthy pool mixes domain {} class {} into domain {}",
            s.domain, s.class, first.domain
        )));
    }
    Ok(first.domain)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    fn sample(bins: Vec<f64>, domain: u16, class: u16) -> SpectrumSample {
        SpectrumSample::new(bins, DomainId(domain), ClassId(class)).unwrap()
    }

    fn flat(v: f64, domain: u16) -> SpectrumSample {
        sample(vec![v; SPECTRUM_BINS], domain, 0)
    }

    struct Constant(Vec<ClassId>, f64);

    impl SignatureSource for Constant {
        fn covered_classes(&self) -> &[ClassId] {
            &self.0
        }

        fn signatures(&self, _: ClassId, count: usize, _: &mut dyn RngCore) -> Result<Vec<Vec<f64>>> {
            Ok(vec![vec![self.1; SPECTRUM_BINS]; count])
        }
    }

    #[test]
    fn equal_and_halved_pools() {
        let a = [flat(2.0, 0), flat(4.0, 0)];
        let b = [flat(1.0, 1), flat(2.0, 1)];
        let ra: Vec<&SpectrumSample> = a.iter().collect();
        let rb: Vec<&SpectrumSample> = b.iter().collect();
        assert_eq!(scaling_factor(&ra, &ra, ScalingMode::Scalar).unwrap(), ScalingFactor::Scalar(1.0));
        assert_eq!(scaling_factor(&ra, &rb, ScalingMode::Scalar).unwrap(), ScalingFactor::Scalar(2.0));
        match scaling_factor(&ra, &ra, ScalingMode::PerBin).unwrap() {
            ScalingFactor::PerBin(v) => assert!(v.iter().all(|x| *x == 1.0)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn degenerate_bins_are_skipped_or_unit() {
        let mut t = vec![1.0; SPECTRUM_BINS];
        t[3] = 0.0;
        let tgt = sample(t, 1, 0);
        let src = flat(3.0, 0);
        assert_eq!(scaling_factor(&[&src], &[&tgt], ScalingMode::Scalar).unwrap(), ScalingFactor::Scalar(3.0));
        let ScalingFactor::PerBin(v) = scaling_factor(&[&src], &[&tgt], ScalingMode::PerBin).unwrap() else {
            panic!()
        };
        assert_eq!((v[3], v[4]), (1.0, 3.0));
        let zero = flat(0.0, 1);
        assert!(scaling_factor(&[&src], &[&zero], ScalingMode::Scalar).is_err());
        assert!(scaling_factor(&[], &[&zero], ScalingMode::Scalar).is_err());
    }

    #[test]
    fn zero_signature_relabels_the_carrier() {
        let carrier = sample((0..SPECTRUM_BINS).map(|i| i as f64).collect(), 1, 0);
        let out = synthesize_target_fault(&[0.0; SPECTRUM_BINS], &carrier, &ScalingFactor::Scalar(3.0), ClassId(4)).unwrap();
        assert_eq!(out.bins, carrier.bins);
        assert_eq!((out.class, out.domain, out.synthetic), (ClassId(4), DomainId(1), true));
        let sig: Vec<f64> = (0..SPECTRUM_BINS).map(|i| i as f64 - 100.0).collect();
        let out = synthesize_target_fault(&sig, &flat(0.0, 1), &ScalingFactor::unit(), ClassId(1)).unwrap();
        assert!(out.bins.iter().zip(&sig).all(|(o, s)| *o == s.max(0.0)));
        assert!(synthesize_target_fault(&sig, &carrier, &ScalingFactor::unit(), ClassId::HEALTHY).is_err());
    }

    #[test]
    fn completion_counts_and_carriers() {
        let pool: Vec<SpectrumSample> = (0..5).map(|i| flat(i as f64 + 1.0, 1)).collect();
        let refs: Vec<&SpectrumSample> = pool.iter().collect();
        let src = Constant(vec![ClassId(1), ClassId(2)], 0.5);
        let counts = BTreeMap::from([(ClassId(0), 100), (ClassId(1), 300)]);
        let out = complete_label_space(&[&src], &refs, &[ClassId(1), ClassId(2)], &counts, &ScalingFactor::unit(), 1).unwrap();
        assert_eq!(out.dataset.histogram(), BTreeMap::from([(ClassId(1), 200), (ClassId(2), 200)]));
        for (s, &k) in out.dataset.samples().iter().zip(&out.carriers) {
            assert!(s.bins.iter().zip(&pool[k].bins).all(|(x, c)| (x - c - 0.5).abs() < 1e-12));
        }
        let err = complete_label_space(&[&src], &refs, &[ClassId(7)], &counts, &ScalingFactor::unit(), 1).err().unwrap();
        assert_eq!(err.class(), "CLASS_NOT_COVERED");
    }

    #[test]
    fn signature_generation_is_seeded() {
        let src = Constant(vec![ClassId(1)], 0.25);
        assert!(generate_signatures(&src, "x", "b", ClassId(1), 0, 3).unwrap().is_empty());
        let a = generate_signatures(&src, "x", "b", ClassId(1), 2, 3).unwrap();
        assert_eq!(a, generate_signatures(&src, "x", "b", ClassId(1), 2, 3).unwrap());
    }
}
