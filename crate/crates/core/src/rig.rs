//! Synthetic spectra that obey the additive healthy-plus-signature model
//! exactly, with the ground truth kept for tests.
//!
//! A domain's healthy spectrum is `amplitude * (envelope + |noise|)`; a fault
//! sample adds `signature_gain * signature(class)`. Envelopes are sums of
//! Gaussian bumps drawn from `envelope_seed` over a constant floor.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClassId, DomainDataset, DomainId, SpectrumSample, SPECTRUM_BINS};
use crate::error::{Error, Result};
use fsgan_autodiff::standard_normal;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Peak {
    pub bin: f64,
    pub height: f64,
    pub width: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigFault {
    pub class_id: u16,
    pub fault_type: String,
    pub peaks: Vec<Peak>,
}

fn one() -> f64 {
    1.0
}

fn default_bumps() -> usize {
    6
}

fn default_floor() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigDomain {
    pub id: u16,
    pub envelope_seed: u64,
    pub amplitude: f64,
    /// Standard deviation of the folded Gaussian noise, relative to `amplitude`.
    pub noise: f64,
    /// Shift in bins applied to every fault peak in this domain.
    #[serde(default)]
    pub peak_jitter: f64,
    #[serde(default = "one")]
    pub signature_gain: f64,
    #[serde(default = "default_bumps")]
    pub envelope_bumps: usize,
    #[serde(default = "default_floor")]
    pub envelope_floor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigSpec {
    pub seed: u64,
    pub samples_per_class: usize,
    pub domains: Vec<RigDomain>,
    pub faults: Vec<RigFault>,
}

/// A generated domain with its hidden ground truth.
#[derive(Clone, Debug)]
pub struct RigDataset {
    pub dataset: DomainDataset,
    /// Noise-free healthy spectrum `amplitude * envelope`.
    pub base: Vec<f64>,
    /// Injected signature per fault class, as added in this domain.
    pub signatures: BTreeMap<ClassId, Vec<f64>>,
}

impl RigSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("rig: {m}")));
        if self.domains.is_empty() {
            return bad("no domains".into());
        }
        let mut ids: Vec<u16> = self.domains.iter().map(|d| d.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.domains.len() {
            return bad("duplicate domain id".into());
        }
        for d in &self.domains {
            if !(d.amplitude > 0.0 && d.amplitude.is_finite()) || !(d.noise >= 0.0) || !(d.signature_gain >= 0.0) {
                return bad(format!("domain {} needs amplitude > 0, noise >= 0, signature_gain >= 0", d.id));
            }
            if d.envelope_floor < 0.0 {
                return bad(format!("domain {} has a negative envelope floor", d.id));
            }
        }
        let mut classes = Vec::new();
        for f in &self.faults {
            if f.class_id == 0 {
                return bad("class 0 is reserved for healthy".into());
            }
            if classes.contains(&f.class_id) {
                return bad(format!("duplicate fault class {}", f.class_id));
            }
            classes.push(f.class_id);
            for p in &f.peaks {
                if !(0.0..SPECTRUM_BINS as f64).contains(&p.bin) || !(p.height > 0.0) || !(p.width > 0.0) {
                    return bad(format!("class {}: peak {p:?} out of range", f.class_id));
                }
            }
        }
        Ok(())
    }

    pub fn domain(&self, id: DomainId) -> Result<&RigDomain> {
        self.domains
            .iter()
            .find(|d| d.id == id.0)
            .ok_or_else(|| Error::Config(format!("rig has no domain {id}")))
    }

    /// Fault classes grouped by fault type, in class order.
    pub fn fault_types(&self) -> BTreeMap<String, Vec<ClassId>> {
        let mut out: BTreeMap<String, Vec<ClassId>> = BTreeMap::new();
        for f in &self.faults {
            out.entry(f.fault_type.clone()).or_default().push(ClassId(f.class_id));
        }
        for v in out.values_mut() {
            v.sort();
        }
        out
    }
}

fn envelope(d: &RigDomain) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(d.envelope_seed);
    let bumps: Vec<(f64, f64, f64)> = (0..d.envelope_bumps)
        .map(|_| {
            (
                rng.gen_range(0.0..SPECTRUM_BINS as f64),
                rng.gen_range(15.0..70.0),
                rng.gen_range(0.2..1.0),
            )
        })
        .collect();
    (0..SPECTRUM_BINS)
        .map(|b| {
            let b = b as f64;
            d.envelope_floor
                + bumps
                    .iter()
                    .map(|(c, w, h)| h * (-(b - c) * (b - c) / (2.0 * w * w)).exp())
                    .sum::<f64>()
        })
        .collect()
}

/// Sum of Gaussian peaks shifted by `jitter` bins.
pub fn signature(peaks: &[Peak], jitter: f64) -> Vec<f64> {
    (0..SPECTRUM_BINS)
        .map(|b| {
            peaks
                .iter()
                .map(|p| {
                    let d = b as f64 - p.bin - jitter;
                    p.height * (-d * d / (2.0 * p.width * p.width)).exp()
                })
                .sum()
        })
        .collect()
}

/// Healthy plus every fault class, `samples_per_class` each.
pub fn make_dataset(rig: &RigSpec, domain: DomainId) -> Result<RigDataset> {
    rig.validate()?;
    let d = rig.domain(domain)?;
    let base: Vec<f64> = envelope(d).into_iter().map(|e| d.amplitude * e).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(rig.seed);
    rng.set_stream(domain.0 as u64);
    let mut signatures = BTreeMap::new();
    for f in &rig.faults {
        let sig = signature(&f.peaks, d.peak_jitter)
            .into_iter()
            .map(|v| d.signature_gain * v)
            .collect();
        signatures.insert(ClassId(f.class_id), sig);
    }
    let zero = vec![0.0; SPECTRUM_BINS];
    let mut samples = Vec::new();
    for class in std::iter::once(ClassId::HEALTHY).chain(signatures.keys().copied()) {
        let sig = signatures.get(&class).unwrap_or(&zero);
        for _ in 0..rig.samples_per_class {
            let bins = base
                .iter()
                .zip(sig)
                .map(|(b, s)| b + d.amplitude * (d.noise * standard_normal(&mut rng)).abs() + s)
                .collect();
            samples.push(SpectrumSample::new(bins, domain, class)?);
        }
    }
    Ok(RigDataset {
        dataset: DomainDataset::new(domain, samples)?,
        base,
        signatures,
    })
}

/// Every domain of the rig, ordered as configured.
pub fn make_all(rig: &RigSpec) -> Result<Vec<RigDataset>> {
    rig.domains.iter().map(|d| make_dataset(rig, DomainId(d.id))).collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn small_rig(noise: f64) -> RigSpec {
        RigSpec {
            seed: 11,
            samples_per_class: 20,
            domains: vec![
                RigDomain {
                    id: 0,
                    envelope_seed: 1,
                    amplitude: 1.0,
                    noise,
                    peak_jitter: 0.0,
                    signature_gain: 1.0,
                    envelope_bumps: 6,
                    envelope_floor: 0.1,
                },
                RigDomain {
                    id: 1,
                    envelope_seed: 2,
                    amplitude: 2.0,
                    noise,
                    peak_jitter: 0.0,
                    signature_gain: 1.0,
                    envelope_bumps: 6,
                    envelope_floor: 0.1,
                },
            ],
            faults: vec![
                RigFault {
                    class_id: 1,
                    fault_type: "inner".into(),
                    peaks: vec![Peak { bin: 60.0, height: 2.0, width: 3.0 }],
                },
                RigFault {
                    class_id: 2,
                    fault_type: "outer".into(),
                    peaks: vec![Peak { bin: 300.0, height: 2.0, width: 3.0 }],
                },
            ],
        }
    }

    #[test]
    fn noiseless_fault_minus_base_is_the_signature() {
        let rig = small_rig(0.0);
        let ds = make_dataset(&rig, DomainId(1)).unwrap();
        for s in ds.dataset.of_class(ClassId(2)) {
            for ((x, b), sig) in s.bins.iter().zip(&ds.base).zip(&ds.signatures[&ClassId(2)]) {
                assert!((x - b - sig).abs() < 1e-12);
            }
        }
        let h = ds.dataset.histogram();
        assert_eq!(h.values().copied().collect::<Vec<_>>(), vec![20, 20, 20]);
    }

    #[test]
    fn same_seed_same_bytes() {
        let rig = small_rig(0.05);
        let a = make_dataset(&rig, DomainId(0)).unwrap().dataset;
        let b = make_dataset(&rig, DomainId(0)).unwrap().dataset;
        assert_eq!(a, b);
        let c = make_dataset(&rig, DomainId(1)).unwrap().dataset;
        assert_ne!(a.samples()[0].bins, c.samples()[0].bins);
    }

    #[test]
    fn rejects_invalid_specs() {
        let mut rig = small_rig(0.1);
        rig.faults[0].peaks[0].bin = 600.0;
        assert!(rig.validate().is_err());
        let mut rig = small_rig(0.1);
        rig.faults[0].class_id = 0;
        assert!(rig.validate().is_err());
        let mut rig = small_rig(0.1);
        rig.domains[1].noise = -1.0;
        assert!(rig.validate().is_err());
        assert!(make_dataset(&small_rig(0.1), DomainId(9)).is_err());
    }

    #[test]
    fn strong_peaks_are_linearly_separable() {
        let rig = small_rig(0.05);
        let ds = make_dataset(&rig, DomainId(0)).unwrap().dataset;
        // nearest class mean is a linear rule
        let classes = [ClassId(0), ClassId(1), ClassId(2)];
        let means: Vec<Vec<f64>> = classes
            .iter()
            .map(|c| crate::data::mean_spectrum(ds.of_class(*c)).unwrap())
            .collect();
        for s in ds.samples() {
            let dist = |m: &Vec<f64>| m.iter().zip(&s.bins).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let best = (0..3).min_by(|&i, &j| dist(&means[i]).total_cmp(&dist(&means[j]))).unwrap();
            assert_eq!(classes[best], s.class);
        }
    }
}
