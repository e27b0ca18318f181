//! Labeled spectra and the on-disk dataset archive.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use fsgan_autodiff::{Checkpoint, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of retained FFT bins per spectrum.
pub const SPECTRUM_BINS: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DomainId(pub u16);

/// Health-condition label. `0` is the healthy class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u16);

impl ClassId {
    pub const HEALTHY: ClassId = ClassId(0);

    pub fn is_healthy(self) -> bool {
        self == Self::HEALTHY
    }
}

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One magnitude spectrum with its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumSample {
    pub bins: Vec<f64>,
    pub domain: DomainId,
    pub class: ClassId,
    pub synthetic: bool,
}

impl SpectrumSample {
    pub fn new(bins: Vec<f64>, domain: DomainId, class: ClassId) -> Result<Self> {
        if bins.len() != SPECTRUM_BINS {
            return Err(Error::Input(format!(
                "spectrum has {} bins, expected {SPECTRUM_BINS}",
                bins.len()
            )));
        }
        if let Some(i) = bins.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Input(format!("bin {i} is {} (must be finite and >= 0)", bins[i])));
        }
        Ok(SpectrumSample {
            bins,
            domain,
            class,
            synthetic: false,
        })
    }
}

/// Samples of a single domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    domain: DomainId,
    samples: Vec<SpectrumSample>,
}

impl DomainDataset {
    pub fn new(domain: DomainId, samples: Vec<SpectrumSample>) -> Result<Self> {
        if let Some(s) = samples.iter().find(|s| s.domain != domain) {
            return Err(Error::Input(format!(
                "sample from domain {} in dataset for domain {domain}",
                s.domain
            )));
        }
        Ok(DomainDataset { domain, samples })
    }

    pub fn domain(&self) -> DomainId {
        self.domain
    }

    pub fn samples(&self) -> &[SpectrumSample] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<SpectrumSample> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn histogram(&self) -> BTreeMap<ClassId, usize> {
        histogram(&self.samples)
    }

    pub fn of_class(&self, class: ClassId) -> impl Iterator<Item = &SpectrumSample> {
        self.samples.iter().filter(move |s| s.class == class)
    }

    pub fn healthy(&self) -> Vec<&SpectrumSample> {
        self.of_class(ClassId::HEALTHY).collect()
    }

    /// Restricts to the given classes.
    pub fn filter_classes(&self, classes: &[ClassId]) -> DomainDataset {
        DomainDataset {
            domain: self.domain,
            samples: self
                .samples
                .iter()
                .filter(|s| classes.contains(&s.class))
                .cloned()
                .collect(),
        }
    }
}

pub fn histogram(samples: &[SpectrumSample]) -> BTreeMap<ClassId, usize> {
    let mut h = BTreeMap::new();
    for s in samples {
        *h.entry(s.class).or_insert(0) += 1;
    }
    h
}

/// Splits a mixed collection into one dataset per domain, ordered by id.
pub fn by_domain(samples: &[SpectrumSample]) -> Vec<DomainDataset> {
    let mut map: BTreeMap<DomainId, Vec<SpectrumSample>> = BTreeMap::new();
    for s in samples {
        map.entry(s.domain).or_default().push(s.clone());
    }
    map.into_iter()
        .map(|(domain, samples)| DomainDataset { domain, samples })
        .collect()
}

/// Element-wise mean of a set of spectra.
pub fn mean_spectrum<'a>(samples: impl IntoIterator<Item = &'a SpectrumSample>) -> Option<Vec<f64>> {
    let mut acc = vec![0.0; SPECTRUM_BINS];
    let mut n = 0usize;
    for s in samples {
        for (a, v) in acc.iter_mut().zip(&s.bins) {
            *a += v;
        }
        n += 1;
    }
    (n > 0).then(|| acc.into_iter().map(|a| a / n as f64).collect())
}

/// Stacks spectra into a `[n, bins]` tensor.
pub fn stack<'a>(samples: impl IntoIterator<Item = &'a SpectrumSample>) -> Tensor {
    let mut data = Vec::new();
    let mut n = 0;
    for s in samples {
        data.extend_from_slice(&s.bins);
        n += 1;
    }
    Tensor::new(vec![n, SPECTRUM_BINS], data).expect("spectra have fixed length")
}

#[derive(Serialize, Deserialize)]
struct ArchiveLabels {
    kind: String,
    bins: usize,
    domain: Vec<DomainId>,
    class: Vec<ClassId>,
    synthetic: Vec<bool>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    extra: serde_json::Value,
}

const ARCHIVE_KIND: &str = "spectra";

/// Writes spectra as a container with one `[n, 512]` array and per-sample
/// labels in the manifest. `extra` is stored verbatim.
pub fn write_archive(path: &Path, samples: &[SpectrumSample], extra: serde_json::Value) -> Result<()> {
    let mut ck = Checkpoint::new();
    ck.insert("spectra", stack(samples))?;
    let labels = ArchiveLabels {
        kind: ARCHIVE_KIND.into(),
        bins: SPECTRUM_BINS,
        domain: samples.iter().map(|s| s.domain).collect(),
        class: samples.iter().map(|s| s.class).collect(),
        synthetic: samples.iter().map(|s| s.synthetic).collect(),
        extra,
    };
    ck.metadata = serde_json::to_value(labels).map_err(|e| Error::format(path, e))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    ck.save(path)?;
    Ok(())
}

pub fn read_archive(path: &Path) -> Result<(Vec<SpectrumSample>, serde_json::Value)> {
    if !path.exists() {
        return Err(Error::MissingData(format!("{} does not exist", path.display())));
    }
    let ck = Checkpoint::load(path)?;
    let labels: ArchiveLabels =
        serde_json::from_value(ck.metadata.clone()).map_err(|e| Error::format(path, e))?;
    if labels.kind != ARCHIVE_KIND || labels.bins != SPECTRUM_BINS {
        return Err(Error::format(path, "not a spectrum archive"));
    }
    let spectra = ck.require("spectra")?;
    let n = labels.domain.len();
    if labels.class.len() != n || labels.synthetic.len() != n || spectra.shape() != [n, SPECTRUM_BINS] {
        return Err(Error::format(path, "label count does not match spectra"));
    }
    let samples = spectra
        .rows()
        .enumerate()
        .map(|(i, row)| SpectrumSample {
            bins: row.to_vec(),
            domain: labels.domain[i],
            class: labels.class[i],
            synthetic: labels.synthetic[i],
        })
        .collect();
    Ok((samples, labels.extra))
}
