//! Raw recordings to 512-bin magnitude spectra, plus the train/test split.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::data::{ClassId, DomainDataset, DomainId, SpectrumSample, SPECTRUM_BINS};
use crate::error::{Error, Result};

pub const WINDOW_LEN: usize = 1024;
pub const CWRU_TRUNCATE: usize = 12_000;
pub const CWRU_WINDOWS: usize = 200;
pub const PADERBORN_STRIDE: usize = 4096;

/// All full windows of `length` samples starting every `stride` samples.
pub fn window(signal: &[f64], length: usize, stride: usize) -> Result<Vec<&[f64]>> {
    if stride == 0 || length == 0 {
        return Err(Error::Input("window length and stride must be >= 1".into()));
    }
    if signal.len() < length {
        return Ok(Vec::new());
    }
    Ok((0..=(signal.len() - length) / stride)
        .map(|i| &signal[i * stride..i * stride + length])
        .collect())
}

/// Stride giving exactly [`CWRU_WINDOWS`] overlapping windows over `n` samples.
pub fn cwru_stride(n: usize) -> Result<usize> {
    let stride = n.saturating_sub(WINDOW_LEN) / (CWRU_WINDOWS - 1);
    if stride == 0 {
        return Err(Error::Input(format!(
            "record of {n} samples is too short for {CWRU_WINDOWS} windows"
        )));
    }
    Ok(stride)
}

/// Magnitudes of DFT coefficients 1..=512 of a 1024-sample window.
pub struct SpectrumTransform {
    fft: Arc<dyn Fft<f64>>,
}

impl Default for SpectrumTransform {
    fn default() -> Self {
        Self::new()
    }
}

impl SpectrumTransform {
    pub fn new() -> Self {
        SpectrumTransform {
            fft: FftPlanner::new().plan_fft_forward(WINDOW_LEN),
        }
    }

    pub fn magnitudes(&self, window: &[f64]) -> Result<Vec<f64>> {
        if window.len() != WINDOW_LEN {
            return Err(Error::Input(format!(
                "window has {} samples, expected {WINDOW_LEN}",
                window.len()
            )));
        }
        let mut buf: Vec<Complex<f64>> = window.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.fft.process(&mut buf);
        Ok(buf[1..=SPECTRUM_BINS].iter().map(|c| c.norm()).collect())
    }
}

pub fn fft_magnitude(window: &[f64]) -> Result<Vec<f64>> {
    SpectrumTransform::new().magnitudes(window)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaseStudy {
    Cwru,
    Paderborn,
}

impl FromStr for CaseStudy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cwru" => Ok(CaseStudy::Cwru),
            "paderborn" => Ok(CaseStudy::Paderborn),
            _ => Err(Error::UnknownCase(s.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawRecording {
    pub samples: Vec<f64>,
    pub sample_rate: f64,
    pub domain: DomainId,
    pub class: ClassId,
}

impl RawRecording {
    pub fn new(samples: Vec<f64>, sample_rate: f64, domain: DomainId, class: ClassId) -> Result<Self> {
        if samples.len() < WINDOW_LEN {
            return Err(Error::Input(format!(
                "recording has {} samples, needs at least {WINDOW_LEN}",
                samples.len()
            )));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("recording sample {i} is not finite")));
        }
        Ok(RawRecording {
            samples,
            sample_rate,
            domain,
            class,
        })
    }
}

/// Windows of one recording under the case-study slicing rule.
pub fn case_windows(rec: &RawRecording, case: CaseStudy) -> Result<Vec<&[f64]>> {
    match case {
        CaseStudy::Cwru => {
            let n = rec.samples.len().min(CWRU_TRUNCATE);
            let stride = cwru_stride(n)?;
            let mut w = window(&rec.samples[..n], WINDOW_LEN, stride)?;
            w.truncate(CWRU_WINDOWS);
            Ok(w)
        }
        CaseStudy::Paderborn => window(&rec.samples, WINDOW_LEN, PADERBORN_STRIDE),
    }
}

/// Spectra of every recording, grouped into one dataset per domain.
pub fn preprocess_case_study(recordings: &[RawRecording], case: CaseStudy) -> Result<Vec<DomainDataset>> {
    let transform = SpectrumTransform::new();
    let mut by_domain: BTreeMap<DomainId, Vec<SpectrumSample>> = BTreeMap::new();
    for rec in recordings {
        let out = by_domain.entry(rec.domain).or_default();
        for w in case_windows(rec, case)? {
            out.push(SpectrumSample::new(transform.magnitudes(w)?, rec.domain, rec.class)?);
        }
    }
    by_domain
        .into_iter()
        .map(|(d, s)| DomainDataset::new(d, s))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct ManifestEntry {
    pub file: PathBuf,
    pub domain_id: u16,
    pub class_id: u16,
    pub sample_rate: f64,
}

/// Reads a `file,domain_id,class_id,sample_rate` CSV; relative paths are
/// resolved against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::MissingData(format!("manifest {}: {e}", path.display())),
            _ => Error::format(path, e),
        })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    for row in reader.deserialize() {
        let mut e: ManifestEntry = row.map_err(|e| Error::format(path, e))?;
        if e.file.is_relative() {
            e.file = base.join(&e.file);
        }
        entries.push(e);
    }
    Ok(entries)
}

/// Loads one recording: `.bin` files are raw little-endian f64, anything else
/// is a one-column CSV with an optional header.
pub fn load_recording(entry: &ManifestEntry) -> Result<RawRecording> {
    let path = &entry.file;
    if !path.exists() {
        return Err(Error::MissingData(format!("recording {} does not exist", path.display())));
    }
    let samples = if path.extension().is_some_and(|e| e == "bin") {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::format(path, "length is not a multiple of 8 bytes"));
        }
        bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect()
    } else {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut values = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let field = line.split(',').next().unwrap_or("").trim();
            if field.is_empty() {
                continue;
            }
            match field.parse::<f64>() {
                Ok(v) => values.push(v),
                Err(_) if i == 0 => {}
                Err(e) => return Err(Error::format(path, format!("line {}: {e}", i + 1))),
            }
        }
        values
    };
    RawRecording::new(samples, entry.sample_rate, DomainId(entry.domain_id), ClassId(entry.class_id))
        .map_err(|e| Error::format(path, e))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub train: Vec<SpectrumSample>,
    pub test: Vec<SpectrumSample>,
}

/// Stratified split per (domain, class). Groups listed in `unseen` go to the
/// test set whole; every other group sends `floor(test_fraction * n)` randomly
/// chosen samples to test. Both halves keep the input order.
pub fn split_train_test(
    samples: &[SpectrumSample],
    test_fraction: f64,
    unseen: &[(DomainId, ClassId)],
    seed: u64,
) -> Result<Split> {
    if !(0.0..=1.0).contains(&test_fraction) {
        return Err(Error::Config(format!("test fraction {test_fraction} outside [0, 1]")));
    }
    let mut groups: BTreeMap<(DomainId, ClassId), Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        groups.entry((s.domain, s.class)).or_default().push(i);
    }
    for key in unseen {
        if !groups.contains_key(key) {
            return Err(Error::MissingData(format!(
                "unseen class {} of domain {} has no samples",
                key.1, key.0
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_test = vec![false; samples.len()];
    for (key, mut idx) in groups {
        let take = if unseen.contains(&key) {
            idx.len()
        } else {
            (test_fraction * idx.len() as f64).floor() as usize
        };
        idx.shuffle(&mut rng);
        for &i in &idx[..take] {
            in_test[i] = true;
        }
    }
    let mut split = Split::default();
    for (s, t) in samples.iter().zip(in_test) {
        if t {
            split.test.push(s.clone());
        } else {
            split.train.push(s.clone());
        }
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use std::f64::consts::PI;

    fn naive_dft(x: &[f64]) -> Vec<f64> {
        let n = x.len();
        (1..=SPECTRUM_BINS)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (t, v) in x.iter().enumerate() {
                    let a = -2.0 * PI * ((k * t) % n) as f64 / n as f64;
                    re += v * a.cos();
                    im += v * a.sin();
                }
                (re * re + im * im).sqrt()
            })
            .collect()
    }

    #[test]
    fn window_counts() {
        let s = vec![0.0; 1024];
        assert_eq!(window(&s, 1024, 77).unwrap().len(), 1);
        let s = vec![0.0; 5120];
        assert_eq!(window(&s, 1024, 1024).unwrap().len(), 5);
        assert!(window(&s[..10], 1024, 1).unwrap().is_empty());
        assert!(window(&s, 1024, 0).is_err());
    }

    #[test]
    fn cwru_stride_yields_two_hundred_windows() {
        for n in [1223, 5000, 11_999, 12_000] {
            let s = vec![0.0; n];
            let stride = cwru_stride(n).unwrap();
            assert_eq!(stride, (n - 1024) / 199);
            let count = window(&s, 1024, stride).unwrap().len();
            assert!(count >= 200, "n={n}: {count}");
        }
        assert!(cwru_stride(1222).is_err());
        let rec = RawRecording::new(vec![0.5; 121_000], 12e3, DomainId(0), ClassId(1)).unwrap();
        assert_eq!(case_windows(&rec, CaseStudy::Cwru).unwrap().len(), 200);
    }

    #[test]
    fn constant_window_has_no_retained_energy() {
        let m = fft_magnitude(&[3.25; 1024]).unwrap();
        assert_eq!(m.len(), 512);
        assert!(m.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn cosine_lands_in_its_bin() {
        let k = 37;
        let w: Vec<f64> = (0..1024).map(|t| (2.0 * PI * (k * t) as f64 / 1024.0).cos()).collect();
        let m = fft_magnitude(&w).unwrap();
        for (i, v) in m.iter().enumerate() {
            if i + 1 == k {
                assert!((v - 512.0).abs() < 1e-9);
            } else {
                assert!(*v < 1e-9);
            }
        }
    }

    #[test]
    fn matches_naive_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = SpectrumTransform::new();
        for _ in 0..5 {
            let w: Vec<f64> = (0..1024).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for (a, b) in t.magnitudes(&w).unwrap().iter().zip(naive_dft(&w)) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        assert!(t.magnitudes(&[0.0; 1000]).is_err());
    }

    #[test]
    fn paderborn_counts_and_labels() {
        let rec = RawRecording::new(vec![0.1; 1024 + 4096 * 9], 64e3, DomainId(2), ClassId(3)).unwrap();
        let ds = preprocess_case_study(&[rec], CaseStudy::Paderborn).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds[0].domain(), DomainId(2));
        assert_eq!(ds[0].len(), 10);
        assert!(ds[0].samples().iter().all(|s| s.class == ClassId(3)));
        assert!(matches!("other".parse::<CaseStudy>(), Err(Error::UnknownCase(_))));
    }

    fn pool(counts: &[(u16, u16, usize)]) -> Vec<SpectrumSample> {
        let mut out = Vec::new();
        for &(d, c, n) in counts {
            for i in 0..n {
                let mut s = SpectrumSample::new(vec![0.0; SPECTRUM_BINS], DomainId(d), ClassId(c)).unwrap();
                s.bins[0] = i as f64;
                out.push(s);
            }
        }
        out
    }

    #[test]
    fn split_floors_per_class_and_excludes_unseen() {
        let p = pool(&[(0, 0, 100), (0, 1, 7), (1, 0, 50), (1, 1, 20)]);
        let s = split_train_test(&p, 0.3, &[], 1).unwrap();
        assert_eq!(s.test.len(), 30 + 2 + 15 + 6);
        let s = split_train_test(&p, 0.3, &[(DomainId(1), ClassId(1))], 1).unwrap();
        assert!(!s.train.iter().any(|x| x.domain == DomainId(1) && x.class == ClassId(1)));
        assert_eq!(s.test.iter().filter(|x| x.domain == DomainId(1) && x.class == ClassId(1)).count(), 20);
        assert!(split_train_test(&p, 0.3, &[(DomainId(1), ClassId(4))], 1).is_err());
        assert_eq!(split_train_test(&p, 0.3, &[], 1).unwrap(), split_train_test(&p, 0.3, &[], 1).unwrap());
    }

    proptest! {
        #[test]
        fn split_partitions_the_pool(a in 1usize..40, b in 1usize..40, seed in any::<u64>(), frac in 0.0f64..1.0) {
            let p = pool(&[(0, 0, a), (0, 2, b)]);
            let s = split_train_test(&p, frac, &[], seed).unwrap();
            prop_assert_eq!(s.train.len() + s.test.len(), p.len());
            for x in &s.test {
                prop_assert!(!s.train.contains(x));
            }
        }

        #[test]
        fn pure_tone_concentrates_energy(k in 1usize..=511, amp in 0.1f64..10.0, phase in 0.0f64..6.28) {
            let w: Vec<f64> = (0..1024).map(|t| amp * (2.0 * PI * (k * t) as f64 / 1024.0 + phase).cos()).collect();
            let m = fft_magnitude(&w).unwrap();
            let total: f64 = m.iter().map(|v| v * v).sum();
            prop_assert!(m[k - 1] * m[k - 1] >= 0.999 * total);
        }
    }
}
