//! Partial and OpenSet&Partial protocols with their real-data-only baselines.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{train_classifier, ClassifierTraining, TrainedClassifier};
use crate::data::{mean_spectrum, ClassId, DomainDataset, DomainId, SpectrumSample, SPECTRUM_BINS};
use crate::error::{Error, Result};
use crate::gan::{train, GanBundle, GanConfig, NoHooks, SignatureSource, TrainingLog};
use crate::nn::build_eval_classifier;
use crate::spectral::split_train_test;
use crate::synthesis::{complete_label_space, scaling_factor, ScalingFactor, ScalingMode};

/// Unweighted mean of per-class recall over `classes`. Classes with no true
/// sample are left out with a warning.
pub fn balanced_accuracy(y_true: &[ClassId], y_pred: &[ClassId], classes: &[ClassId]) -> Result<f64> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Input(format!(
            "{} labels but {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    if let Some(c) = y_true.iter().find(|c| !classes.contains(c)) {
        return Err(Error::Input(format!("label {c} outside the label space")));
    }
    let mut recalls = Vec::new();
    for &c in classes {
        let total = y_true.iter().filter(|t| **t == c).count();
        if total == 0 {
            log::warn!("class {c} has no test samples; left out of balanced accuracy");
            continue;
        }
        let hits = y_true.iter().zip(y_pred).filter(|(t, p)| **t == c && **p == c).count();
        recalls.push(hits as f64 / total as f64);
    }
    if recalls.is_empty() {
        return Err(Error::MissingData("no test samples".into()));
    }
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Partial,
    OpenSetPartial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub scenario: Scenario,
    pub source: DomainId,
    pub target: DomainId,
    /// Severity classes per fault type.
    pub fault_types: BTreeMap<String, Vec<ClassId>>,
    /// OpenSet&Partial only: fault types observed in the source domain.
    pub source_private: Vec<String>,
    /// OpenSet&Partial only: fault types observed in the target domain.
    pub target_private: Vec<String>,
    /// Eval-classifier kernel sizes; more than one triggers selection on
    /// synthetic validation data.
    pub kernels: Vec<usize>,
    pub seeds: Vec<u64>,
    pub test_fraction: f64,
    pub scaling: ScalingMode,
    pub gan: GanConfig,
    pub eval: ClassifierTraining,
    /// Bundles trained concurrently.
    pub threads: usize,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            name: "experiment".into(),
            scenario: Scenario::Partial,
            source: DomainId(0),
            target: DomainId(1),
            fault_types: BTreeMap::new(),
            source_private: Vec::new(),
            target_private: Vec::new(),
            kernels: vec![3],
            seeds: vec![0, 1, 2],
            test_fraction: 0.3,
            scaling: ScalingMode::Scalar,
            gan: GanConfig::default(),
            eval: ClassifierTraining::default(),
            threads: 1,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("experiment {}: {m}", self.name)));
        self.gan.validate()?;
        if self.source == self.target {
            return bad("source and target domains coincide".into());
        }
        if self.fault_types.is_empty() {
            return bad("no fault types".into());
        }
        let mut seen = BTreeSet::new();
        for (name, classes) in &self.fault_types {
            if classes.is_empty() || classes.iter().any(|c| c.is_healthy() || !seen.insert(*c)) {
                return bad(format!("fault type {name} needs its own non-healthy classes"));
            }
        }
        if self.kernels.is_empty() || self.kernels.contains(&0) {
            return bad("kernels must be a non-empty list of sizes >= 1".into());
        }
        if self.seeds.is_empty() {
            return bad("no seeds".into());
        }
        if self.scenario == Scenario::OpenSetPartial {
            if self.source_private.is_empty() || self.target_private.is_empty() {
                return bad("both domains need private fault types".into());
            }
            for t in self.source_private.iter().chain(&self.target_private) {
                if !self.fault_types.contains_key(t) {
                    return bad(format!("unknown fault type {t}"));
                }
            }
            if let Some(t) = self.source_private.iter().find(|t| self.target_private.contains(t)) {
                return bad(format!("fault type {t} is private to both domains"));
            }
        }
        Ok(())
    }

    fn classes_of(&self, types: &[String]) -> Vec<ClassId> {
        let mut out: Vec<ClassId> = types.iter().flat_map(|t| self.fault_types[t].iter().copied()).collect();
        out.sort();
        out
    }

    fn shift(&self) -> String {
        format!("{}->{}", self.source, self.target)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Baseline,
    Proposed,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Proposed => "proposed",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TestSet {
    S,
    T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedScore {
    pub seed: u64,
    pub test_set: TestSet,
    pub method: Method,
    pub balanced_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub shift: String,
    pub test_set: TestSet,
    pub method: Method,
    pub mean: f64,
    pub std: f64,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
}

impl ResultsTable {
    /// Mean and sample standard deviation over seeds per (test set, method).
    pub fn from_scores(shift: &str, scores: &[SeedScore]) -> Self {
        let mut groups: BTreeMap<(TestSet, Method), Vec<&SeedScore>> = BTreeMap::new();
        for s in scores {
            groups.entry((s.test_set, s.method)).or_default().push(s);
        }
        let rows = groups
            .into_iter()
            .map(|((test_set, method), g)| {
                let n = g.len() as f64;
                let mean = g.iter().map(|s| s.balanced_accuracy).sum::<f64>() / n;
                let std = if g.len() > 1 {
                    (g.iter().map(|s| (s.balanced_accuracy - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
                } else {
                    0.0
                };
                ResultRow {
                    shift: shift.to_string(),
                    test_set,
                    method,
                    mean,
                    std,
                    seeds: g.iter().map(|s| s.seed).collect(),
                }
            })
            .collect();
        ResultsTable { rows }
    }

    pub fn get(&self, test_set: TestSet, method: Method) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.test_set == test_set && r.method == method)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("shift,test_set,method,balanced_accuracy_mean,balanced_accuracy_std,seeds\n");
        for r in &self.rows {
            let seeds: Vec<String> = r.seeds.iter().map(|s| s.to_string()).collect();
            let _ = writeln!(
                out,
                "{},{:?},{},{},{},{}",
                r.shift,
                r.test_set,
                r.method.as_str(),
                r.mean,
                r.std,
                seeds.join(";")
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Input(format!("results csv: {e}")))?;
            let field = |i: usize| rec.get(i).unwrap_or("");
            let num = |i: usize| -> Result<f64> {
                field(i)
                    .parse()
                    .map_err(|_| Error::Input(format!("results csv: bad number `{}`", field(i))))
            };
            rows.push(ResultRow {
                shift: field(0).to_string(),
                test_set: match field(1) {
                    "S" => TestSet::S,
                    "T" => TestSet::T,
                    other => return Err(Error::Input(format!("results csv: test set `{other}`"))),
                },
                method: match field(2) {
                    "baseline" => Method::Baseline,
                    "proposed" => Method::Proposed,
                    other => return Err(Error::Input(format!("results csv: method `{other}`"))),
                },
                mean: num(3)?,
                std: num(4)?,
                seeds: field(5)
                    .split(';')
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse().map_err(|_| Error::Input(format!("results csv: seed `{s}`"))))
                    .collect::<Result<_>>()?,
            });
        }
        Ok(ResultsTable { rows })
    }

    /// Aligned plain-text table, accuracies in percent.
    pub fn to_text(&self) -> String {
        let header = ["shift", "test", "method", "balanced accuracy (%)"];
        let cells: Vec<[String; 4]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.shift.clone(),
                    format!("{:?}", r.test_set),
                    r.method.as_str().to_string(),
                    format!("{:.2} ± {:.2}", 100.0 * r.mean, 100.0 * r.std),
                ]
            })
            .collect();
        let mut width = header.map(|h| h.chars().count());
        for row in &cells {
            for (w, c) in width.iter_mut().zip(row) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |row: &[String]| -> String {
            let parts: Vec<String> = row
                .iter()
                .zip(&width)
                .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
                .collect();
            parts.join("  ").trim_end().to_string() + "\n"
        };
        let mut out = line(&header.map(String::from));
        out += &line(&width.map(|w| "-".repeat(w)));
        for row in &cells {
            out += &line(row);
        }
        out
    }
}

/// Per-bin class means for the residual study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualRow {
    pub seed: u64,
    pub domain: DomainId,
    pub class: ClassId,
    pub bin: usize,
    pub synthetic: f64,
    pub real_target: f64,
    pub real_source: f64,
}

pub fn residual_csv(rows: &[ResidualRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Input(format!("residual csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Input(format!("residual csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Share of bins where the mean `|synthetic - real_target|` is below the mean
/// `|real_source - real_target|`, averaging over every (seed, domain, class).
pub fn residual_win_fraction(rows: &[ResidualRow]) -> f64 {
    let mut syn = vec![(0.0, 0usize); SPECTRUM_BINS];
    let mut src = vec![0.0; SPECTRUM_BINS];
    for r in rows {
        syn[r.bin].0 += (r.synthetic - r.real_target).abs();
        syn[r.bin].1 += 1;
        src[r.bin] += (r.real_source - r.real_target).abs();
    }
    let used: Vec<usize> = (0..SPECTRUM_BINS).filter(|&b| syn[b].1 > 0).collect();
    if used.is_empty() {
        return 0.0;
    }
    used.iter().filter(|&&b| syn[b].0 < src[b]).count() as f64 / used.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelScore {
    pub seed: u64,
    pub kernel: usize,
    pub accuracy: f64,
}

pub struct ModelSelection {
    pub kernel: usize,
    pub classifier: TrainedClassifier,
    pub report: Vec<KernelScore>,
}

/// Index of the largest score; ties go to the first.
pub fn argmax(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        if best.map_or(true, |b| *s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

pub fn train_eval_classifier(
    train_set: &[&SpectrumSample],
    classes: &[ClassId],
    kernel: usize,
    cfg: &ClassifierTraining,
    seed: u64,
) -> Result<TrainedClassifier> {
    let spec = build_eval_classifier(classes.len(), kernel, SPECTRUM_BINS)?;
    train_classifier(spec, classes, train_set, cfg, seed)
}

/// Trains one eval classifier per candidate kernel and keeps the one with the
/// best accuracy on `validation`. A single candidate is returned without
/// evaluation.
pub fn select_model_on_synthetic(
    candidates: &[usize],
    train_set: &[&SpectrumSample],
    validation: &[&SpectrumSample],
    classes: &[ClassId],
    cfg: &ClassifierTraining,
    seed: u64,
) -> Result<ModelSelection> {
    if candidates.is_empty() {
        return Err(Error::Config("no candidate kernels".into()));
    }
    if candidates.len() == 1 {
        return Ok(ModelSelection {
            kernel: candidates[0],
            classifier: train_eval_classifier(train_set, classes, candidates[0], cfg, seed)?,
            report: Vec::new(),
        });
    }
    let mut trained = Vec::new();
    let mut report = Vec::new();
    for &k in candidates {
        let c = train_eval_classifier(train_set, classes, k, cfg, seed)?;
        let accuracy = c.accuracy(validation)?;
        report.push(KernelScore {
            seed,
            kernel: k,
            accuracy,
        });
        trained.push(c);
    }
    let scores: Vec<f64> = report.iter().map(|r| r.accuracy).collect();
    let best = argmax(&scores).expect("non-empty");
    Ok(ModelSelection {
        kernel: candidates[best],
        classifier: trained.swap_remove(best),
        report,
    })
}

/// Errors if `train` holds a real sample of any unseen (domain, class).
pub fn check_no_leakage(train: &[&SpectrumSample], unseen: &[(DomainId, ClassId)]) -> Result<()> {
    match train.iter().find(|s| !s.synthetic && unseen.contains(&(s.domain, s.class))) {
        Some(s) => Err(Error::Spec(format!(
            "real sample of unseen class {} in domain {} reached the training set",
            s.class, s.domain
        ))),
        None => Ok(()),
    }
}

/// Everything produced for one seed.
pub struct SeedRecord {
    pub seed: u64,
    pub scores: Vec<SeedScore>,
    pub kernel: usize,
    pub kernel_report: Vec<KernelScore>,
    pub bundles: Vec<GanBundle>,
    pub logs: Vec<(String, TrainingLog)>,
    pub scaling: Vec<(DomainId, ScalingFactor)>,
    pub residuals: Vec<ResidualRow>,
    pub synthetic: Vec<SpectrumSample>,
}

pub struct ExperimentReport {
    pub spec: ExperimentSpec,
    pub table: ResultsTable,
    pub seeds: Vec<SeedRecord>,
}

impl ExperimentReport {
    pub fn residuals(&self) -> Vec<ResidualRow> {
        self.seeds.iter().flat_map(|s| s.residuals.iter().cloned()).collect()
    }

    pub fn scores(&self) -> Vec<SeedScore> {
        self.seeds.iter().flat_map(|s| s.scores.iter().cloned()).collect()
    }

    pub fn kernel_report(&self) -> Vec<KernelScore> {
        self.seeds.iter().flat_map(|s| s.kernel_report.iter().cloned()).collect()
    }

    /// Writes the table, per-seed scores, residuals, training logs and bundles.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, text: &str| -> Result<()> {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
        };
        put("results.csv", &self.table.to_csv())?;
        put("results.txt", &self.table.to_text())?;
        put("scores.json", &to_json(&self.scores()))?;
        put("kernel_selection.json", &to_json(&self.kernel_report()))?;
        put("residuals.csv", &residual_csv(&self.residuals())?)?;
        for rec in &self.seeds {
            let sub = dir.join(format!("seed_{}", rec.seed));
            std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            for (name, log) in &rec.logs {
                log.write_csv(&sub.join(format!("gan_{name}.csv")))?;
            }
            for b in &rec.bundles {
                b.save(&sub.join(format!("bundle_{}_d{}.ckpt", b.fault_type, b.source_domain)))?;
            }
        }
        Ok(())
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("plain data serializes")
}

/// Independent sub-seed for `tag` under `seed`.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng.next_u64()
}

struct BundleJob<'a> {
    domain: &'a DomainDataset,
    fault_type: String,
    classes: Vec<ClassId>,
    seed: u64,
}

fn train_bundles(jobs: Vec<BundleJob>, gan: &GanConfig, threads: usize) -> Result<Vec<(GanBundle, TrainingLog)>> {
    let run = |job: &BundleJob| -> Result<(GanBundle, TrainingLog)> {
        let cfg = GanConfig {
            seed: job.seed,
            ..gan.clone()
        };
        let out = train(job.domain, &job.fault_type, &job.classes, &cfg, &mut NoHooks)?;
        log::info!(
            "bundle {} on domain {}: {} epochs, stopped early: {}",
            job.fault_type,
            job.domain.domain(),
            out.bundle.epochs,
            out.stopped_early
        );
        Ok((out.bundle, out.log))
    };
    let mut results = Vec::with_capacity(jobs.len());
    for chunk in jobs.chunks(threads.max(1)) {
        if chunk.len() == 1 {
            results.push(run(&chunk[0])?);
            continue;
        }
        let outs: Vec<Result<(GanBundle, TrainingLog)>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|job| s.spawn(|| run(job))).collect();
            handles.into_iter().map(|h| h.join().expect("bundle thread panicked")).collect()
        });
        for o in outs {
            results.push(o?);
        }
    }
    Ok(results)
}

fn domain_samples(samples: &[SpectrumSample], domain: DomainId) -> Vec<SpectrumSample> {
    samples.iter().filter(|s| s.domain == domain).cloned().collect()
}

fn refs(samples: &[SpectrumSample]) -> Vec<&SpectrumSample> {
    samples.iter().collect()
}

/// Synthetic faults for `receiver`, built from bundles trained on `donor`.
struct Transfer<'a> {
    donor: &'a DomainDataset,
    receiver: &'a DomainDataset,
    bundles: Vec<&'a GanBundle>,
    classes: Vec<ClassId>,
}

fn run_transfer(t: &Transfer, mode: ScalingMode, seed: u64) -> Result<(Vec<SpectrumSample>, ScalingFactor)> {
    let donor_healthy = t.donor.healthy();
    let receiver_healthy = t.receiver.healthy();
    let f = scaling_factor(&donor_healthy, &receiver_healthy, mode)?;
    let sources: Vec<&dyn SignatureSource> = t.bundles.iter().map(|b| *b as &dyn SignatureSource).collect();
    let done = complete_label_space(&sources, &receiver_healthy, &t.classes, &t.donor.histogram(), &f, seed)?;
    Ok((done.dataset.into_samples(), f))
}

fn residual_rows(
    seed: u64,
    synthetic: &[SpectrumSample],
    real: &[SpectrumSample],
    receiver: DomainId,
    donor: DomainId,
    classes: &[ClassId],
) -> Vec<ResidualRow> {
    let mut rows = Vec::new();
    for &c in classes {
        let syn = mean_spectrum(synthetic.iter().filter(|s| s.class == c));
        let tgt = mean_spectrum(real.iter().filter(|s| s.domain == receiver && s.class == c));
        let src = mean_spectrum(real.iter().filter(|s| s.domain == donor && s.class == c));
        if let (Some(syn), Some(tgt), Some(src)) = (syn, tgt, src) {
            for bin in 0..SPECTRUM_BINS {
                rows.push(ResidualRow {
                    seed,
                    domain: receiver,
                    class: c,
                    bin,
                    synthetic: syn[bin],
                    real_target: tgt[bin],
                    real_source: src[bin],
                });
            }
        }
    }
    rows
}

fn score(
    classifier: &TrainedClassifier,
    test: &[&SpectrumSample],
    classes: &[ClassId],
    seed: u64,
    test_set: TestSet,
    method: Method,
) -> Result<SeedScore> {
    let truth: Vec<ClassId> = test.iter().map(|s| s.class).collect();
    let pred = classifier.predict(test)?;
    Ok(SeedScore {
        seed,
        test_set,
        method,
        balanced_accuracy: balanced_accuracy(&truth, &pred, classes)?,
    })
}

/// Composed training sets and the held-out synthetic validation set.
struct Composition<'a> {
    real: Vec<&'a SpectrumSample>,
    synthetic: Vec<&'a SpectrumSample>,
    validation: Vec<SpectrumSample>,
}

fn classify(
    spec: &ExperimentSpec,
    comp: &Composition,
    classes: &[ClassId],
    seed: u64,
) -> Result<(ModelSelection, TrainedClassifier)> {
    let proposed: Vec<&SpectrumSample> = comp.real.iter().chain(&comp.synthetic).copied().collect();
    let validation = refs(&comp.validation);
    let chosen = select_model_on_synthetic(&spec.kernels, &proposed, &validation, classes, &spec.eval, derive_seed(seed, 10))?;
    let baseline = train_eval_classifier(&comp.real, classes, chosen.kernel, &spec.eval, derive_seed(seed, 11))?;
    Ok((chosen, baseline))
}

/// Partial DA: only the healthy class is shared. Bundles are trained on the
/// source domain and complete the target label space.
pub fn run_partial(spec: &ExperimentSpec, samples: &[SpectrumSample]) -> Result<ExperimentReport> {
    spec.validate()?;
    if spec.scenario != Scenario::Partial {
        return Err(Error::Config(format!("experiment {} is not a partial scenario", spec.name)));
    }
    let types: Vec<String> = spec.fault_types.keys().cloned().collect();
    let fault_classes = spec.classes_of(&types);
    let mut classes = vec![ClassId::HEALTHY];
    classes.extend(&fault_classes);
    let mut pool = domain_samples(samples, spec.source);
    pool.extend(domain_samples(samples, spec.target));
    pool.retain(|s| classes.contains(&s.class));
    let unseen: Vec<(DomainId, ClassId)> = fault_classes.iter().map(|c| (spec.target, *c)).collect();
    let unseen: Vec<_> = unseen
        .into_iter()
        .filter(|k| pool.iter().any(|s| (s.domain, s.class) == *k))
        .collect();

    let mut records = Vec::new();
    for &seed in &spec.seeds {
        let split = split_train_test(&pool, spec.test_fraction, &unseen, derive_seed(seed, 1))?;
        let source = DomainDataset::new(spec.source, domain_samples(&split.train, spec.source))?;
        let target = DomainDataset::new(spec.target, domain_samples(&split.train, spec.target))?;
        if let Some(s) = target.samples().iter().find(|s| !s.class.is_healthy()) {
            return Err(Error::Spec(format!("target training data holds fault class {}", s.class)));
        }
        let jobs = types
            .iter()
            .enumerate()
            .map(|(i, t)| BundleJob {
                domain: &source,
                fault_type: t.clone(),
                classes: spec.fault_types[t].clone(),
                seed: derive_seed(seed, 100 + i as u64),
            })
            .collect();
        let trained = train_bundles(jobs, &spec.gan, spec.threads)?;
        let transfer = Transfer {
            donor: &source,
            receiver: &target,
            bundles: trained.iter().map(|(b, _)| b).collect(),
            classes: fault_classes.clone(),
        };
        let (synthetic, f) = run_transfer(&transfer, spec.scaling, derive_seed(seed, 2))?;
        let (validation, _) = if spec.kernels.len() > 1 {
            run_transfer(&transfer, spec.scaling, derive_seed(seed, 3))?
        } else {
            (Vec::new(), f.clone())
        };
        let comp = Composition {
            real: source.samples().iter().chain(target.samples()).collect(),
            synthetic: refs(&synthetic),
            validation,
        };
        check_no_leakage(&comp.real, &unseen)?;
        check_no_leakage(&comp.synthetic, &unseen)?;
        let (chosen, baseline) = classify(spec, &comp, &classes, seed)?;
        let test = domain_samples(&split.test, spec.target);
        let test = refs(&test);
        let scores = vec![
            score(&baseline, &test, &classes, seed, TestSet::T, Method::Baseline)?,
            score(&chosen.classifier, &test, &classes, seed, TestSet::T, Method::Proposed)?,
        ];
        log::info!(
            "{} seed {seed}: baseline {:.4} proposed {:.4}",
            spec.name,
            scores[0].balanced_accuracy,
            scores[1].balanced_accuracy
        );
        let residuals = residual_rows(seed, &synthetic, &pool, spec.target, spec.source, &fault_classes);
        let (bundles, logs): (Vec<_>, Vec<_>) = trained
            .into_iter()
            .map(|(b, l)| {
                let name = b.fault_type.clone();
                (b, (name, l))
            })
            .unzip();
        records.push(SeedRecord {
            seed,
            scores,
            kernel: chosen.kernel,
            kernel_report: chosen.report,
            bundles,
            logs,
            scaling: vec![(spec.target, f)],
            residuals,
            synthetic,
        });
    }
    Ok(report(spec, records))
}

/// OpenSet&Partial DA: each domain owns private fault types; each domain's
/// missing classes come from the other domain's bundles.
pub fn run_openset_partial(spec: &ExperimentSpec, samples: &[SpectrumSample]) -> Result<ExperimentReport> {
    spec.validate()?;
    if spec.scenario != Scenario::OpenSetPartial {
        return Err(Error::Config(format!("experiment {} is not an open-set scenario", spec.name)));
    }
    let (s_id, t_id) = (spec.source, spec.target);
    let s_classes = spec.classes_of(&spec.source_private);
    let t_classes = spec.classes_of(&spec.target_private);
    let mut classes = vec![ClassId::HEALTHY];
    classes.extend(&s_classes);
    classes.extend(&t_classes);
    classes.sort();
    let mut pool = domain_samples(samples, s_id);
    pool.extend(domain_samples(samples, t_id));
    pool.retain(|s| classes.contains(&s.class));
    let unseen: Vec<(DomainId, ClassId)> = t_classes
        .iter()
        .map(|c| (s_id, *c))
        .chain(s_classes.iter().map(|c| (t_id, *c)))
        .filter(|k| pool.iter().any(|s| (s.domain, s.class) == *k))
        .collect();

    let mut records = Vec::new();
    for &seed in &spec.seeds {
        let split = split_train_test(&pool, spec.test_fraction, &unseen, derive_seed(seed, 1))?;
        let ds_s = DomainDataset::new(s_id, domain_samples(&split.train, s_id))?;
        let ds_t = DomainDataset::new(t_id, domain_samples(&split.train, t_id))?;
        let mut jobs = Vec::new();
        for (domain, types) in [(&ds_s, &spec.source_private), (&ds_t, &spec.target_private)] {
            for t in types {
                jobs.push(BundleJob {
                    domain,
                    fault_type: t.clone(),
                    classes: spec.fault_types[t].clone(),
                    seed: derive_seed(seed, 100 + jobs.len() as u64),
                });
            }
        }
        let trained = train_bundles(jobs, &spec.gan, spec.threads)?;
        let from = |d: DomainId| -> Vec<&GanBundle> {
            trained.iter().map(|(b, _)| b).filter(|b| b.source_domain == d).collect()
        };
        let to_s = Transfer {
            donor: &ds_t,
            receiver: &ds_s,
            bundles: from(t_id),
            classes: t_classes.clone(),
        };
        let to_t = Transfer {
            donor: &ds_s,
            receiver: &ds_t,
            bundles: from(s_id),
            classes: s_classes.clone(),
        };
        let (syn_s, f_s) = run_transfer(&to_s, spec.scaling, derive_seed(seed, 2))?;
        let (syn_t, f_t) = run_transfer(&to_t, spec.scaling, derive_seed(seed, 4))?;
        let mut synthetic = syn_s;
        synthetic.extend(syn_t);
        let validation = if spec.kernels.len() > 1 {
            let mut v = run_transfer(&to_s, spec.scaling, derive_seed(seed, 3))?.0;
            v.extend(run_transfer(&to_t, spec.scaling, derive_seed(seed, 5))?.0);
            v
        } else {
            Vec::new()
        };
        let comp = Composition {
            real: ds_s.samples().iter().chain(ds_t.samples()).collect(),
            synthetic: refs(&synthetic),
            validation,
        };
        check_no_leakage(&comp.real, &unseen)?;
        check_no_leakage(&comp.synthetic, &unseen)?;
        let (chosen, baseline) = classify(spec, &comp, &classes, seed)?;
        let mut scores = Vec::new();
        for (set, d) in [(TestSet::S, s_id), (TestSet::T, t_id)] {
            let test = domain_samples(&split.test, d);
            let test = refs(&test);
            scores.push(score(&baseline, &test, &classes, seed, set, Method::Baseline)?);
            scores.push(score(&chosen.classifier, &test, &classes, seed, set, Method::Proposed)?);
        }
        log::info!(
            "{} seed {seed}: S {:.4} -> {:.4}, T {:.4} -> {:.4}",
            spec.name,
            scores[0].balanced_accuracy,
            scores[1].balanced_accuracy,
            scores[2].balanced_accuracy,
            scores[3].balanced_accuracy
        );
        let mut residuals = residual_rows(seed, &synthetic, &pool, s_id, t_id, &t_classes);
        residuals.extend(residual_rows(seed, &synthetic, &pool, t_id, s_id, &s_classes));
        let (bundles, logs): (Vec<_>, Vec<_>) = trained
            .into_iter()
            .map(|(b, l)| {
                let name = format!("{}_d{}", b.fault_type, b.source_domain);
                (b, (name, l))
            })
            .unzip();
        records.push(SeedRecord {
            seed,
            scores,
            kernel: chosen.kernel,
            kernel_report: chosen.report,
            bundles,
            logs,
            scaling: vec![(s_id, f_s), (t_id, f_t)],
            residuals,
            synthetic,
        });
    }
    Ok(report(spec, records))
}

pub fn run_experiment(spec: &ExperimentSpec, samples: &[SpectrumSample]) -> Result<ExperimentReport> {
    match spec.scenario {
        Scenario::Partial => run_partial(spec, samples),
        Scenario::OpenSetPartial => run_openset_partial(spec, samples),
    }
}

fn report(spec: &ExperimentSpec, seeds: Vec<SeedRecord>) -> ExperimentReport {
    let scores: Vec<SeedScore> = seeds.iter().flat_map(|r| r.scores.iter().cloned()).collect();
    ExperimentReport {
        table: ResultsTable::from_scores(&spec.shift(), &scores),
        spec: spec.clone(),
        seeds,
    }
}

/// Class histogram per domain.
pub fn coverage(samples: &[SpectrumSample]) -> BTreeMap<DomainId, BTreeMap<ClassId, usize>> {
    let mut out: BTreeMap<DomainId, BTreeMap<ClassId, usize>> = BTreeMap::new();
    for s in samples {
        *out.entry(s.domain).or_default().entry(s.class).or_insert(0) += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(v: &[u16]) -> Vec<ClassId> {
        v.iter().map(|&c| ClassId(c)).collect()
    }

    #[test]
    fn balanced_accuracy_averages_per_class_recall() {
        // class 0: 2/2, class 1: 1/2
        let truth = ids(&[0, 0, 1, 1]);
        let pred = ids(&[0, 0, 1, 0]);
        let acc = balanced_accuracy(&truth, &pred, &ids(&[0, 1])).unwrap();
        assert!((acc - 0.75).abs() < 1e-12);
    }

    #[test]
    fn constant_predictor_scores_one_over_k() {
        let truth = ids(&[0, 0, 0, 0, 0, 0, 1, 2, 2, 3]);
        let pred = vec![ClassId(2); truth.len()];
        let acc = balanced_accuracy(&truth, &pred, &ids(&[0, 1, 2, 3])).unwrap();
        assert!((acc - 0.25).abs() < 1e-12);
    }

    #[test]
    fn balanced_accuracy_skips_absent_classes_and_checks_inputs() {
        let acc = balanced_accuracy(&ids(&[0, 1]), &ids(&[0, 0]), &ids(&[0, 1, 2])).unwrap();
        assert!((acc - 0.5).abs() < 1e-12);
        assert_eq!(
            balanced_accuracy(&ids(&[0]), &ids(&[0, 1]), &ids(&[0, 1])).unwrap_err().class(),
            "INVALID_INPUT"
        );
        assert_eq!(
            balanced_accuracy(&ids(&[5]), &ids(&[5]), &ids(&[0, 1])).unwrap_err().class(),
            "INVALID_INPUT"
        );
        assert_eq!(balanced_accuracy(&[], &[], &ids(&[0])).unwrap_err().class(), "MISSING_INPUT");
    }

    proptest! {
        #[test]
        fn balanced_accuracy_is_bounded_and_perfect_on_identity(
            labels in prop::collection::vec(0u16..4, 1..40),
            preds in prop::collection::vec(0u16..4, 40),
        ) {
            let classes = ids(&[0, 1, 2, 3]);
            let truth = ids(&labels);
            let pred = ids(&preds[..labels.len()]);
            let acc = balanced_accuracy(&truth, &pred, &classes).unwrap();
            prop_assert!((0.0..=1.0).contains(&acc));
            prop_assert_eq!(balanced_accuracy(&truth, &truth, &classes).unwrap(), 1.0);
        }

        #[test]
        fn argmax_ignores_order_preserving_transforms(
            scores in prop::collection::vec(-10.0f64..10.0, 1..12),
            scale in 0.1f64..5.0,
            shift in -3.0f64..3.0,
        ) {
            let moved: Vec<f64> = scores.iter().map(|s| scale * s + shift).collect();
            let best = argmax(&scores).unwrap();
            prop_assert!(scores.iter().all(|s| *s <= scores[best]));
            prop_assert_eq!(scores[argmax(&moved).unwrap()], scores[best]);
        }
    }

    #[test]
    fn argmax_breaks_ties_towards_the_first() {
        assert_eq!(argmax(&[0.2, 0.9, 0.9, 0.1]), Some(1));
        assert_eq!(argmax(&[]), None);
    }

    #[test]
    fn results_table_statistics_and_csv_round_trip() {
        let scores: Vec<SeedScore> = [0.5, 0.7, 0.9]
            .iter()
            .enumerate()
            .map(|(i, &a)| SeedScore {
                seed: i as u64,
                test_set: TestSet::T,
                method: Method::Proposed,
                balanced_accuracy: a,
            })
            .collect();
        let table = ResultsTable::from_scores("0->1", &scores);
        let row = table.get(TestSet::T, Method::Proposed).unwrap();
        assert!((row.mean - 0.7).abs() < 1e-12);
        assert!((row.std - 0.2).abs() < 1e-12);
        assert_eq!(row.seeds, vec![0, 1, 2]);
        assert_eq!(ResultsTable::from_csv(&table.to_csv()).unwrap(), table);
        assert!(table.to_text().contains("70.00 ± 20.00"));
    }

    fn sample(domain: u16, class: u16, synthetic: bool) -> SpectrumSample {
        let mut s = SpectrumSample::new(vec![0.0; SPECTRUM_BINS], DomainId(domain), ClassId(class)).unwrap();
        s.synthetic = synthetic;
        s
    }

    #[test]
    fn leakage_check_flags_only_real_unseen_samples() {
        let unseen = [(DomainId(1), ClassId(2))];
        let ok = [sample(1, 0, false), sample(0, 2, false), sample(1, 2, true)];
        assert!(check_no_leakage(&refs(&ok), &unseen).is_ok());
        let bad = [sample(1, 2, false)];
        assert_eq!(check_no_leakage(&refs(&bad), &unseen).unwrap_err().class(), "CONFIG_INVALID");
    }

    #[test]
    fn residual_win_fraction_counts_bins_closer_than_the_source() {
        let mut rows = Vec::new();
        for bin in 0..4 {
            rows.push(ResidualRow {
                seed: 0,
                domain: DomainId(1),
                class: ClassId(1),
                bin,
                synthetic: if bin < 3 { 1.0 } else { 5.0 },
                real_target: 1.1,
                real_source: 2.0,
            });
        }
        assert!((residual_win_fraction(&rows) - 0.75).abs() < 1e-12);
        let csv = residual_csv(&rows).unwrap();
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn spec_validation_catches_bad_layouts() {
        let mut spec = ExperimentSpec::default();
        assert!(spec.validate().is_err());
        spec.fault_types.insert("inner".into(), ids(&[1, 2]));
        spec.validate().unwrap();
        spec.fault_types.insert("outer".into(), ids(&[2]));
        assert!(spec.validate().is_err());
        spec.fault_types.insert("outer".into(), ids(&[3]));
        spec.scenario = Scenario::OpenSetPartial;
        assert!(spec.validate().is_err());
        spec.source_private = vec!["inner".into()];
        spec.target_private = vec!["outer".into()];
        spec.validate().unwrap();
        spec.target_private = vec!["inner".into()];
        assert!(spec.validate().is_err());
    }

    #[test]
    fn derived_seeds_differ_by_tag_and_repeat() {
        assert_eq!(derive_seed(3, 1), derive_seed(3, 1));
        assert_ne!(derive_seed(3, 1), derive_seed(3, 2));
        assert_ne!(derive_seed(3, 1), derive_seed(4, 1));
    }
}
