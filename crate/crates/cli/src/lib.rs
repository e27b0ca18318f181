//! The `fsgan` commands. Each one reads a resolved [`RunConfig`], writes its
//! outputs plus a frozen copy of the config into `out`, and never touches its
//! inputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use fsgan_core::config::{RunConfig, FROZEN_CONFIG};
use fsgan_core::data::{read_archive, write_archive, ClassId, DomainDataset, SpectrumSample};
use fsgan_core::experiments::{residual_win_fraction, run_experiment, ResidualRow, ResultsTable};
use fsgan_core::gan::{train, GanBundle, NoHooks, SignatureSource};
use fsgan_core::rig::make_all;
use fsgan_core::spectral::{load_recording, preprocess_case_study, read_manifest};
use fsgan_core::synthesis::{complete_label_space, scaling_factor};
use fsgan_core::{Error, Result};

pub const DATASET_FILE: &str = "dataset.fsa";
pub const BUNDLE_FILE: &str = "bundle.ckpt";
pub const SYNTHETIC_FILE: &str = "synthetic.fsa";

/// What a command leaves behind; `summary` is printed to stdout.
#[derive(Debug)]
pub struct Outcome {
    pub out: PathBuf,
    pub summary: String,
}

fn put(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn pretty<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("plain data serializes")
}

fn start(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let frozen = RunConfig {
        out: Some(out.to_path_buf()),
        ..cfg.clone()
    };
    frozen.write_frozen(out)?;
    Ok(())
}

fn histogram_text(samples: &[SpectrumSample]) -> String {
    let mut out = String::new();
    for (domain, classes) in fsgan_core::experiments::coverage(samples) {
        let parts: Vec<String> = classes.iter().map(|(c, n)| format!("{c}:{n}")).collect();
        let _ = writeln!(out, "domain {domain}: {}", parts.join(" "));
    }
    out
}

fn load_samples(cfg: &RunConfig) -> Result<Vec<SpectrumSample>> {
    match (&cfg.dataset, &cfg.rig) {
        (Some(path), _) => Ok(read_archive(path)?.0),
        (None, Some(rig)) => Ok(make_all(rig)?
            .into_iter()
            .flat_map(|d| d.dataset.into_samples())
            .collect()),
        (None, None) => Err(Error::Config("set `dataset` or give a [rig] block".into())),
    }
}

/// Generates every rig domain into `dataset.fsa` and keeps the injected
/// ground truth in `ground_truth.json`.
pub fn cmd_rig(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let rig = RunConfig::block(&cfg.rig, "rig")?;
    start(cfg, out)?;
    let domains = make_all(rig)?;
    let truth: Vec<_> = domains
        .iter()
        .map(|d| {
            json!({
                "domain": d.dataset.domain(),
                "base": d.base,
                "signatures": d.signatures,
            })
        })
        .collect();
    put(out, "ground_truth.json", &pretty(&truth))?;
    let samples: Vec<SpectrumSample> = domains.into_iter().flat_map(|d| d.dataset.into_samples()).collect();
    write_archive(&out.join(DATASET_FILE), &samples, json!({ "rig": rig }))?;
    Ok(Outcome {
        out: out.to_path_buf(),
        summary: histogram_text(&samples),
    })
}

/// Windows, transforms and archives the recordings listed in the manifest.
pub fn cmd_ingest(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let ingest = RunConfig::block(&cfg.ingest, "ingest")?;
    start(cfg, out)?;
    let recordings = read_manifest(&ingest.manifest)?
        .iter()
        .map(load_recording)
        .collect::<Result<Vec<_>>>()?;
    if recordings.is_empty() {
        return Err(Error::MissingData(format!("manifest {} lists no recordings", ingest.manifest.display())));
    }
    let samples: Vec<SpectrumSample> = preprocess_case_study(&recordings, ingest.case)?
        .into_iter()
        .flat_map(DomainDataset::into_samples)
        .collect();
    write_archive(&out.join(DATASET_FILE), &samples, json!({ "case": ingest.case }))?;
    Ok(Outcome {
        out: out.to_path_buf(),
        summary: histogram_text(&samples),
    })
}

/// Trains one bundle and writes `bundle.ckpt` with its per-epoch log.
pub fn cmd_train_gan(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let job = RunConfig::block(&cfg.train_gan, "train_gan")?;
    let path = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| Error::Config("train-gan needs `dataset`".into()))?;
    start(cfg, out)?;
    let (samples, _) = read_archive(path)?;
    let domain: Vec<SpectrumSample> = samples.into_iter().filter(|s| s.domain == job.domain).collect();
    let domain = DomainDataset::new(job.domain, domain)?;
    let mut gan = job.gan.clone();
    if gan.dump_dir.is_none() {
        gan.dump_dir = Some(out.join("dump"));
    }
    let outcome = train(&domain, &job.fault_type, &job.classes, &gan, &mut NoHooks)?;
    outcome.bundle.save(&out.join(BUNDLE_FILE))?;
    outcome.log.write_csv(&out.join("training_log.csv"))?;
    Ok(Outcome {
        out: out.to_path_buf(),
        summary: format!(
            "bundle {} on domain {}: {} epochs, stopped early: {}\n",
            job.fault_type, job.domain, outcome.bundle.epochs, outcome.stopped_early
        ),
    })
}

/// Adds scaled generated signatures to target healthy spectra.
pub fn cmd_synthesize(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let job = RunConfig::block(&cfg.synthesize, "synthesize")?;
    start(cfg, out)?;
    let bundle = GanBundle::load(&job.checkpoint)?;
    if let Some(c) = job.classes.iter().find(|c| !bundle.covered_classes().contains(c)) {
        return Err(Error::ClassNotCovered {
            class: c.0,
            covered: bundle.classes.iter().map(|c| c.0).collect(),
        });
    }
    let (samples, _) = read_archive(&job.target)?;
    let healthy: Vec<&SpectrumSample> = samples
        .iter()
        .filter(|s| s.domain == job.domain && s.class.is_healthy())
        .collect();
    let source_mean = SpectrumSample::new(bundle.source_healthy_mean.clone(), bundle.source_domain, ClassId::HEALTHY)?;
    let f = scaling_factor(&[&source_mean], &healthy, job.scaling)?;
    let counts: BTreeMap<ClassId, usize> = job.classes.iter().map(|c| (*c, job.count)).collect();
    let sources: [&dyn SignatureSource; 1] = [&bundle];
    let done = complete_label_space(&sources, &healthy, &job.classes, &counts, &f, job.seed)?;
    let synthetic = done.dataset.into_samples();
    write_archive(
        &out.join(SYNTHETIC_FILE),
        &synthetic,
        json!({ "scaling": f, "carriers": done.carriers }),
    )?;
    Ok(Outcome {
        out: out.to_path_buf(),
        summary: histogram_text(&synthetic),
    })
}

/// Runs the configured protocol over every seed and writes the result tables.
pub fn cmd_experiment(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let spec = RunConfig::block(&cfg.experiment, "experiment")?;
    start(cfg, out)?;
    let samples = load_samples(cfg)?;
    let report = run_experiment(spec, &samples)?;
    report.write(out)?;
    let win = residual_win_fraction(&report.residuals());
    let scaling: Vec<_> = report
        .seeds
        .iter()
        .map(|s| json!({ "seed": s.seed, "kernel": s.kernel, "scaling": s.scaling }))
        .collect();
    put(
        out,
        "summary.json",
        &pretty(&json!({
            "name": spec.name,
            "scenario": spec.scenario,
            "residual_win_fraction": win,
            "seeds": scaling,
        })),
    )?;
    Ok(Outcome {
        out: out.to_path_buf(),
        summary: format!("{}residual win fraction: {win:.3}\n", report.table.to_text()),
    })
}

#[derive(Debug, Serialize)]
struct ResidualSummary {
    domain: u16,
    class: u16,
    bins: usize,
    mean_abs_synthetic_residual: f64,
    mean_abs_source_residual: f64,
    win_fraction: f64,
}

fn read_residuals(path: &Path) -> Result<Vec<ResidualRow>> {
    if !path.exists() {
        return Err(Error::MissingData(format!("{} does not exist", path.display())));
    }
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::format(path, e))?;
    rdr.deserialize()
        .collect::<std::result::Result<Vec<ResidualRow>, _>>()
        .map_err(|e| Error::format(path, e))
}

fn summarize_residuals(rows: &[ResidualRow]) -> Vec<ResidualSummary> {
    let mut groups: BTreeMap<(u16, u16), Vec<&ResidualRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.domain.0, r.class.0)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((domain, class), g)| {
            let n = g.len() as f64;
            let owned: Vec<ResidualRow> = g.iter().map(|r| (*r).clone()).collect();
            ResidualSummary {
                domain,
                class,
                bins: g.len(),
                mean_abs_synthetic_residual: g.iter().map(|r| (r.synthetic - r.real_target).abs()).sum::<f64>() / n,
                mean_abs_source_residual: g.iter().map(|r| (r.real_source - r.real_target).abs()).sum::<f64>() / n,
                win_fraction: residual_win_fraction(&owned),
            }
        })
        .collect()
}

/// Re-renders a finished experiment directory as plain-text tables.
pub fn cmd_report(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let run_dir = &RunConfig::block(&cfg.report, "report")?.run_dir;
    start(cfg, out)?;
    let results = run_dir.join("results.csv");
    if !results.exists() {
        return Err(Error::MissingData(format!("{} does not exist", results.display())));
    }
    let text = std::fs::read_to_string(&results).map_err(|e| Error::io(&results, e))?;
    let table = ResultsTable::from_csv(&text).map_err(|e| Error::format(&results, e))?;
    let residuals = read_residuals(&run_dir.join("residuals.csv"))?;
    let summary = summarize_residuals(&residuals);
    let mut w = csv::Writer::from_writer(Vec::new());
    for s in &summary {
        w.serialize(s).map_err(|e| Error::Input(format!("residual summary: {e}")))?;
    }
    let csv_text = String::from_utf8(w.into_inner().map_err(|e| Error::Input(e.to_string()))?)
        .expect("csv output is utf-8");
    put(out, "residual_summary.csv", &csv_text)?;
    let mut report = table.to_text();
    let _ = writeln!(report, "\nresidual win fraction: {:.3}", residual_win_fraction(&residuals));
    for s in &summary {
        let _ = writeln!(
            report,
            "domain {} class {}: |syn - tgt| {:.4}  |src - tgt| {:.4}  win {:.3}",
            s.domain, s.class, s.mean_abs_synthetic_residual, s.mean_abs_source_residual, s.win_fraction
        );
    }
    put(out, "report.txt", &report)?;
    Ok(Outcome {
        out: out.to_path_buf(),
        summary: report,
    })
}

/// Name of the frozen config inside an output directory.
pub fn frozen_config(out: &Path) -> PathBuf {
    out.join(FROZEN_CONFIG)
}

/// `error: CLASS: message` on a single line.
pub fn error_line(e: &Error) -> String {
    format!(
        "error: {}: {}",
        e.class(),
        e.to_string().split_whitespace().collect::<Vec<_>>().join(" ")
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use fsgan_core::data::DomainId;

    #[test]
    fn error_line_is_single_line_and_starts_with_the_class() {
        let e = Error::ClassNotCovered {
            class: 4,
            covered: vec![1, 2],
        };
        assert_eq!(error_line(&e), "error: CLASS_NOT_COVERED: class 4 is not covered by any bundle (covered: [1, 2])");
        let e = Error::Config("a\nb".into());
        assert_eq!(error_line(&e), "error: CONFIG_INVALID: invalid config: a b");
    }

    #[test]
    fn residual_summary_groups_by_domain_and_class() {
        let row = |class: u16, bin: usize, syn: f64| ResidualRow {
            seed: 0,
            domain: DomainId(1),
            class: ClassId(class),
            bin,
            synthetic: syn,
            real_target: 1.0,
            real_source: 2.0,
        };
        let rows = vec![row(1, 0, 1.5), row(1, 1, 3.5), row(2, 0, 1.0)];
        let s = summarize_residuals(&rows);
        assert_eq!(s.len(), 2);
        assert_eq!((s[0].class, s[0].bins), (1, 2));
        assert!((s[0].mean_abs_synthetic_residual - 1.5).abs() < 1e-12);
        assert!((s[0].win_fraction - 0.5).abs() < 1e-12);
        assert!((s[1].win_fraction - 1.0).abs() < 1e-12);
    }
}
