//! Run configuration: one TOML document with an optional block per command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{ClassId, DomainId};
use crate::error::{Error, Result};
use crate::experiments::ExperimentSpec;
use crate::gan::GanConfig;
use crate::rig::RigSpec;
use crate::spectral::CaseStudy;
use crate::synthesis::ScalingMode;

/// File name of the resolved configuration written next to every run's outputs.
pub const FROZEN_CONFIG: &str = "config.frozen.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Replaces the seeds of every block when set.
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    /// Log filter (`error` .. `trace`); `FSGAN_LOG` wins when both are set.
    pub log: Option<String>,
    /// Bundles trained concurrently by `experiment`.
    pub threads: Option<usize>,
    /// Spectrum archive read by `train-gan` and `experiment`. Without it,
    /// `experiment` regenerates the `[rig]` dataset in memory.
    pub dataset: Option<PathBuf>,
    pub rig: Option<RigSpec>,
    pub ingest: Option<IngestConfig>,
    pub train_gan: Option<TrainGanConfig>,
    pub synthesize: Option<SynthesizeConfig>,
    pub experiment: Option<ExperimentSpec>,
    pub report: Option<ReportConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestConfig {
    /// CSV with `file,domain_id,class_id,sample_rate` rows.
    pub manifest: PathBuf,
    pub case: CaseStudy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainGanConfig {
    pub domain: DomainId,
    pub fault_type: String,
    pub classes: Vec<ClassId>,
    #[serde(default)]
    pub gan: GanConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesizeConfig {
    pub checkpoint: PathBuf,
    /// Archive holding the target domain's healthy spectra.
    pub target: PathBuf,
    pub domain: DomainId,
    pub classes: Vec<ClassId>,
    /// Samples per class.
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default)]
    pub scaling: ScalingMode,
    #[serde(default)]
    pub seed: u64,
}

fn default_count() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    pub run_dir: PathBuf,
}

fn one_line(s: impl ToString) -> String {
    s.to_string().split_whitespace().collect::<Vec<_>>().join(" ")
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(one_line(e)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingData(format!("config {} does not exist", path.display())));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(one_line(e)))
    }

    /// Pushes the global seed and thread count down into the blocks. Applying
    /// it twice changes nothing.
    pub fn resolved(mut self) -> Self {
        if let Some(seed) = self.seed {
            if let Some(rig) = &mut self.rig {
                rig.seed = seed;
            }
            if let Some(t) = &mut self.train_gan {
                t.gan.seed = seed;
            }
            if let Some(s) = &mut self.synthesize {
                s.seed = seed;
            }
            if let Some(e) = &mut self.experiment {
                let n = e.seeds.len().max(1) as u64;
                e.seeds = (0..n).map(|i| seed.wrapping_add(i)).collect();
            }
        }
        if let (Some(threads), Some(e)) = (self.threads, &mut self.experiment) {
            e.threads = threads;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        if let Some(rig) = &self.rig {
            rig.validate()?;
        }
        if let Some(t) = &self.train_gan {
            t.gan.validate()?;
            if t.classes.is_empty() || t.classes.iter().any(|c| c.is_healthy()) {
                return Err(Error::Config("train_gan.classes must list fault classes".into()));
            }
        }
        if let Some(s) = &self.synthesize {
            if s.classes.is_empty() || s.count == 0 {
                return Err(Error::Config("synthesize needs classes and count >= 1".into()));
            }
        }
        if let Some(e) = &self.experiment {
            e.validate()?;
        }
        Ok(())
    }

    /// The block for `command`, or a config error naming it.
    pub fn block<'a, T>(slot: &'a Option<T>, command: &str) -> Result<&'a T> {
        slot.as_ref()
            .ok_or_else(|| Error::Config(format!("no [{command}] block in the config")))
    }

    /// Writes `config.frozen.toml` into `dir` and returns its path.
    pub fn write_frozen(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(FROZEN_CONFIG);
        std::fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::Scenario;
    use crate::rig::tests::small_rig;

    fn full() -> RunConfig {
        let mut experiment = ExperimentSpec {
            name: "demo".into(),
            scenario: Scenario::OpenSetPartial,
            source_private: vec!["inner".into()],
            target_private: vec!["outer".into()],
            ..Default::default()
        };
        experiment.fault_types.insert("inner".into(), vec![ClassId(1), ClassId(2)]);
        experiment.fault_types.insert("outer".into(), vec![ClassId(3)]);
        experiment.gan.lambda_c = 0.125;
        experiment.gan.generator_adam.lr = 3.3e-4;
        RunConfig {
            seed: Some(7),
            out: Some("runs/demo".into()),
            log: Some("info".into()),
            threads: Some(2),
            dataset: Some("runs/rig/dataset.fsa".into()),
            rig: Some(small_rig(0.05)),
            ingest: Some(IngestConfig {
                manifest: "data/manifest.csv".into(),
                case: CaseStudy::Paderborn,
            }),
            train_gan: Some(TrainGanConfig {
                domain: DomainId(0),
                fault_type: "inner".into(),
                classes: vec![ClassId(1), ClassId(2)],
                gan: GanConfig::default(),
            }),
            synthesize: Some(SynthesizeConfig {
                checkpoint: "b.ckpt".into(),
                target: "t.fsa".into(),
                domain: DomainId(1),
                classes: vec![ClassId(2)],
                count: 12,
                scaling: ScalingMode::PerBin,
                seed: 3,
            }),
            experiment: Some(experiment),
            report: Some(ReportConfig { run_dir: "runs/demo".into() }),
        }
    }

    #[test]
    fn toml_round_trip_is_lossless() {
        let cfg = full();
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml().unwrap(), text);
    }

    #[test]
    fn empty_document_is_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml("sed = 3\n").unwrap_err();
        assert_eq!(err.class(), "CONFIG_INVALID");
        assert!(!err.to_string().contains('\n'));
        let err = RunConfig::from_toml("[experiment.gan]\nlambda_cc = 1.0\n").unwrap_err();
        assert_eq!(err.class(), "CONFIG_INVALID");
    }

    #[test]
    fn resolution_pushes_seed_and_threads_down_and_is_idempotent() {
        let once = full().resolved();
        assert_eq!(once.rig.as_ref().unwrap().seed, 7);
        assert_eq!(once.train_gan.as_ref().unwrap().gan.seed, 7);
        assert_eq!(once.synthesize.as_ref().unwrap().seed, 7);
        assert_eq!(once.experiment.as_ref().unwrap().seeds, vec![7, 8, 9]);
        assert_eq!(once.experiment.as_ref().unwrap().threads, 2);
        assert_eq!(once.clone().resolved(), once);
    }

    #[test]
    fn missing_block_names_the_command() {
        let cfg = RunConfig::default();
        let err = RunConfig::block(&cfg.experiment, "experiment").unwrap_err();
        assert!(err.to_string().contains("[experiment]"));
    }

    #[test]
    fn frozen_copy_reloads_identically() {
        let dir = std::env::temp_dir().join(format!("fsgan-config-{}", std::process::id()));
        let cfg = full().resolved();
        let path = cfg.write_frozen(&dir).unwrap();
        assert_eq!(RunConfig::load(&path).unwrap(), cfg);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn validation_rejects_zero_threads() {
        let cfg = RunConfig {
            threads: Some(0),
            ..Default::default()
        };
        assert_eq!(cfg.validate().unwrap_err().class(), "CONFIG_INVALID");
    }
}
